#pragma once

// Exact real-basis SO(3) representation algebra: real spherical harmonics,
// Clebsch-Gordan / Wigner 3j coefficients, Wigner D matrices, path-weighted
// tensor products and the adjoint tensor expansion.
//
// Convention (used by every downstream module): real harmonics are defined
// from the complex ones with the Condon-Shortley phase via
//   Y_{l,m<0} = i/sqrt(2) (Y_l^{-|m|} - (-1)^m Y_l^{|m|})
//   Y_{l,0}   = Y_l^0
//   Y_{l,m>0} = 1/sqrt(2) (Y_l^{-|m|} + (-1)^m Y_l^{|m|})
// and m runs -l..+l inside every segment. Under a proper rotation R the
// value vector transforms as Y(R u) = D(R) Y(u) with the real orthogonal
// D(R) returned by wigner_d.

#include <boost/multiprecision/cpp_int.hpp>
#include <complex>
#include <map>
#include <mutex>
#include <vector>
#include <fstream>

#include "deqh/core.hpp"

namespace deqh::so3 {

using cplx = std::complex<double>;
using CMat = Eigen::MatrixXcd;

// ---------------------------------------------------------------------------
// Irrep specs and vectors

struct IrrepSegment {
  int l;
  int mul;
};

class IrrepSpec {
public:
  IrrepSpec() = default;
  IrrepSpec(std::initializer_list<IrrepSegment> segs) : segments_(segs) { canonicalize(); }
  explicit IrrepSpec(std::vector<IrrepSegment> segs) : segments_(std::move(segs)) { canonicalize(); }

  const std::vector<IrrepSegment>& segments() const { return segments_; }
  int num_segments() const { return static_cast<int>(segments_.size()); }

  int flat_dim() const {
    int d = 0;
    for (const auto& s : segments_) d += s.mul * (2 * s.l + 1);
    return d;
  }

  int segment_offset(int i) const {
    int off = 0;
    for (int k = 0; k < i; ++k) off += segments_[k].mul * (2 * segments_[k].l + 1);
    return off;
  }

  bool operator==(const IrrepSpec& o) const {
    if (segments_.size() != o.segments_.size()) return false;
    for (size_t i = 0; i < segments_.size(); ++i)
      if (segments_[i].l != o.segments_[i].l || segments_[i].mul != o.segments_[i].mul) return false;
    return true;
  }

private:
  void canonicalize() {
    for (const auto& s : segments_) {
      require(s.l >= 0, "IrrepSpec: negative degree");
      require(s.mul > 0, "IrrepSpec: non-positive multiplicity");
    }
    std::stable_sort(segments_.begin(), segments_.end(),
                     [](const IrrepSegment& a, const IrrepSegment& b) { return a.l < b.l; });
  }

  std::vector<IrrepSegment> segments_;
};

struct IrrepsVector {
  IrrepSpec spec;
  Vec data;

  IrrepsVector() = default;
  IrrepsVector(IrrepSpec s, Vec d) : spec(std::move(s)), data(std::move(d)) {
    require(data.size() == spec.flat_dim(), "IrrepsVector: data length != spec dimension");
  }
  static IrrepsVector zero(IrrepSpec s) {
    Vec d = Vec::Zero(s.flat_dim());
    return IrrepsVector(std::move(s), std::move(d));
  }

  // View of channel c of segment i as a (2l+1)-vector, m = -l..l.
  Eigen::VectorBlock<Vec> channel(int seg, int c) {
    int l = spec.segments()[seg].l;
    return data.segment(spec.segment_offset(seg) + c * (2 * l + 1), 2 * l + 1);
  }
  Eigen::VectorBlock<const Vec> channel(int seg, int c) const {
    int l = spec.segments()[seg].l;
    return data.segment(spec.segment_offset(seg) + c * (2 * l + 1), 2 * l + 1);
  }
};

// ---------------------------------------------------------------------------
// Rotations

class Rotation {
public:
  explicit Rotation(const Mat3& r) : r_(r) {
    require(((r.transpose() * r) - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-12,
            "Rotation: matrix is not orthogonal");
    require(std::abs(r.determinant() - 1.0) < 1e-12, "Rotation: determinant is not +1");
  }

  const Mat3& matrix() const { return r_; }

  Rotation operator*(const Rotation& o) const { return Rotation(reorthonormalize(r_ * o.r_)); }

  static Rotation identity() { return Rotation(Mat3::Identity()); }

  static Rotation from_axis_angle(const Vec3& axis, double angle) {
    return Rotation(reorthonormalize(Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix()));
  }

  static Rotation random(Rng& rng) {
    // QR of a Gaussian matrix, sign-fixed to det +1.
    Mat3 g;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) g(i, j) = rng.normal();
    Eigen::HouseholderQR<Mat3> qr(g);
    Mat3 q = qr.householderQ();
    if (q.determinant() < 0) q.col(0) = -q.col(0);
    return Rotation(reorthonormalize(q));
  }

private:
  // One Newton step of the orthogonal polar projection; keeps products and
  // random draws inside the 1e-12 constructor tolerance.
  static Mat3 reorthonormalize(const Mat3& m) {
    Mat3 q = m;
    for (int it = 0; it < 2; ++it) q = 0.5 * (q + q.transpose().inverse());
    return q;
  }

  Mat3 r_;
};

// ---------------------------------------------------------------------------
// Real spherical harmonics

namespace detail {

// Associated Legendre P_l^m(x), positive convention (no Condon-Shortley).
inline double assoc_legendre(int l, int m, double x) {
  double pmm = 1.0;
  if (m > 0) {
    double somx2 = std::sqrt(std::max(0.0, (1.0 - x) * (1.0 + x)));
    double fact = 1.0;
    for (int i = 1; i <= m; ++i) {
      pmm *= fact * somx2;
      fact += 2.0;
    }
  }
  if (l == m) return pmm;
  double pmmp1 = x * (2.0 * m + 1.0) * pmm;
  if (l == m + 1) return pmmp1;
  double pll = 0.0;
  for (int ll = m + 2; ll <= l; ++ll) {
    pll = (x * (2.0 * ll - 1.0) * pmmp1 - (ll + m - 1.0) * pmm) / (ll - m);
    pmm = pmmp1;
    pmmp1 = pll;
  }
  return pll;
}

inline double sph_norm(int l, int m) {
  double r = (2.0 * l + 1.0) / (4.0 * M_PI);
  for (int k = l - m + 1; k <= l + m; ++k) r /= k;
  return std::sqrt(r);
}

inline Vec3 validate_unit(const Vec3& u) {
  double n = u.norm();
  require(std::abs(n - 1.0) <= 1e-6, "real_sph_harm: input is not a unit vector");
  return u / n;
}

}  // namespace detail

/// Fully normalized real spherical harmonic Y_{lm}(u), |u| = 1.
inline double real_sph_harm(int l, int m, const Vec3& u_in) {
  require(l >= 0, "real_sph_harm: negative degree");
  require(std::abs(m) <= l, "real_sph_harm: |m| > l");
  Vec3 u = detail::validate_unit(u_in);
  double ct = std::clamp(u.z(), -1.0, 1.0);
  double phi = std::atan2(u.y(), u.x());
  int am = std::abs(m);
  double p = detail::assoc_legendre(l, am, ct) * detail::sph_norm(l, am);
  if (m == 0) return p;
  double f = std::sqrt(2.0) * p;
  return m > 0 ? f * std::cos(am * phi) : f * std::sin(am * phi);
}

/// Stack of all Y_{lm}(u) for l = 0..lmax, (lmax+1)^2 values, (l,m) ordered.
inline Vec sph_harm_stack(int lmax, const Vec3& u_in) {
  Vec3 u = detail::validate_unit(u_in);
  Vec out((lmax + 1) * (lmax + 1));
  int k = 0;
  for (int l = 0; l <= lmax; ++l)
    for (int m = -l; m <= l; ++m) out[k++] = real_sph_harm(l, m, u);
  return out;
}

// ---------------------------------------------------------------------------
// Exact Clebsch-Gordan / 3j machinery

namespace detail {

using bigint = boost::multiprecision::cpp_int;
using bigrat = boost::multiprecision::cpp_rational;

inline bigint factorial(int n) {
  bigint r = 1;
  for (int k = 2; k <= n; ++k) r *= k;
  return r;
}

inline bool triangle_ok(int l1, int l2, int l3) {
  return l3 >= std::abs(l1 - l2) && l3 <= l1 + l2;
}

// <l1 m1 l2 m2 | l3 m3> by Racah's closed form; the factorial ratios are
// exact rationals, only the final square root is floating point.
inline double cg_complex(int l1, int m1, int l2, int m2, int l3, int m3) {
  if (m1 + m2 != m3) return 0.0;
  if (!triangle_ok(l1, l2, l3)) return 0.0;
  if (std::abs(m1) > l1 || std::abs(m2) > l2 || std::abs(m3) > l3) return 0.0;

  bigrat pref2 = bigrat(2 * l3 + 1) * bigrat(factorial(l3 + l1 - l2)) *
                 bigrat(factorial(l3 - l1 + l2)) * bigrat(factorial(l1 + l2 - l3)) /
                 bigrat(factorial(l1 + l2 + l3 + 1));
  pref2 *= bigrat(factorial(l3 + m3)) * bigrat(factorial(l3 - m3)) *
           bigrat(factorial(l1 - m1)) * bigrat(factorial(l1 + m1)) *
           bigrat(factorial(l2 - m2)) * bigrat(factorial(l2 + m2));

  bigrat sum = 0;
  int kmin = std::max({0, -(l3 - l2 + m1), -(l3 - l1 - m2)});
  int kmax = std::min({l1 + l2 - l3, l1 - m1, l2 + m2});
  for (int k = kmin; k <= kmax; ++k) {
    bigrat term = bigrat(1) / (bigrat(factorial(k)) * bigrat(factorial(l1 + l2 - l3 - k)) *
                               bigrat(factorial(l1 - m1 - k)) * bigrat(factorial(l2 + m2 - k)) *
                               bigrat(factorial(l3 - l2 + m1 + k)) *
                               bigrat(factorial(l3 - l1 - m2 + k)));
    if (k % 2) term = -term;
    sum += term;
  }
  return static_cast<double>(sum) * std::sqrt(static_cast<double>(pref2));
}

// Real<-complex change of basis, rows = real m, cols = complex M.
inline CMat c2r_matrix(int l) {
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  CMat b = CMat::Zero(2 * l + 1, 2 * l + 1);
  auto idx = [l](int m) { return m + l; };
  b(idx(0), idx(0)) = 1.0;
  for (int m = 1; m <= l; ++m) {
    double cs = (m % 2) ? -1.0 : 1.0;
    b(idx(m), idx(-m)) = inv_sqrt2;
    b(idx(m), idx(m)) = cs * inv_sqrt2;
    b(idx(-m), idx(-m)) = cplx(0.0, inv_sqrt2);
    b(idx(-m), idx(m)) = cplx(0.0, -cs * inv_sqrt2);
  }
  return b;
}

}  // namespace detail

/// Standard Wigner 3j symbol (complex-basis convention), exact selection rules.
inline double wigner_3j(int l1, int l2, int l3, int m1, int m2, int m3) {
  require(l1 >= 0 && l2 >= 0 && l3 >= 0, "wigner_3j: negative degree");
  if (std::abs(m1) > l1 || std::abs(m2) > l2 || std::abs(m3) > l3) return 0.0;
  if (m1 + m2 + m3 != 0) return 0.0;
  if (!detail::triangle_ok(l1, l2, l3)) return 0.0;
  double cg = detail::cg_complex(l1, m1, l2, m2, l3, -m3);
  double sign = ((l1 - l2 - m3) % 2 == 0) ? 1.0 : -1.0;
  return sign * cg / std::sqrt(2.0 * l3 + 1.0);
}

// ---------------------------------------------------------------------------
// Real coupling tensors

struct CGTensor {
  int l1 = 0, l2 = 0, l3 = 0;
  std::vector<double> coeffs;  // dense, index ((m1)*(2l2+1)+(m2))*(2l3+1)+m3, m zero-based

  struct Entry {
    int m1, m2, m3;  // zero-based (m + l)
    double v;
  };
  std::vector<Entry> nnz;

  double coeff(int m1, int m2, int m3) const {  // m in -l..l
    return coeffs[(static_cast<size_t>(m1 + l1) * (2 * l2 + 1) + (m2 + l2)) * (2 * l3 + 1) +
                  (m3 + l3)];
  }
};

namespace detail {

inline CGTensor build_real_cg(int l1, int l2, int l3) {
  CGTensor t;
  t.l1 = l1;
  t.l2 = l2;
  t.l3 = l3;
  int d1 = 2 * l1 + 1, d2 = 2 * l2 + 1, d3 = 2 * l3 + 1;
  t.coeffs.assign(static_cast<size_t>(d1) * d2 * d3, 0.0);
  if (!triangle_ok(l1, l2, l3)) return t;

  CMat b1 = c2r_matrix(l1), b2 = c2r_matrix(l2), b3 = c2r_matrix(l3);
  bool even = ((l1 + l2 + l3) % 2 == 0);
  for (int m1 = -l1; m1 <= l1; ++m1)
    for (int m2 = -l2; m2 <= l2; ++m2)
      for (int m3 = -l3; m3 <= l3; ++m3) {
        cplx acc(0.0, 0.0);
        for (int M1 = -l1; M1 <= l1; ++M1)
          for (int M2 = -l2; M2 <= l2; ++M2) {
            int M3 = M1 + M2;
            if (std::abs(M3) > l3) continue;
            double k = cg_complex(l1, M1, l2, M2, l3, M3);
            if (k == 0.0) continue;
            acc += std::conj(b1(m1 + l1, M1 + l1)) * std::conj(b2(m2 + l2, M2 + l2)) *
                   b3(m3 + l3, M3 + l3) * k;
          }
        double v = even ? acc.real() : acc.imag();
        double resid = even ? acc.imag() : acc.real();
        if (std::abs(resid) > 1e-12)
          throw std::logic_error("real CG construction: unexpected complex residue");
        if (std::abs(v) < 1e-14) v = 0.0;
        t.coeffs[(static_cast<size_t>(m1 + l1) * d2 + (m2 + l2)) * d3 + (m3 + l3)] = v;
        if (v != 0.0) t.nnz.push_back({m1 + l1, m2 + l2, m3 + l3, v});
      }
  return t;
}

// Real Gaunt tensor: integral of three real spherical harmonics. Exactly zero
// for odd l1+l2+l3 (parity).
inline CGTensor build_real_gaunt(int l1, int l2, int l3) {
  CGTensor t;
  t.l1 = l1;
  t.l2 = l2;
  t.l3 = l3;
  int d1 = 2 * l1 + 1, d2 = 2 * l2 + 1, d3 = 2 * l3 + 1;
  t.coeffs.assign(static_cast<size_t>(d1) * d2 * d3, 0.0);
  if (!triangle_ok(l1, l2, l3) || (l1 + l2 + l3) % 2 != 0) return t;

  CMat b1 = c2r_matrix(l1), b2 = c2r_matrix(l2), b3 = c2r_matrix(l3);
  double pref = std::sqrt((2 * l1 + 1.0) * (2 * l2 + 1.0) * (2 * l3 + 1.0) / (4.0 * M_PI)) *
                wigner_3j(l1, l2, l3, 0, 0, 0);
  for (int m1 = -l1; m1 <= l1; ++m1)
    for (int m2 = -l2; m2 <= l2; ++m2)
      for (int m3 = -l3; m3 <= l3; ++m3) {
        cplx acc(0.0, 0.0);
        for (int M1 = -l1; M1 <= l1; ++M1)
          for (int M2 = -l2; M2 <= l2; ++M2) {
            int M3 = -M1 - M2;
            if (std::abs(M3) > l3) continue;
            double w = wigner_3j(l1, l2, l3, M1, M2, M3);
            if (w == 0.0) continue;
            acc += b1(m1 + l1, M1 + l1) * b2(m2 + l2, M2 + l2) * b3(m3 + l3, M3 + l3) * w;
          }
        acc *= pref;
        if (std::abs(acc.imag()) > 1e-12)
          throw std::logic_error("real Gaunt construction: unexpected complex residue");
        double v = acc.real();
        if (std::abs(v) < 1e-14) v = 0.0;
        t.coeffs[(static_cast<size_t>(m1 + l1) * d2 + (m2 + l2)) * d3 + (m3 + l3)] = v;
        if (v != 0.0) t.nnz.push_back({m1 + l1, m2 + l2, m3 + l3, v});
      }
  return t;
}

template <typename Builder>
class TensorCache {
public:
  explicit TensorCache(Builder b, int eager_lmax) : build_(b) {
    for (int l1 = 0; l1 <= eager_lmax; ++l1)
      for (int l2 = 0; l2 <= eager_lmax; ++l2)
        for (int l3 = 0; l3 <= eager_lmax; ++l3) cache_[key(l1, l2, l3)] = build_(l1, l2, l3);
  }

  const CGTensor& get(int l1, int l2, int l3) {
    require(l1 >= 0 && l2 >= 0 && l3 >= 0, "coupling tensor: negative degree");
    require(l1 <= 8 && l2 <= 8 && l3 <= 8, "coupling tensor: degree beyond cached range (l <= 8)");
    long k = key(l1, l2, l3);
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto it = cache_.find(k);
      if (it != cache_.end()) return it->second;
      return cache_.emplace(k, build_(l1, l2, l3)).first->second;
    }
  }

private:
  static long key(int l1, int l2, int l3) { return (l1 * 16 + l2) * 16 + l3; }
  Builder build_;
  std::mutex mu_;
  std::map<long, CGTensor> cache_;
};

}  // namespace detail

/// Real-basis CG tensor for l1 x l2 -> l3 (all-zero outside the triangle range).
inline const CGTensor& clebsch_gordan(int l1, int l2, int l3) {
  static detail::TensorCache cache(&detail::build_real_cg, 4);
  return cache.get(l1, l2, l3);
}

/// Real Gaunt tensor: Int Y_{l1 m1} Y_{l2 m2} Y_{l3 m3} dOmega in the real basis.
inline const CGTensor& real_gaunt(int l1, int l2, int l3) {
  static detail::TensorCache cache(&detail::build_real_gaunt, 4);
  return cache.get(l1, l2, l3);
}

// ---------------------------------------------------------------------------
// Wigner D

namespace detail {

inline double fact_d(int n) {
  static const std::vector<double> table = [] {
    std::vector<double> t(35, 1.0);
    for (int i = 1; i < 35; ++i) t[i] = t[i - 1] * i;
    return t;
  }();
  return table[n];
}

inline double wigner_small_d(int l, int mp, int m, double beta) {
  double cb = std::cos(beta / 2.0), sb = std::sin(beta / 2.0);
  double pref = std::sqrt(fact_d(l + mp) * fact_d(l - mp) * fact_d(l + m) * fact_d(l - m));
  double sum = 0.0;
  int smin = std::max(0, m - mp);
  int smax = std::min(l + m, l - mp);
  for (int s = smin; s <= smax; ++s) {
    double denom = fact_d(l + m - s) * fact_d(s) * fact_d(mp - m + s) * fact_d(l - mp - s);
    double term = std::pow(cb, 2 * l + m - mp - 2 * s) * std::pow(sb, mp - m + 2 * s) / denom;
    sum += ((mp - m + s) % 2) ? -term : term;
  }
  return pref * sum;
}

struct Euler {
  double alpha, beta, gamma;
};

// R = Rz(alpha) Ry(beta) Rz(gamma)
inline Euler euler_zyz(const Mat3& r) {
  Euler e{};
  double cb = std::clamp(r(2, 2), -1.0, 1.0);
  e.beta = std::acos(cb);
  double sb = std::sin(e.beta);
  if (sb > 1e-12) {
    e.alpha = std::atan2(r(1, 2), r(0, 2));
    e.gamma = std::atan2(r(2, 1), -r(2, 0));
  } else if (cb > 0) {  // beta ~ 0: R = Rz(alpha + gamma)
    e.beta = 0.0;
    e.gamma = 0.0;
    e.alpha = std::atan2(r(1, 0), r(0, 0));
  } else {  // beta ~ pi
    e.beta = M_PI;
    e.gamma = 0.0;
    e.alpha = std::atan2(-r(0, 1), -r(0, 0));
  }
  return e;
}

}  // namespace detail

/// Real Wigner D matrix of degree l: Y(R u) = D(R) Y(u) for the real harmonics.
inline Mat wigner_d(int l, const Rotation& rot) {
  require(l >= 0, "wigner_d: negative degree");
  auto e = detail::euler_zyz(rot.matrix());
  int d = 2 * l + 1;
  CMat dc(d, d);
  for (int mp = -l; mp <= l; ++mp)
    for (int m = -l; m <= l; ++m) {
      double small = detail::wigner_small_d(l, mp, m, e.beta);
      cplx phase = std::exp(cplx(0.0, -mp * e.alpha)) * std::exp(cplx(0.0, -m * e.gamma));
      dc(mp + l, m + l) = phase * small;
    }
  CMat b = detail::c2r_matrix(l);
  CMat dr = b * dc.conjugate() * b.adjoint();
  if (dr.imag().cwiseAbs().maxCoeff() > 1e-11)
    throw std::logic_error("wigner_d: real conjugation left a complex residue");
  return dr.real();
}

/// Block-diagonal Wigner D over an IrrepSpec (kron(I_mul, D^l) per segment).
inline Mat wigner_d_spec(const IrrepSpec& spec, const Rotation& rot) {
  int n = spec.flat_dim();
  Mat out = Mat::Zero(n, n);
  int off = 0;
  for (const auto& seg : spec.segments()) {
    Mat dl = wigner_d(seg.l, rot);
    int w = 2 * seg.l + 1;
    for (int c = 0; c < seg.mul; ++c) {
      out.block(off, off, w, w) = dl;
      off += w;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tensor product / expansion

/// Canonical list of (seg1, seg2, seg3) coupling paths between two specs and
/// an output spec: every segment triple satisfying the triangle inequality,
/// enumerated in (seg3, seg1, seg2) order.
struct TPPath {
  int s1, s2, s3;
};

inline std::vector<TPPath> tensor_product_paths(const IrrepSpec& a, const IrrepSpec& b,
                                                const IrrepSpec& out) {
  std::vector<TPPath> paths;
  for (int s3 = 0; s3 < out.num_segments(); ++s3)
    for (int s1 = 0; s1 < a.num_segments(); ++s1)
      for (int s2 = 0; s2 < b.num_segments(); ++s2)
        if (detail::triangle_ok(a.segments()[s1].l, b.segments()[s2].l, out.segments()[s3].l))
          paths.push_back({s1, s2, s3});
  return paths;
}

/// Path-weighted CG tensor product. Output channels of each path are the
/// outer product of the input channels (mul3 = mul1 * mul2 per path).
inline IrrepsVector tensor_product(const IrrepsVector& x, const IrrepsVector& y,
                                   const std::vector<double>& weights, const IrrepSpec& out_spec) {
  auto paths = tensor_product_paths(x.spec, y.spec, out_spec);
  require(weights.size() == paths.size(),
          "tensor_product: weight count != path count (" + std::to_string(paths.size()) + ")");
  IrrepsVector out = IrrepsVector::zero(out_spec);
  for (size_t p = 0; p < paths.size(); ++p) {
    const auto& seg1 = x.spec.segments()[paths[p].s1];
    const auto& seg2 = y.spec.segments()[paths[p].s2];
    const auto& seg3 = out_spec.segments()[paths[p].s3];
    require(seg3.mul == seg1.mul * seg2.mul,
            "tensor_product: output multiplicity != mul1*mul2 for a path");
    const CGTensor& cg = clebsch_gordan(seg1.l, seg2.l, seg3.l);
    for (int c1 = 0; c1 < seg1.mul; ++c1)
      for (int c2 = 0; c2 < seg2.mul; ++c2) {
        int c3 = c1 * seg2.mul + c2;
        auto xv = x.channel(paths[p].s1, c1);
        auto yv = y.channel(paths[p].s2, c2);
        auto ov = out.channel(paths[p].s3, c3);
        for (const auto& e : cg.nnz) ov[e.m3] += weights[p] * e.v * xv[e.m1] * yv[e.m2];
      }
  }
  return out;
}

/// Tensor expansion: distribute a degree-l3 vector into a (2l1+1) x (2l2+1)
/// block; the adjoint of the unit-weight tensor product.
inline Mat tensor_expansion(const Vec& w, int l1, int l2, int l3) {
  require(w.size() == 2 * l3 + 1, "tensor_expansion: vector length != 2l3+1");
  require(detail::triangle_ok(l1, l2, l3), "tensor_expansion: triangle inequality violated");
  const CGTensor& cg = clebsch_gordan(l1, l2, l3);
  Mat block = Mat::Zero(2 * l1 + 1, 2 * l2 + 1);
  for (const auto& e : cg.nnz) block(e.m1, e.m2) += e.v * w[e.m3];
  return block;
}

/// Dump cached CG tables (l <= lmax) to CSV: l1,l2,l3,m1,m2,m3,value.
inline void dump_cg_csv(int lmax, const std::string& path) {
  std::ofstream f(path);
  require(f.good(), "dump_cg_csv: cannot open " + path);
  f << "l1,l2,l3,m1,m2,m3,value\n";
  char buf[64];
  for (int l1 = 0; l1 <= lmax; ++l1)
    for (int l2 = 0; l2 <= lmax; ++l2)
      for (int l3 = std::abs(l1 - l2); l3 <= std::min(l1 + l2, lmax); ++l3) {
        const CGTensor& t = clebsch_gordan(l1, l2, l3);
        for (const auto& e : t.nnz) {
          std::snprintf(buf, sizeof(buf), "%.17g", e.v);
          f << l1 << ',' << l2 << ',' << l3 << ',' << (e.m1 - l1) << ',' << (e.m2 - l2) << ','
            << (e.m3 - l3) << ',' << buf << '\n';
        }
      }
}

}  // namespace deqh::so3
