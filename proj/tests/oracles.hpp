#pragma once

// Test-only oracles, kept independent of the library implementation paths
// they are used to check.

#include <Eigen/Dense>
#include <cmath>
#include <complex>
#include <functional>
#include <vector>

namespace oracle {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using Vec3 = Eigen::Vector3d;
using cplx = std::complex<double>;

// -------------------------------------------------------------------------
// Wigner 3j via Racah's closed form with plain double factorials. Only valid
// for small l (factorials stay exact in double up to 22!).
inline double fact(int n) {
  double r = 1.0;
  for (int k = 2; k <= n; ++k) r *= k;
  return r;
}

inline double wigner_3j(int j1, int j2, int j3, int m1, int m2, int m3) {
  if (m1 + m2 + m3 != 0) return 0.0;
  if (j3 < std::abs(j1 - j2) || j3 > j1 + j2) return 0.0;
  if (std::abs(m1) > j1 || std::abs(m2) > j2 || std::abs(m3) > j3) return 0.0;
  double delta = std::sqrt(fact(j1 + j2 - j3) * fact(j1 - j2 + j3) * fact(-j1 + j2 + j3) /
                           fact(j1 + j2 + j3 + 1));
  double pre = delta * std::sqrt(fact(j1 + m1) * fact(j1 - m1) * fact(j2 + m2) * fact(j2 - m2) *
                                 fact(j3 + m3) * fact(j3 - m3));
  double sum = 0.0;
  for (int k = 0;; ++k) {
    int a = j1 + j2 - j3 - k, b = j1 - m1 - k, c = j2 + m2 - k;
    int d = j3 - j2 + m1 + k, e = j3 - j1 - m2 + k;
    if (a < 0 || b < 0 || c < 0) break;
    if (d < 0 || e < 0) continue;
    double term = 1.0 / (fact(k) * fact(a) * fact(b) * fact(c) * fact(d) * fact(e));
    sum += (k % 2) ? -term : term;
  }
  double sign = ((j1 - j2 - m3) % 2 == 0) ? 1.0 : -1.0;
  return sign * pre * sum;
}

// -------------------------------------------------------------------------
// Complex spherical harmonics (Condon-Shortley), direct evaluation.
inline double assoc_legendre_pos(int l, int m, double x) {
  double pmm = 1.0;
  if (m > 0) {
    double s = std::sqrt(std::max(0.0, 1.0 - x * x));
    for (int i = 1; i <= m; ++i) pmm *= (2.0 * i - 1.0) * s;
  }
  if (l == m) return pmm;
  double p1 = x * (2.0 * m + 1.0) * pmm;
  if (l == m + 1) return p1;
  double p = 0.0;
  for (int ll = m + 2; ll <= l; ++ll) {
    p = (x * (2.0 * ll - 1.0) * p1 - (ll + m - 1.0) * pmm) / (ll - m);
    pmm = p1;
    p1 = p;
  }
  return p;
}

inline cplx sph_harm_complex(int l, int m, const Vec3& u) {
  int am = std::abs(m);
  double norm = (2.0 * l + 1.0) / (4.0 * M_PI);
  for (int k = l - am + 1; k <= l + am; ++k) norm /= k;
  norm = std::sqrt(norm);
  double theta = std::acos(std::clamp(u.z(), -1.0, 1.0));
  double phi = std::atan2(u.y(), u.x());
  double p = assoc_legendre_pos(l, am, std::cos(theta));
  cplx val = norm * p * std::exp(cplx(0.0, am * phi));
  if (am % 2) val = -val;  // Condon-Shortley
  if (m >= 0) return val;
  cplx v = std::conj(val);
  return (am % 2) ? -v : v;
}

// Real harmonic from the paper's (c2r) combination of the complex ones.
inline double sph_harm_real_via_c2r(int l, int m, const Vec3& u) {
  if (m == 0) return sph_harm_complex(l, 0, u).real();
  int am = std::abs(m);
  cplx yp = sph_harm_complex(l, am, u);
  cplx ym = sph_harm_complex(l, -am, u);
  double cs = (am % 2) ? -1.0 : 1.0;
  if (m > 0) return ((ym + cs * yp) / std::sqrt(2.0)).real();
  return (cplx(0.0, 1.0) * (ym - cs * yp) / std::sqrt(2.0)).real();
}

// -------------------------------------------------------------------------
// Quadrature

/// Adaptive Simpson on [a, b], pre-split into uniform panels so narrow
/// integrands are not missed by the initial samples.
inline double adaptive_simpson(const std::function<double(double)>& f, double a, double b,
                               double tol = 1e-12, int depth = 24) {
  std::function<double(double, double, double, double, double, double, double, int)> rec =
      [&](double lo, double hi, double flo, double fmid, double fhi, double whole, double eps,
          int d) -> double {
    double mid = 0.5 * (lo + hi);
    double lm = 0.5 * (lo + mid), rm = 0.5 * (mid + hi);
    double flm = f(lm), frm = f(rm);
    double left = (mid - lo) / 6.0 * (flo + 4.0 * flm + fmid);
    double right = (hi - mid) / 6.0 * (fmid + 4.0 * frm + fhi);
    if (d <= 0 || std::abs(left + right - whole) < 15.0 * eps)
      return left + right + (left + right - whole) / 15.0;
    return rec(lo, mid, flo, flm, fmid, left, eps / 2.0, d - 1) +
           rec(mid, hi, fmid, frm, fhi, right, eps / 2.0, d - 1);
  };
  const int panels = 64;
  double h = (b - a) / panels;
  double acc = 0.0;
  for (int i = 0; i < panels; ++i) {
    double lo = a + i * h, hi = lo + h;
    double flo = f(lo), fhi = f(hi), fm = f(0.5 * (lo + hi));
    double whole = h / 6.0 * (flo + 4.0 * fm + fhi);
    acc += rec(lo, hi, flo, fm, fhi, whole, tol / panels, depth);
  }
  return acc;
}

/// Gauss-Legendre nodes/weights on [-1, 1].
inline void gauss_legendre(int n, std::vector<double>& x, std::vector<double>& w) {
  x.resize(n);
  w.resize(n);
  for (int i = 0; i < n; ++i) {
    double t = std::cos(M_PI * (i + 0.75) / (n + 0.5));
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = 0.0;
      for (int j = 0; j < n; ++j) {
        double p2 = p1;
        p1 = p0;
        p0 = ((2.0 * j + 1.0) * t * p1 - j * p2) / (j + 1.0);
      }
      double dp = n * (t * p0 - p1) / (t * t - 1.0);
      double t1 = t - p0 / dp;
      if (std::abs(t1 - t) < 1e-15) {
        t = t1;
        break;
      }
      t = t1;
    }
    double p0 = 1.0, p1 = 0.0;
    for (int j = 0; j < n; ++j) {
      double p2 = p1;
      p1 = p0;
      p0 = ((2.0 * j + 1.0) * t * p1 - j * p2) / (j + 1.0);
    }
    double dp = n * (t * p0 - p1) / (t * t - 1.0);
    x[i] = t;
    w[i] = 2.0 / ((1.0 - t * t) * dp * dp);
  }
}

/// Integral over the unit sphere of f(u); exact for band-limited integrands
/// with degree < n_phi in phi and < 2*n_theta - 1 in cos(theta).
inline double sphere_integral(const std::function<double(const Vec3&)>& f, int n_theta = 24,
                              int n_phi = 48) {
  std::vector<double> xt, wt;
  gauss_legendre(n_theta, xt, wt);
  double acc = 0.0;
  for (int i = 0; i < n_theta; ++i) {
    double ct = xt[i], st = std::sqrt(std::max(0.0, 1.0 - ct * ct));
    for (int j = 0; j < n_phi; ++j) {
      double phi = 2.0 * M_PI * j / n_phi;
      Vec3 u(st * std::cos(phi), st * std::sin(phi), ct);
      acc += wt[i] * f(u);
    }
  }
  return acc * (2.0 * M_PI / n_phi);
}

// -------------------------------------------------------------------------
// Hand-rolled cyclic Jacobi eigensolver for symmetric matrices (independent
// of Eigen's eigen-decompositions). Returns ascending eigenvalues and
// matching columns of V.
inline void jacobi_eigen(Mat a, Vec& evals, Mat& evecs) {
  const int n = static_cast<int>(a.rows());
  Mat v = Mat::Identity(n, n);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-30) break;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        Eigen::JacobiRotation<double> rot(c, s);
        a.applyOnTheLeft(p, q, rot.transpose());
        a.applyOnTheRight(p, q, rot);
        v.applyOnTheRight(p, q, rot);
      }
  }
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](int i, int j) { return a(i, i) < a(j, j); });
  evals.resize(n);
  evecs.resize(n, n);
  for (int i = 0; i < n; ++i) {
    evals[i] = a(idx[i], idx[i]);
    evecs.col(i) = v.col(idx[i]);
  }
}

}  // namespace oracle
