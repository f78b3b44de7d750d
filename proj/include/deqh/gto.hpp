#pragma once

// Analytic Gaussian-type-orbital integrals: normalization constants, the
// fixed 28-shell auxiliary basis, and the on-site 3-index overlap tensor
// Q used by the diagonal reduction.
//
// All shells are single primitives of the form
//   Phi^{n,l,m}(r) = c_{n,l} exp(-gamma_{n,l} r^2) r^l Y_{lm}(r/|r|)
// with c chosen so the L2 norm over R^3 is 1.

#include <fstream>
#include <map>
#include <mutex>

#include "deqh/core.hpp"
#include "deqh/irreps.hpp"

namespace deqh::gto {

struct GtoShell {
  int n;         // radial index within its l block
  int l;         // degree
  double gamma;  // exponent, a.u.^-2
  double c;      // L2 normalization constant
};

/// Int_0^inf r^k exp(-a r^2) dr = Gamma((k+1)/2) / (2 a^((k+1)/2)).
inline double radial_moment(double a, int k) {
  require(a > 0.0, "radial_moment: non-positive exponent sum");
  require(k >= 0, "radial_moment: negative power");
  return std::tgamma(0.5 * (k + 1)) / (2.0 * std::pow(a, 0.5 * (k + 1)));
}

/// Normalization of an angularly normalized GTO: c^2 * Int r^{2l+2} e^{-2g r^2} dr = 1.
inline double gto_norm(double gamma, int l) {
  require(gamma > 0.0, "gto_norm: non-positive exponent");
  return std::sqrt(2.0 * std::pow(2.0 * gamma, l + 1.5) / std::tgamma(l + 1.5));
}

inline GtoShell make_shell(int n, int l, double gamma) {
  return GtoShell{n, l, gamma, gto_norm(gamma, l)};
}

/// The fixed element-independent auxiliary basis: 16 s shells with
/// gamma = 128*(1/2)^(n-1), 8 p shells with gamma = 32*(1/4)^(n-1), and
/// 4 d shells with gamma = 4*(1/4)^(n-1).
inline const std::vector<GtoShell>& aux_basis_table() {
  static const std::vector<GtoShell> table = [] {
    std::vector<GtoShell> t;
    for (int n = 1; n <= 16; ++n) t.push_back(make_shell(n, 0, 128.0 * std::pow(0.5, n - 1)));
    for (int n = 1; n <= 8; ++n) t.push_back(make_shell(n, 1, 32.0 * std::pow(0.25, n - 1)));
    for (int n = 1; n <= 4; ++n) t.push_back(make_shell(n, 2, 4.0 * std::pow(0.25, n - 1)));
    return t;
  }();
  return table;
}

/// On-site 3-index overlap tensor, indexed (mu, nu, aux nlm component) where
/// mu, nu enumerate (shell, m) pairs of one element's basis in order.
struct ThreeIndexOverlap {
  std::vector<GtoShell> basis;
  std::vector<GtoShell> aux;
  int n_orb = 0;  // basis (shell, m) count
  int n_aux = 0;  // aux (shell, m) count
  std::vector<double> values;  // dense, index (mu * n_orb + nu) * n_aux + a

  double value(int mu, int nu, int a) const {
    return values[(static_cast<size_t>(mu) * n_orb + nu) * n_aux + a];
  }

  struct AuxComponent {
    int shell;  // index into aux
    int m;      // -l..l
  };
  std::vector<AuxComponent> aux_components;

  struct OrbComponent {
    int shell;
    int m;
  };
  std::vector<OrbComponent> orb_components;
};

/// Q^{mu,nu}_{nlm} = c1 c2 c * Int r^{l1+l2+l+2} e^{-(g1+g2+g) r^2} dr
///                 * Int Y_{l1 m1} Y_{l2 m2} Y_{lm} dOmega   (real harmonics).
/// Zero exactly when l1+l2+l is odd or the triangle inequality fails.
inline ThreeIndexOverlap onsite_3index_overlap(const std::vector<GtoShell>& basis,
                                               const std::vector<GtoShell>& aux) {
  ThreeIndexOverlap q;
  q.basis = basis;
  q.aux = aux;
  for (int s = 0; s < static_cast<int>(basis.size()); ++s) {
    require(basis[s].l <= 8, "onsite_3index_overlap: basis degree beyond cached CG tables");
    for (int m = -basis[s].l; m <= basis[s].l; ++m) q.orb_components.push_back({s, m});
  }
  for (int s = 0; s < static_cast<int>(aux.size()); ++s) {
    require(aux[s].l <= 8, "onsite_3index_overlap: aux degree beyond cached CG tables");
    for (int m = -aux[s].l; m <= aux[s].l; ++m) q.aux_components.push_back({s, m});
  }
  q.n_orb = static_cast<int>(q.orb_components.size());
  q.n_aux = static_cast<int>(q.aux_components.size());
  q.values.assign(static_cast<size_t>(q.n_orb) * q.n_orb * q.n_aux, 0.0);

  for (int mu = 0; mu < q.n_orb; ++mu) {
    const GtoShell& s1 = basis[q.orb_components[mu].shell];
    int m1 = q.orb_components[mu].m;
    for (int nu = 0; nu < q.n_orb; ++nu) {
      const GtoShell& s2 = basis[q.orb_components[nu].shell];
      int m2 = q.orb_components[nu].m;
      for (int a = 0; a < q.n_aux; ++a) {
        const GtoShell& s3 = aux[q.aux_components[a].shell];
        int m3 = q.aux_components[a].m;
        if ((s1.l + s2.l + s3.l) % 2 != 0) continue;
        if (s3.l < std::abs(s1.l - s2.l) || s3.l > s1.l + s2.l) continue;
        double ang = so3::real_gaunt(s1.l, s2.l, s3.l).coeff(m1, m2, m3);
        if (ang == 0.0) continue;
        double rad = s1.c * s2.c * s3.c *
                     radial_moment(s1.gamma + s2.gamma + s3.gamma, s1.l + s2.l + s3.l + 2);
        q.values[(static_cast<size_t>(mu) * q.n_orb + nu) * q.n_aux + a] = rad * ang;
      }
    }
  }
  return q;
}

/// Debug dump: ASCII header line describing the index order, then the dense
/// row-major float64 payload.
inline void dump_q_tensor(const ThreeIndexOverlap& q, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "dump_q_tensor: cannot open " + path);
  std::string header = "DEQH-Q3 n_orb=" + std::to_string(q.n_orb) +
                       " n_aux=" + std::to_string(q.n_aux) +
                       " layout=(mu,nu,aux) row-major float64 LE\n";
  f.write(header.data(), static_cast<std::streamsize>(header.size()));
  f.write(reinterpret_cast<const char*>(q.values.data()),
          static_cast<std::streamsize>(q.values.size() * sizeof(double)));
}

}  // namespace deqh::gto
