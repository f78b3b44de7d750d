#pragma once

// Diagonal reduction: the injective equivariant linear map from on-site
// matrix blocks of H and S to per-atom irreps features,
//   h[n,l,m] = sum_{mu,nu} T^{mu,nu} Q^{mu,nu}_{nlm},
// plus the rotation-invariant feature normalization.

#include <memory>

#include "deqh/irreps.hpp"
#include "deqh/layout.hpp"

namespace deqh::reduce {

using so3::IrrepSpec;
using so3::IrrepsVector;

/// Output spec of the reduction: one channel per auxiliary radial shell,
/// (l=0 x16, l=1 x8, l=2 x4), identical for every element.
inline const IrrepSpec& reduction_spec() {
  static const IrrepSpec spec{{0, 16}, {1, 8}, {2, 4}};
  return spec;
}

struct ReductionPlan {
  int element = 0;
  std::shared_ptr<const gto::ThreeIndexOverlap> q_tensor;
  IrrepSpec out_spec;

  struct Triple {
    int feature;  // flat index into the output IrrepsVector
    int mu, nu;   // block indices
    double coeff;
  };
  std::vector<Triple> triples;
  int block_dim = 0;
};

inline ReductionPlan make_reduction_plan(int z, const data::BasisLayout& layout) {
  ReductionPlan plan;
  plan.element = z;
  plan.out_spec = reduction_spec();
  auto q = std::make_shared<gto::ThreeIndexOverlap>(
      gto::onsite_3index_overlap(layout.gto_shells(z), gto::aux_basis_table()));
  plan.block_dim = q->n_orb;

  // Flat feature index of aux component a: segments are grouped by l with
  // channels ordered by radial index, matching the aux table order.
  std::vector<int> feat_of_aux(q->n_aux);
  {
    int idx = 0;
    std::vector<int> order;  // aux components sorted by (l, n, m) == table order per l group
    for (int a = 0; a < q->n_aux; ++a) order.push_back(a);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return q->aux[q->aux_components[a].shell].l < q->aux[q->aux_components[b].shell].l;
    });
    for (int a : order) feat_of_aux[a] = idx++;
  }

  for (int mu = 0; mu < q->n_orb; ++mu)
    for (int nu = 0; nu < q->n_orb; ++nu)
      for (int a = 0; a < q->n_aux; ++a) {
        double v = q->value(mu, nu, a);
        if (v != 0.0) plan.triples.push_back({feat_of_aux[a], mu, nu, v});
      }
  plan.q_tensor = std::move(q);
  return plan;
}

/// Plans for every element of a layout, cached by the caller.
inline std::map<int, ReductionPlan> make_reduction_plans(const data::BasisLayout& layout) {
  std::map<int, ReductionPlan> plans;
  for (int z : layout.elements()) plans[z] = make_reduction_plan(z, layout);
  return plans;
}

/// h[nlm] = sum_{mu,nu} T^{mu,nu} Q^{mu,nu}_{nlm}; linear in T.
inline IrrepsVector reduce_block(const Mat& block, const ReductionPlan& plan) {
  require(block.rows() == plan.block_dim && block.cols() == plan.block_dim,
          "reduce_block: block dimension does not match the element's layout");
  require((block - block.transpose()).cwiseAbs().maxCoeff() <=
              1e-8 * std::max(1.0, block.cwiseAbs().maxCoeff()),
          "reduce_block: block is not symmetric");
  IrrepsVector h = IrrepsVector::zero(plan.out_spec);
  for (const auto& t : plan.triples) h.data[t.feature] += t.coeff * block(t.mu, t.nu);
  return h;
}

/// Applies reduce_block to every diagonal block of M; off-diagonal blocks are
/// not reduced.
inline std::vector<IrrepsVector> reduce_matrix(const data::AtomBlockMatrix& m,
                                               const data::MoleculeLayout& ml,
                                               const std::map<int, ReductionPlan>& plans) {
  require(m.m.rows() == ml.total_dim && m.m.cols() == ml.total_dim,
          "reduce_matrix: matrix layout mismatch");
  std::vector<IrrepsVector> out;
  out.reserve(ml.n_atoms());
  for (int a = 0; a < ml.n_atoms(); ++a) {
    auto it = plans.find(ml.z[a]);
    require(it != plans.end(), "reduce_matrix: no reduction plan for Z=" + std::to_string(ml.z[a]));
    out.push_back(reduce_block(m.block(ml, a, a), it->second));
  }
  return out;
}

enum class NormMode { per_degree_rms, per_channel_rms };

/// Scales each l-segment (or each channel) to unit RMS; scale factors are
/// rotation-invariant, with a 1e-8 floor so zero input stays zero.
inline IrrepsVector normalize_features(const IrrepsVector& h,
                                       NormMode mode = NormMode::per_degree_rms) {
  IrrepsVector out = h;
  const double eps = 1e-8;
  for (int s = 0; s < h.spec.num_segments(); ++s) {
    const auto& seg = h.spec.segments()[s];
    int off = h.spec.segment_offset(s);
    int len = seg.mul * (2 * seg.l + 1);
    if (mode == NormMode::per_degree_rms) {
      double rms = std::sqrt(h.data.segment(off, len).squaredNorm() / len);
      out.data.segment(off, len) /= std::max(rms, eps);
    } else {
      for (int c = 0; c < seg.mul; ++c) {
        int w = 2 * seg.l + 1;
        double rms = std::sqrt(h.data.segment(off + c * w, w).squaredNorm() / w);
        out.data.segment(off + c * w, w) /= std::max(rms, eps);
      }
    }
  }
  return out;
}

}  // namespace deqh::reduce
