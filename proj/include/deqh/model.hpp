#pragma once

// The Hamiltonian solver network f(H, S, Z, R) -> H'. One application runs
//   diag-reduce(H), diag-reduce(S) -> RMS normalize
//   -> TransBlock per branch (node features x edge harmonics, softmax
//      attention over neighbors)
//   -> merge with the atomic-number embedding
//   -> num_layers x ConvNetLayer (inner-product attention filter, per-path
//      radial MLPs, CG message passing)
//   -> block assembly: on-site heads from node features, pair heads from
//      (x_i ox x_j ox Y(r_ij)) edge features, expanded into (l1,l2) shell
//      blocks and symmetrized.
//
// Tensor-product path list used everywhere in the model: one coupling path
// (l1, |l1-l3|, l3) per (input degree, output degree) pair -- the minimal
// filter degree that connects them. Structural edge harmonics go up to
// lmax = 4, so every hidden degree is reachable from the l <= 2 reduction
// features in one product.

#include "deqh/deq.hpp"
#include "deqh/reduction.hpp"

namespace deqh::net {

using ad::Tape;
using ad::Var;

struct ModelConfig {
  int num_layers = 5;
  int hidden_channels = 128;
  int lmax = 4;
  double cutoff = 15.0;  // Angstrom
  int rbf_count = 32;
  bool use_overlap_features = true;

  void validate() const {
    require(num_layers >= 1, "ModelConfig: num_layers < 1");
    require(hidden_channels >= 1, "ModelConfig: hidden_channels < 1");
    require(lmax >= 2 && lmax <= 4, "ModelConfig: lmax outside [2,4]");
    require(cutoff > 0.0, "ModelConfig: non-positive cutoff");
    require(rbf_count >= 2, "ModelConfig: rbf_count < 2");
  }

  nlohmann::json to_json() const {
    return {{"num_layers", num_layers},     {"hidden_channels", hidden_channels},
            {"lmax", lmax},                 {"cutoff", cutoff},
            {"rbf_count", rbf_count},       {"use_overlap_features", use_overlap_features}};
  }
  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.num_layers = j.value("num_layers", c.num_layers);
    c.hidden_channels = j.value("hidden_channels", c.hidden_channels);
    c.lmax = j.value("lmax", c.lmax);
    c.cutoff = j.value("cutoff", c.cutoff);
    c.rbf_count = j.value("rbf_count", c.rbf_count);
    c.use_overlap_features = j.value("use_overlap_features", c.use_overlap_features);
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Graph construction

struct MoleculeGraph {
  IVec z;
  Mat coords;  // N x 3, Angstrom
  std::vector<int> recv, nbr;  // edge e: message nbr[e] -> recv[e]
  Mat rvec;                    // E x 3, R_nbr - R_recv
  Vec dist;
  Mat rbf;  // rbf_count x E
  Mat sh;   // (lmax+1)^2 x E
  int n_atoms = 0;
  int n_edges = 0;
};

/// Radius graph with both edge directions, Gaussian radial features under a
/// cosine cutoff envelope, and real spherical harmonics of the edge unit
/// vectors.
inline MoleculeGraph build_graph(const IVec& z, const Mat& coords, const ModelConfig& cfg) {
  require(z.size() >= 1, "build_graph: need at least one atom");
  require(coords.rows() == z.size() && coords.cols() == 3, "build_graph: coordinate shape");
  require(coords.allFinite(), "build_graph: non-finite coordinates");
  MoleculeGraph g;
  g.z = z;
  g.coords = coords;
  g.n_atoms = static_cast<int>(z.size());
  struct Edge {
    int i, j;
    double r;
  };
  std::vector<Edge> edges;
  for (int i = 0; i < g.n_atoms; ++i)
    for (int j = 0; j < g.n_atoms; ++j) {
      if (i == j) continue;
      double r = (coords.row(j) - coords.row(i)).norm();
      require(r >= 1e-6, "build_graph: coincident atoms " + std::to_string(i) + "," +
                             std::to_string(j));
      if (r < cfg.cutoff) edges.push_back({i, j, r});
    }
  // within each neighbor set, order edges by distance: summation order is
  // then independent of atom labeling, which keeps permutation equivariance
  // bitwise for generic geometries
  std::stable_sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
    if (a.i != b.i) return a.i < b.i;
    return a.r < b.r;
  });
  std::vector<Vec3> rv;
  std::vector<double> dd;
  for (const auto& e : edges) {
    g.recv.push_back(e.i);
    g.nbr.push_back(e.j);
    rv.push_back(coords.row(e.j) - coords.row(e.i));
    dd.push_back(e.r);
  }
  g.n_edges = static_cast<int>(rv.size());
  g.rvec.resize(g.n_edges, 3);
  g.dist.resize(g.n_edges);
  g.rbf.resize(cfg.rbf_count, g.n_edges);
  g.sh.resize((cfg.lmax + 1) * (cfg.lmax + 1), g.n_edges);
  double spacing = cfg.cutoff / (cfg.rbf_count - 1);
  for (int e = 0; e < g.n_edges; ++e) {
    g.rvec.row(e) = rv[e];
    double r = dd[e];
    g.dist[e] = r;
    double envelope = 0.5 * (std::cos(M_PI * r / cfg.cutoff) + 1.0);
    for (int k = 0; k < cfg.rbf_count; ++k) {
      double c = k * spacing;
      g.rbf(k, e) = std::exp(-0.5 * std::pow((r - c) / spacing, 2)) * envelope;
    }
    g.sh.col(e) = so3::sph_harm_stack(cfg.lmax, rv[e] / r);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Per-molecule context: graph + every constant index map the tape ops need

struct MoleculeContext {
  MoleculeGraph graph;
  data::MoleculeLayout ml;
  std::shared_ptr<const Mat> sh;
  std::shared_ptr<const std::vector<int>> recv, nbr;

  // diagonal reduction, one sparse map per degree (flat H -> degree matrix)
  std::vector<std::shared_ptr<const std::vector<ad::SparseTriple>>> reduce_maps;

  struct HeadGroup {
    int z1 = 0, z2 = 0;                      // z2 unused for diagonal groups
    std::shared_ptr<const std::vector<int>> entities;  // atoms or edges
    // per degree l3: expansion map (headed features -> flat H contributions)
    std::vector<std::shared_ptr<const std::vector<ad::SparseTriple>>> maps;
    std::vector<int> head_counts;  // heads per degree
  };
  std::vector<HeadGroup> diag_groups;  // one per element present
  std::vector<HeadGroup> off_groups;   // one per ordered element pair with edges

  // diagonal shell bias: per element, map from (n_shells x 1) into flat H
  struct BiasGroup {
    int z = 0;
    std::shared_ptr<const std::vector<ad::SparseTriple>> map;
  };
  std::vector<BiasGroup> bias_groups;
};

// ---------------------------------------------------------------------------

struct FeatureSet {
  std::vector<Var> deg;  // index l, invalid Var if absent
  int channels = 0;
  int entities = 0;
};

class Model {
public:
  Model(ModelConfig cfg, const data::BasisLayout& layout, std::uint64_t seed)
      : cfg_(cfg), layout_(&layout) {
    cfg_.validate();
    elements_ = layout.elements();
    plans_ = reduce::make_reduction_plans(layout);
    init_params(seed);
  }

  const ModelConfig& config() const { return cfg_; }
  const data::BasisLayout& layout() const { return *layout_; }
  ad::ParameterSet& params() { return params_; }
  const ad::ParameterSet& params() const { return params_; }

  int element_index(int z) const {
    for (size_t i = 0; i < elements_.size(); ++i)
      if (elements_[i] == z) return static_cast<int>(i);
    throw contract_error("Model: unsupported element Z=" + std::to_string(z));
  }

  MoleculeContext make_context(const IVec& z, const Mat& coords) const;

  /// Embedding lookup: one learned 128-channel scalar vector per atom.
  Var injection_embed(Tape& t, const MoleculeContext& ctx) const {
    auto idx = std::make_shared<std::vector<int>>();
    for (int a = 0; a < ctx.graph.n_atoms; ++a) idx->push_back(element_index(ctx.graph.z[a]));
    return t.gather_cols(t.param(params_, "embed.weight"), idx, 1);
  }

  /// Diagonal reduction + per-degree RMS normalization of a recorded matrix.
  FeatureSet reduce_features(Tape& t, Var matrix, const MoleculeContext& ctx) const {
    FeatureSet f;
    f.channels = 0;
    f.entities = ctx.graph.n_atoms;
    const auto& spec = reduce::reduction_spec();
    f.deg.assign(cfg_.lmax + 1, Var{});
    for (int s = 0; s < spec.num_segments(); ++s) {
      int l = spec.segments()[s].l, mul = spec.segments()[s].mul;
      Var raw = t.sparse_linear(matrix, ctx.reduce_maps[s], mul,
                                ctx.graph.n_atoms * (2 * l + 1));
      f.deg[l] = t.rms_normalize_groups(raw, 2 * l + 1);
    }
    return f;
  }

  FeatureSet trans_block(Tape& t, const std::string& branch, const FeatureSet& x,
                         const MoleculeContext& ctx) const;
  FeatureSet merge_features(Tape& t, const FeatureSet& th, const FeatureSet* ts, Var embed,
                            const MoleculeContext& ctx) const;
  FeatureSet conv_layer(Tape& t, int layer, const FeatureSet& x,
                        const MoleculeContext& ctx) const;
  Var assemble_hamiltonian(Tape& t, const std::string& head, const FeatureSet& node,
                           const MoleculeContext& ctx) const;

  /// Records one full application H' = f(H, S, structure); S may be an
  /// invalid Var when the overlap branch is ablated. If `s_head_out` is
  /// non-null the second (overlap) output head is recorded as well.
  Var solver_step_record(Tape& t, Var h_in, Var s_in, const MoleculeContext& ctx,
                         Var* s_head_out = nullptr) const;

  /// Value-level application of one solver step.
  Mat solver_step(const Mat& h, const Mat& s, const MoleculeContext& ctx,
                  Mat* s_head = nullptr) const {
    Tape t;
    Var hv = t.leaf(h);
    Var sv = cfg_.use_overlap_features ? t.leaf(s) : Var{};
    Var s_out{};
    Var out = solver_step_record(t, hv, sv, ctx, s_head ? &s_out : nullptr);
    if (s_head) *s_head = t.val(s_out);
    return t.val(out);
  }

  /// DEQ fixed-point prediction from the identity initial Hamiltonian (or a
  /// caller-provided warm start).
  std::pair<data::AtomBlockMatrix, deq::DeqTrace> predict(const MoleculeContext& ctx, const Mat& s,
                                                          const deq::DeqConfig& deq_cfg,
                                                          const Mat* warm_start = nullptr) const {
    Mat z0 = warm_start ? *warm_start : Mat(Mat::Identity(ctx.ml.total_dim, ctx.ml.total_dim));
    require(z0.rows() == ctx.ml.total_dim && z0.cols() == ctx.ml.total_dim,
            "predict: initial Hamiltonian layout mismatch");
    auto f = [&](const Mat& z) { return solver_step(z, s, ctx); };
    auto [h, trace] = deq::solve_forward(f, std::move(z0), deq_cfg);
    return {data::AtomBlockMatrix{std::move(h)}, std::move(trace)};
  }

private:
  void init_params(std::uint64_t seed);
  Mat uniform_fan_in(Rng& rng, int rows, int cols, double gain = 1.0) {
    double a = gain / std::sqrt(static_cast<double>(cols));
    Mat m(rows, cols);
    for (int j = 0; j < cols; ++j)
      for (int i = 0; i < rows; ++i) m(i, j) = rng.uniform(-a, a);
    return m;
  }

  // path tables (shared across molecules)
  std::shared_ptr<const std::vector<ad::TPPath>> paths_tb1_, paths_tb2_, paths_conv_,
      paths_pair_, paths_pairq_;
  std::vector<double> path_norm_tb1_, path_norm_tb2_, path_norm_pair_, path_norm_pairq_;

  static std::shared_ptr<const std::vector<ad::TPPath>> minimal_paths(
      const std::vector<int>& in_degrees, int out_lmax, std::vector<double>* init_weights);
  static std::shared_ptr<const std::vector<ad::TPPath>> pair_paths(int lmax,
                                                                   std::vector<double>* init);

  FeatureSet gather_feats(Tape& t, const FeatureSet& x,
                          std::shared_ptr<const std::vector<int>> idx) const {
    FeatureSet out;
    out.channels = x.channels;
    out.entities = static_cast<int>(idx->size());
    out.deg.assign(x.deg.size(), Var{});
    for (size_t l = 0; l < x.deg.size(); ++l)
      if (x.deg[l].valid()) out.deg[l] = t.gather_cols(x.deg[l], idx, 2 * static_cast<int>(l) + 1);
    return out;
  }

  FeatureSet linear_feats(Tape& t, const std::string& prefix, const FeatureSet& x) const {
    FeatureSet out;
    out.entities = x.entities;
    out.deg.assign(x.deg.size(), Var{});
    int rows = 0;
    for (size_t l = 0; l < x.deg.size(); ++l)
      if (x.deg[l].valid()) {
        Var w = t.param(params_, prefix + ".l" + std::to_string(l));
        out.deg[l] = t.matmul_colwise(w, x.deg[l]);
        rows = static_cast<int>(params_.at(prefix + ".l" + std::to_string(l)).rows());
      }
    out.channels = rows;
    return out;
  }

  ModelConfig cfg_;
  const data::BasisLayout* layout_;
  std::vector<int> elements_;
  std::map<int, reduce::ReductionPlan> plans_;
  ad::ParameterSet params_;
};

// ---------------------------------------------------------------------------
// paths

inline std::shared_ptr<const std::vector<ad::TPPath>> Model::minimal_paths(
    const std::vector<int>& in_degrees, int out_lmax, std::vector<double>* init_weights) {
  auto paths = std::make_shared<std::vector<ad::TPPath>>();
  std::vector<int> per_l3(out_lmax + 1, 0);
  int widx = 0;
  for (int l3 = 0; l3 <= out_lmax; ++l3)
    for (size_t s = 0; s < in_degrees.size(); ++s) {
      int l1 = in_degrees[s];
      int lf = std::abs(l1 - l3);
      if (lf > out_lmax) continue;  // filter harmonics stop at lmax
      ad::TPPath p;
      p.slot = static_cast<int>(s);
      p.l1 = l1;
      p.lf = lf;
      p.l3 = l3;
      p.weight_index = widx++;
      p.entries = ad::cg_entries(l1, lf, l3);
      paths->push_back(std::move(p));
      per_l3[l3]++;
    }
  if (init_weights) {
    init_weights->clear();
    for (const auto& p : *paths) init_weights->push_back(1.0 / per_l3[p.l3]);
  }
  return paths;
}

inline std::shared_ptr<const std::vector<ad::TPPath>> Model::pair_paths(
    int lmax, std::vector<double>* init) {
  // x_i (degree l1, slot l1) x x_j (degree l2 = |l1 - l3|, slot2 l2) -> l3
  auto paths = std::make_shared<std::vector<ad::TPPath>>();
  std::vector<int> per_l3(lmax + 1, 0);
  int widx = 0;
  for (int l3 = 0; l3 <= lmax; ++l3)
    for (int l1 = 0; l1 <= lmax; ++l1) {
      int l2 = std::abs(l1 - l3);
      if (l2 > lmax) continue;
      ad::TPPath p;
      p.slot = l1;
      p.l1 = l1;
      p.lf = l2;
      p.slot2 = l2;
      p.l3 = l3;
      p.weight_index = widx++;
      p.entries = ad::cg_entries(l1, l2, l3);
      paths->push_back(std::move(p));
      per_l3[l3]++;
    }
  if (init) {
    init->clear();
    for (const auto& p : *paths) init->push_back(1.0 / per_l3[p.l3]);
  }
  return paths;
}

// ---------------------------------------------------------------------------
// initialization

inline void Model::init_params(std::uint64_t seed) {
  const int C = cfg_.hidden_channels;
  Rng rng(seed);

  paths_tb1_ = minimal_paths({0, 1, 2}, cfg_.lmax, &path_norm_tb1_);
  paths_tb2_ = minimal_paths([&] {
    std::vector<int> d;
    for (int l = 0; l <= cfg_.lmax; ++l) d.push_back(l);
    return d;
  }(), cfg_.lmax, &path_norm_tb2_);
  paths_conv_ = paths_tb2_;
  paths_pair_ = pair_paths(cfg_.lmax, &path_norm_pair_);
  paths_pairq_ = paths_tb2_;
  path_norm_pairq_ = path_norm_tb2_;

  params_.add("embed.weight", uniform_fan_in(rng, C, static_cast<int>(elements_.size()), 1.0));

  const auto& rspec = reduce::reduction_spec();
  auto add_path_weights = [&](const std::string& name, const std::vector<double>& init) {
    Mat w(static_cast<int>(init.size()), 1);
    for (size_t i = 0; i < init.size(); ++i) w(static_cast<int>(i), 0) = init[i];
    params_.add(name, std::move(w));
  };

  for (const std::string branch : {"h", "s"}) {
    for (int s = 0; s < rspec.num_segments(); ++s) {
      int l = rspec.segments()[s].l, mul = rspec.segments()[s].mul;
      params_.add("tb." + branch + ".lin_node.l" + std::to_string(l),
                  uniform_fan_in(rng, C, mul));
    }
    add_path_weights("tb." + branch + ".w1", path_norm_tb1_);
    params_.add("tb." + branch + ".att.w", uniform_fan_in(rng, 1, C));
    add_path_weights("tb." + branch + ".w2", path_norm_tb2_);
    for (int l = 0; l <= cfg_.lmax; ++l)
      params_.add("tb." + branch + ".lin_v.l" + std::to_string(l), uniform_fan_in(rng, C, C));
  }

  for (int l = 0; l <= cfg_.lmax; ++l) {
    int rows = cfg_.use_overlap_features ? 2 * C : C;
    if (l == 0) rows += C;  // embedding joins the scalar channel
    params_.add("merge.l" + std::to_string(l), uniform_fan_in(rng, C, rows));
  }

  const int att_hidden = 32, radial_hidden = 64, edge_scal = 16;
  const int att_in = (cfg_.lmax + 1) + edge_scal;
  for (int k = 0; k < cfg_.num_layers; ++k) {
    std::string p = "conv" + std::to_string(k);
    for (int l = 0; l <= cfg_.lmax; ++l) {
      params_.add(p + ".lin_a.l" + std::to_string(l), uniform_fan_in(rng, C, C));
      params_.add(p + ".lin_b.l" + std::to_string(l), uniform_fan_in(rng, C, C));
      params_.add(p + ".lin_out.l" + std::to_string(l), uniform_fan_in(rng, C, C));
    }
    params_.add(p + ".edge_scal.w", uniform_fan_in(rng, edge_scal, C));
    params_.add(p + ".att.w1", uniform_fan_in(rng, att_hidden, att_in));
    params_.add(p + ".att.b1", Mat::Zero(att_hidden, 1));
    params_.add(p + ".att.w2", uniform_fan_in(rng, C, att_hidden));
    params_.add(p + ".att.b2", Mat::Zero(C, 1));
    params_.add(p + ".radial.w1", uniform_fan_in(rng, radial_hidden, cfg_.rbf_count));
    params_.add(p + ".radial.b1", Mat::Zero(radial_hidden, 1));
    // no output bias: zero radial input must inject nothing
    params_.add(p + ".radial.w2",
                uniform_fan_in(rng, static_cast<int>(paths_conv_->size()) * C, radial_hidden));
  }

  add_path_weights("pair.w", path_norm_pair_);
  add_path_weights("pairq.w", path_norm_pairq_);

  // assembly heads; geometry-dependent entries come out O(head_gain)
  const double head_gain = 0.25;
  for (const std::string head : {"h", "s"}) {
    for (int z : elements_) {
      const auto& shells = layout_->shells(z);
      std::vector<int> counts(cfg_.lmax + 1, 0);
      for (const auto& s1 : shells)
        for (const auto& s2 : shells)
          for (int l3 = std::abs(s1.l - s2.l); l3 <= std::min(s1.l + s2.l, cfg_.lmax); ++l3)
            counts[l3]++;
      for (int l3 = 0; l3 <= cfg_.lmax; ++l3)
        if (counts[l3] > 0)
          params_.add("head." + head + ".diag.z" + std::to_string(z) + ".l" + std::to_string(l3),
                      uniform_fan_in(rng, counts[l3], C, head_gain));
      Mat bias(static_cast<int>(shells.size()), 1);
      for (int s = 0; s < bias.rows(); ++s) bias(s, 0) = rng.uniform(-1.2, 1.2);
      params_.add("head." + head + ".diag_bias.z" + std::to_string(z), std::move(bias));
    }
    for (int z1 : elements_)
      for (int z2 : elements_) {
        const auto& sh1 = layout_->shells(z1);
        const auto& sh2 = layout_->shells(z2);
        std::vector<int> counts(cfg_.lmax + 1, 0);
        for (const auto& s1 : sh1)
          for (const auto& s2 : sh2)
            for (int l3 = std::abs(s1.l - s2.l); l3 <= std::min(s1.l + s2.l, cfg_.lmax); ++l3)
              counts[l3]++;
        for (int l3 = 0; l3 <= cfg_.lmax; ++l3)
          if (counts[l3] > 0)
            params_.add("head." + head + ".off.z" + std::to_string(z1) + ".z" +
                            std::to_string(z2) + ".l" + std::to_string(l3),
                        uniform_fan_in(rng, counts[l3], C, head_gain));
      }
  }
}

// ---------------------------------------------------------------------------
// context

inline MoleculeContext Model::make_context(const IVec& z, const Mat& coords) const {
  MoleculeContext ctx;
  ctx.graph = build_graph(z, coords, cfg_);
  ctx.ml = data::MoleculeLayout::build(z, *layout_);
  ctx.sh = std::make_shared<const Mat>(ctx.graph.sh);
  ctx.recv = std::make_shared<const std::vector<int>>(ctx.graph.recv);
  ctx.nbr = std::make_shared<const std::vector<int>>(ctx.graph.nbr);
  const int n = ctx.ml.total_dim;
  const int n_atoms = ctx.graph.n_atoms;

  // reduction maps per degree
  const auto& rspec = reduce::reduction_spec();
  for (int s = 0; s < rspec.num_segments(); ++s) {
    int l = rspec.segments()[s].l, mul = rspec.segments()[s].mul;
    auto map = std::make_shared<std::vector<ad::SparseTriple>>();
    for (int a = 0; a < n_atoms; ++a) {
      const auto& plan = plans_.at(z[a]);
      int seg_off = plan.out_spec.segment_offset(s);
      int seg_len = mul * (2 * l + 1);
      int off = ctx.ml.atom_offset[a];
      for (const auto& tr : plan.triples) {
        if (tr.feature < seg_off || tr.feature >= seg_off + seg_len) continue;
        int local = tr.feature - seg_off;
        int chan = local / (2 * l + 1);
        int m = local % (2 * l + 1);
        int out_col = a * (2 * l + 1) + m;
        map->push_back({out_col * mul + chan, (off + tr.nu) * n + (off + tr.mu), tr.coeff});
      }
    }
    ctx.reduce_maps.push_back(std::move(map));
  }

  // head groups
  auto head_rows = [&](const std::vector<data::Shell>& sh1, const std::vector<data::Shell>& sh2) {
    // head row order per degree: (s1, s2) pairs in shell order
    std::vector<std::vector<std::pair<int, int>>> rows(cfg_.lmax + 1);
    for (int a = 0; a < static_cast<int>(sh1.size()); ++a)
      for (int b = 0; b < static_cast<int>(sh2.size()); ++b)
        for (int l3 = std::abs(sh1[a].l - sh2[b].l); l3 <= std::min(sh1[a].l + sh2[b].l, cfg_.lmax);
             ++l3)
          rows[l3].push_back({a, b});
    return rows;
  };

  for (int zel : elements_) {
    std::vector<int> atoms;
    for (int a = 0; a < n_atoms; ++a)
      if (z[a] == zel) atoms.push_back(a);
    if (atoms.empty()) continue;
    MoleculeContext::HeadGroup grp;
    grp.z1 = zel;
    grp.entities = std::make_shared<const std::vector<int>>(atoms);
    const auto& shells = layout_->shells(zel);
    auto rows = head_rows(shells, shells);
    for (int l3 = 0; l3 <= cfg_.lmax; ++l3) {
      int nh = static_cast<int>(rows[l3].size());
      grp.head_counts.push_back(nh);
      auto map = std::make_shared<std::vector<ad::SparseTriple>>();
      if (nh > 0) {
        for (size_t ai = 0; ai < atoms.size(); ++ai) {
          int a = atoms[ai];
          for (int h = 0; h < nh; ++h) {
            auto [s1, s2] = rows[l3][h];
            const auto& cg = so3::clebsch_gordan(shells[s1].l, shells[s2].l, l3);
            for (const auto& e : cg.nnz) {
              int row = ctx.ml.global_index(a, s1, e.m1 - shells[s1].l);
              int col = ctx.ml.global_index(a, s2, e.m2 - shells[s2].l);
              int in_col = static_cast<int>(ai) * (2 * l3 + 1) + e.m3;
              map->push_back({col * n + row, in_col * nh + h, e.v});
            }
          }
        }
      }
      grp.maps.push_back(std::move(map));
    }
    ctx.diag_groups.push_back(std::move(grp));

    // shell diagonal bias map
    auto bmap = std::make_shared<std::vector<ad::SparseTriple>>();
    for (int a : atoms)
      for (int s = 0; s < static_cast<int>(shells.size()); ++s)
        for (int m = -shells[s].l; m <= shells[s].l; ++m) {
          int i = ctx.ml.global_index(a, s, m);
          bmap->push_back({i * n + i, s, 1.0});
        }
    ctx.bias_groups.push_back({zel, std::move(bmap)});
  }

  for (int z1 : elements_)
    for (int z2 : elements_) {
      std::vector<int> edges;
      for (int e = 0; e < ctx.graph.n_edges; ++e)
        if (z[ctx.graph.recv[e]] == z1 && z[ctx.graph.nbr[e]] == z2) edges.push_back(e);
      if (edges.empty()) continue;
      MoleculeContext::HeadGroup grp;
      grp.z1 = z1;
      grp.z2 = z2;
      grp.entities = std::make_shared<const std::vector<int>>(edges);
      const auto& sh1 = layout_->shells(z1);
      const auto& sh2 = layout_->shells(z2);
      auto rows = head_rows(sh1, sh2);
      for (int l3 = 0; l3 <= cfg_.lmax; ++l3) {
        int nh = static_cast<int>(rows[l3].size());
        grp.head_counts.push_back(nh);
        auto map = std::make_shared<std::vector<ad::SparseTriple>>();
        if (nh > 0) {
          for (size_t ei = 0; ei < edges.size(); ++ei) {
            int i = ctx.graph.recv[edges[ei]];
            int j = ctx.graph.nbr[edges[ei]];
            for (int h = 0; h < nh; ++h) {
              auto [s1, s2] = rows[l3][h];
              const auto& cg = so3::clebsch_gordan(sh1[s1].l, sh2[s2].l, l3);
              for (const auto& e : cg.nnz) {
                int row = ctx.ml.global_index(i, s1, e.m1 - sh1[s1].l);
                int col = ctx.ml.global_index(j, s2, e.m2 - sh2[s2].l);
                int in_col = static_cast<int>(ei) * (2 * l3 + 1) + e.m3;
                map->push_back({col * n + row, in_col * nh + h, e.v});
              }
            }
          }
        }
        grp.maps.push_back(std::move(map));
      }
      ctx.off_groups.push_back(std::move(grp));
    }
  return ctx;
}

// ---------------------------------------------------------------------------
// blocks

inline FeatureSet Model::trans_block(Tape& t, const std::string& branch, const FeatureSet& x,
                                     const MoleculeContext& ctx) const {
  const int C = cfg_.hidden_channels;
  const int E = ctx.graph.n_edges;
  const int N = ctx.graph.n_atoms;
  std::string pre = "tb." + branch;

  FeatureSet node = linear_feats(t, pre + ".lin_node", x);
  FeatureSet xi = gather_feats(t, node, ctx.recv);
  FeatureSet xj = gather_feats(t, node, ctx.nbr);
  std::vector<Var> fe_degs;
  std::vector<int> fe_ls;
  for (size_t l = 0; l < node.deg.size(); ++l)
    if (node.deg[l].valid()) {
      fe_degs.push_back(t.add(xi.deg[l], xj.deg[l]));
      fe_ls.push_back(static_cast<int>(l));
    }

  FeatureSet out;
  out.channels = C;
  out.entities = N;
  out.deg.assign(cfg_.lmax + 1, Var{});
  if (E == 0) {  // isolated atoms: empty neighbor sums
    for (int l = 0; l <= cfg_.lmax; ++l)
      out.deg[l] = t.leaf(Mat::Zero(C, N * (2 * l + 1)));
    return out;
  }

  Var w1 = t.param(params_, pre + ".w1");
  std::vector<Var> h_e(cfg_.lmax + 1);
  for (int l3 = 0; l3 <= cfg_.lmax; ++l3) {
    auto sub = std::make_shared<std::vector<ad::TPPath>>();
    for (const auto& p : *paths_tb1_)
      if (p.l3 == l3) sub->push_back(p);
    h_e[l3] = t.tp_weighted(fe_degs, ctx.sh, sub, w1, l3, C, E);
  }

  Var logits = t.matmul_colwise(t.param(params_, pre + ".att.w"), t.leaky_relu(h_e[0]));
  Var att = t.segment_softmax(logits, ctx.recv, N);

  Var w2 = t.param(params_, pre + ".w2");
  for (int l3 = 0; l3 <= cfg_.lmax; ++l3) {
    auto sub = std::make_shared<std::vector<ad::TPPath>>();
    for (const auto& p : *paths_tb2_)
      if (p.l3 == l3) sub->push_back(p);
    Var v = t.tp_weighted(h_e, ctx.sh, sub, w2, l3, C, E);
    v = t.matmul_colwise(t.param(params_, pre + ".lin_v.l" + std::to_string(l3)), v);
    Var weighted = t.mul_cols_bcast(v, att, 2 * l3 + 1);
    out.deg[l3] = t.segment_sum_cols(weighted, ctx.recv, N, 2 * l3 + 1);
  }
  return out;
}

inline FeatureSet Model::merge_features(Tape& t, const FeatureSet& th, const FeatureSet* ts,
                                        Var embed, const MoleculeContext& ctx) const {
  FeatureSet out;
  out.channels = cfg_.hidden_channels;
  out.entities = ctx.graph.n_atoms;
  out.deg.assign(cfg_.lmax + 1, Var{});
  for (int l = 0; l <= cfg_.lmax; ++l) {
    std::vector<Var> parts = {th.deg[l]};
    if (ts) parts.push_back(ts->deg[l]);
    if (l == 0) parts.push_back(embed);
    Var cat = t.concat_rows(parts);
    out.deg[l] = t.matmul_colwise(t.param(params_, "merge.l" + std::to_string(l)), cat);
  }
  return out;
}

inline FeatureSet Model::conv_layer(Tape& t, int layer, const FeatureSet& x,
                                    const MoleculeContext& ctx) const {
  const int C = cfg_.hidden_channels;
  const int E = ctx.graph.n_edges;
  const int N = ctx.graph.n_atoms;
  std::string p = "conv" + std::to_string(layer);

  FeatureSet out;
  out.channels = C;
  out.entities = N;
  out.deg.assign(cfg_.lmax + 1, Var{});
  if (E == 0) {
    for (int l = 0; l <= cfg_.lmax; ++l)
      out.deg[l] = t.matmul_colwise(t.param(params_, p + ".lin_out.l" + std::to_string(l)), x.deg[l]);
    return out;
  }

  FeatureSet la = linear_feats(t, p + ".lin_a", x);
  FeatureSet lb = linear_feats(t, p + ".lin_b", x);
  FeatureSet ai = gather_feats(t, la, ctx.recv);
  FeatureSet bj = gather_feats(t, lb, ctx.nbr);

  // inner products per degree + a scalar edge channel -> attention MLP
  std::vector<Var> att_parts;
  for (int l = 0; l <= cfg_.lmax; ++l)
    att_parts.push_back(t.colgroup_dot(ai.deg[l], bj.deg[l], 2 * l + 1));
  Var es = t.leaky_relu(
      t.matmul_colwise(t.param(params_, p + ".edge_scal.w"), t.add(ai.deg[0], bj.deg[0])));
  att_parts.push_back(es);
  Var att_in = t.concat_rows(att_parts);
  Var a1 = t.leaky_relu(
      t.add_colvec(t.matmul_colwise(t.param(params_, p + ".att.w1"), att_in), t.param(params_, p + ".att.b1")));
  Var att = t.add_colvec(t.matmul_colwise(t.param(params_, p + ".att.w2"), a1),
                         t.param(params_, p + ".att.b2"));

  // per-path radial functions (no output bias)
  Var rbf = t.leaf(ctx.graph.rbf);
  Var r1 = t.leaky_relu(t.add_colvec(t.matmul_colwise(t.param(params_, p + ".radial.w1"), rbf),
                                     t.param(params_, p + ".radial.b1")));
  Var radial = t.matmul_colwise(t.param(params_, p + ".radial.w2"), r1);
  Var coef = t.rowtile_mul(radial, att, static_cast<int>(paths_conv_->size()));

  FeatureSet xj = gather_feats(t, x, ctx.nbr);
  for (int l3 = 0; l3 <= cfg_.lmax; ++l3) {
    // tp_coef needs path weight_index to address rows of `coef`; keep the
    // global path index so each subset references its own coefficient block
    auto sub = std::make_shared<std::vector<ad::TPPath>>();
    for (size_t pi = 0; pi < paths_conv_->size(); ++pi)
      if ((*paths_conv_)[pi].l3 == l3) {
        ad::TPPath q = (*paths_conv_)[pi];
        q.weight_index = static_cast<int>(pi);
        sub->push_back(std::move(q));
      }
    Var msg = t.tp_coef(xj.deg, ctx.sh, sub, coef, l3, C, E);
    Var agg = t.segment_sum_cols(msg, ctx.recv, N, 2 * l3 + 1);
    out.deg[l3] = t.matmul_colwise(t.param(params_, p + ".lin_out.l" + std::to_string(l3)),
                           t.add(x.deg[l3], agg));
  }
  return out;
}

inline Var Model::assemble_hamiltonian(Tape& t, const std::string& head, const FeatureSet& node,
                                       const MoleculeContext& ctx) const {
  const int C = cfg_.hidden_channels;
  const int E = ctx.graph.n_edges;
  const int n = ctx.ml.total_dim;

  Var acc = t.leaf(Mat::Zero(n, n));

  // on-site blocks + per-shell diagonal bias
  for (const auto& grp : ctx.diag_groups) {
    FeatureSet xg = gather_feats(t, node, grp.entities);
    for (int l3 = 0; l3 <= cfg_.lmax; ++l3) {
      if (grp.head_counts[l3] == 0) continue;
      std::string name =
          "head." + head + ".diag.z" + std::to_string(grp.z1) + ".l" + std::to_string(l3);
      Var headed = t.matmul_colwise(t.param(params_, name), xg.deg[l3]);
      acc = t.add(acc, t.sparse_linear(headed, grp.maps[l3], n, n));
    }
  }
  for (const auto& bg : ctx.bias_groups) {
    Var bias = t.param(params_, "head." + head + ".diag_bias.z" + std::to_string(bg.z));
    acc = t.add(acc, t.sparse_linear(bias, bg.map, n, n));
  }

  // pair blocks from (x_i ox x_j) ox Y(r_ij)
  if (E > 0) {
    FeatureSet xi = gather_feats(t, node, ctx.recv);
    FeatureSet xj = gather_feats(t, node, ctx.nbr);
    Var wp = t.param(params_, "pair.w");
    std::vector<Var> pair_e(cfg_.lmax + 1);
    for (int l3 = 0; l3 <= cfg_.lmax; ++l3) {
      auto sub = std::make_shared<std::vector<ad::TPPath>>();
      for (const auto& p : *paths_pair_)
        if (p.l3 == l3) sub->push_back(p);
      pair_e[l3] = t.tp_pair(xi.deg, xj.deg, sub, wp, l3, C, E);
    }
    Var wq = t.param(params_, "pairq.w");
    std::vector<Var> q_e(cfg_.lmax + 1);
    for (int l3 = 0; l3 <= cfg_.lmax; ++l3) {
      auto sub = std::make_shared<std::vector<ad::TPPath>>();
      for (const auto& p : *paths_pairq_)
        if (p.l3 == l3) sub->push_back(p);
      q_e[l3] = t.tp_weighted(pair_e, ctx.sh, sub, wq, l3, C, E);
    }
    for (const auto& grp : ctx.off_groups) {
      for (int l3 = 0; l3 <= cfg_.lmax; ++l3) {
        if (grp.head_counts[l3] == 0) continue;
        Var qg = t.gather_cols(q_e[l3], grp.entities, 2 * l3 + 1);
        std::string name = "head." + head + ".off.z" + std::to_string(grp.z1) + ".z" +
                           std::to_string(grp.z2) + ".l" + std::to_string(l3);
        Var headed = t.matmul_colwise(t.param(params_, name), qg);
        acc = t.add(acc, t.sparse_linear(headed, grp.maps[l3], n, n));
      }
    }
  }
  return t.symmetrize(acc);
}

inline Var Model::solver_step_record(Tape& t, Var h_in, Var s_in, const MoleculeContext& ctx,
                                     Var* s_head_out) const {
  FeatureSet xh = reduce_features(t, h_in, ctx);
  FeatureSet th = trans_block(t, "h", xh, ctx);
  Var embed = injection_embed(t, ctx);
  FeatureSet merged;
  if (cfg_.use_overlap_features) {
    require(s_in.valid(), "solver_step: overlap matrix required by this configuration");
    FeatureSet xs = reduce_features(t, s_in, ctx);
    FeatureSet ts = trans_block(t, "s", xs, ctx);
    merged = merge_features(t, th, &ts, embed, ctx);
  } else {
    merged = merge_features(t, th, nullptr, embed, ctx);
  }
  FeatureSet x = merged;
  for (int k = 0; k < cfg_.num_layers; ++k) x = conv_layer(t, k, x, ctx);
  if (s_head_out) *s_head_out = assemble_hamiltonian(t, "s", x, ctx);
  return assemble_hamiltonian(t, "h", x, ctx);
}

}  // namespace deqh::net
