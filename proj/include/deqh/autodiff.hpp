#pragma once

// Minimal reverse-mode differentiation engine over dense real matrices.
// A Tape records one forward computation; backward() replays it in reverse
// with exact hand-written vector-Jacobian rules per primitive. Tapes support
// repeated backward sweeps with fresh seeds, which is what the DEQ backward
// solve needs.
//
// Feature matrices follow one layout convention throughout: a degree-l
// feature over N entities (atoms or edges) is a (channels x N*(2l+1))
// matrix whose column e*(2l+1) + (m+l) holds all channels of entity e,
// component m.

#include <fstream>
#include <functional>
#include <json.hpp>
#include <memory>

#include "deqh/core.hpp"
#include "deqh/irreps.hpp"

namespace deqh::ad {

class Tape;

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// ---------------------------------------------------------------------------
// Parameters

class ParameterSet {
public:
  struct Entry {
    std::string name;
    Mat value;
    bool trainable = true;
  };

  Mat& add(const std::string& name, Mat init, bool trainable = true) {
    require(index_.find(name) == index_.end(), "ParameterSet: duplicate name " + name);
    index_[name] = static_cast<int>(entries_.size());
    entries_.push_back({name, std::move(init), trainable});
    return entries_.back().value;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Mat& at(const std::string& name) {
    auto it = index_.find(name);
    require(it != index_.end(), "ParameterSet: unknown name " + name);
    return entries_[it->second].value;
  }
  const Mat& at(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), "ParameterSet: unknown name " + name);
    return entries_[it->second].value;
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  size_t size() const { return entries_.size(); }

  /// Container file: magic, u64 manifest length, JSON manifest
  /// (name/rows/cols/offset/trainable), then the raw little-endian float64
  /// payload in manifest order (column-major within each parameter).
  void save(const std::string& path) const;
  static ParameterSet load(const std::string& path);

private:
  std::vector<Entry> entries_;
  std::map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Sparse maps and CG path plans shared by ops

struct SparseTriple {
  int out;  // flat col-major index into the output
  int in;   // flat col-major index into the input
  double c;
};

struct TPEntry {
  int m1, m2, m3;  // zero-based
  double c;
};

/// One CG coupling path (l1 x l_f -> l3). `slot` indexes the first operand's
/// degree list; `slot2` indexes the second operand's list where that operand
/// is a Var list (tp_pair) rather than the constant harmonic stack.
struct TPPath {
  int slot;
  int l1, lf, l3;
  int weight_index;  // row in the per-path weight/coefficient operand
  int slot2 = -1;
  std::vector<TPEntry> entries;
};

inline std::vector<TPEntry> cg_entries(int l1, int l2, int l3) {
  std::vector<TPEntry> out;
  for (const auto& e : so3::clebsch_gordan(l1, l2, l3).nnz) out.push_back({e.m1, e.m2, e.m3, e.v});
  return out;
}

inline int sh_row(int l, int m_zero_based) { return l * l + m_zero_based; }

// ---------------------------------------------------------------------------
// Tape

class Tape {
public:
  Var leaf(Mat v) { return push(std::move(v), nullptr); }

  /// Leaf bound to a named parameter; grads are harvested by name.
  Var param(const ParameterSet& ps, const std::string& name) {
    Var v = leaf(ps.at(name));
    param_nodes_.emplace_back(name, v.id);
    return v;
  }

  const Mat& val(Var v) const { return nodes_[check(v)].val; }

  const Mat& grad(Var v) const {
    const Node& n = nodes_[check(v)];
    if (!n.has_grad) {
      zero_buf_ = Mat::Zero(n.val.rows(), n.val.cols());
      return zero_buf_;
    }
    return n.grad;
  }

  /// Reverse sweep from `out` seeded with `seed`; clears previous grads.
  void backward(Var out, const Mat& seed) {
    Node& o = nodes_[check(out)];
    require(seed.rows() == o.val.rows() && seed.cols() == o.val.cols(),
            "backward: seed shape mismatch");
    for (auto& n : nodes_) n.has_grad = false;
    o.grad = seed;
    o.has_grad = true;
    for (int id = out.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.has_grad && n.back) n.back(*this, id);
    }
  }

  /// Named gradients of every trainable parameter recorded on this tape.
  std::map<std::string, Mat> param_grads(const ParameterSet& ps) const {
    std::map<std::string, Mat> out;
    for (const auto& e : ps.entries())
      if (e.trainable) out[e.name] = Mat::Zero(e.value.rows(), e.value.cols());
    for (const auto& [name, id] : param_nodes_) {
      const Node& n = nodes_[id];
      auto it = out.find(name);
      if (it != out.end() && n.has_grad) it->second += n.grad;
    }
    return out;
  }

  size_t num_nodes() const { return nodes_.size(); }

  bool recorded(const std::string& param_name) const {
    for (const auto& [name, _] : param_nodes_)
      if (name == param_name) return true;
    return false;
  }

  // ---- primitives ---------------------------------------------------------

  Var add(Var a, Var b) {
    same_shape(a, b, "add");
    return push(val(a) + val(b), [a, b](Tape& t, int id) {
      t.accum(a, t.nodes_[id].grad);
      t.accum(b, t.nodes_[id].grad);
    });
  }

  Var sub(Var a, Var b) {
    same_shape(a, b, "sub");
    return push(val(a) - val(b), [a, b](Tape& t, int id) {
      t.accum(a, t.nodes_[id].grad);
      t.accum(b, -t.nodes_[id].grad);
    });
  }

  Var scale(Var a, double c) {
    return push(c * val(a), [a, c](Tape& t, int id) { t.accum(a, c * t.nodes_[id].grad); });
  }

  Var cmul(Var a, Var b) {
    same_shape(a, b, "cmul");
    return push(val(a).cwiseProduct(val(b)), [a, b](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      t.accum(a, g.cwiseProduct(t.val(b)));
      t.accum(b, g.cwiseProduct(t.val(a)));
    });
  }

  Var matmul(Var a, Var b) {
    require(val(a).cols() == val(b).rows(), "matmul: inner dimension mismatch");
    return push(val(a) * val(b), [a, b](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      t.accum(a, g * t.val(b).transpose());
      t.accum(b, t.val(a).transpose() * g);
    });
  }

  /// matmul evaluated column by column (gemv); the result of each output
  /// column is then independent of the positions of the other columns, which
  /// matmul's blocked kernel does not guarantee at every shape.
  Var matmul_colwise(Var a, Var b) {
    require(val(a).cols() == val(b).rows(), "matmul_colwise: inner dimension mismatch");
    const Mat& w = val(a);
    const Mat& x = val(b);
    Mat out(w.rows(), x.cols());
    for (Eigen::Index k = 0; k < x.cols(); ++k) out.col(k).noalias() = w * x.col(k);
    return push(std::move(out), [a, b](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      const Mat& w = t.val(a);
      const Mat& x = t.val(b);
      Mat da = Mat::Zero(w.rows(), w.cols());
      Mat db(x.rows(), x.cols());
      for (Eigen::Index k = 0; k < x.cols(); ++k) {
        da.noalias() += g.col(k) * x.col(k).transpose();
        db.col(k).noalias() = w.transpose() * g.col(k);
      }
      t.accum(a, da);
      t.accum(b, db);
    });
  }

  /// a + column vector b broadcast over columns.
  Var add_colvec(Var a, Var b) {
    require(val(b).cols() == 1 && val(b).rows() == val(a).rows(), "add_colvec: shape mismatch");
    return push(val(a).colwise() + Vec(val(b).col(0)), [a, b](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      t.accum(a, g);
      t.accum(b, g.rowwise().sum());
    });
  }

  Var leaky_relu(Var a, double slope = 0.01) {
    Mat out = val(a).unaryExpr([slope](double x) { return x > 0.0 ? x : slope * x; });
    return push(std::move(out), [a, slope](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      Mat mask = t.val(a).unaryExpr([slope](double x) { return x > 0.0 ? 1.0 : slope; });
      t.accum(a, g.cwiseProduct(mask));
    });
  }

  Var abs(Var a) {
    return push(val(a).cwiseAbs(), [a](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      Mat sgn = t.val(a).unaryExpr([](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
      t.accum(a, g.cwiseProduct(sgn));
    });
  }

  Var sum_all(Var a) {
    Mat out(1, 1);
    out(0, 0) = val(a).sum();
    return push(std::move(out), [a](Tape& t, int id) {
      double g = t.nodes_[id].grad(0, 0);
      t.accum_expr(a, [g](Mat& dst) { dst.array() += g; });
    });
  }

  /// Elementwise sqrt; inputs must be nonnegative (guarded at 1e-300).
  Var sqrt_op(Var a) {
    Mat out = val(a).cwiseMax(0.0).cwiseSqrt();
    Var r = push(std::move(out), nullptr);
    nodes_[r.id].back = [a, r](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      Mat denom = 2.0 * t.val(r).cwiseMax(1e-150);
      t.accum(a, g.cwiseQuotient(denom));
    };
    return r;
  }

  /// Column gather with group size g: output group k is input group idx[k].
  Var gather_cols(Var a, std::shared_ptr<const std::vector<int>> idx, int group) {
    const Mat& x = val(a);
    Mat out(x.rows(), static_cast<Eigen::Index>(idx->size()) * group);
    for (size_t k = 0; k < idx->size(); ++k)
      out.middleCols(static_cast<Eigen::Index>(k) * group, group) =
          x.middleCols(static_cast<Eigen::Index>((*idx)[k]) * group, group);
    return push(std::move(out), [a, idx, group](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      t.accum_expr(a, [&](Mat& dst) {
        for (size_t k = 0; k < idx->size(); ++k)
          dst.middleCols(static_cast<Eigen::Index>((*idx)[k]) * group, group) +=
              g.middleCols(static_cast<Eigen::Index>(k) * group, group);
      });
    });
  }

  /// Column scatter-add with group size g: output group seg[k] accumulates
  /// input group k; output has n_segments groups.
  Var segment_sum_cols(Var a, std::shared_ptr<const std::vector<int>> seg, int n_segments,
                       int group) {
    const Mat& x = val(a);
    Mat out = Mat::Zero(x.rows(), static_cast<Eigen::Index>(n_segments) * group);
    for (size_t k = 0; k < seg->size(); ++k)
      out.middleCols(static_cast<Eigen::Index>((*seg)[k]) * group, group) +=
          x.middleCols(static_cast<Eigen::Index>(k) * group, group);
    return push(std::move(out), [a, seg, group](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      t.accum_expr(a, [&](Mat& dst) {
        for (size_t k = 0; k < seg->size(); ++k)
          dst.middleCols(static_cast<Eigen::Index>(k) * group, group) +=
              g.middleCols(static_cast<Eigen::Index>((*seg)[k]) * group, group);
      });
    });
  }

  /// Row-wise softmax across the columns of each segment (neighbor set),
  /// with max-subtraction stabilization. Empty segments are simply absent.
  Var segment_softmax(Var a, std::shared_ptr<const std::vector<int>> seg, int n_segments) {
    const Mat& x = val(a);
    require(static_cast<size_t>(x.cols()) == seg->size(), "segment_softmax: column/segment mismatch");
    std::vector<std::vector<int>> groups(n_segments);
    for (size_t k = 0; k < seg->size(); ++k) groups[(*seg)[k]].push_back(static_cast<int>(k));
    Mat out(x.rows(), x.cols());
    for (const auto& cols : groups) {
      if (cols.empty()) continue;
      for (Eigen::Index r = 0; r < x.rows(); ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int c : cols) mx = std::max(mx, x(r, c));
        double z = 0.0;
        for (int c : cols) z += std::exp(x(r, c) - mx);
        for (int c : cols) out(r, c) = std::exp(x(r, c) - mx) / z;
      }
    }
    Var res = push(std::move(out), nullptr);
    auto groups_sp = std::make_shared<std::vector<std::vector<int>>>(std::move(groups));
    nodes_[res.id].back = [a, res, groups_sp](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      const Mat& y = t.val(res);
      Mat dx = Mat::Zero(g.rows(), g.cols());
      for (const auto& cols : *groups_sp) {
        if (cols.empty()) continue;
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          double s = 0.0;
          for (int c : cols) s += g(r, c) * y(r, c);
          for (int c : cols) dx(r, c) = y(r, c) * (g(r, c) - s);
        }
      }
      t.accum(a, dx);
    };
    return res;
  }

  /// Per column-group RMS normalization over all rows*group entries, with a
  /// 1e-8 floor; unit-RMS groups pass through unchanged.
  Var rms_normalize_groups(Var a, int group) {
    const Mat& x = val(a);
    require(x.cols() % group == 0, "rms_normalize_groups: columns not divisible by group");
    int ng = static_cast<int>(x.cols()) / group;
    const double eps = 1e-8;
    Mat out(x.rows(), x.cols());
    auto scales = std::make_shared<std::vector<double>>(ng);
    for (int k = 0; k < ng; ++k) {
      auto blk = x.middleCols(static_cast<Eigen::Index>(k) * group, group);
      double n = static_cast<double>(blk.size());
      double rms = std::sqrt(blk.squaredNorm() / n);
      (*scales)[k] = 1.0 / std::max(rms, eps);
      out.middleCols(static_cast<Eigen::Index>(k) * group, group) = blk * (*scales)[k];
    }
    return push(std::move(out), [a, group, scales, eps](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      const Mat& x = t.val(a);
      Mat dx(x.rows(), x.cols());
      int ng = static_cast<int>(x.cols()) / group;
      for (int k = 0; k < ng; ++k) {
        auto xb = x.middleCols(static_cast<Eigen::Index>(k) * group, group);
        auto gb = g.middleCols(static_cast<Eigen::Index>(k) * group, group);
        double s = (*scales)[k];
        double n = static_cast<double>(xb.size());
        if (s < 1.0 / eps - 1e-6) {  // active branch: out = x / rms
          double inner = (xb.array() * gb.array()).sum();
          dx.middleCols(static_cast<Eigen::Index>(k) * group, group) =
              s * gb - (s * s * s * inner / n) * xb;
        } else {  // floored branch: out = x / eps
          dx.middleCols(static_cast<Eigen::Index>(k) * group, group) = s * gb;
        }
      }
      t.accum(a, dx);
    });
  }

  Var concat_rows(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_rows: empty input");
    Eigen::Index rows = 0, cols = val(parts[0]).cols();
    for (Var p : parts) {
      require(val(p).cols() == cols, "concat_rows: column mismatch");
      rows += val(p).rows();
    }
    Mat out(rows, cols);
    Eigen::Index r0 = 0;
    for (Var p : parts) {
      out.middleRows(r0, val(p).rows()) = val(p);
      r0 += val(p).rows();
    }
    auto ps = std::make_shared<std::vector<Var>>(parts);
    return push(std::move(out), [ps](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      Eigen::Index r0 = 0;
      for (Var p : *ps) {
        t.accum(p, g.middleRows(r0, t.val(p).rows()));
        r0 += t.val(p).rows();
      }
    });
  }

  Var slice_rows(Var a, int r0, int nrows) {
    require(r0 >= 0 && r0 + nrows <= val(a).rows(), "slice_rows: out of range");
    return push(val(a).middleRows(r0, nrows), [a, r0, nrows](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      t.accum_expr(a, [&](Mat& dst) { dst.middleRows(r0, nrows) += g; });
    });
  }

  /// Multiply each column group of a (group size g) by the matching column of
  /// w; w has either the same rows as a (per-channel) or one row (scalar).
  Var mul_cols_bcast(Var a, Var w, int group) {
    const Mat& x = val(a);
    const Mat& ww = val(w);
    require(x.cols() == ww.cols() * group, "mul_cols_bcast: column mismatch");
    bool scalar = ww.rows() == 1;
    require(scalar || ww.rows() == x.rows(), "mul_cols_bcast: row mismatch");
    Mat out(x.rows(), x.cols());
    for (Eigen::Index k = 0; k < ww.cols(); ++k)
      for (int j = 0; j < group; ++j)
        out.col(k * group + j) =
            scalar ? Vec(x.col(k * group + j) * ww(0, k))
                   : Vec(x.col(k * group + j).cwiseProduct(ww.col(k)));
    return push(std::move(out), [a, w, group, scalar](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      const Mat& x = t.val(a);
      const Mat& ww = t.val(w);
      Mat dx(x.rows(), x.cols());
      Mat dw = Mat::Zero(ww.rows(), ww.cols());
      for (Eigen::Index k = 0; k < ww.cols(); ++k)
        for (int j = 0; j < group; ++j) {
          if (scalar) {
            dx.col(k * group + j) = g.col(k * group + j) * ww(0, k);
            dw(0, k) += g.col(k * group + j).dot(x.col(k * group + j));
          } else {
            dx.col(k * group + j) = g.col(k * group + j).cwiseProduct(ww.col(k));
            dw.col(k) += g.col(k * group + j).cwiseProduct(x.col(k * group + j));
          }
        }
      t.accum(a, dx);
      t.accum(w, dw);
    });
  }

  /// Per column-group inner product: out(0, k) = sum over rows and the k-th
  /// group of columns of a .* b. Realizes the per-edge, per-degree feature
  /// inner products of the attention filter.
  Var colgroup_dot(Var a, Var b, int group) {
    same_shape(a, b, "colgroup_dot");
    const Mat& x = val(a);
    require(x.cols() % group == 0, "colgroup_dot: columns not divisible by group");
    Eigen::Index ng = x.cols() / group;
    Mat out(1, ng);
    const Mat& y = val(b);
    for (Eigen::Index k = 0; k < ng; ++k) {
      double s = 0.0;
      for (int j = 0; j < group; ++j) s += x.col(k * group + j).dot(y.col(k * group + j));
      out(0, k) = s;
    }
    return push(std::move(out), [a, b, group](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      const Mat& x = t.val(a);
      const Mat& y = t.val(b);
      Mat da(x.rows(), x.cols()), db(x.rows(), x.cols());
      for (Eigen::Index k = 0; k < g.cols(); ++k)
        for (int j = 0; j < group; ++j) {
          da.col(k * group + j) = g(0, k) * y.col(k * group + j);
          db.col(k * group + j) = g(0, k) * x.col(k * group + j);
        }
      t.accum(a, da);
      t.accum(b, db);
    });
  }

  /// out.block(p*C, :) = r.block(p*C, :) .* a for every path p; the factored
  /// (per-path radial) x (per-channel attention) coefficient of the conv layer.
  Var rowtile_mul(Var r, Var a, int n_paths) {
    const Mat& rr = val(r);
    const Mat& aa = val(a);
    require(rr.rows() == aa.rows() * n_paths, "rowtile_mul: row mismatch");
    require(rr.cols() == aa.cols(), "rowtile_mul: column mismatch");
    Eigen::Index c = aa.rows();
    Mat out(rr.rows(), rr.cols());
    for (int p = 0; p < n_paths; ++p)
      out.middleRows(p * c, c) = rr.middleRows(p * c, c).cwiseProduct(aa);
    return push(std::move(out), [r, a, n_paths, c](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      const Mat& rr = t.val(r);
      const Mat& aa = t.val(a);
      Mat dr(rr.rows(), rr.cols());
      Mat da = Mat::Zero(aa.rows(), aa.cols());
      for (int p = 0; p < n_paths; ++p) {
        dr.middleRows(p * c, c) = g.middleRows(p * c, c).cwiseProduct(aa);
        da += g.middleRows(p * c, c).cwiseProduct(rr.middleRows(p * c, c));
      }
      t.accum(r, dr);
      t.accum(a, da);
    });
  }

  /// General sparse linear map between flattened (col-major) matrices.
  Var sparse_linear(Var a, std::shared_ptr<const std::vector<SparseTriple>> map, int out_rows,
                    int out_cols) {
    const Mat& x = val(a);
    Mat out = Mat::Zero(out_rows, out_cols);
    const double* xd = x.data();
    double* od = out.data();
    for (const auto& t : *map) od[t.out] += t.c * xd[t.in];
    return push(std::move(out), [a, map](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      const double* gd = g.data();
      t.accum_expr(a, [&](Mat& dst) {
        double* dd = dst.data();
        for (const auto& tr : *map) dd[tr.in] += tr.c * gd[tr.out];
      });
    });
  }

  Var symmetrize(Var a) {
    require(val(a).rows() == val(a).cols(), "symmetrize: non-square input");
    return push(0.5 * (val(a) + val(a).transpose()), [a](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      t.accum(a, 0.5 * (g + g.transpose()));
    });
  }

  // ---- CG tensor products -------------------------------------------------
  //
  // xs[slot] are degree-l1 features (C x E*(2l1+1)); sh is the constant edge
  // harmonic stack (25 x E). Each op builds one output degree l3.

  /// uvu product with per-path scalar weights: out += w_p * CG * (x, sh).
  Var tp_weighted(const std::vector<Var>& xs, std::shared_ptr<const Mat> sh,
                  std::shared_ptr<const std::vector<TPPath>> paths, Var weights, int l3,
                  int channels, int n_edges) {
    Mat out = Mat::Zero(channels, static_cast<Eigen::Index>(n_edges) * (2 * l3 + 1));
    const Mat& w = val(weights);
    for (const auto& p : *paths) {
      int d1 = 2 * p.l1 + 1, d3 = 2 * p.l3 + 1;
      const Mat& x = val(xs[p.slot]);
      double wp = w(p.weight_index, 0);
      for (int e = 0; e < n_edges; ++e)
        for (const auto& en : p.entries) {
          double shv = (*sh)(sh_row(p.lf, en.m2), e);
          if (shv == 0.0) continue;
          out.col(static_cast<Eigen::Index>(e) * d3 + en.m3) +=
              (wp * en.c * shv) * x.col(static_cast<Eigen::Index>(e) * d1 + en.m1);
        }
    }
    auto xs_sp = std::make_shared<std::vector<Var>>(xs);
    return push(std::move(out), [xs_sp, sh, paths, weights, l3, n_edges](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      const Mat& w = t.val(weights);
      Mat dw = Mat::Zero(w.rows(), w.cols());
      std::vector<Mat> dxs(xs_sp->size());
      for (size_t s = 0; s < xs_sp->size(); ++s)
        dxs[s] = Mat::Zero(t.val((*xs_sp)[s]).rows(), t.val((*xs_sp)[s]).cols());
      for (const auto& p : *paths) {
        int d1 = 2 * p.l1 + 1, d3 = 2 * p.l3 + 1;
        const Mat& x = t.val((*xs_sp)[p.slot]);
        double wp = w(p.weight_index, 0);
        double dwp = 0.0;
        for (int e = 0; e < n_edges; ++e)
          for (const auto& en : p.entries) {
            double shv = (*sh)(sh_row(p.lf, en.m2), e);
            if (shv == 0.0) continue;
            auto gcol = g.col(static_cast<Eigen::Index>(e) * d3 + en.m3);
            auto xcol = x.col(static_cast<Eigen::Index>(e) * d1 + en.m1);
            dxs[p.slot].col(static_cast<Eigen::Index>(e) * d1 + en.m1) += (wp * en.c * shv) * gcol;
            dwp += en.c * shv * xcol.dot(gcol);
          }
        dw(p.weight_index, 0) += dwp;
      }
      for (size_t s = 0; s < xs_sp->size(); ++s) t.accum((*xs_sp)[s], dxs[s]);
      t.accum(weights, dw);
    });
  }

  /// uvu product with a per-(path, channel, edge) coefficient operand, as
  /// produced by rowtile_mul(radial, attention). Coefficient rows are
  /// addressed by each path's weight_index, so a subset of a global path
  /// list can be applied against the full coefficient matrix.
  Var tp_coef(const std::vector<Var>& xs, std::shared_ptr<const Mat> sh,
              std::shared_ptr<const std::vector<TPPath>> paths, Var coef, int l3, int channels,
              int n_edges) {
    const Mat& cf = val(coef);
    for (const auto& p : *paths)
      require((p.weight_index + 1) * channels <= cf.rows(),
              "tp_coef: coefficient rows too small for a path's weight_index");
    Mat out = Mat::Zero(channels, static_cast<Eigen::Index>(n_edges) * (2 * l3 + 1));
    {
      Vec tmp(channels);
      for (const auto& p : *paths) {
        int d1 = 2 * p.l1 + 1, d3 = 2 * p.l3 + 1;
        const Mat& x = val(xs[p.slot]);
        for (int e = 0; e < n_edges; ++e) {
          auto cvec =
              cf.col(e).segment(static_cast<Eigen::Index>(p.weight_index) * channels, channels);
          for (const auto& en : p.entries) {
            double shv = (*sh)(sh_row(p.lf, en.m2), e);
            if (shv == 0.0) continue;
            tmp = cvec.cwiseProduct(x.col(static_cast<Eigen::Index>(e) * d1 + en.m1));
            out.col(static_cast<Eigen::Index>(e) * d3 + en.m3) += (en.c * shv) * tmp;
          }
        }
      }
    }
    auto xs_sp = std::make_shared<std::vector<Var>>(xs);
    return push(std::move(out), [xs_sp, sh, paths, coef, channels, n_edges](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      const Mat& cf = t.val(coef);
      Mat dcf = Mat::Zero(cf.rows(), cf.cols());
      std::vector<Mat> dxs(xs_sp->size());
      for (size_t s = 0; s < xs_sp->size(); ++s)
        dxs[s] = Mat::Zero(t.val((*xs_sp)[s]).rows(), t.val((*xs_sp)[s]).cols());
      for (const auto& p : *paths) {
        int d1 = 2 * p.l1 + 1, d3 = 2 * p.l3 + 1;
        const Mat& x = t.val((*xs_sp)[p.slot]);
        for (int e = 0; e < n_edges; ++e) {
          auto cvec =
              cf.col(e).segment(static_cast<Eigen::Index>(p.weight_index) * channels, channels);
          auto dcvec =
              dcf.col(e).segment(static_cast<Eigen::Index>(p.weight_index) * channels, channels);
          for (const auto& en : p.entries) {
            double shv = (*sh)(sh_row(p.lf, en.m2), e);
            if (shv == 0.0) continue;
            auto gcol = g.col(static_cast<Eigen::Index>(e) * d3 + en.m3);
            auto xcol = x.col(static_cast<Eigen::Index>(e) * d1 + en.m1);
            dxs[p.slot].col(static_cast<Eigen::Index>(e) * d1 + en.m1) +=
                (en.c * shv) * gcol.cwiseProduct(cvec);
            dcvec += (en.c * shv) * gcol.cwiseProduct(xcol);
          }
        }
      }
      for (size_t s = 0; s < xs_sp->size(); ++s) t.accum((*xs_sp)[s], dxs[s]);
      t.accum(coef, dcf);
    });
  }

  /// Elementwise-channel pair product (x_i ox x_j) with per-path weights;
  /// both operand lists hold edge features of equal channel count.
  Var tp_pair(const std::vector<Var>& xi, const std::vector<Var>& xj,
              std::shared_ptr<const std::vector<TPPath>> paths, Var weights, int l3, int channels,
              int n_edges) {
    // p.lf indexes the xj degree here; sh is not involved.
    Mat out = Mat::Zero(channels, static_cast<Eigen::Index>(n_edges) * (2 * l3 + 1));
    const Mat& w = val(weights);
    for (const auto& p : *paths) {
      int d1 = 2 * p.l1 + 1, d2 = 2 * p.lf + 1, d3 = 2 * p.l3 + 1;
      const Mat& a = val(xi[p.slot]);
      const Mat& b = val(xj[p.slot2]);
      double wp = w(p.weight_index, 0);
      for (int e = 0; e < n_edges; ++e)
        for (const auto& en : p.entries)
          out.col(static_cast<Eigen::Index>(e) * d3 + en.m3) +=
              (wp * en.c) * a.col(static_cast<Eigen::Index>(e) * d1 + en.m1)
                                .cwiseProduct(b.col(static_cast<Eigen::Index>(e) * d2 + en.m2));
    }
    auto xi_sp = std::make_shared<std::vector<Var>>(xi);
    auto xj_sp = std::make_shared<std::vector<Var>>(xj);
    return push(std::move(out), [xi_sp, xj_sp, paths, weights, n_edges](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      const Mat& w = t.val(weights);
      Mat dw = Mat::Zero(w.rows(), w.cols());
      std::vector<Mat> dxi(xi_sp->size()), dxj(xj_sp->size());
      for (size_t s = 0; s < xi_sp->size(); ++s) {
        dxi[s] = Mat::Zero(t.val((*xi_sp)[s]).rows(), t.val((*xi_sp)[s]).cols());
        dxj[s] = Mat::Zero(t.val((*xj_sp)[s]).rows(), t.val((*xj_sp)[s]).cols());
      }
      for (const auto& p : *paths) {
        int d1 = 2 * p.l1 + 1, d2 = 2 * p.lf + 1, d3 = 2 * p.l3 + 1;
        const Mat& a = t.val((*xi_sp)[p.slot]);
        const Mat& b = t.val((*xj_sp)[p.slot2]);
        double wp = w(p.weight_index, 0);
        double dwp = 0.0;
        for (int e = 0; e < n_edges; ++e)
          for (const auto& en : p.entries) {
            auto gcol = g.col(static_cast<Eigen::Index>(e) * d3 + en.m3);
            auto acol = a.col(static_cast<Eigen::Index>(e) * d1 + en.m1);
            auto bcol = b.col(static_cast<Eigen::Index>(e) * d2 + en.m2);
            dxi[p.slot].col(static_cast<Eigen::Index>(e) * d1 + en.m1) +=
                (wp * en.c) * gcol.cwiseProduct(bcol);
            dxj[p.slot2].col(static_cast<Eigen::Index>(e) * d2 + en.m2) +=
                (wp * en.c) * gcol.cwiseProduct(acol);
            dwp += en.c * gcol.dot(acol.cwiseProduct(bcol));
          }
        dw(p.weight_index, 0) += dwp;
      }
      for (size_t s = 0; s < xi_sp->size(); ++s) {
        t.accum((*xi_sp)[s], dxi[s]);
        t.accum((*xj_sp)[s], dxj[s]);
      }
      t.accum(weights, dw);
    });
  }

private:
  struct Node {
    Mat val;
    Mat grad;
    bool has_grad = false;
    std::function<void(Tape&, int)> back;
  };

  int check(Var v) const {
    require(v.id >= 0 && v.id < static_cast<int>(nodes_.size()), "Tape: invalid Var");
    return v.id;
  }

  Var push(Mat v, std::function<void(Tape&, int)> back) {
    Node n;
    n.val = std::move(v);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  void same_shape(Var a, Var b, const char* op) {
    require(val(a).rows() == val(b).rows() && val(a).cols() == val(b).cols(),
            std::string(op) + ": shape mismatch");
  }

  void accum(Var v, const Mat& g) {
    Node& n = nodes_[check(v)];
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  template <typename F>
  void accum_expr(Var v, F&& f) {
    Node& n = nodes_[check(v)];
    if (!n.has_grad) {
      n.grad = Mat::Zero(n.val.rows(), n.val.cols());
      n.has_grad = true;
    }
    f(n.grad);
  }

  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, int>> param_nodes_;
  mutable Mat zero_buf_;
};

// ---------------------------------------------------------------------------
// Convenience wrappers

/// Gradients of a recorded scalar w.r.t. every trainable parameter.
/// Parameters never recorded on the tape get a zero gradient and a warning.
inline std::map<std::string, Mat> grad(Tape& tape, Var loss, const ParameterSet& ps) {
  require(tape.val(loss).size() == 1, "grad: loss is not a scalar");
  tape.backward(loss, Mat::Ones(1, 1));
  for (const auto& e : ps.entries())
    if (e.trainable && !tape.recorded(e.name))
      std::fprintf(stderr, "deqh: warning: parameter '%s' not recorded on tape; zero gradient\n",
                   e.name.c_str());
  return tape.param_grads(ps);
}

/// (d out / d in)^T v for one recorded map.
inline Mat vjp(Tape& tape, Var out, Var in, const Mat& cotangent) {
  tape.backward(out, cotangent);
  return tape.grad(in);
}

// ---------------------------------------------------------------------------
// ParameterSet container I/O

inline void ParameterSet::save(const std::string& path) const {
  nlohmann::json manifest = nlohmann::json::array();
  std::int64_t offset = 0;
  for (const auto& e : entries_) {
    manifest.push_back({{"name", e.name},
                        {"rows", e.value.rows()},
                        {"cols", e.value.cols()},
                        {"offset", offset},
                        {"trainable", e.trainable}});
    offset += e.value.size();
  }
  std::string mstr = nlohmann::json{{"params", manifest}}.dump();
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "ParameterSet::save: cannot open " + path);
  f.write("DEQHPS01", 8);
  std::uint64_t mlen = mstr.size();
  f.write(reinterpret_cast<const char*>(&mlen), 8);
  f.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
  for (const auto& e : entries_)
    f.write(reinterpret_cast<const char*>(e.value.data()),
            static_cast<std::streamsize>(e.value.size() * sizeof(double)));
}

inline ParameterSet ParameterSet::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "ParameterSet::load: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  require(f.gcount() == 8 && std::string(magic, 8) == "DEQHPS01",
          "ParameterSet::load: bad magic");
  std::uint64_t mlen = 0;
  f.read(reinterpret_cast<char*>(&mlen), 8);
  require(f.good(), "ParameterSet::load: truncated manifest length");
  std::string mstr(mlen, '\0');
  f.read(mstr.data(), static_cast<std::streamsize>(mlen));
  require(f.good(), "ParameterSet::load: truncated manifest");
  nlohmann::json manifest = nlohmann::json::parse(mstr);
  ParameterSet ps;
  for (const auto& e : manifest.at("params")) {
    Eigen::Index rows = e.at("rows").get<Eigen::Index>();
    Eigen::Index cols = e.at("cols").get<Eigen::Index>();
    Mat m(rows, cols);
    f.read(reinterpret_cast<char*>(m.data()),
           static_cast<std::streamsize>(m.size() * sizeof(double)));
    require(f.gcount() == static_cast<std::streamsize>(m.size() * sizeof(double)),
            "ParameterSet::load: truncated payload");
    ps.add(e.at("name").get<std::string>(), std::move(m), e.at("trainable").get<bool>());
  }
  return ps;
}

}  // namespace deqh::ad
