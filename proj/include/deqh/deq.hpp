#pragma once

// Deep-equilibrium solving: damped / Anderson-accelerated forward fixed-point
// iteration, the fixed-point backward solve g = J^T g + y, and the two-step
// implicit gradient that stitches them onto a recorded tape.

#include <json.hpp>

#include "deqh/autodiff.hpp"
#include "deqh/core.hpp"

namespace deqh::deq {

struct DeqConfig {
  int max_iter_fwd = 40;
  int max_iter_bwd = 40;
  double tol = 1e-6;      // relative Frobenius residual
  double damping = 1.0;   // 1.0 = plain iteration
  int anderson_memory = 0;  // 0 disables Anderson

  void validate() const {
    require(max_iter_fwd > 0 && max_iter_bwd > 0, "DeqConfig: non-positive iteration budget");
    require(tol > 0.0, "DeqConfig: non-positive tolerance");
    require(damping > 0.0 && damping <= 1.0, "DeqConfig: damping outside (0,1]");
    require(anderson_memory >= 0, "DeqConfig: negative anderson memory");
  }

  /// Truncated regime used for the QH9-style experiments (3 iterations both ways).
  static DeqConfig qh9_regime() {
    DeqConfig c;
    c.max_iter_fwd = 3;
    c.max_iter_bwd = 3;
    return c;
  }
  /// Long-budget regime used for the MD17-style experiments.
  static DeqConfig md17_regime() { return DeqConfig{}; }

  nlohmann::json to_json() const {
    return {{"max_iter_fwd", max_iter_fwd},
            {"max_iter_bwd", max_iter_bwd},
            {"tol", tol},
            {"damping", damping},
            {"anderson_memory", anderson_memory}};
  }
  static DeqConfig from_json(const nlohmann::json& j) {
    DeqConfig c;
    c.max_iter_fwd = j.value("max_iter_fwd", c.max_iter_fwd);
    c.max_iter_bwd = j.value("max_iter_bwd", c.max_iter_bwd);
    c.tol = j.value("tol", c.tol);
    c.damping = j.value("damping", c.damping);
    c.anderson_memory = j.value("anderson_memory", c.anderson_memory);
    c.validate();
    return c;
  }
};

struct DeqTrace {
  std::vector<double> residual_norms;
  int iterations_used = 0;
  bool converged = false;

  void to_csv(std::ostream& os) const {
    os << "step,residual\n";
    char buf[32];
    for (size_t i = 0; i < residual_norms.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", residual_norms[i]);
      os << (i + 1) << ',' << buf << '\n';
    }
  }
};

/// Divergence (NaN/Inf in an iterate) aborts with the trace so far attached.
struct deq_divergence : divergence_error {
  DeqTrace trace;
  explicit deq_divergence(const std::string& msg, DeqTrace t)
      : divergence_error(msg), trace(std::move(t)) {}
};

/// Least-squares Anderson mixing over the last `m` (iterate, residual) pairs
/// with ridge 1e-8; falls back to the damped step if the normal system
/// degenerates. History vectors are ordered oldest first.
inline Mat anderson_update(const std::vector<Mat>& z_hist, const std::vector<Mat>& g_hist, int m,
                           double damping = 1.0, double ridge = 1e-8) {
  require(m >= 1, "anderson_update: memory must be >= 1");
  require(!z_hist.empty() && z_hist.size() == g_hist.size(),
          "anderson_update: empty or mismatched history");
  const Mat& zk = z_hist.back();
  const Mat& gk = g_hist.back();
  int avail = static_cast<int>(z_hist.size());
  int mk = std::min(m, avail) - 1;  // number of difference columns
  if (mk < 1) return zk + damping * gk;

  Eigen::Index n = zk.size();
  Mat dz(n, mk), dg(n, mk);
  for (int i = 0; i < mk; ++i) {
    int k = avail - mk - 1 + i;
    dz.col(i) = Eigen::Map<const Vec>((z_hist[k + 1] - z_hist[k]).eval().data(), n);
    dg.col(i) = Eigen::Map<const Vec>((g_hist[k + 1] - g_hist[k]).eval().data(), n);
  }
  Mat normal = dg.transpose() * dg;
  normal.diagonal().array() += ridge;
  Vec rhs = dg.transpose() * Eigen::Map<const Vec>(gk.data(), n);
  Eigen::LDLT<Mat> ldlt(normal);
  Vec gamma = ldlt.solve(rhs);
  if (ldlt.info() != Eigen::Success || !gamma.allFinite()) return zk + damping * gk;

  Vec step = Eigen::Map<const Vec>(zk.data(), n) +
             damping * Eigen::Map<const Vec>(gk.data(), n) - (dz + damping * dg) * gamma;
  return Eigen::Map<const Mat>(step.data(), zk.rows(), zk.cols());
}

/// Iterates z <- (1-damping) z + damping f(z) (or the Anderson update) until
/// the relative residual |f(z)-z| / (|z|+1e-12) drops below tol or the
/// budget runs out. Returns the last iterate and the trace.
template <typename F>
std::pair<Mat, DeqTrace> solve_forward(F&& f, Mat z0, const DeqConfig& cfg) {
  cfg.validate();
  DeqTrace trace;
  Mat z = std::move(z0);
  std::vector<Mat> z_hist, g_hist;
  for (int it = 0; it < cfg.max_iter_fwd; ++it) {
    Mat fz = f(z);
    require(fz.rows() == z.rows() && fz.cols() == z.cols(), "solve_forward: f changed shape");
    if (!fz.allFinite()) {
      trace.iterations_used = it + 1;
      throw deq_divergence("solve_forward: NaN/Inf in iterate " + std::to_string(it + 1), trace);
    }
    Mat res = fz - z;
    double r = res.norm() / (z.norm() + 1e-12);
    trace.residual_norms.push_back(r);
    trace.iterations_used = it + 1;
    if (cfg.anderson_memory > 0) {
      z_hist.push_back(z);
      g_hist.push_back(res);
      if (static_cast<int>(z_hist.size()) > cfg.anderson_memory + 1) {
        z_hist.erase(z_hist.begin());
        g_hist.erase(g_hist.begin());
      }
      z = anderson_update(z_hist, g_hist, cfg.anderson_memory, cfg.damping);
    } else {
      z = (1.0 - cfg.damping) * z + cfg.damping * fz;
    }
    if (r <= cfg.tol) {
      trace.converged = true;
      break;
    }
  }
  return {std::move(z), std::move(trace)};
}

/// Solves g = J^T g + y by plain fixed-point iteration; `vjp_at_fixed_point`
/// must evaluate v -> (df/dz*)^T v.
template <typename VJP>
std::pair<Mat, DeqTrace> solve_backward(VJP&& vjp_at_fixed_point, const Mat& y,
                                        const DeqConfig& cfg) {
  cfg.validate();
  DeqTrace trace;
  Mat g = y;
  double ynorm = y.norm() + 1e-12;
  for (int it = 0; it < cfg.max_iter_bwd; ++it) {
    Mat jtg = vjp_at_fixed_point(g);
    require(jtg.rows() == y.rows() && jtg.cols() == y.cols(),
            "solve_backward: vjp changed shape");
    Mat next = jtg + y;
    if (!next.allFinite()) {
      trace.iterations_used = it + 1;
      throw deq_divergence("solve_backward: NaN/Inf in iterate " + std::to_string(it + 1), trace);
    }
    double r = (next - g).norm() / ynorm;
    trace.residual_norms.push_back(r);
    trace.iterations_used = it + 1;
    g = std::move(next);
    if (r <= cfg.tol) {
      trace.converged = true;
      break;
    }
  }
  return {std::move(g), std::move(trace)};
}

struct DeqGradResult {
  std::map<std::string, Mat> param_grads;
  std::vector<Mat> input_grads;
  DeqTrace backward_trace;
};

/// Two-step implicit gradient on a tape that records one application
/// f(z*, x): solve g = J^T g + upstream, then push g through the remaining
/// inputs. `extra_inputs` selects leaves (e.g. the context x) whose
/// cotangents are returned alongside the parameter gradients.
inline DeqGradResult deq_grad(ad::Tape& tape, ad::Var z_leaf, ad::Var f_out, const Mat& upstream,
                              const DeqConfig& cfg, const ad::ParameterSet& params,
                              const std::vector<ad::Var>& extra_inputs = {}) {
  require(tape.val(f_out).rows() == upstream.rows() && tape.val(f_out).cols() == upstream.cols(),
          "deq_grad: upstream shape mismatch");
  auto vjp_z = [&](const Mat& v) {
    tape.backward(f_out, v);
    return Mat(tape.grad(z_leaf));
  };
  auto [g, trace] = solve_backward(vjp_z, upstream, cfg);
  tape.backward(f_out, g);
  DeqGradResult out;
  out.param_grads = tape.param_grads(params);
  for (ad::Var v : extra_inputs) out.input_grads.push_back(tape.grad(v));
  out.backward_trace = std::move(trace);
  return out;
}

}  // namespace deqh::deq
