#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "certilax/model.hpp"

namespace certilax {

/// Smooth nonlinear program  min f(x)  s.t.  g(x) <= 0,  h(x) = 0.
/// Implementations provide values and dense Jacobians; rows of g and h are
/// grouped into blocks that share one penalty parameter each.
class NlpProblem {
 public:
  virtual ~NlpProblem() = default;
  virtual int num_vars() const = 0;
  virtual int num_ineq() const = 0;
  virtual int num_eq() const = 0;
  virtual void eval(const Vector& x, double& f, Vector& g, Vector& h) const = 0;
  virtual void eval_gradients(const Vector& x, Vector& grad_f, Matrix& jac_g,
                              Matrix& jac_h) const = 0;
  /// Block id per inequality / equality row (consecutive, starting at 0).
  virtual std::vector<int> ineq_blocks() const;
  virtual std::vector<int> eq_blocks() const;
  /// Positive margin of the norm-ball safeguard at x, if the problem has one
  /// (used only for reporting).
  virtual double trace_margin(const Vector&) const { return 1.0; }
};

struct SolveConfig {
  double kkt_tol = 1e-7;
  double feas_tol = 1e-8;
  int max_outer = 60;
  int max_inner = 400;
  double penalty_init = 10.0;
  double penalty_growth = 5.0;
  uint64_t seed = 0;
  std::string trace_path;  // append one line per outer iteration when set
};

struct KktReport {
  double stationarity = 0.0;    // | grad f + Jg'y + Jh'z |
  double primal_feas = 0.0;     // max(max(g,0), |h|) sup norm
  double complementarity = 0.0; // | y .* g | sup norm
  bool inside_trace = true;     // strict interior of the norm safeguard
  bool converged = false;
};

struct OuterIterate {
  int inner_iters = 0;
  double f = 0.0;
  double feas = 0.0;
  double max_penalty = 0.0;
};

struct SolveResult {
  Vector x;
  Vector y;  // inequality multipliers, >= 0 by construction
  Vector z;  // equality multipliers
  double f = 0.0;
  KktReport report;
  std::vector<OuterIterate> history;
};

/// Augmented Lagrangian method with a bounded-memory quasi-Newton inner
/// loop.  Warm starts accept initial multiplier estimates.
SolveResult solve(const NlpProblem& prob, const Vector& x0, const Vector& y0,
                  const Vector& z0, const SolveConfig& cfg);

/// KKT residuals of (x, y, z) for the given problem; the same numbers the
/// solver reports, recomputable after the fact.
KktReport kkt_residuals(const NlpProblem& prob, const Vector& x,
                        const Vector& y, const Vector& z, double kkt_tol,
                        double feas_tol);

}  // namespace certilax
