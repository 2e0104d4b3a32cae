#pragma once

#include <cstdint>
#include <vector>

#include "certilax/model.hpp"

namespace certilax {

struct PgdConfig {
  double step_size = -1.0;  // <= 0 selects radius/10
  int iterations = 200;
  int restarts = 5;  // first restart starts at x_hat, the rest random
  uint64_t seed = 0;
  bool record_history = false;
};

/// Project x onto the attack region (ball of the spec's norm around x_hat,
/// intersected with [0,1]^n).  For L2 the radial projection runs first and
/// the clip second; clipping never increases the distance to x_hat, so the
/// result is feasible.
Vector feasible_project(const AttackSpec& spec, const Vector& x);

struct PgdResult {
  Vector x_adv;
  double phi_ub = 0.0;
  int iterations_used = 0;
  /// Best margin seen so far, per gradient step (only when record_history).
  std::vector<double> incumbent_history;
};

/// Projected gradient descent on the margin.  Returns the best (lowest)
/// margin over all restarts and iterations; deterministic for a fixed seed
/// regardless of thread count.
PgdResult pgd_upper_bound(const MlpNetwork& net, const AttackSpec& spec,
                          const MarginObjective& mobj, const PgdConfig& cfg);

}  // namespace certilax
