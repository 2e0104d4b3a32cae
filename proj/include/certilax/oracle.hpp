#pragma once

#include "certilax/model.hpp"

namespace certilax {

struct OracleConfig {
  int max_hidden_neurons = 16;  // refuse larger nets (hard cap 24)
  double per_pattern_tol = 1e-9;
};

struct OracleResult {
  double phi_exact = 0.0;
  Vector argmin_x;
  long patterns_enumerated = 0;
  long patterns_feasible = 0;
};

/// Exact attack margin by activation-pattern enumeration.  Walks the pattern
/// tree layer by layer, pruning subtrees whose sign constraints are already
/// infeasible, then solves one convex program per surviving pattern (leaf
/// solves run in parallel).
OracleResult exact_margin(const MlpNetwork& net, const AttackSpec& spec,
                          const MarginObjective& mobj,
                          const OracleConfig& cfg = {});

/// Serial reference: enumerates every one of the 2^H patterns without
/// pruning or threads.  Kept as the ground truth for the fast path.
OracleResult exact_margin_serial(const MlpNetwork& net, const AttackSpec& spec,
                                 const MarginObjective& mobj,
                                 const OracleConfig& cfg = {});

/// Margin minimum over a regular grid of feasible points (inputs of
/// dimension <= 2 only).  Grids nest when grid_n doubles, so refinement is
/// monotone.
double grid_margin(const MlpNetwork& net, const AttackSpec& spec,
                   const MarginObjective& mobj, int grid_n);

}  // namespace certilax
