#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "certilax/model.hpp"
#include "certilax/solver.hpp"

namespace certilax {

/// Low-rank factorized point.  The homogenizing coordinate u0 is fixed to 1
/// and never stored.  u[i] and V[i] describe layer value i+1 (i = 0 is the
/// input layer); V has rank()-1 columns.
struct BmPoint {
  std::vector<Vector> u;
  std::vector<Matrix> V;
  int rank() const { return V.empty() ? 1 : static_cast<int>(V[0].cols()) + 1; }
};

/// Structured view of the dual variables.  y0 has one entry for the L2 input
/// ball and one entry per input coordinate for Linf.  y01/y02 (valid-input
/// box) exist only for L2; yk1 (activation sign) only for the plain variant;
/// yk (layer bound) only for the full variant; yk2 (preactivation sign) and
/// zk (complementarity equalities) always.  z_pin / z_pin2 multiply the
/// first- and second-moment pin equalities of collapsed coordinates (empty
/// is read as all-zero).  mu <= 0 multiplies the norm safeguard.
struct Multipliers {
  Vector y0;
  Vector y01, y02;
  std::vector<Vector> yk1, yk2, yk, zk;
  Vector z_pin, z_pin2;
  double mu = 0.0;
};

/// A coordinate whose certified interval collapses to a point: every input
/// direction at zero attack radius, and every hidden unit whose activation
/// range degenerates (provably inactive units included).  layer counts value
/// blocks, so 0 is the input block.
struct PinnedCoord {
  int layer;
  int index;
  double value;
};

/// Factorized relaxation of the semi-targeted attack problem.  Builds one of
/// four constraint sets: {L2, Linf} x {plain, full}.  Implements NlpProblem
/// over the flattened variable vector [u_1..u_ell, vec V_1..vec V_ell].
class BmProblem : public NlpProblem {
 public:
  BmProblem(const MlpNetwork& net, AttackSpec spec, MarginObjective mobj,
            PreactivationBounds bounds, bool full, int rank, double R2);

  int num_vars() const override { return num_vars_; }
  int num_ineq() const override { return num_ineq_; }
  int num_eq() const override { return num_eq_; }
  void eval(const Vector& x, double& f, Vector& g, Vector& h) const override;
  void eval_gradients(const Vector& x, Vector& grad_f, Matrix& jac_g,
                      Matrix& jac_h) const override;
  std::vector<int> ineq_blocks() const override { return ineq_blocks_; }
  std::vector<int> eq_blocks() const override { return eq_blocks_; }
  double trace_margin(const Vector& x) const override {
    return R2_ - 1.0 - x.squaredNorm();
  }

  const MlpNetwork& net() const { return *net_; }
  const AttackSpec& spec() const { return spec_; }
  const MarginObjective& mobj() const { return mobj_; }
  const PreactivationBounds& bounds() const { return bounds_; }
  bool full() const { return full_; }
  int rank() const { return rank_; }
  double R2() const { return R2_; }
  /// Collapsed coordinates carrying pin equalities.  Each entry adds two
  /// rows: u = value (first moment) and u^2 + |V row|^2 = value^2 (second
  /// moment).  Without them the degenerate quadratic rows leave the
  /// certifying multipliers divergent and the factor directions flat.
  const std::vector<PinnedCoord>& pins() const { return pins_; }
  BmProblem with_rank(int rank) const;
  BmProblem with_R2(double R2) const;

  Vector pack(const BmPoint& p) const;
  BmPoint unpack(const Vector& x) const;
  Vector pack_multipliers(const Multipliers& m) const;       // inequality part
  Vector pack_eq_multipliers(const Multipliers& m) const;    // equality part
  Multipliers unpack_multipliers(const Vector& y, const Vector& z) const;

 private:
  const MlpNetwork* net_;
  AttackSpec spec_;
  MarginObjective mobj_;
  PreactivationBounds bounds_;
  bool full_;
  int rank_;
  double R2_;

  int ell_;                       // depth
  std::vector<int> n_;            // n_[i] = width of layer value i+1
  std::vector<int> u_off_;        // offset of u_{i+1} in x
  std::vector<int> v_off_;        // offset of vec V_{i+1} in x
  int num_vars_ = 0, num_ineq_ = 0, num_eq_ = 0;

  // Inequality row offsets (-1 when the block is absent in this variant).
  int input_off_ = -1, input_rows_ = 0;
  int box_lo_off_ = -1, box_hi_off_ = -1;
  std::vector<int> sign_off_, preact_off_, elem_off_;
  int trace_row_ = -1;
  std::vector<int> eq_off_;
  int pin_off_ = -1, pin2_off_ = -1;
  std::vector<PinnedCoord> pins_;
  std::vector<int> ineq_blocks_, eq_blocks_;

  friend struct SlackAssembler;
};

/// Safe norm-safeguard radius squared: strictly dominates 1 + |x|^2 for
/// every point of the attack region pushed through the network (uses the
/// enclosing input box and the preactivation ranges).
double auto_trace_bound(const PreactivationBounds& bounds);

BmProblem build_bm(const MlpNetwork& net, const AttackSpec& spec,
                   const MarginObjective& mobj,
                   const PreactivationBounds& bounds, bool full, int rank,
                   std::optional<double> R2 = std::nullopt);

/// Primal initialization: u copies the forward activations of x_start (an
/// attack candidate), V is uniform in [-1e-3, 1e-3].
BmPoint initialize(const BmProblem& prob, const Vector& x_start, uint64_t seed);

struct NpcqReport {
  bool ok = false;
  double worst_preact = 0.0;  // smallest |preactivation| margin over (k, i)
  double worst_vw = 0.0;      // smallest |row of W_k V_k| norm
  std::vector<std::pair<int, int>> offending;  // (layer k, unit i)
};

/// Nondegeneracy test guaranteeing unique certifying multipliers: every
/// hidden unit needs nonzero preactivation and a nonzero row of W_k V_k.
NpcqReport npcq_check(const BmProblem& prob, const BmPoint& point);

struct SlackReport {
  Matrix S;
  double z0 = 0.0;
  double lambda_min = 0.0;  // smallest eigenvalue minus a 1e-9 cushion
  double eps_feas = 0.0;    // max(0, -lambda_min)
  Vector xi;                // unit eigenvector of the smallest eigenvalue
};

/// Dual slack matrix for the problem's variant, with z0 recovered from the
/// first-order condition in the fixed u0 coordinate.
SlackReport assemble_slack(const BmProblem& prob, const BmPoint& point,
                           const Multipliers& mult);

/// Sound lower bound on the attack margin from any nonnegative multipliers:
/// w0 + z0 + R^2 min(0, lambda_min).
double dual_lower_bound(const SlackReport& report, double R2, double w0);

/// Clamp multipliers onto the dual cone (y >= 0, mu <= 0).
Multipliers sanitize_multipliers(const Multipliers& m);

namespace testing {
/// Deliberately corrupts the slack assembly (flips the sign of the objective
/// row) so integrity checks can prove they detect it.
extern bool inject_slack_sign_flip;
}  // namespace testing

}  // namespace certilax
