#include "certilax/oracle.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "certilax/attack.hpp"
#include "certilax/solver.hpp"

namespace certilax {

namespace {

// Under a fixed activation pattern every layer value is affine in the input,
// so each candidate pattern yields one convex program:
//
//   minimize  q . x   subject to   x in the attack region,  G x <= d
//
// where the rows of (G, d) pin the chosen preactivation signs.  Region holds
// the shared description; the sign rows grow as the pattern tree descends.
struct Region {
  const AttackSpec* spec = nullptr;
  Vector box_lo, box_hi;  // enclosing input box of the attack region
};

int input_rows(const Region& reg) {
  int n = static_cast<int>(reg.box_lo.size());
  return 2 * n + (reg.spec->norm == Norm::L2 ? 1 : 0);
}

// Fills r with every inequality row (input region first, then sign rows) and
// optionally the Jacobian.
void region_rows(const Region& reg, const Matrix& G, const Vector& d,
                 const Vector& x, Vector& r, Matrix* jac) {
  int n = static_cast<int>(x.size());
  int m = input_rows(reg) + static_cast<int>(G.rows());
  r.resize(m);
  if (jac) jac->setZero(m, n);
  int at = 0;
  if (reg.spec->norm == Norm::L2) {
    r(at) = (x - reg.spec->x_hat).squaredNorm() -
            reg.spec->radius * reg.spec->radius;
    if (jac) jac->row(at) = 2.0 * (x - reg.spec->x_hat).transpose();
    ++at;
  }
  for (int j = 0; j < n; ++j) {
    r(at) = reg.box_lo(j) - x(j);
    if (jac) (*jac)(at, j) = -1.0;
    ++at;
  }
  for (int j = 0; j < n; ++j) {
    r(at) = x(j) - reg.box_hi(j);
    if (jac) (*jac)(at, j) = 1.0;
    ++at;
  }
  if (G.rows() > 0) {
    r.segment(at, G.rows()) = G * x - d;
    if (jac) jac->block(at, 0, G.rows(), n) = G;
  }
}

// Feasibility phase: unconstrained minimization of half the squared
// violation.  Convex, so a vanishing gradient certifies the global minimum;
// a positive residual there proves the pattern region empty.
class FeasibilityPhase final : public NlpProblem {
 public:
  FeasibilityPhase(const Region& reg, const Matrix& G, const Vector& d)
      : reg_(&reg), G_(&G), d_(&d) {}
  int num_vars() const override { return static_cast<int>(reg_->box_lo.size()); }
  int num_ineq() const override { return 0; }
  int num_eq() const override { return 0; }
  void eval(const Vector& x, double& f, Vector& g, Vector& h) const override {
    Vector r;
    region_rows(*reg_, *G_, *d_, x, r, nullptr);
    f = 0.5 * r.cwiseMax(0.0).squaredNorm();
    g.resize(0);
    h.resize(0);
  }
  void eval_gradients(const Vector& x, Vector& grad_f, Matrix& jac_g,
                      Matrix& jac_h) const override {
    Vector r;
    Matrix jr;
    region_rows(*reg_, *G_, *d_, x, r, &jr);
    grad_f = jr.transpose() * r.cwiseMax(0.0);
    jac_g.resize(0, num_vars());
    jac_h.resize(0, num_vars());
  }

 private:
  const Region* reg_;
  const Matrix* G_;
  const Vector* d_;
};

// The per-pattern convex program itself.
class PatternProgram final : public NlpProblem {
 public:
  PatternProgram(const Region& reg, const Matrix& G, const Vector& d,
                 const Vector& q)
      : reg_(&reg), G_(&G), d_(&d), q_(&q) {}
  int num_vars() const override { return static_cast<int>(reg_->box_lo.size()); }
  int num_ineq() const override {
    return input_rows(*reg_) + static_cast<int>(G_->rows());
  }
  int num_eq() const override { return 0; }
  void eval(const Vector& x, double& f, Vector& g, Vector& h) const override {
    f = q_->dot(x);
    region_rows(*reg_, *G_, *d_, x, g, nullptr);
    h.resize(0);
  }
  void eval_gradients(const Vector& x, Vector& grad_f, Matrix& jac_g,
                      Matrix& jac_h) const override {
    grad_f = *q_;
    Vector r;
    region_rows(*reg_, *G_, *d_, x, r, &jac_g);
    jac_h.resize(0, num_vars());
  }
  std::vector<int> ineq_blocks() const override {
    std::vector<int> b(num_ineq(), 0);
    for (int i = input_rows(*reg_); i < num_ineq(); ++i) b[i] = 1;
    return b;
  }

 private:
  const Region* reg_;
  const Matrix* G_;
  const Vector* d_;
  const Vector* q_;
};

struct Leaf {
  Matrix G;
  Vector d;
  Vector q;       // objective gradient under the pattern's affine map
  Vector x_feas;  // warm start from the feasibility phase
};

SolveConfig phase1_config() {
  SolveConfig cfg;
  cfg.kkt_tol = 1e-9;
  cfg.feas_tol = 1e-10;
  cfg.max_outer = 25;
  cfg.max_inner = 200;
  return cfg;
}

SolveConfig phase2_config() {
  SolveConfig cfg;
  cfg.kkt_tol = 1e-10;
  cfg.feas_tol = 1e-10;
  cfg.max_outer = 35;
  cfg.max_inner = 300;
  return cfg;
}

// Runs the feasibility phase; on success stores the near-feasible point.
bool pattern_feasible(const Region& reg, const Matrix& G, const Vector& d,
                      double tol, Vector* x_out) {
  FeasibilityPhase phase(reg, G, d);
  Vector x0 = reg.spec->x_hat;
  SolveResult r = solve(phase, x0, Vector(), Vector(), phase1_config());
  Vector rows;
  region_rows(reg, G, d, r.x, rows, nullptr);
  double resid = rows.size() > 0 ? rows.maxCoeff() : 0.0;
  double scale = 1.0 + (d.size() > 0 ? d.cwiseAbs().maxCoeff() : 0.0);
  if (resid > tol * scale) return false;
  if (x_out) *x_out = r.x;
  return true;
}

// Solves one leaf program and converts its solution into a genuinely
// feasible input whose true forward margin is the candidate value.
std::pair<double, Vector> solve_leaf(const MlpNetwork& net, const Region& reg,
                                     const MarginObjective& mobj,
                                     const Leaf& leaf) {
  PatternProgram prog(reg, leaf.G, leaf.d, leaf.q);
  SolveResult r = solve(prog, leaf.x_feas, Vector(), Vector(), phase2_config());
  Vector x = feasible_project(*reg.spec, r.x);
  return {margin_value(net, mobj, x), x};
}

// Exact affine range of row . x + c over the enclosing input box.
std::pair<double, double> affine_range(const Vector& row, double c,
                                       const Vector& lo, const Vector& hi) {
  double a = c, b = c;
  for (Eigen::Index j = 0; j < row.size(); ++j) {
    double w = row(j);
    a += w * (w >= 0.0 ? lo(j) : hi(j));
    b += w * (w >= 0.0 ? hi(j) : lo(j));
  }
  return {a, b};
}

void append_sign_rows(Matrix& G, Vector& d, const Matrix& P, const Vector& p0,
                      const std::vector<int>& units, uint64_t bits) {
  int old = static_cast<int>(G.rows());
  int add = static_cast<int>(units.size());
  G.conservativeResize(old + add, P.cols());
  d.conservativeResize(old + add);
  for (int t = 0; t < add; ++t) {
    int i = units[t];
    bool on = (bits >> t) & 1ull;
    // on:  -(P_i x + p0_i) <= 0      off:  P_i x + p0_i <= 0
    if (on)
      G.row(old + t) = -P.row(i);
    else
      G.row(old + t) = P.row(i);
    d(old + t) = on ? p0(i) : -p0(i);
  }
}

struct DfsContext {
  const MlpNetwork* net;
  const Region* reg;
  const MarginObjective* mobj;
  double tol;
  std::vector<Leaf> leaves;
  long enumerated = 0;
};

// Walks hidden layer k with the affine map x_k = A x + c accumulated so far.
// Units whose preactivation range over the input box has a fixed sign are
// forced; the rest branch.  Every branch is vetted by the feasibility phase
// before descending.
void dfs_layer(DfsContext& ctx, int k, const Matrix& A, const Vector& c,
               const Matrix& G, const Vector& d) {
  const MlpNetwork& net = *ctx.net;
  const int ell = net.depth();
  const Layer& lay = net.hidden(k);
  Matrix P = lay.W * A;
  Vector p0 = lay.W * c + lay.b;
  int m = static_cast<int>(p0.size());

  std::vector<int> free_units;
  uint64_t forced_bits = 0;  // sign of every forced unit, indexed by unit id
  for (int i = 0; i < m; ++i) {
    auto [rlo, rhi] = affine_range(P.row(i), p0(i), ctx.reg->box_lo,
                                   ctx.reg->box_hi);
    if (rlo >= 0.0)
      forced_bits |= 1ull << i;  // stays on; the off branch is empty
    else if (rhi > 0.0)
      free_units.push_back(i);  // genuinely unstable: branch on it
    // otherwise the unit stays off and its bit stays clear
  }

  uint64_t combos = 1ull << free_units.size();
  for (uint64_t bits = 0; bits < combos; ++bits) {
    Matrix Gk = G;
    Vector dk = d;
    std::vector<int> all_units(m);
    uint64_t all_bits = forced_bits;
    for (int i = 0; i < m; ++i) all_units[i] = i;
    for (size_t t = 0; t < free_units.size(); ++t)
      if ((bits >> t) & 1ull) all_bits |= 1ull << free_units[t];
    append_sign_rows(Gk, dk, P, p0, all_units, all_bits);

    if (k == ell - 1) ++ctx.enumerated;
    Vector x_feas;
    if (!pattern_feasible(*ctx.reg, Gk, dk, ctx.tol, &x_feas)) continue;

    // Apply the pattern's diagonal gate to get the next layer's affine map.
    Matrix A2 = P;
    Vector c2 = p0;
    for (int i = 0; i < m; ++i) {
      if (!((all_bits >> i) & 1ull)) {
        A2.row(i).setZero();
        c2(i) = 0.0;
      }
    }
    if (k == ell - 1) {
      Leaf leaf;
      leaf.G = std::move(Gk);
      leaf.d = std::move(dk);
      // Objective under this pattern: w_ell . (A2 x + c2).
      leaf.q = A2.transpose() * ctx.mobj->w_ell;
      leaf.x_feas = x_feas;
      ctx.leaves.push_back(std::move(leaf));
    } else {
      dfs_layer(ctx, k + 1, A2, c2, Gk, dk);
    }
  }
}

Region make_region(const MlpNetwork& net, const AttackSpec& spec) {
  Region reg;
  reg.spec = &spec;
  int n = net.input_dim();
  reg.box_lo.resize(n);
  reg.box_hi.resize(n);
  for (int j = 0; j < n; ++j) {
    reg.box_lo(j) = std::max(0.0, spec.x_hat(j) - spec.radius);
    reg.box_hi(j) = std::min(1.0, spec.x_hat(j) + spec.radius);
  }
  return reg;
}

int check_size(const MlpNetwork& net, const OracleConfig& cfg) {
  int cap = std::min(cfg.max_hidden_neurons, 24);
  int H = net.total_hidden_units();
  if (H > cap)
    throw std::invalid_argument(
        "oracle: network has " + std::to_string(H) +
        " hidden neurons, above the cap of " + std::to_string(cap));
  return H;
}

OracleResult reduce_leaves(const MlpNetwork& net, const Region& reg,
                           const MarginObjective& mobj,
                           const std::vector<Leaf>& leaves, long enumerated) {
  if (leaves.empty())
    throw std::runtime_error(
        "oracle: no feasible activation pattern (the ball center itself "
        "should always yield one)");
  std::vector<std::pair<double, Vector>> results(leaves.size());
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < static_cast<int>(leaves.size()); ++i)
    results[i] = solve_leaf(net, reg, mobj, leaves[i]);

  OracleResult out;
  out.patterns_enumerated = enumerated;
  out.patterns_feasible = static_cast<long>(leaves.size());
  out.phi_exact = std::numeric_limits<double>::infinity();
  for (const auto& [value, x] : results) {
    if (value < out.phi_exact) {
      out.phi_exact = value;
      out.argmin_x = x;
    }
  }
  return out;
}

}  // namespace

OracleResult exact_margin(const MlpNetwork& net, const AttackSpec& spec,
                          const MarginObjective& mobj,
                          const OracleConfig& cfg) {
  validate(net, spec);
  check_size(net, cfg);
  if (spec.radius == 0.0) {
    OracleResult out;
    out.phi_exact = margin_value(net, mobj, spec.x_hat);
    out.argmin_x = spec.x_hat;
    out.patterns_enumerated = 1;
    out.patterns_feasible = 1;
    return out;
  }
  Region reg = make_region(net, spec);
  int n = net.input_dim();

  if (net.depth() == 1) {
    // Linear network: one convex program, no patterns.
    Leaf leaf;
    leaf.G.resize(0, n);
    leaf.d.resize(0);
    leaf.q = mobj.w_ell;
    leaf.x_feas = spec.x_hat;
    OracleResult out = reduce_leaves(net, reg, mobj, {leaf}, 1);
    return out;
  }

  DfsContext ctx;
  ctx.net = &net;
  ctx.reg = &reg;
  ctx.mobj = &mobj;
  ctx.tol = cfg.per_pattern_tol;
  dfs_layer(ctx, 1, Matrix::Identity(n, n), Vector::Zero(n),
            Matrix(0, n), Vector());
  return reduce_leaves(net, reg, mobj, ctx.leaves, ctx.enumerated);
}

OracleResult exact_margin_serial(const MlpNetwork& net, const AttackSpec& spec,
                                 const MarginObjective& mobj,
                                 const OracleConfig& cfg) {
  validate(net, spec);
  int H = check_size(net, cfg);
  if (spec.radius == 0.0) {
    OracleResult out;
    out.phi_exact = margin_value(net, mobj, spec.x_hat);
    out.argmin_x = spec.x_hat;
    out.patterns_enumerated = 1;
    out.patterns_feasible = 1;
    return out;
  }
  Region reg = make_region(net, spec);
  int n = net.input_dim();
  const int ell = net.depth();

  OracleResult out;
  out.phi_exact = std::numeric_limits<double>::infinity();
  out.patterns_enumerated = 1ll << H;
  out.patterns_feasible = 0;
  for (uint64_t sigma = 0; sigma < (1ull << H); ++sigma) {
    // Build the full pattern's affine maps and sign rows in one sweep.
    Matrix A = Matrix::Identity(n, n);
    Vector c = Vector::Zero(n);
    Matrix G(0, n);
    Vector d;
    int bit = 0;
    for (int k = 1; k < ell; ++k) {
      const Layer& lay = net.hidden(k);
      Matrix P = lay.W * A;
      Vector p0 = lay.W * c + lay.b;
      int m = static_cast<int>(p0.size());
      std::vector<int> units(m);
      uint64_t bits = 0;
      for (int i = 0; i < m; ++i) {
        units[i] = i;
        if ((sigma >> (bit + i)) & 1ull) bits |= 1ull << i;
      }
      append_sign_rows(G, d, P, p0, units, bits);
      A = P;
      c = p0;
      for (int i = 0; i < m; ++i) {
        if (!((bits >> i) & 1ull)) {
          A.row(i).setZero();
          c(i) = 0.0;
        }
      }
      bit += m;
    }
    Vector x_feas;
    if (!pattern_feasible(reg, G, d, cfg.per_pattern_tol, &x_feas)) continue;
    ++out.patterns_feasible;
    Leaf leaf;
    leaf.G = std::move(G);
    leaf.d = std::move(d);
    leaf.q = A.transpose() * mobj.w_ell;
    leaf.x_feas = x_feas;
    auto [value, x] = solve_leaf(net, reg, mobj, leaf);
    if (value < out.phi_exact) {
      out.phi_exact = value;
      out.argmin_x = x;
    }
  }
  if (out.patterns_feasible == 0)
    throw std::runtime_error("oracle: no feasible activation pattern");
  return out;
}

double grid_margin(const MlpNetwork& net, const AttackSpec& spec,
                   const MarginObjective& mobj, int grid_n) {
  validate(net, spec);
  if (net.input_dim() > 2)
    throw std::invalid_argument("grid oracle: input dimension must be <= 2");
  if (grid_n < 1) throw std::invalid_argument("grid oracle: grid_n must be >= 1");
  int n = net.input_dim();
  Vector lo(n), hi(n);
  for (int j = 0; j < n; ++j) {
    lo(j) = std::max(0.0, spec.x_hat(j) - spec.radius);
    hi(j) = std::min(1.0, spec.x_hat(j) + spec.radius);
  }
  // The center is always a candidate, so the result is finite even when the
  // grid misses the (possibly tiny) ball entirely.
  double best = margin_value(net, mobj, spec.x_hat);
  double rho2 = spec.radius * spec.radius * (1.0 + 1e-12);

  int nj = n == 2 ? grid_n : 0;
  Vector x(n);
  for (int i = 0; i <= grid_n; ++i) {
    // i/grid_n is identical across nested resolutions (2i)/(2 grid_n), so
    // doubling grid_n visits a superset of the points bit-for-bit.
    x(0) = lo(0) + (hi(0) - lo(0)) * (static_cast<double>(i) / grid_n);
    for (int j = 0; j <= nj; ++j) {
      if (n == 2)
        x(1) = lo(1) + (hi(1) - lo(1)) * (static_cast<double>(j) / grid_n);
      if (spec.norm == Norm::L2 && (x - spec.x_hat).squaredNorm() > rho2)
        continue;
      best = std::min(best, margin_value(net, mobj, x));
    }
  }
  return best;
}

}  // namespace certilax
