#include "certilax/staircase.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "certilax/rng.hpp"

namespace certilax {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double point_norm(const BmPoint& p) {
  double s = 0.0;
  for (const auto& u : p.u) s += u.squaredNorm();
  return std::sqrt(s);
}

bool finite_iterate(const SolveResult& res) {
  if (!std::isfinite(res.f) || !res.x.allFinite()) return false;
  if (res.y.size() > 0 && !res.y.allFinite()) return false;
  if (res.z.size() > 0 && !res.z.allFinite()) return false;
  return true;
}

PgdConfig class_pgd_config(const StaircaseConfig& cfg, int target) {
  PgdConfig p = cfg.pgd;
  p.seed = derive_seed(cfg.seed, 0x70676401ull + static_cast<uint64_t>(target));
  return p;
}

// Least-squares multiplier refit at a fixed primal point.  Complementarity
// pins inactive inequality rows at zero, so stationarity is linear in the
// remaining multipliers; solving it directly gives sharper duals than the
// penalty-method estimates.  Negative inequality weights are dropped from
// the active set and the system re-solved, so the result stays in the dual
// cone and the refit bound is sound no matter how inexact the point is.
//
// When the stationarity solution still leaves the slack matrix indefinite,
// the system is usually underdetermined in exactly the directions that
// matter, so eigenvector cuts are appended: the slack matrix is affine in
// the multipliers at a fixed point, hence S(y, z) xi = 0 is a linear row
// block, and requiring it along the most negative eigendirections steers
// the solution toward the positive-semidefinite representative of the same
// near-stationary duals.  Every candidate is scored by its sound dual
// bound and the best one is returned, so cuts can only sharpen the refit.
void refit_multipliers(const BmProblem& prob, const Vector& x,
                       const BmPoint& point, Vector& y_out, Vector& z_out) {
  const int n = prob.num_vars();
  const int m = prob.num_ineq();
  const int p = prob.num_eq();
  double f;
  Vector g, h;
  prob.eval(x, f, g, h);
  Vector grad_f;
  Matrix jg, jh;
  prob.eval_gradients(x, grad_f, jg, jh);

  const double gscale = 1.0 + (m > 0 ? g.cwiseAbs().maxCoeff() : 0.0);
  std::vector<int> base_active;
  for (int i = 0; i < m; ++i)
    if (g(i) >= -1e-6 * gscale) base_active.push_back(i);

  // Affine decomposition of the slack report over the packed multipliers:
  // S(y, z) = S0 + sum_t mult_t * Sc[t] and likewise z0.  Probed lazily:
  // most rounds never need a cut.
  Matrix S0;
  std::vector<Matrix> Sc;
  std::vector<double> z0c;
  auto load_slopes = [&] {
    if (!Sc.empty()) return;
    auto slack_at = [&](const Vector& y, const Vector& z) {
      return assemble_slack(prob, point, prob.unpack_multipliers(y, z));
    };
    SlackReport r0 = slack_at(Vector::Zero(m), Vector::Zero(p));
    S0 = r0.S;
    Sc.resize(m + p);
    z0c.resize(m + p);
    for (int t = 0; t < m + p; ++t) {
      Vector ey = Vector::Zero(m), ez = Vector::Zero(p);
      (t < m ? ey(t) : ez(t - m)) = 1.0;
      SlackReport rt = slack_at(ey, ez);
      Sc[t] = rt.S - S0;
      z0c[t] = rt.z0 - r0.z0;
    }
  };

  // Stationarity least squares, optionally augmented with weighted
  // S xi = 0 row blocks, re-solved with negative active-set weights
  // dropped as above.
  auto solve_ls = [&](const std::vector<Vector>& cuts,
                      const std::vector<double>& wts, Vector& y_fit,
                      Vector& z_fit) {
    const int ns = cuts.empty() ? 0 : static_cast<int>(cuts.front().size());
    std::vector<int> active = base_active;
    for (int pass = 0;; ++pass) {
      const int na = static_cast<int>(active.size());
      const int rows = n + ns * static_cast<int>(cuts.size());
      Matrix A = Matrix::Zero(rows, na + p);
      Vector rhs(rows);
      rhs.head(n) = -grad_f;
      for (int a = 0; a < na; ++a)
        A.col(a).head(n) = jg.row(active[a]).transpose();
      for (int e = 0; e < p; ++e)
        A.col(na + e).head(n) = jh.row(e).transpose();
      for (size_t c = 0; c < cuts.size(); ++c) {
        const int at = n + static_cast<int>(c) * ns;
        rhs.segment(at, ns) = -wts[c] * (S0 * cuts[c]);
        for (int a = 0; a < na; ++a)
          A.col(a).segment(at, ns) = wts[c] * (Sc[active[a]] * cuts[c]);
        for (int e = 0; e < p; ++e)
          A.col(na + e).segment(at, ns) = wts[c] * (Sc[m + e] * cuts[c]);
      }
      Vector sol = A.completeOrthogonalDecomposition().solve(rhs);

      std::vector<int> keep;
      for (int a = 0; a < na; ++a)
        if (sol(a) >= 0.0) keep.push_back(active[a]);
      if (static_cast<int>(keep.size()) == na || pass >= 4) {
        y_fit = Vector::Zero(m);
        z_fit = Vector::Zero(p);
        for (int a = 0; a < na; ++a) y_fit(active[a]) = std::max(0.0, sol(a));
        for (int e = 0; e < p; ++e) z_fit(e) = sol(na + e);
        return;
      }
      active = std::move(keep);
    }
  };

  const double R2 = prob.R2();
  const double w0 = prob.mobj().w0;
  auto score = [&](const Vector& yv, const Vector& zv, SlackReport& rep) {
    rep = assemble_slack(prob, point, prob.unpack_multipliers(yv, zv));
    return dual_lower_bound(rep, R2, w0);
  };

  std::vector<Vector> cuts;
  std::vector<double> wts;
  Vector y_cur, z_cur;
  solve_ls(cuts, wts, y_cur, z_cur);
  y_out = y_cur;
  z_out = z_cur;
  if (!y_cur.allFinite() || !z_cur.allFinite()) return;
  SlackReport rep;
  double lb_best = score(y_cur, z_cur, rep);
  double eps_best = rep.eps_feas;
  // Later cuts carry growing weight: early ones mostly reshuffle slack mass
  // between eigendirections, and the escalation forces the trade toward
  // satisfying the accumulated cut set.
  double w = 1.0;
  for (int it = 0; it < 24 && rep.eps_feas > 1e-8; ++it) {
    load_slopes();
    cuts.push_back(rep.xi);
    wts.push_back(w);
    w = std::min(2.0 * w, 256.0);
    solve_ls(cuts, wts, y_cur, z_cur);
    if (!y_cur.allFinite() || !z_cur.allFinite()) break;
    double lb = score(y_cur, z_cur, rep);
    if (lb > lb_best) {
      lb_best = lb;
      eps_best = rep.eps_feas;
      y_out = y_cur;
      z_out = z_cur;
    }
  }
  if (eps_best <= 1e-8) return;

  // Projected subgradient polish.  The dual bound is concave in the
  // multipliers (z0 is affine, lambda_min is concave), so a Polyak-stepped
  // ascent from the best cut solution recovers a feasible -- or nearly
  // feasible -- dual certificate whenever one exists near the stationary
  // duals; the best-bound iterate is kept, so this phase only sharpens.
  load_slopes();
  Vector m_cur(m + p);
  m_cur.head(m) = y_out;
  m_cur.tail(p) = z_out;
  const double target = f + w0;
  for (int it = 0; it < 300; ++it) {
    Vector yv = m_cur.head(m).cwiseMax(0.0);
    Vector zv = m_cur.tail(p);
    SlackReport rp;
    double lb = score(yv, zv, rp);
    if (lb > lb_best) {
      lb_best = lb;
      y_out = yv;
      z_out = zv;
    }
    Vector sub(m + p);
    for (int t = 0; t < m + p; ++t)
      sub(t) = z0c[t] +
               (rp.lambda_min < 0.0 ? R2 * rp.xi.dot(Sc[t] * rp.xi) : 0.0);
    double nn = sub.squaredNorm();
    if (nn < 1e-24) break;
    double step = std::min(std::max(0.0, target - lb) / nn, 1.0) /
                  (1.0 + 0.05 * it);
    if (step <= 0.0) break;
    m_cur += step * sub;
    m_cur.head(m) = m_cur.head(m).cwiseMax(0.0);
  }
}

void check_config(const StaircaseConfig& cfg) {
  if (cfg.r_init < 2 || cfg.r_init > cfg.r_max)
    throw std::invalid_argument("staircase: need 2 <= r_init <= r_max");
}

// One class's full rank ladder.  pgd_pre lets the caller hand in an already
// computed attack (same derived seed, so the result is identical either way).
ClassCertificate certify_class_impl(const MlpNetwork& net,
                                    const AttackSpec& spec,
                                    const StaircaseConfig& cfg,
                                    const PgdResult* pgd_pre) {
  validate(net, spec);
  check_config(cfg);
  ClassCertificate cert;
  cert.target_class = spec.target_class;

  MarginObjective mobj =
      margin_objective(net, spec.true_class, spec.target_class);
  BoundsOptions bopts;
  bopts.backward_linear = cfg.backward_linear_bounds;
  PreactivationBounds bounds = interval_bounds(net, spec, bopts);
  cert.phi_lb_baseline = baseline_margin_bound(net, spec, bounds, bopts);

  PgdResult pgd =
      pgd_pre ? *pgd_pre
              : pgd_upper_bound(net, spec, mobj,
                                class_pgd_config(cfg, spec.target_class));
  cert.phi_ub = pgd.phi_ub;

  double R2 = auto_trace_bound(bounds);
  // A zero radius collapses the feasible set to the forward trace, a rank-one
  // point.  Extra factor columns only add flat directions there (nothing but
  // a degenerate quadratic row forces them to zero), which stalls the solver,
  // so the ladder starts at rank one instead of cfg.r_init.
  int r = spec.radius == 0.0 ? 1 : cfg.r_init;
  BmPoint point;
  {
    BmProblem first = build_bm(net, spec, mobj, bounds, cfg.full_variant, r, R2);
    point = initialize(
        first, pgd.x_adv,
        derive_seed(cfg.seed, 0x696e6974ull + static_cast<uint64_t>(spec.target_class)));
  }
  Vector y_warm, z_warm;

  for (;;) {
    BmProblem prob = build_bm(net, spec, mobj, bounds, cfg.full_variant, r, R2);
    SolveResult res = solve(prob, prob.pack(point), y_warm, z_warm, cfg.solver);

    // The dual bound presumes the iterate sits strictly inside the norm
    // safeguard; if it touches, double R and re-solve (a few times at most).
    int doublings = 0;
    while (finite_iterate(res) && prob.trace_margin(res.x) <= 0.0 &&
           doublings < 3) {
      R2 *= 2.0;
      prob = prob.with_R2(R2);
      res = solve(prob, res.x, res.y, res.z, cfg.solver);
      ++doublings;
    }

    if (!finite_iterate(res)) {
      // Numerical failure: report the sentinel, keep diagnostics gathered so
      // far.  Every previously recorded round is still listed in rounds.
      cert.phi_lb = kNegInf;
      cert.lb_computed = false;
      cert.certified = false;
      break;
    }

    point = prob.unpack(res.x);
    Multipliers mult =
        sanitize_multipliers(prob.unpack_multipliers(res.y, res.z));
    SlackReport rep = assemble_slack(prob, point, mult);
    double phi_lb = dual_lower_bound(rep, R2, mobj.w0);
    // The escape direction stays tied to the solver's own multipliers; the
    // refit below only sharpens the reported bound.
    Vector escape_xi = rep.xi;

    // Either multiplier estimate certifies a sound bound; keep the sharper.
    {
      Vector y_fit, z_fit;
      refit_multipliers(prob, res.x, point, y_fit, z_fit);
      if (y_fit.allFinite() && z_fit.allFinite()) {
        Multipliers mult_fit =
            sanitize_multipliers(prob.unpack_multipliers(y_fit, z_fit));
        SlackReport rep_fit = assemble_slack(prob, point, mult_fit);
        double lb_fit = dual_lower_bound(rep_fit, R2, mobj.w0);
        if (lb_fit > phi_lb) {
          phi_lb = lb_fit;
          rep = std::move(rep_fit);
          mult = std::move(mult_fit);
        }
      }
    }

    cert.rounds.push_back({r, res.f, rep.z0, rep.eps_feas, phi_lb, res.report});

    if (cfg.strict_alg1 && !res.report.converged) {
      // Paper-faithful mode: a non-converged inner solve aborts the ladder
      // instead of falling back to the best sound bound.
      cert.phi_lb = kNegInf;
      cert.lb_computed = false;
      cert.certified = false;
      break;
    }

    // Every round's bound is sound on its own; keep the best one.
    if (!cert.lb_computed || phi_lb > cert.phi_lb) {
      cert.phi_lb = phi_lb;
      cert.r_final = r;
      cert.eps_feas = rep.eps_feas;
      cert.z0 = rep.z0;
      cert.R2 = R2;
      cert.kkt = res.report;
      cert.npcq = npcq_check(prob, point);
      cert.mult = mult;
      cert.point = point;
    }
    cert.lb_computed = true;

    // Stop only at a converged round whose bound also matches the primal
    // value.  Dual feasibility alone is not enough: the bound-maximizing
    // refit can produce a feasible (hence sound) certificate while the
    // factorization is still rank-deficient, and freezing there would hand
    // back a needlessly loose bound.
    double fm = res.f + mobj.w0;
    if (res.report.converged && rep.eps_feas <= cfg.eps_feas_tol &&
        fm - phi_lb <= 1e-4 * (1.0 + std::abs(fm))) {
      cert.certified = true;
      break;
    }
    if (r >= cfg.r_max) break;

    double eps = cfg.escape_eps > 0.0
                     ? cfg.escape_eps
                     : 1e-3 * std::max(1.0, point_norm(point));
    SlackReport esc;
    esc.xi = std::move(escape_xi);
    point = escape(point, esc, eps);
    y_warm = res.y;
    z_warm = res.z;
    ++r;
  }
  return cert;
}

}  // namespace

ClassCertificate certify_class(const MlpNetwork& net, const AttackSpec& spec,
                               const StaircaseConfig& cfg) {
  return certify_class_impl(net, spec, cfg, nullptr);
}

BmPoint escape(const BmPoint& point, const SlackReport& report, double eps) {
  if (report.xi.size() == 0 || report.xi.norm() <= 1e-12)
    throw std::runtime_error("escape: zero slack eigenvector");
  int total = 1;
  for (const auto& u : point.u) total += static_cast<int>(u.size());
  if (report.xi.size() != total)
    throw std::runtime_error("escape: eigenvector does not match the point");

  // The homogenizing slot xi_0 is dropped: u0 is pinned at 1, so the escape
  // path moves only the V blocks.
  BmPoint out;
  int at = 1;
  for (size_t k = 0; k < point.u.size(); ++k) {
    int n = static_cast<int>(point.u[k].size());
    Matrix V(n, point.V[k].cols() + 1);
    V.leftCols(point.V[k].cols()) = point.V[k];
    V.col(point.V[k].cols()) = eps * report.xi.segment(at, n);
    out.u.push_back(point.u[k]);
    out.V.push_back(std::move(V));
    at += n;
  }
  return out;
}

std::string to_string(Status s) {
  switch (s) {
    case Status::Robust:
      return "robust";
    case Status::NotRobust:
      return "not_robust";
    default:
      return "unknown";
  }
}

CertificateResult certify_input(const MlpNetwork& net, const Vector& x_hat,
                                int true_class, double radius, Norm norm,
                                const StaircaseConfig& cfg) {
  check_config(cfg);
  CertificateResult result;

  if (predicted_class(net, x_hat) != true_class) {
    // The clean input is already wrong; the zero perturbation proves
    // attackability, so no lower-bound work is warranted.
    result.misclassified = true;
    result.status = Status::NotRobust;
    result.phi_star_lb = kNegInf;
    double ub = std::numeric_limits<double>::infinity();
    for (int c = 0; c < net.num_classes(); ++c) {
      if (c == true_class) continue;
      MarginObjective mobj = margin_objective(net, true_class, c);
      ub = std::min(ub, margin_value(net, mobj, x_hat));
    }
    result.phi_star_ub = ub;
    return result;
  }

  std::vector<int> targets;
  for (int c = 0; c < net.num_classes(); ++c)
    if (c != true_class) targets.push_back(c);
  if (targets.empty()) {
    result.status = Status::Robust;
    result.phi_star_lb = std::numeric_limits<double>::infinity();
    result.phi_star_ub = std::numeric_limits<double>::infinity();
    return result;
  }

  auto spec_for = [&](int c) {
    AttackSpec spec;
    spec.x_hat = x_hat;
    spec.true_class = true_class;
    spec.target_class = c;
    spec.radius = radius;
    spec.norm = norm;
    return spec;
  };

  // Attacks first: any negative upper bound settles the verdict without
  // touching the relaxation.
  std::vector<PgdResult> attacks(targets.size());
  for (size_t i = 0; i < targets.size(); ++i) {
    AttackSpec spec = spec_for(targets[i]);
    MarginObjective mobj = margin_objective(net, true_class, targets[i]);
    attacks[i] =
        pgd_upper_bound(net, spec, mobj, class_pgd_config(cfg, targets[i]));
  }
  double min_ub = std::numeric_limits<double>::infinity();
  for (const auto& a : attacks) min_ub = std::min(min_ub, a.phi_ub);
  if (min_ub < 0.0) {
    result.status = Status::NotRobust;
    result.phi_star_lb = kNegInf;
    result.phi_star_ub = min_ub;
    for (size_t i = 0; i < targets.size(); ++i) {
      ClassCertificate cert;
      cert.target_class = targets[i];
      cert.phi_ub = attacks[i].phi_ub;
      cert.lb_computed = false;
      result.classes.push_back(std::move(cert));
    }
    return result;
  }

  // Full per-class ladders; classes are independent jobs.
  result.classes.resize(targets.size());
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < static_cast<int>(targets.size()); ++i) {
    result.classes[i] =
        certify_class_impl(net, spec_for(targets[i]), cfg, &attacks[i]);
  }

  double lb = std::numeric_limits<double>::infinity();
  double ub = std::numeric_limits<double>::infinity();
  for (const auto& c : result.classes) {
    lb = std::min(lb, c.phi_lb);
    ub = std::min(ub, c.phi_ub);
  }
  result.phi_star_lb = lb;
  result.phi_star_ub = ub;
  if (lb > 0.0)
    result.status = Status::Robust;
  else if (ub < 0.0)
    result.status = Status::NotRobust;
  else
    result.status = Status::Unknown;
  return result;
}

}  // namespace certilax
