#include "certilax/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <json.hpp>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "certilax/attack.hpp"
#include "certilax/io.hpp"
#include "certilax/model.hpp"
#include "certilax/oracle.hpp"
#include "certilax/records.hpp"
#include "certilax/relaxation.hpp"
#include "certilax/rng.hpp"
#include "certilax/staircase.hpp"

namespace certilax {
namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void apply_thread_cap() {
#ifdef _OPENMP
  if (const char* env = std::getenv("CERTILAX_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) omp_set_num_threads(n);
  }
#endif
}

Norm parse_norm(const std::string& s) {
  return s == "linf" ? Norm::Linf : Norm::L2;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

json vector_json(const Vector& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

/// Stamp the deterministic run id, then the timing fields, mirroring the
/// certify record convention so every record kind replays identically.
void finish_record(json& rec, double wall_time_s) {
  rec["run_id"] = digest_bytes(rec.dump());
  rec["wall_time_s"] = wall_time_s;
}

Status class_status(const ClassCertificate& c) {
  if (c.phi_lb > 0.0) return Status::Robust;
  if (c.phi_ub < 0.0) return Status::NotRobust;
  return Status::Unknown;
}

int status_exit(Status s) {
  switch (s) {
    case Status::Robust: return kExitRobust;
    case Status::NotRobust: return kExitNotRobust;
    default: return kExitUnknown;
  }
}

// ---------------------------------------------------------------------------
// Shared option bundles

struct InstanceArgs {
  std::string model_path, input_path;
  int true_class = 0;
  int target_class = -1;
  double radius = 0.0;
  std::string norm = "l2";
  uint64_t seed = 0;
  std::string out_path;  // records file (append); empty = no persistence
};

struct LoadedInstance {
  MlpNetwork net;
  Vector x_hat;
  std::string model_digest, input_digest;
};

/// Reads and cross-checks the model/input pair; throws std::invalid_argument
/// with a user-facing message on any inconsistency (mapped to exit 2).
LoadedInstance load_instance(const InstanceArgs& a) {
  LoadedInstance ins;
  ins.net = load_model(a.model_path);
  ins.x_hat = load_input(a.input_path);
  ins.model_digest = digest_file(a.model_path);
  ins.input_digest = digest_file(a.input_path);
  if (ins.x_hat.size() != ins.net.input_dim())
    throw std::invalid_argument("input dimension " +
                                std::to_string(ins.x_hat.size()) +
                                " does not match the model's " +
                                std::to_string(ins.net.input_dim()));
  const int q = ins.net.num_classes();
  if (a.true_class < 0 || a.true_class >= q)
    throw std::invalid_argument("--true-class out of range [0," +
                                std::to_string(q - 1) + "]");
  if (a.target_class >= 0) {
    if (a.target_class >= q)
      throw std::invalid_argument("--target-class out of range");
    if (a.target_class == a.true_class)
      throw std::invalid_argument("--target-class equals --true-class");
  }
  if (a.radius < 0.0) throw std::invalid_argument("--radius must be >= 0");
  return ins;
}

// ---------------------------------------------------------------------------
// gen-model

int cmd_gen_model(const std::vector<int>& dims, uint64_t seed,
                  const std::string& out_path, std::ostream& out,
                  std::ostream& err) {
  if (dims.size() < 2) {
    err << "error: --dims needs at least input and output widths\n";
    return kExitUsage;
  }
  for (int d : dims)
    if (d <= 0) {
      err << "error: --dims entries must be positive\n";
      return kExitUsage;
    }
  MlpNetwork net = generate_model(dims, seed);
  save_model(net, out_path);
  out << "wrote " << out_path << " digest=" << digest_file(out_path) << "\n";
  return kExitRobust;
}

// ---------------------------------------------------------------------------
// certify

struct CertifyArgs : InstanceArgs {
  std::string variant = "plain";
  int rank_init = 2;
  int rank_max = 10;
  double eps_feas_tol = 1e-6;
  bool strict_alg1 = false;
  bool backward_bounds = false;
  bool dump_slack = false;
  int pgd_restarts = 5;
  int pgd_iterations = 200;
};

StaircaseConfig staircase_config(const CertifyArgs& a) {
  StaircaseConfig cfg;
  cfg.r_init = a.rank_init;
  cfg.r_max = a.rank_max;
  cfg.eps_feas_tol = a.eps_feas_tol;
  cfg.full_variant = a.variant == "full";
  cfg.backward_linear_bounds = a.backward_bounds;
  cfg.strict_alg1 = a.strict_alg1;
  cfg.seed = a.seed;
  cfg.pgd.restarts = a.pgd_restarts;
  cfg.pgd.iterations = a.pgd_iterations;
  return cfg;
}

void dump_slack_report(const CertifyArgs& a, const LoadedInstance& ins,
                       const StaircaseConfig& cfg, const ClassCertificate& c,
                       std::ostream& out) {
  if (!c.lb_computed) return;
  AttackSpec spec{ins.x_hat, a.true_class, c.target_class, a.radius,
                  parse_norm(a.norm)};
  MarginObjective mobj =
      margin_objective(ins.net, a.true_class, c.target_class);
  BoundsOptions bopts{cfg.backward_linear_bounds};
  PreactivationBounds bounds = interval_bounds(ins.net, spec, bopts);
  BmProblem prob = build_bm(ins.net, spec, mobj, bounds, cfg.full_variant,
                            c.point.rank(), c.R2);
  SlackReport rep = assemble_slack(prob, c.point, c.mult);
  json rows = json::array();
  for (Eigen::Index i = 0; i < rep.S.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < rep.S.cols(); ++j) row.push_back(rep.S(i, j));
    rows.push_back(std::move(row));
  }
  json dump{{"slack_dump", true},
            {"target_class", c.target_class},
            {"r", c.point.rank()},
            {"R2", c.R2},
            {"z0", rep.z0},
            {"lambda_min", rep.lambda_min},
            {"eps_feas", rep.eps_feas},
            {"phi_lb", json_number(dual_lower_bound(rep, c.R2, mobj.w0))},
            {"S", std::move(rows)}};
  out << dump.dump() << "\n";
}

int cmd_certify(const CertifyArgs& a, std::ostream& out, std::ostream& err) {
  LoadedInstance ins = load_instance(a);
  StaircaseConfig cfg = staircase_config(a);
  Norm norm = parse_norm(a.norm);

  Clock::time_point t0 = Clock::now();
  CertificateResult result;
  try {
    if (a.target_class >= 0) {
      AttackSpec spec{ins.x_hat, a.true_class, a.target_class, a.radius, norm};
      ClassCertificate cert = certify_class(ins.net, spec, cfg);
      result.status = class_status(cert);
      result.phi_star_lb = cert.phi_lb;
      result.phi_star_ub = cert.phi_ub;
      result.classes.push_back(std::move(cert));
    } else {
      result = certify_input(ins.net, ins.x_hat, a.true_class, a.radius, norm,
                             cfg);
    }
  } catch (const std::exception& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  }
  double wall = seconds_since(t0);

  out << std::setprecision(9);
  if (result.misclassified)
    out << "input is misclassified at radius 0; nothing to certify\n";
  for (const auto& c : result.classes) {
    out << "class " << c.target_class << ": phi_lb=" << c.phi_lb
        << " phi_ub=" << c.phi_ub << " baseline=" << c.phi_lb_baseline
        << " r_final=" << c.r_final << " eps_feas=" << c.eps_feas
        << (c.certified ? " certified" : "")
        << (c.lb_computed ? "" : " (settled by attack)") << "\n";
  }
  out << "status=" << to_string(result.status)
      << " phi_star_lb=" << result.phi_star_lb
      << " phi_star_ub=" << result.phi_star_ub << "\n";

  if (!a.out_path.empty()) {
    for (const auto& c : result.classes) {
      CertificateResult single;
      single.status = class_status(c);
      single.misclassified = result.misclassified;
      single.phi_star_lb = c.phi_lb;
      single.phi_star_ub = c.phi_ub;
      single.classes.push_back(c);
      json rec = build_certify_record(
          "certify", a.model_path, ins.model_digest, ins.input_digest,
          ins.x_hat, a.true_class, c.target_class, a.radius, norm, cfg, single,
          wall);
      append_record(a.out_path, rec);
    }
    json summary = build_certify_record(
        "certify", a.model_path, ins.model_digest, ins.input_digest, ins.x_hat,
        a.true_class, a.target_class, a.radius, norm, cfg, result, wall);
    append_record(a.out_path, summary);
  }
  if (a.dump_slack)
    for (const auto& c : result.classes)
      dump_slack_report(a, ins, cfg, c, out);
  return status_exit(result.status);
}

// ---------------------------------------------------------------------------
// attack

struct AttackArgs : InstanceArgs {
  int restarts = 5;
  int iterations = 200;
};

int cmd_attack(const AttackArgs& a, std::ostream& out, std::ostream& err) {
  LoadedInstance ins = load_instance(a);
  if (a.target_class < 0) {
    err << "error: attack needs --target-class\n";
    return kExitUsage;
  }
  Norm norm = parse_norm(a.norm);
  AttackSpec spec{ins.x_hat, a.true_class, a.target_class, a.radius, norm};
  MarginObjective mobj =
      margin_objective(ins.net, a.true_class, a.target_class);
  PgdConfig pcfg;
  pcfg.restarts = a.restarts;
  pcfg.iterations = a.iterations;
  pcfg.seed = a.seed;

  Clock::time_point t0 = Clock::now();
  PgdResult res;
  try {
    res = pgd_upper_bound(ins.net, spec, mobj, pcfg);
  } catch (const std::exception& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  }
  double wall = seconds_since(t0);

  out << std::setprecision(9) << "phi_ub=" << res.phi_ub
      << " iterations_used=" << res.iterations_used << "\n";
  if (!a.out_path.empty()) {
    json rec{{"command", "attack"},
             {"model", {{"path", a.model_path}, {"digest", ins.model_digest}}},
             {"spec",
              {{"input_digest", ins.input_digest},
               {"true_class", a.true_class},
               {"target_class", a.target_class},
               {"radius", a.radius},
               {"norm", a.norm}}},
             {"config",
              {{"restarts", a.restarts}, {"iterations", a.iterations}}},
             {"seed", a.seed},
             {"outputs",
              {{"phi_ub", json_number(res.phi_ub)},
               {"x_adv", vector_json(res.x_adv)},
               {"iterations_used", res.iterations_used}}}};
    finish_record(rec, wall);
    append_record(a.out_path, rec);
  }
  return res.phi_ub < 0.0 ? kExitNotRobust : kExitUnknown;
}

// ---------------------------------------------------------------------------
// oracle

int cmd_oracle(const InstanceArgs& a, std::ostream& out, std::ostream& err) {
  LoadedInstance ins = load_instance(a);
  Norm norm = parse_norm(a.norm);
  std::vector<int> targets;
  if (a.target_class >= 0) {
    targets.push_back(a.target_class);
  } else {
    for (int c = 0; c < ins.net.num_classes(); ++c)
      if (c != a.true_class) targets.push_back(c);
  }

  Clock::time_point t0 = Clock::now();
  double phi_star = std::numeric_limits<double>::infinity();
  json classes = json::array();
  out << std::setprecision(9);
  try {
    for (int c : targets) {
      AttackSpec spec{ins.x_hat, a.true_class, c, a.radius, norm};
      MarginObjective mobj = margin_objective(ins.net, a.true_class, c);
      OracleResult res = exact_margin(ins.net, spec, mobj);
      phi_star = std::min(phi_star, res.phi_exact);
      out << "class " << c << ": phi_exact=" << res.phi_exact << " patterns="
          << res.patterns_feasible << "/" << res.patterns_enumerated << "\n";
      classes.push_back(json{{"target_class", c},
                             {"phi_exact", json_number(res.phi_exact)},
                             {"argmin_x", vector_json(res.argmin_x)},
                             {"patterns_enumerated", res.patterns_enumerated},
                             {"patterns_feasible", res.patterns_feasible}});
    }
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  }
  double wall = seconds_since(t0);

  Status status = phi_star > 0.0  ? Status::Robust
                  : phi_star < 0.0 ? Status::NotRobust
                                   : Status::Unknown;
  out << "status=" << to_string(status) << " phi_star_exact=" << phi_star
      << "\n";
  if (!a.out_path.empty()) {
    json rec{{"command", "oracle"},
             {"model", {{"path", a.model_path}, {"digest", ins.model_digest}}},
             {"spec",
              {{"input_digest", ins.input_digest},
               {"true_class", a.true_class},
               {"target_class",
                a.target_class >= 0 ? json(a.target_class) : json("all")},
               {"radius", a.radius},
               {"norm", a.norm}}},
             {"seed", a.seed},
             {"outputs",
              {{"status", to_string(status)},
               {"phi_star_exact", json_number(phi_star)},
               {"classes", classes}}}};
    finish_record(rec, wall);
    append_record(a.out_path, rec);
  }
  return status_exit(status);
}

// ---------------------------------------------------------------------------
// sweep

struct SweepArgs : InstanceArgs {
  std::vector<double> radii;
  int rank_max = 8;
  bool no_oracle = false;
};

int cmd_sweep(const SweepArgs& a, std::ostream& out, std::ostream& err) {
  LoadedInstance ins = load_instance(a);
  if (a.radii.empty()) {
    err << "error: sweep needs --radii\n";
    return kExitUsage;
  }
  for (double r : a.radii)
    if (r < 0.0) {
      err << "error: radii must be >= 0\n";
      return kExitUsage;
    }
  Norm norm = parse_norm(a.norm);
  std::vector<int> targets;
  if (a.target_class >= 0) {
    targets.push_back(a.target_class);
  } else {
    for (int c = 0; c < ins.net.num_classes(); ++c)
      if (c != a.true_class) targets.push_back(c);
  }
  const bool oracle_applies =
      !a.no_oracle && ins.net.total_hidden_units() <= OracleConfig{}.max_hidden_neurons;

  std::ostringstream table;
  table << "rho,phi_ub_mean,phi_lb_bm_mean,phi_lb_bmfull_mean,"
           "phi_lb_baseline_mean,phi_exact_mean,frac_bmfull_ge_baseline\n";
  try {
    for (size_t ri = 0; ri < a.radii.size(); ++ri) {
      const double rho = a.radii[ri];
      double ub = 0, bm = 0, bmfull = 0, base = 0, exact = 0;
      int ge = 0;
      for (size_t ti = 0; ti < targets.size(); ++ti) {
        const int c = targets[ti];
        AttackSpec spec{ins.x_hat, a.true_class, c, rho, norm};
        const uint64_t job = derive_seed(a.seed, 1000 * ri + ti);

        StaircaseConfig cfg;
        cfg.r_max = a.rank_max;
        cfg.seed = job;
        // Tight solves and a small dual-feasibility target: the reported
        // bound misses the local optimum by about eps_feas * R^2, so the
        // zero-radius row only matches the exact value to table precision
        // when eps_feas is pushed well below the default.
        cfg.solver.kkt_tol = 1e-9;
        cfg.solver.feas_tol = 1e-10;
        cfg.eps_feas_tol = 1e-8;
        cfg.full_variant = false;
        ClassCertificate plain = certify_class(ins.net, spec, cfg);
        cfg.full_variant = true;
        ClassCertificate full = certify_class(ins.net, spec, cfg);

        ub += plain.phi_ub;
        bm += plain.phi_lb;
        bmfull += full.phi_lb;
        base += plain.phi_lb_baseline;
        if (full.phi_lb >= plain.phi_lb_baseline - 1e-12) ++ge;
        if (oracle_applies) {
          MarginObjective mobj = margin_objective(ins.net, a.true_class, c);
          exact += exact_margin(ins.net, spec, mobj).phi_exact;
        }
      }
      const double m = static_cast<double>(targets.size());
      table << fmt(rho) << "," << fmt(ub / m) << "," << fmt(bm / m) << ","
            << fmt(bmfull / m) << "," << fmt(base / m) << ","
            << (oracle_applies ? fmt(exact / m) : std::string("na")) << ","
            << fmt(static_cast<double>(ge) / m) << "\n";
    }
  } catch (const std::exception& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  }
  if (a.out_path.empty())
    out << table.str();
  else
    write_file(a.out_path, table.str());
  return kExitRobust;
}

// ---------------------------------------------------------------------------
// selftest

struct SuiteResult {
  std::string name;
  int passed = 0;
  int total = 0;
  double worst = 0.0;  // largest violation seen (diagnostic only)
};

Vector interior_point(int n, Rng& rng) {
  Vector x(n);
  for (int i = 0; i < n; ++i) x(i) = rng.uniform(0.05, 0.95);
  return x;
}

/// [1 | 0; u | V] — the factor whose Gram matrix the slack pairs against.
Matrix lift_factor(const BmPoint& p) {
  const int rank = p.rank();
  int N = 1;
  for (const auto& u : p.u) N += static_cast<int>(u.size());
  Matrix U = Matrix::Zero(N, rank);
  U(0, 0) = 1.0;
  int at = 1;
  for (size_t k = 0; k < p.u.size(); ++k) {
    const int n = static_cast<int>(p.u[k].size());
    U.block(at, 0, n, 1) = p.u[k];
    if (rank > 1) U.block(at, 1, n, rank - 1) = p.V[k];
    at += n;
  }
  return U;
}

struct SelftestInstance {
  MlpNetwork net;
  AttackSpec spec;
  MarginObjective mobj;
  PreactivationBounds bounds;
};

SelftestInstance selftest_instance(uint64_t seed, Norm norm, double rho) {
  SelftestInstance ins;
  ins.net = generate_model({3, 4, 3, 2}, seed);
  Rng rng(derive_seed(seed, 77));
  ins.spec = AttackSpec{interior_point(3, rng), 0, 1, rho, norm};
  ins.mobj = margin_objective(ins.net, 0, 1);
  ins.bounds = interval_bounds(ins.net, ins.spec);
  return ins;
}

SuiteResult suite_pgd_contract() {
  SuiteResult s{"pgd-contract", 0, 0, 0.0};
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Norm norm = seed % 2 == 0 ? Norm::L2 : Norm::Linf;
    SelftestInstance ins =
        selftest_instance(7000 + seed, norm, norm == Norm::L2 ? 0.25 : 0.08);
    PgdConfig cfg;
    cfg.seed = seed;
    cfg.record_history = true;
    PgdResult res = pgd_upper_bound(ins.net, ins.spec, ins.mobj, cfg);
    bool ok = true;
    for (size_t i = 1; i < res.incumbent_history.size(); ++i)
      if (res.incumbent_history[i] > res.incumbent_history[i - 1] + 0.0)
        ok = false;
    Vector proj = feasible_project(ins.spec, res.x_adv);
    double moved = (proj - res.x_adv).lpNorm<Eigen::Infinity>();
    s.worst = std::max(s.worst, moved);
    if (moved > 1e-12) ok = false;
    ++s.total;
    if (ok) ++s.passed;
  }
  return s;
}

SuiteResult suite_gradient_check() {
  SuiteResult s{"gradient-check", 0, 0, 0.0};
  for (uint64_t seed : {7100ull, 7101ull}) {
    for (bool full : {false, true}) {
      for (Norm norm : {Norm::L2, Norm::Linf}) {
        SelftestInstance ins =
            selftest_instance(seed, norm, norm == Norm::L2 ? 0.3 : 0.08);
        BmProblem prob = build_bm(ins.net, ins.spec, ins.mobj, ins.bounds,
                                  full, 3);
        Rng rng(derive_seed(seed, full ? 11 : 12));
        for (int trial = 0; trial < 2; ++trial) {
          Vector x(prob.num_vars());
          for (int i = 0; i < x.size(); ++i) x(i) = rng.uniform(-1.5, 1.5);
          Vector grad_f;
          Matrix jg, jh;
          prob.eval_gradients(x, grad_f, jg, jh);
          const double h = 1e-5;
          double worst = 0.0;
          for (int i = 0; i < x.size(); ++i) {
            Vector xp = x, xm = x;
            xp(i) += h;
            xm(i) -= h;
            double fp, fm;
            Vector gp, hp, gm, hm;
            prob.eval(xp, fp, gp, hp);
            prob.eval(xm, fm, gm, hm);
            worst = std::max(worst, std::abs(grad_f(i) - (fp - fm) / (2 * h)) /
                                        (1.0 + std::abs(grad_f(i))));
            for (int r = 0; r < gp.size(); ++r)
              worst = std::max(worst,
                               std::abs(jg(r, i) - (gp(r) - gm(r)) / (2 * h)) /
                                   (1.0 + std::abs(jg(r, i))));
            for (int r = 0; r < hp.size(); ++r)
              worst = std::max(worst,
                               std::abs(jh(r, i) - (hp(r) - hm(r)) / (2 * h)) /
                                   (1.0 + std::abs(jh(r, i))));
          }
          s.worst = std::max(s.worst, worst);
          ++s.total;
          if (worst <= 1e-6) ++s.passed;
        }
      }
    }
  }
  return s;
}

/// The componentwise Lagrangian must equal its slack-matrix form exactly;
/// this is the integrity check the hidden sign-flip switch must break.
SuiteResult suite_lagrangian_identity() {
  SuiteResult s{"lagrangian-identity", 0, 0, 0.0};
  for (bool full : {false, true}) {
    for (Norm norm : {Norm::L2, Norm::Linf}) {
      SelftestInstance ins =
          selftest_instance(7200 + (full ? 1 : 0), norm,
                            norm == Norm::L2 ? 0.3 : 0.08);
      BmProblem prob = build_bm(ins.net, ins.spec, ins.mobj, ins.bounds, full,
                                3);
      Rng rng(derive_seed(7201, full ? 21 : 22));
      for (int trial = 0; trial < 50; ++trial) {
        Vector x(prob.num_vars());
        for (int i = 0; i < x.size(); ++i) x(i) = rng.uniform(-1.5, 1.5);
        Vector y(prob.num_ineq()), z(prob.num_eq());
        for (int i = 0; i < y.size(); ++i) y(i) = rng.uniform(0.0, 3.0);
        for (int i = 0; i < z.size(); ++i) z(i) = rng.uniform(-2.0, 2.0);
        Multipliers m = prob.unpack_multipliers(y, z);

        double f;
        Vector g, h;
        prob.eval(x, f, g, h);
        double lhs = f + y.dot(g) + z.dot(h);

        BmPoint p = prob.unpack(x);
        SlackReport rep = assemble_slack(prob, p, m);
        Matrix U = lift_factor(p);
        Matrix G = U * U.transpose();
        Matrix SmI = rep.S - m.mu * Matrix::Identity(G.rows(), G.cols());
        double rhs = rep.z0 + m.mu * prob.R2() + (SmI.array() * G.array()).sum();

        double rel = std::abs(lhs - rhs) /
                     (1.0 + std::max(std::abs(lhs), std::abs(rhs)));
        s.worst = std::max(s.worst, rel);
        ++s.total;
        if (rel <= 1e-10) ++s.passed;
      }
    }
  }
  return s;
}

SuiteResult suite_rank1_embedding() {
  SuiteResult s{"rank1-embedding", 0, 0, 0.0};
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Norm norm = seed % 2 == 0 ? Norm::L2 : Norm::Linf;
    SelftestInstance ins =
        selftest_instance(7300 + seed, norm, norm == Norm::L2 ? 0.2 : 0.06);
    bool full = seed % 3 == 0;
    BmProblem prob = build_bm(ins.net, ins.spec, ins.mobj, ins.bounds, full, 2);
    Rng rng(derive_seed(7300, seed));
    Vector cand(3);
    for (int i = 0; i < 3; ++i)
      cand(i) = ins.spec.x_hat(i) + rng.uniform(-1.0, 1.0) * ins.spec.radius;
    Vector xf = feasible_project(ins.spec, cand);
    ForwardTrace tr = forward(ins.net, xf);
    BmPoint p;
    for (const auto& xi : tr.x) {
      p.u.push_back(xi);
      p.V.push_back(Matrix::Zero(xi.size(), 1));
    }
    double f;
    Vector g, h;
    prob.eval(prob.pack(p), f, g, h);
    double viol = std::max(g.size() ? g.maxCoeff() : 0.0,
                           h.size() ? h.cwiseAbs().maxCoeff() : 0.0);
    double gap = std::abs(f + ins.mobj.w0 - margin_value(ins.net, ins.mobj, xf));
    s.worst = std::max(s.worst, std::max(viol, gap));
    ++s.total;
    if (viol <= 1e-9 && gap <= 1e-9) ++s.passed;
  }
  return s;
}

SuiteResult suite_dual_soundness() {
  SuiteResult s{"dual-bound-soundness", 0, 0, 0.0};
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Norm norm = seed % 2 == 0 ? Norm::L2 : Norm::Linf;
    SelftestInstance ins =
        selftest_instance(7400 + seed, norm, norm == Norm::L2 ? 0.25 : 0.07);
    bool full = seed % 2 == 1;
    BmProblem prob = build_bm(ins.net, ins.spec, ins.mobj, ins.bounds, full, 3);
    Rng rng(derive_seed(7400, seed));
    Vector y(prob.num_ineq()), z(prob.num_eq());
    for (int i = 0; i < y.size(); ++i) y(i) = rng.uniform(0.0, 2.0);
    for (int i = 0; i < z.size(); ++i) z(i) = rng.uniform(-1.0, 1.0);
    Multipliers m = prob.unpack_multipliers(y, z);
    BmPoint p = initialize(prob, ins.spec.x_hat, seed);
    SlackReport rep = assemble_slack(prob, p, m);
    double lb = dual_lower_bound(rep, prob.R2(), ins.mobj.w0);

    double sampled = std::numeric_limits<double>::infinity();
    for (int t = 0; t < 200; ++t) {
      Vector cand(3);
      for (int i = 0; i < 3; ++i)
        cand(i) =
            ins.spec.x_hat(i) + rng.uniform(-1.2, 1.2) * ins.spec.radius;
      Vector xf = feasible_project(ins.spec, cand);
      sampled = std::min(sampled, margin_value(ins.net, ins.mobj, xf));
    }
    s.worst = std::max(s.worst, lb - sampled);
    ++s.total;
    if (lb <= sampled + 1e-9) ++s.passed;
  }
  return s;
}

SuiteResult suite_oracle_sandwich() {
  SuiteResult s{"oracle-sandwich", 0, 0, 0.0};
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Norm norm = seed % 2 == 0 ? Norm::L2 : Norm::Linf;
    MlpNetwork net = generate_model({3, 4, 2}, 7500 + seed);
    Rng rng(derive_seed(7500, seed));
    AttackSpec spec{interior_point(3, rng), 0, 1,
                    norm == Norm::L2 ? 0.2 : 0.06, norm};
    MarginObjective mobj = margin_objective(net, 0, 1);
    double exact = exact_margin(net, spec, mobj).phi_exact;

    StaircaseConfig cfg;
    cfg.seed = seed;
    cfg.r_max = 6;
    ClassCertificate cert = certify_class(net, spec, cfg);
    double viol = std::max(cert.phi_lb - exact, exact - cert.phi_ub);
    s.worst = std::max(s.worst, viol);
    ++s.total;
    if (viol <= 1e-6) ++s.passed;
  }
  return s;
}

SuiteResult suite_determinism() {
  SuiteResult s{"determinism", 0, 0, 0.0};
  for (uint64_t seed : {7600ull, 7601ull, 7602ull}) {
    SelftestInstance ins = selftest_instance(seed, Norm::L2, 0.15);
    StaircaseConfig cfg;
    cfg.seed = seed;
    cfg.r_max = 5;
    ClassCertificate a = certify_class(ins.net, ins.spec, cfg);
    ClassCertificate b = certify_class(ins.net, ins.spec, cfg);
    bool ok = a.phi_lb == b.phi_lb && a.phi_ub == b.phi_ub &&
              a.r_final == b.r_final && a.eps_feas == b.eps_feas;
    ++s.total;
    if (ok) ++s.passed;
  }
  return s;
}

int cmd_selftest(bool inject_flip, std::ostream& out, std::ostream& err) {
  struct FlipGuard {
    explicit FlipGuard(bool on) { testing::inject_slack_sign_flip = on; }
    ~FlipGuard() { testing::inject_slack_sign_flip = false; }
  } guard(inject_flip);
  if (inject_flip)
    out << "note: slack sign flip injected; integrity checks must go red\n";

  std::vector<SuiteResult> suites;
  suites.push_back(suite_pgd_contract());
  suites.push_back(suite_gradient_check());
  suites.push_back(suite_lagrangian_identity());
  suites.push_back(suite_rank1_embedding());
  suites.push_back(suite_dual_soundness());
  suites.push_back(suite_oracle_sandwich());
  suites.push_back(suite_determinism());

  int failed = 0;
  for (const auto& s : suites) {
    bool ok = s.passed == s.total;
    if (!ok) ++failed;
    char line[160];
    std::snprintf(line, sizeof line, "[%s] %-22s %d/%d (worst %.3g)\n",
                  ok ? "PASS" : "FAIL", s.name.c_str(), s.passed, s.total,
                  s.worst);
    out << line;
  }
  if (failed == 0) {
    out << "selftest: all " << suites.size() << " property suites passed\n";
    return kExitRobust;
  }
  for (const auto& s : suites)
    if (s.passed != s.total) err << "selftest: FAILED property " << s.name << "\n";
  return kExitSelftestFailed;
}

}  // namespace

// ---------------------------------------------------------------------------

int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err) {
  apply_thread_cap();

  CLI::App app{"certilax: robustness certificates for ReLU classifiers via a "
               "low-rank dual relaxation"};
  app.require_subcommand(1);

  // gen-model
  std::vector<int> dims;
  uint64_t gen_seed = 0;
  std::string gen_out = "model.json";
  CLI::App* gen = app.add_subcommand(
      "gen-model", "Write a seeded random classifier in the model format");
  gen->add_option("--dims", dims, "layer widths, e.g. 2,4,4,3")
      ->delimiter(',')
      ->required();
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--out", gen_out, "output path (default model.json)");

  auto add_instance_flags = [](CLI::App* sub, InstanceArgs& a,
                               bool need_target) {
    sub->add_option("--model", a.model_path, "model file")->required();
    sub->add_option("--input", a.input_path, "input file {\"x\": [...]}")
        ->required();
    sub->add_option("--true-class", a.true_class, "label to defend")
        ->required();
    CLI::Option* t = sub->add_option("--target-class", a.target_class,
                                     "single attack target (default: all)");
    if (need_target) t->required();
    sub->add_option("--radius", a.radius, "perturbation radius")->required();
    sub->add_option("--norm", a.norm, "ball norm")
        ->check(CLI::IsMember({"l2", "linf"}));
    sub->add_option("--seed", a.seed, "seed for all randomized stages");
    sub->add_option("--out", a.out_path, "append result records here");
  };

  // certify
  CertifyArgs cert_args;
  CLI::App* certify = app.add_subcommand(
      "certify", "Lower-bound the attack margin and report a verdict");
  add_instance_flags(certify, cert_args, false);
  certify->add_option("--variant", cert_args.variant, "constraint set")
      ->check(CLI::IsMember({"plain", "full"}));
  certify->add_option("--rank-init", cert_args.rank_init, "first rank");
  certify->add_option("--rank-max", cert_args.rank_max, "rank ceiling");
  certify->add_option("--eps-feas-tol", cert_args.eps_feas_tol,
                      "dual feasibility target");
  certify->add_flag("--strict-alg1", cert_args.strict_alg1,
                    "abort on non-converged rounds instead of keeping best");
  certify->add_flag("--backward-bounds", cert_args.backward_bounds,
                    "tighten preactivation bounds with a backward pass");
  certify->add_flag("--dump-slack", cert_args.dump_slack,
                    "print the dual slack matrix per class");
  certify->add_option("--pgd-restarts", cert_args.pgd_restarts,
                      "attack restarts");
  certify->add_option("--pgd-iterations", cert_args.pgd_iterations,
                      "attack steps per restart");

  // attack
  AttackArgs attack_args;
  CLI::App* attack = app.add_subcommand(
      "attack", "Projected gradient attack; reports an upper bound");
  add_instance_flags(attack, attack_args, true);
  attack->add_option("--restarts", attack_args.restarts, "restarts");
  attack->add_option("--iterations", attack_args.iterations,
                     "steps per restart");

  // oracle
  InstanceArgs oracle_args;
  CLI::App* oracle = app.add_subcommand(
      "oracle", "Exact margin by activation-pattern enumeration (tiny nets)");
  add_instance_flags(oracle, oracle_args, false);

  // sweep
  SweepArgs sweep_args;
  CLI::App* sweep = app.add_subcommand(
      "sweep", "Radius sweep table: bounds averaged over target classes");
  add_instance_flags(sweep, sweep_args, false);
  sweep->get_option("--radius")->required(false);
  sweep->add_option("--radii", sweep_args.radii, "radii, e.g. 0,0.05,0.1")
      ->delimiter(',')
      ->required();
  sweep->add_option("--rank-max", sweep_args.rank_max, "rank ceiling");
  sweep->add_flag("--no-oracle", sweep_args.no_oracle,
                  "skip the exact column even on tiny nets");

  // selftest
  bool inject_flip = false;
  CLI::App* selftest = app.add_subcommand(
      "selftest", "Run the built-in property suites");
  selftest->add_flag("--inject-slack-sign-flip", inject_flip,
                     "corrupt the slack assembly to prove checks catch it")
      ->group("");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    auto parsed = app.get_subcommands();
    out << (parsed.empty() ? app.help() : parsed.front()->help());
    return kExitRobust;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitRobust;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_model(dims, gen_seed, gen_out, out, err);
    if (certify->parsed()) return cmd_certify(cert_args, out, err);
    if (attack->parsed()) return cmd_attack(attack_args, out, err);
    if (oracle->parsed()) return cmd_oracle(oracle_args, out, err);
    if (sweep->parsed()) return cmd_sweep(sweep_args, out, err);
    if (selftest->parsed()) return cmd_selftest(inject_flip, out, err);
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  err << "error: no subcommand\n";
  return kExitUsage;
}

}  // namespace certilax
