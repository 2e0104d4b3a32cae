// Benchmark comparing the OpenMP-parallel kernels against their serial
// counterparts.  Each row pins the thread count, repeats the kernel, keeps
// the best wall time, and cross-checks that both paths return the same
// numbers, so the table doubles as a consistency test.
//
//   certilax-bench [--threads N] [--repeats R]
//
// With --threads unset the parallel column uses all hardware threads.

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "certilax/attack.hpp"
#include "certilax/io.hpp"
#include "certilax/model.hpp"
#include "certilax/oracle.hpp"
#include "certilax/rng.hpp"
#include "certilax/staircase.hpp"

namespace {

using namespace certilax;
using Clock = std::chrono::steady_clock;

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
  omp_set_num_threads(n);
#else
  (void)n;
#endif
}

// Best-of-R wall time for fn() at a fixed thread count; fn returns a scalar
// fingerprint of its result.
double time_best(int threads, int repeats, double& fingerprint,
                 const std::function<double()>& fn) {
  set_threads(threads);
  double best = 1e300;
  for (int r = 0; r < repeats; ++r) {
    Clock::time_point t0 = Clock::now();
    fingerprint = fn();
    best = std::min(best,
                    std::chrono::duration<double>(Clock::now() - t0).count());
  }
  return best;
}

struct Row {
  std::string name;
  double serial_s = 0.0;
  double parallel_s = 0.0;
  bool match = false;
};

std::string fmt(const char* f, int v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void print_table(const std::vector<Row>& rows, int threads) {
  // "reference" is the unpruned serial implementation kept for testing; the
  // production column also reflects algorithmic wins (pruning), not just
  // threads, so the ratio is labeled speedup rather than scaling.
  std::printf("%-34s %14s %18s %9s %7s\n", "kernel", "reference (s)",
              fmt("parallel %d thr (s)", threads).c_str(), "speedup", "match");
  for (const Row& r : rows)
    std::printf("%-34s %14.4f %18.4f %8.2fx %7s\n", r.name.c_str(),
                r.serial_s, r.parallel_s, r.serial_s / r.parallel_s,
                r.match ? "yes" : "NO");
}

AttackSpec spec_for(const MlpNetwork& net, const Vector& x_hat, int target,
                    double radius, Norm norm) {
  AttackSpec spec;
  spec.x_hat = x_hat;
  spec.true_class = predicted_class(net, x_hat);
  spec.target_class = target == spec.true_class ? (target + 1) % net.num_classes()
                                                : target;
  spec.radius = radius;
  spec.norm = norm;
  return spec;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"serial vs parallel kernel benchmark"};
  int threads = max_threads();
  int repeats = 3;
  app.add_option("--threads", threads, "thread count for the parallel column")
      ->check(CLI::PositiveNumber);
  app.add_option("--repeats", repeats, "repetitions per cell (best kept)")
      ->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  std::vector<Row> rows;

  {
    // Exact-margin oracle: pruned parallel tree walk vs the exhaustive
    // serial enumeration of all 2^H activation patterns.
    MlpNetwork net = generate_model({3, 6, 5, 2}, 4242);
    Rng rng(4242);
    Vector x_hat(3);
    for (int j = 0; j < 3; ++j) x_hat(j) = rng.uniform(0.1, 0.9);
    AttackSpec spec = spec_for(net, x_hat, 1, 0.25, Norm::L2);
    MarginObjective mobj =
        margin_objective(net, spec.true_class, spec.target_class);
    Row row{"oracle {3,6,5,2} rho 0.25"};
    double fp_s = 0.0, fp_p = 0.0;
    row.serial_s = time_best(1, repeats, fp_s, [&] {
      return exact_margin_serial(net, spec, mobj).phi_exact;
    });
    row.parallel_s = time_best(threads, repeats, fp_p, [&] {
      return exact_margin(net, spec, mobj).phi_exact;
    });
    row.match = std::abs(fp_s - fp_p) <= 1e-7 * (1.0 + std::abs(fp_s));
    rows.push_back(row);
  }

  {
    // Attack search: restarts are independent jobs with a deterministic
    // order-based reduction, so any thread count returns the same bound.
    MlpNetwork net = generate_model({4, 8, 8, 3}, 4243);
    Rng rng(4243);
    Vector x_hat(4);
    for (int j = 0; j < 4; ++j) x_hat(j) = rng.uniform(0.1, 0.9);
    AttackSpec spec = spec_for(net, x_hat, 1, 0.3, Norm::L2);
    MarginObjective mobj =
        margin_objective(net, spec.true_class, spec.target_class);
    PgdConfig cfg;
    cfg.restarts = 256;
    cfg.iterations = 400;
    cfg.seed = 4243;
    Row row{"pgd 256 restarts {4,8,8,3}"};
    double fp_s = 0.0, fp_p = 0.0;
    row.serial_s = time_best(
        1, repeats, fp_s, [&] { return pgd_upper_bound(net, spec, mobj, cfg).phi_ub; });
    row.parallel_s = time_best(
        threads, repeats, fp_p,
        [&] { return pgd_upper_bound(net, spec, mobj, cfg).phi_ub; });
    row.match = fp_s == fp_p;
    rows.push_back(row);
  }

  {
    // Full certification: the per-class rank ladders run as independent
    // parallel jobs inside certify_input.
    MlpNetwork net = generate_model({3, 5, 5, 3}, 4244);
    Rng rng(4244);
    Vector x_hat(3);
    for (int j = 0; j < 3; ++j) x_hat(j) = rng.uniform(0.1, 0.9);
    int pred = predicted_class(net, x_hat);
    StaircaseConfig cfg;
    cfg.seed = 4244;
    Row row{"certify_input {3,5,5,3} rho 0.1"};
    double fp_s = 0.0, fp_p = 0.0;
    auto run = [&] {
      CertificateResult res = certify_input(net, x_hat, pred, 0.1, Norm::L2, cfg);
      return res.phi_star_lb;
    };
    row.serial_s = time_best(1, repeats, fp_s, run);
    row.parallel_s = time_best(threads, repeats, fp_p, run);
    row.match = fp_s == fp_p;
    rows.push_back(row);
  }

  print_table(rows, threads);
  bool all_match = true;
  for (const Row& r : rows) all_match = all_match && r.match;
  return all_match ? 0 : 1;
}
