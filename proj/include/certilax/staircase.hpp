#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "certilax/attack.hpp"
#include "certilax/relaxation.hpp"
#include "certilax/solver.hpp"

namespace certilax {

struct StaircaseConfig {
  int r_init = 2;
  int r_max = 10;
  double eps_feas_tol = 1e-6;
  double escape_eps = -1.0;  // <= 0 selects 1e-3 * max(1, |u|)
  bool full_variant = false;
  bool backward_linear_bounds = false;
  bool strict_alg1 = false;  // abort the rank loop instead of keeping best
  uint64_t seed = 0;
  SolveConfig solver;
  PgdConfig pgd;
};

struct RoundRecord {
  int r = 0;
  double f = 0.0;        // converged objective w_ell . u_ell (w0 excluded)
  double z0 = 0.0;
  double eps_feas = 0.0;
  double phi_lb = 0.0;   // w0 + z0 - eps_feas * R^2
  KktReport kkt;
};

struct ClassCertificate {
  int target_class = -1;
  double phi_lb = -std::numeric_limits<double>::infinity();
  double phi_ub = std::numeric_limits<double>::infinity();
  double phi_lb_baseline = -std::numeric_limits<double>::infinity();
  int r_final = 0;        // rank that produced the returned phi_lb
  double eps_feas = 0.0;  // of the round that produced phi_lb
  double z0 = 0.0;
  double R2 = 0.0;
  bool lb_computed = false;  // false when the class was settled by PGD alone
  bool certified = false;    // eps_feas <= tolerance reached
  KktReport kkt;
  NpcqReport npcq;
  Multipliers mult;  // sanitized multipliers behind phi_lb
  BmPoint point;     // primal point of that round
  std::vector<RoundRecord> rounds;
};

/// Rank ladder for one target class: solve at rank r, read off the dual
/// bound, and if the slack matrix is still indefinite lift the factorization
/// along the negative eigenvector and retry at rank r+1.  Always returns the
/// best (largest) phi_lb seen; every round's bound is sound on its own.
ClassCertificate certify_class(const MlpNetwork& net, const AttackSpec& spec,
                               const StaircaseConfig& cfg);

/// Rank lift: V gains one column, eps times the layer blocks of the slack
/// eigenvector xi; u is unchanged.
BmPoint escape(const BmPoint& point, const SlackReport& report, double eps);

enum class Status { Robust, NotRobust, Unknown };
std::string to_string(Status s);

struct CertificateResult {
  Status status = Status::Unknown;
  bool misclassified = false;
  double phi_star_lb = 0.0;  // min over target classes
  double phi_star_ub = 0.0;
  std::vector<ClassCertificate> classes;
};

/// Certify one input against every target class.  PGD runs first for every
/// class; any negative upper bound settles the verdict without lower-bound
/// work.  Class jobs run in parallel.
CertificateResult certify_input(const MlpNetwork& net, const Vector& x_hat,
                                int true_class, double radius, Norm norm,
                                const StaircaseConfig& cfg);

}  // namespace certilax
