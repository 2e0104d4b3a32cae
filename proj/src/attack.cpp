#include "certilax/attack.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "certilax/rng.hpp"

namespace certilax {

namespace {

Vector clip01(Vector x) {
  return x.cwiseMax(0.0).cwiseMin(1.0);
}

// d margin / d input by backpropagation; relu kinks use subgradient 0.
Vector margin_gradient(const MlpNetwork& net, const MarginObjective& mobj,
                       const ForwardTrace& t) {
  Vector delta = mobj.w_ell;
  for (int k = net.depth() - 1; k >= 1; --k) {
    const Layer& l = net.hidden(k);
    Vector pre = l.W * t.x[k - 1] + l.b;
    for (Eigen::Index i = 0; i < delta.size(); ++i)
      if (pre(i) <= 0.0) delta(i) = 0.0;
    delta = l.W.transpose() * delta;
  }
  return delta;
}

Vector random_feasible_start(const AttackSpec& spec, Rng& rng) {
  Eigen::Index n = spec.x_hat.size();
  Vector x(n);
  if (spec.norm == Norm::Linf) {
    for (Eigen::Index i = 0; i < n; ++i)
      x(i) = spec.x_hat(i) + spec.radius * rng.uniform(-1.0, 1.0);
  } else {
    Vector d(n);
    for (Eigen::Index i = 0; i < n; ++i) d(i) = rng.normal();
    double nrm = std::max(d.norm(), 1e-300);
    double r = spec.radius * std::pow(rng.uniform01(), 1.0 / static_cast<double>(n));
    x = spec.x_hat + (r / nrm) * d;
  }
  return feasible_project(spec, x);
}

struct RestartTrace {
  double best_phi = std::numeric_limits<double>::infinity();
  Vector best_x;
  std::vector<double> margins;  // one entry per visited point, in order
  int steps = 0;
};

RestartTrace run_restart(const MlpNetwork& net, const AttackSpec& spec,
                         const MarginObjective& mobj, const PgdConfig& cfg,
                         int restart) {
  Rng rng(derive_seed(cfg.seed, static_cast<uint64_t>(restart)));
  Vector x = restart == 0 ? feasible_project(spec, spec.x_hat)
                          : random_feasible_start(spec, rng);
  double step = cfg.step_size > 0.0 ? cfg.step_size : spec.radius / 10.0;
  RestartTrace out;
  auto record = [&](const Vector& pt, double phi) {
    out.margins.push_back(phi);
    if (phi < out.best_phi) {
      out.best_phi = phi;
      out.best_x = pt;
    }
  };
  ForwardTrace t = forward(net, x);
  record(x, mobj.w_ell.dot(t.x.back()) + mobj.w0);
  for (int it = 0; it < cfg.iterations; ++it) {
    Vector grad = margin_gradient(net, mobj, t);
    Vector dir;
    if (spec.norm == Norm::Linf) {
      dir = grad.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
    } else {
      double nrm = grad.norm();
      if (nrm <= 1e-14) break;
      dir = grad / nrm;
    }
    if (dir.lpNorm<Eigen::Infinity>() == 0.0) break;
    x = feasible_project(spec, x - step * dir);
    t = forward(net, x);
    ++out.steps;
    record(x, mobj.w_ell.dot(t.x.back()) + mobj.w0);
  }
  return out;
}

}  // namespace

Vector feasible_project(const AttackSpec& spec, const Vector& x) {
  if (x.size() != spec.x_hat.size())
    throw std::invalid_argument("feasible_project: dimension mismatch");
  if (spec.norm == Norm::Linf) {
    Vector lo = (spec.x_hat.array() - spec.radius).cwiseMax(0.0).matrix();
    Vector hi = (spec.x_hat.array() + spec.radius).cwiseMin(1.0).matrix();
    return x.cwiseMax(lo).cwiseMin(hi);
  }
  Vector d = x - spec.x_hat;
  double nrm = d.norm();
  Vector inside = nrm <= spec.radius ? x : Vector(spec.x_hat + (spec.radius / nrm) * d);
  // Clipping moves each coordinate toward [0,1], which contains x_hat, so it
  // cannot increase the distance to x_hat: the result stays in the ball.
  return clip01(inside);
}

PgdResult pgd_upper_bound(const MlpNetwork& net, const AttackSpec& spec,
                          const MarginObjective& mobj, const PgdConfig& cfg) {
  validate(net, spec);
  PgdResult res;
  if (spec.radius == 0.0 || cfg.iterations == 0 || cfg.restarts == 0) {
    res.x_adv = feasible_project(spec, spec.x_hat);
    res.phi_ub = margin_value(net, mobj, res.x_adv);
    res.iterations_used = 0;
    if (cfg.record_history) res.incumbent_history.push_back(res.phi_ub);
    return res;
  }

  res.phi_ub = std::numeric_limits<double>::infinity();
  std::vector<RestartTrace> traces(cfg.restarts);
#pragma omp parallel for schedule(dynamic)
  for (int r = 0; r < cfg.restarts; ++r)
    traces[r] = run_restart(net, spec, mobj, cfg, r);

  // Deterministic reduction: scan restarts in order (ties keep the earlier
  // restart), and rebuild the global best-so-far curve the same way.
  double incumbent = std::numeric_limits<double>::infinity();
  for (int r = 0; r < cfg.restarts; ++r) {
    const RestartTrace& t = traces[r];
    res.iterations_used += t.steps;
    if (cfg.record_history)
      for (double phi : t.margins) {
        incumbent = std::min(incumbent, phi);
        res.incumbent_history.push_back(incumbent);
      }
    if (t.best_phi < res.phi_ub) {
      res.phi_ub = t.best_phi;
      res.x_adv = t.best_x;
    }
  }
  return res;
}

}  // namespace certilax
