#include "certilax/solver.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>

namespace certilax {

std::vector<int> NlpProblem::ineq_blocks() const {
  return std::vector<int>(num_ineq(), 0);
}

std::vector<int> NlpProblem::eq_blocks() const {
  return std::vector<int>(num_eq(), 0);
}

namespace {

struct AlWorkspace {
  double f = 0.0;
  Vector g, h;
  Vector grad_f;
  Matrix jac_g, jac_h;
  Vector yhat, zhat;  // first-order multiplier estimates at the last eval
};

// Augmented Lagrangian value and gradient at x for fixed (y, z, penalties).
// Inequalities use the squared-hinge form, equalities the plain quadratic.
double eval_al(const NlpProblem& prob, const Vector& x, const Vector& y,
               const Vector& z, const Vector& rho_g, const Vector& rho_h,
               AlWorkspace& ws, Vector* grad) {
  if (grad) {
    prob.eval_gradients(x, ws.grad_f, ws.jac_g, ws.jac_h);
  }
  prob.eval(x, ws.f, ws.g, ws.h);
  double val = ws.f;
  ws.yhat.resize(y.size());
  ws.zhat.resize(z.size());
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    double t = y(i) + rho_g(i) * ws.g(i);
    double tp = std::max(0.0, t);
    ws.yhat(i) = tp;
    val += (tp * tp - y(i) * y(i)) / (2.0 * rho_g(i));
  }
  for (Eigen::Index j = 0; j < z.size(); ++j) {
    ws.zhat(j) = z(j) + rho_h(j) * ws.h(j);
    val += z(j) * ws.h(j) + 0.5 * rho_h(j) * ws.h(j) * ws.h(j);
  }
  if (grad) {
    *grad = ws.grad_f;
    if (y.size() > 0) grad->noalias() += ws.jac_g.transpose() * ws.yhat;
    if (z.size() > 0) grad->noalias() += ws.jac_h.transpose() * ws.zhat;
  }
  return val;
}

// Bounded-memory quasi-Newton descent on the augmented Lagrangian.  Returns
// the number of iterations used; x is updated in place.
int lbfgs_minimize(const NlpProblem& prob, Vector& x, const Vector& y,
                   const Vector& z, const Vector& rho_g, const Vector& rho_h,
                   double grad_tol, int max_iters, AlWorkspace& ws) {
  const int memory = 8;
  std::deque<Vector> S, Y;
  std::deque<double> Rho;
  Vector grad(x.size()), new_grad(x.size());
  double fx = eval_al(prob, x, y, z, rho_g, rho_h, ws, &grad);
  int it = 0;
  for (; it < max_iters; ++it) {
    if (grad.norm() <= grad_tol) break;

    // Two-loop recursion.
    Vector q = grad;
    std::vector<double> alpha(S.size());
    for (int i = static_cast<int>(S.size()) - 1; i >= 0; --i) {
      alpha[i] = Rho[i] * S[i].dot(q);
      q -= alpha[i] * Y[i];
    }
    if (!S.empty()) {
      double gamma = S.back().dot(Y.back()) / Y.back().squaredNorm();
      q *= gamma;
    }
    for (size_t i = 0; i < S.size(); ++i) {
      double beta = Rho[i] * Y[i].dot(q);
      q += (alpha[i] - beta) * S[i];
    }
    Vector dir = -q;
    double slope = grad.dot(dir);
    if (slope >= 0.0) {  // not a descent direction: restart from steepest
      S.clear();
      Y.clear();
      Rho.clear();
      dir = -grad;
      slope = -grad.squaredNorm();
    }

    // Backtracking Armijo line search.  The sufficient-decrease test carries
    // a rounding allowance: near the floor of a heavily penalized landscape
    // the true decrease drops below what doubles can represent, and plain
    // Armijo would reject every step and freeze the iterate early.
    const double fnoise = 1e-14 * (1.0 + std::abs(fx));
    double step = 1.0;
    double fnew = 0.0;
    Vector xnew;
    bool accepted = false;
    for (int ls = 0; ls < 50; ++ls) {
      xnew = x + step * dir;
      fnew = eval_al(prob, xnew, y, z, rho_g, rho_h, ws, nullptr);
      if (std::isfinite(fnew) && fnew <= fx + 1e-4 * step * slope + fnoise) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      if (S.empty()) break;  // steepest descent failed too: stop here
      S.clear();
      Y.clear();
      Rho.clear();
      continue;
    }
    fnew = eval_al(prob, xnew, y, z, rho_g, rho_h, ws, &new_grad);
    Vector s = xnew - x;
    Vector yv = new_grad - grad;
    double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      S.push_back(s);
      Y.push_back(yv);
      Rho.push_back(1.0 / sy);
      if (static_cast<int>(S.size()) > memory) {
        S.pop_front();
        Y.pop_front();
        Rho.pop_front();
      }
    }
    x = xnew;
    fx = fnew;
    grad = new_grad;
  }
  // Leave ws consistent with the final x.
  eval_al(prob, x, y, z, rho_g, rho_h, ws, nullptr);
  return it;
}

}  // namespace

KktReport kkt_residuals(const NlpProblem& prob, const Vector& x,
                        const Vector& y, const Vector& z, double kkt_tol,
                        double feas_tol) {
  double f;
  Vector g, h, grad_f;
  Matrix jac_g, jac_h;
  prob.eval(x, f, g, h);
  prob.eval_gradients(x, grad_f, jac_g, jac_h);
  Vector station = grad_f;
  if (y.size() > 0) station.noalias() += jac_g.transpose() * y;
  if (z.size() > 0) station.noalias() += jac_h.transpose() * z;
  KktReport rep;
  rep.stationarity = station.norm();
  double gviol = g.size() > 0 ? g.cwiseMax(0.0).lpNorm<Eigen::Infinity>() : 0.0;
  double hviol = h.size() > 0 ? h.lpNorm<Eigen::Infinity>() : 0.0;
  rep.primal_feas = std::max(gviol, hviol);
  rep.complementarity =
      g.size() > 0 ? (y.array() * g.array()).abs().maxCoeff() : 0.0;
  rep.inside_trace = prob.trace_margin(x) > 0.0;
  double stat_scale = 1.0 + grad_f.norm();
  double comp_scale = 1.0 + (y.size() > 0 ? y.lpNorm<Eigen::Infinity>() : 0.0);
  rep.converged = rep.stationarity <= kkt_tol * stat_scale &&
                  rep.primal_feas <= feas_tol &&
                  rep.complementarity <= kkt_tol * comp_scale;
  return rep;
}

SolveResult solve(const NlpProblem& prob, const Vector& x0, const Vector& y0,
                  const Vector& z0, const SolveConfig& cfg) {
  const int m = prob.num_ineq();
  const int p = prob.num_eq();
  SolveResult res;
  res.x = x0;
  res.y = y0.size() == m ? Vector(y0.cwiseMax(0.0)) : Vector(Vector::Zero(m));
  res.z = z0.size() == p ? z0 : Vector(Vector::Zero(p));

  std::vector<int> gb = prob.ineq_blocks();
  std::vector<int> hb = prob.eq_blocks();
  int nblocks = 0;
  for (int b : gb) nblocks = std::max(nblocks, b + 1);
  for (int b : hb) nblocks = std::max(nblocks, b + 1);
  Vector block_pen = Vector::Constant(std::max(nblocks, 1), cfg.penalty_init);
  auto spread = [&](Vector& rho_g, Vector& rho_h) {
    rho_g.resize(m);
    rho_h.resize(p);
    for (int i = 0; i < m; ++i) rho_g(i) = block_pen(gb[i]);
    for (int j = 0; j < p; ++j) rho_h(j) = block_pen(hb[j]);
  };
  Vector rho_g, rho_h;
  spread(rho_g, rho_h);

  std::ofstream trace;
  if (!cfg.trace_path.empty()) trace.open(cfg.trace_path, std::ios::app);

  AlWorkspace ws;
  double tol = 1e-2;        // outer tolerance, tightened geometrically
  double eta = 1e-1;        // feasibility forcing tolerance
  const double kMaxPen = 1e14;

  for (int outer = 0; outer < cfg.max_outer; ++outer) {
    int inner =
        lbfgs_minimize(prob, res.x, res.y, res.z, rho_g, rho_h,
                       0.1 * tol, cfg.max_inner, ws);

    // Shifted violation per block decides between a multiplier step and a
    // penalty increase.
    Vector block_viol = Vector::Zero(std::max(nblocks, 1));
    for (int i = 0; i < m; ++i) {
      double v = std::abs(std::max(ws.g(i), -res.y(i) / rho_g(i)));
      block_viol(gb[i]) = std::max(block_viol(gb[i]), v);
    }
    for (int j = 0; j < p; ++j)
      block_viol(hb[j]) = std::max(block_viol(hb[j]), std::abs(ws.h(j)));
    double viol = block_viol.size() > 0 ? block_viol.maxCoeff() : 0.0;

    // First-order multiplier estimates at the inner solution.
    Vector yhat = ws.yhat, zhat = ws.zhat;
    KktReport rep =
        kkt_residuals(prob, res.x, yhat, zhat, cfg.kkt_tol, cfg.feas_tol);

    res.history.push_back({inner, ws.f, rep.primal_feas, block_pen.maxCoeff()});
    if (trace.is_open())
      trace << "outer=" << outer << " inner=" << inner << " f=" << ws.f
            << " feas=" << rep.primal_feas << " stat=" << rep.stationarity
            << " comp=" << rep.complementarity
            << " maxpen=" << block_pen.maxCoeff() << "\n";

    if (rep.converged) {
      res.y = yhat;
      res.z = zhat;
      res.f = ws.f;
      res.report = rep;
      return res;
    }

    if (viol <= eta) {
      res.y = yhat;
      res.z = zhat;
      eta = std::max(cfg.feas_tol, eta * 0.2);
      tol = std::max(cfg.kkt_tol, tol * 0.2);
    } else {
      for (int b = 0; b < nblocks; ++b)
        if (block_viol(b) > eta)
          block_pen(b) = std::min(kMaxPen, block_pen(b) * cfg.penalty_growth);
      spread(rho_g, rho_h);
      tol = std::max(cfg.kkt_tol, tol * 0.7);
    }
  }

  // Budget exhausted: report the final iterate with its residuals.
  double f;
  Vector g, h;
  prob.eval(res.x, f, g, h);
  Vector yhat(m), zhat(p);
  for (int i = 0; i < m; ++i) yhat(i) = std::max(0.0, res.y(i) + rho_g(i) * g(i));
  for (int j = 0; j < p; ++j) zhat(j) = res.z(j) + rho_h(j) * h(j);
  res.y = yhat;
  res.z = zhat;
  res.f = f;
  res.report = kkt_residuals(prob, res.x, res.y, res.z, cfg.kkt_tol, cfg.feas_tol);
  return res;
}

}  // namespace certilax
