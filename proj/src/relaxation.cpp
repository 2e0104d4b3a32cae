#include "certilax/relaxation.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>

#include "certilax/rng.hpp"

namespace certilax {

namespace testing {
bool inject_slack_sign_flip = false;
}  // namespace testing

BmProblem::BmProblem(const MlpNetwork& net, AttackSpec spec,
                     MarginObjective mobj, PreactivationBounds bounds,
                     bool full, int rank, double R2)
    : net_(&net),
      spec_(std::move(spec)),
      mobj_(std::move(mobj)),
      bounds_(std::move(bounds)),
      full_(full),
      rank_(rank),
      R2_(R2) {
  if (rank_ < 1) throw std::invalid_argument("bm problem: rank must be positive");
  if (R2_ <= 1.0) throw std::invalid_argument("bm problem: R^2 must exceed 1");
  ell_ = net.depth();
  int total = 0;
  for (int k = 1; k <= ell_; ++k) {
    n_.push_back(net.layer_dim(k));
    u_off_.push_back(total);
    total += n_.back();
  }
  for (int i = 0; i < ell_; ++i) v_off_.push_back(total + (rank_ - 1) * u_off_[i]);
  num_vars_ = total * rank_;

  // Inequality rows.  Block ids are unique per (constraint family, layer).
  int row = 0, block = 0;
  auto push_rows = [&](int count) {
    for (int i = 0; i < count; ++i) ineq_blocks_.push_back(block);
    int at = row;
    row += count;
    ++block;
    return at;
  };
  int n1 = n_[0];
  if (spec_.norm == Norm::L2) {
    input_off_ = push_rows(1);
    input_rows_ = 1;
    box_lo_off_ = push_rows(n1);
    box_hi_off_ = push_rows(n1);
  } else {
    input_off_ = push_rows(n1);
    input_rows_ = n1;
  }
  for (int k = 1; k < ell_; ++k) {
    int m = n_[k];
    sign_off_.push_back(full_ ? -1 : push_rows(m));
    preact_off_.push_back(push_rows(m));
    elem_off_.push_back(full_ ? push_rows(m) : -1);
  }
  trace_row_ = push_rows(1);
  num_ineq_ = row;

  int erow = 0;
  for (int k = 1; k < ell_; ++k) {
    eq_off_.push_back(erow);
    for (int i = 0; i < n_[k]; ++i) eq_blocks_.push_back(block + (k - 1));
    erow += n_[k];
  }

  // Coordinates whose certified interval collapses to a point (all inputs at
  // zero radius, hidden units with a degenerate activation range) get pin
  // equalities.  The quadratic rows still hold there, but their gradients
  // vanish at the pinned value, so without the first-moment row u = c the
  // certifying multiplier diverges, and without the second-moment row
  // u^2 + |V row|^2 = c^2 the factor directions stay flat and the dual lacks
  // the diagonal weight a finite certificate needs.
  for (int i = 0; i < n1; ++i)
    if (bounds_.input_radius(i) <= 0.0)
      pins_.push_back({0, i, bounds_.input_center(i)});
  for (int k = 1; k < ell_; ++k)
    for (int i = 0; i < n_[k]; ++i)
      if (bounds_.post_radius[k - 1](i) <= 0.0)
        pins_.push_back({k, i, bounds_.post_center[k - 1](i)});
  const int npin = static_cast<int>(pins_.size());
  pin_off_ = erow;
  pin2_off_ = erow + npin;
  for (int i = 0; i < npin; ++i) eq_blocks_.push_back(block + ell_ - 1);
  for (int i = 0; i < npin; ++i) eq_blocks_.push_back(block + ell_);
  erow += 2 * npin;
  num_eq_ = erow;
}

BmProblem BmProblem::with_rank(int rank) const {
  return BmProblem(*net_, spec_, mobj_, bounds_, full_, rank, R2_);
}

BmProblem BmProblem::with_R2(double R2) const {
  return BmProblem(*net_, spec_, mobj_, bounds_, full_, rank_, R2);
}

Vector BmProblem::pack(const BmPoint& p) const {
  Vector x = Vector::Zero(num_vars_);
  for (int i = 0; i < ell_; ++i) {
    x.segment(u_off_[i], n_[i]) = p.u[i];
    Eigen::Map<Matrix>(x.data() + v_off_[i], n_[i], rank_ - 1) = p.V[i];
  }
  return x;
}

BmPoint BmProblem::unpack(const Vector& x) const {
  BmPoint p;
  for (int i = 0; i < ell_; ++i) {
    p.u.push_back(x.segment(u_off_[i], n_[i]));
    p.V.push_back(Eigen::Map<const Matrix>(x.data() + v_off_[i], n_[i], rank_ - 1));
  }
  return p;
}

void BmProblem::eval(const Vector& x, double& f, Vector& g, Vector& h) const {
  BmPoint p = unpack(x);
  f = mobj_.w_ell.dot(p.u[ell_ - 1]);
  g.resize(num_ineq_);
  h.resize(num_eq_);

  if (spec_.norm == Norm::L2) {
    g(input_off_) = (p.u[0] - spec_.x_hat).squaredNorm() +
                    p.V[0].squaredNorm() - spec_.radius * spec_.radius;
    g.segment(box_lo_off_, n_[0]) = -p.u[0];
    g.segment(box_hi_off_, n_[0]) = p.u[0].array() - 1.0;
  } else {
    const Vector& c = bounds_.input_center;
    const Vector& r = bounds_.input_radius;
    for (int i = 0; i < n_[0]; ++i) {
      double d = p.u[0](i) - c(i);
      g(input_off_ + i) = d * d + p.V[0].row(i).squaredNorm() - r(i) * r(i);
    }
  }

  for (int k = 1; k < ell_; ++k) {
    const Layer& lay = net_->hidden(k);
    Vector pre = p.u[k] - lay.W * p.u[k - 1] - lay.b;
    Matrix M = p.V[k] - lay.W * p.V[k - 1];
    if (!full_) g.segment(sign_off_[k - 1], n_[k]) = -p.u[k];
    g.segment(preact_off_[k - 1], n_[k]) = -pre;
    if (full_) {
      const Vector& cc = bounds_.post_center[k - 1];
      const Vector& rr = bounds_.post_radius[k - 1];
      for (int i = 0; i < n_[k]; ++i) {
        double d = p.u[k](i) - cc(i);
        g(elem_off_[k - 1] + i) =
            d * d + p.V[k].row(i).squaredNorm() - rr(i) * rr(i);
      }
    }
    for (int i = 0; i < n_[k]; ++i)
      h(eq_off_[k - 1] + i) =
          pre(i) * p.u[k](i) + M.row(i).dot(p.V[k].row(i));
  }
  for (size_t t = 0; t < pins_.size(); ++t) {
    const PinnedCoord& pc = pins_[t];
    double uv = p.u[pc.layer](pc.index);
    h(pin_off_ + static_cast<int>(t)) = uv - pc.value;
    h(pin2_off_ + static_cast<int>(t)) =
        uv * uv + p.V[pc.layer].row(pc.index).squaredNorm() -
        pc.value * pc.value;
  }

  g(trace_row_) = 1.0 + x.squaredNorm() - R2_;
}

void BmProblem::eval_gradients(const Vector& x, Vector& grad_f, Matrix& jac_g,
                               Matrix& jac_h) const {
  BmPoint p = unpack(x);
  grad_f = Vector::Zero(num_vars_);
  grad_f.segment(u_off_[ell_ - 1], n_[ell_ - 1]) = mobj_.w_ell;
  jac_g.setZero(num_ineq_, num_vars_);
  jac_h.setZero(num_eq_, num_vars_);
  const int r1 = rank_ - 1;
  auto ui = [&](int i, int j) { return u_off_[i] + j; };
  auto vi = [&](int i, int j, int c) { return v_off_[i] + c * n_[i] + j; };

  if (spec_.norm == Norm::L2) {
    for (int j = 0; j < n_[0]; ++j) {
      jac_g(input_off_, ui(0, j)) = 2.0 * (p.u[0](j) - spec_.x_hat(j));
      for (int c = 0; c < r1; ++c)
        jac_g(input_off_, vi(0, j, c)) = 2.0 * p.V[0](j, c);
      jac_g(box_lo_off_ + j, ui(0, j)) = -1.0;
      jac_g(box_hi_off_ + j, ui(0, j)) = 1.0;
    }
  } else {
    for (int i = 0; i < n_[0]; ++i) {
      jac_g(input_off_ + i, ui(0, i)) =
          2.0 * (p.u[0](i) - bounds_.input_center(i));
      for (int c = 0; c < r1; ++c)
        jac_g(input_off_ + i, vi(0, i, c)) = 2.0 * p.V[0](i, c);
    }
  }

  for (int k = 1; k < ell_; ++k) {
    const Layer& lay = net_->hidden(k);
    Vector pre = p.u[k] - lay.W * p.u[k - 1] - lay.b;
    Matrix M = p.V[k] - lay.W * p.V[k - 1];
    for (int i = 0; i < n_[k]; ++i) {
      if (!full_) jac_g(sign_off_[k - 1] + i, ui(k, i)) = -1.0;
      jac_g(preact_off_[k - 1] + i, ui(k, i)) = -1.0;
      for (int j = 0; j < n_[k - 1]; ++j)
        jac_g(preact_off_[k - 1] + i, ui(k - 1, j)) = lay.W(i, j);
      if (full_) {
        jac_g(elem_off_[k - 1] + i, ui(k, i)) =
            2.0 * (p.u[k](i) - bounds_.post_center[k - 1](i));
        for (int c = 0; c < r1; ++c)
          jac_g(elem_off_[k - 1] + i, vi(k, i, c)) = 2.0 * p.V[k](i, c);
      }
      int hr = eq_off_[k - 1] + i;
      jac_h(hr, ui(k, i)) = p.u[k](i) + pre(i);
      for (int j = 0; j < n_[k - 1]; ++j)
        jac_h(hr, ui(k - 1, j)) = -lay.W(i, j) * p.u[k](i);
      for (int c = 0; c < r1; ++c) {
        jac_h(hr, vi(k, i, c)) = p.V[k](i, c) + M(i, c);
        for (int j = 0; j < n_[k - 1]; ++j)
          jac_h(hr, vi(k - 1, j, c)) = -lay.W(i, j) * p.V[k](i, c);
      }
    }
  }

  for (size_t t = 0; t < pins_.size(); ++t) {
    const PinnedCoord& pc = pins_[t];
    jac_h(pin_off_ + static_cast<int>(t), ui(pc.layer, pc.index)) = 1.0;
    jac_h(pin2_off_ + static_cast<int>(t), ui(pc.layer, pc.index)) =
        2.0 * p.u[pc.layer](pc.index);
    for (int c = 0; c < r1; ++c)
      jac_h(pin2_off_ + static_cast<int>(t), vi(pc.layer, pc.index, c)) =
          2.0 * p.V[pc.layer](pc.index, c);
  }

  jac_g.row(trace_row_) = 2.0 * x.transpose();
}

Vector BmProblem::pack_multipliers(const Multipliers& m) const {
  Vector y = Vector::Zero(num_ineq_);
  y.segment(input_off_, input_rows_) = m.y0;
  if (spec_.norm == Norm::L2) {
    y.segment(box_lo_off_, n_[0]) = m.y01;
    y.segment(box_hi_off_, n_[0]) = m.y02;
  }
  for (int k = 1; k < ell_; ++k) {
    if (!full_) y.segment(sign_off_[k - 1], n_[k]) = m.yk1[k - 1];
    y.segment(preact_off_[k - 1], n_[k]) = m.yk2[k - 1];
    if (full_) y.segment(elem_off_[k - 1], n_[k]) = m.yk[k - 1];
  }
  y(trace_row_) = -m.mu;
  return y;
}

Vector BmProblem::pack_eq_multipliers(const Multipliers& m) const {
  Vector z = Vector::Zero(num_eq_);
  for (int k = 1; k < ell_; ++k) z.segment(eq_off_[k - 1], n_[k]) = m.zk[k - 1];
  if (m.z_pin.size() > 0) {
    if (m.z_pin.size() != static_cast<Eigen::Index>(pins_.size()))
      throw std::invalid_argument("multipliers: pin count mismatch");
    z.segment(pin_off_, m.z_pin.size()) = m.z_pin;
  }
  if (m.z_pin2.size() > 0) {
    if (m.z_pin2.size() != static_cast<Eigen::Index>(pins_.size()))
      throw std::invalid_argument("multipliers: pin count mismatch");
    z.segment(pin2_off_, m.z_pin2.size()) = m.z_pin2;
  }
  return z;
}

Multipliers BmProblem::unpack_multipliers(const Vector& y, const Vector& z) const {
  Multipliers m;
  m.y0 = y.segment(input_off_, input_rows_);
  if (spec_.norm == Norm::L2) {
    m.y01 = y.segment(box_lo_off_, n_[0]);
    m.y02 = y.segment(box_hi_off_, n_[0]);
  }
  for (int k = 1; k < ell_; ++k) {
    m.yk1.push_back(full_ ? Vector() : Vector(y.segment(sign_off_[k - 1], n_[k])));
    m.yk2.push_back(y.segment(preact_off_[k - 1], n_[k]));
    m.yk.push_back(full_ ? Vector(y.segment(elem_off_[k - 1], n_[k])) : Vector());
    m.zk.push_back(z.segment(eq_off_[k - 1], n_[k]));
  }
  m.z_pin = z.segment(pin_off_, static_cast<Eigen::Index>(pins_.size()));
  m.z_pin2 = z.segment(pin2_off_, static_cast<Eigen::Index>(pins_.size()));
  m.mu = -y(trace_row_);
  return m;
}

double auto_trace_bound(const PreactivationBounds& bounds) {
  double sum = 1.0;
  for (Eigen::Index i = 0; i < bounds.input_lo.size(); ++i)
    sum += std::max(bounds.input_lo(i) * bounds.input_lo(i),
                    bounds.input_hi(i) * bounds.input_hi(i));
  for (size_t k = 0; k < bounds.pre_lo.size(); ++k)
    for (Eigen::Index i = 0; i < bounds.pre_lo[k].size(); ++i)
      sum += std::max(bounds.pre_lo[k](i) * bounds.pre_lo[k](i),
                      bounds.pre_hi[k](i) * bounds.pre_hi[k](i));
  return 2.0 * sum;
}

BmProblem build_bm(const MlpNetwork& net, const AttackSpec& spec,
                   const MarginObjective& mobj,
                   const PreactivationBounds& bounds, bool full, int rank,
                   std::optional<double> R2) {
  validate(net, spec);
  double r2 = R2.value_or(auto_trace_bound(bounds));
  return BmProblem(net, spec, mobj, bounds, full, rank, r2);
}

BmPoint initialize(const BmProblem& prob, const Vector& x_start, uint64_t seed) {
  ForwardTrace t = forward(prob.net(), x_start);
  Rng rng(derive_seed(seed, 0x62696e69ull));
  BmPoint p;
  const double delta = 1e-3;
  for (int i = 0; i < prob.net().depth(); ++i) {
    p.u.push_back(t.x[i]);
    Matrix V(t.x[i].size(), prob.rank() - 1);
    for (int c = 0; c < V.cols(); ++c)
      for (int j = 0; j < V.rows(); ++j) V(j, c) = rng.uniform(-delta, delta);
    p.V.push_back(std::move(V));
  }
  return p;
}

NpcqReport npcq_check(const BmProblem& prob, const BmPoint& point) {
  NpcqReport rep;
  rep.ok = true;
  rep.worst_preact = std::numeric_limits<double>::infinity();
  rep.worst_vw = std::numeric_limits<double>::infinity();
  const MlpNetwork& net = prob.net();
  for (int k = 1; k < net.depth(); ++k) {
    const Layer& lay = net.hidden(k);
    double wnorm = lay.W.cwiseAbs().rowwise().sum().maxCoeff();
    double tau = 1e-7 * (1.0 + wnorm);
    Vector pre = lay.W * point.u[k - 1] + lay.b;
    Matrix WV = lay.W * point.V[k - 1];
    for (Eigen::Index i = 0; i < pre.size(); ++i) {
      double a = std::abs(pre(i));
      double v = WV.row(i).norm();
      rep.worst_preact = std::min(rep.worst_preact, a);
      rep.worst_vw = std::min(rep.worst_vw, v);
      if (a <= tau || v <= tau) {
        rep.ok = false;
        rep.offending.emplace_back(k, static_cast<int>(i));
      }
    }
  }
  return rep;
}

SlackReport assemble_slack(const BmProblem& prob, const BmPoint& point,
                           const Multipliers& mult) {
  auto require_nonneg = [](const Vector& v) {
    if (v.size() > 0 && v.minCoeff() < 0.0)
      throw std::invalid_argument(
          "slack assembly: negative inequality multiplier; sanitize first");
  };
  require_nonneg(mult.y0);
  require_nonneg(mult.y01);
  require_nonneg(mult.y02);
  for (const auto& v : mult.yk1) require_nonneg(v);
  for (const auto& v : mult.yk2) require_nonneg(v);
  for (const auto& v : mult.yk) require_nonneg(v);

  const MlpNetwork& net = prob.net();
  const int ell = net.depth();
  std::vector<int> blk;  // offset of each layer block inside S (slot 0 = u0)
  int N = 0;
  for (int k = 1; k <= ell; ++k) {
    blk.push_back(1 + N);
    N += net.layer_dim(k);
  }
  Matrix T = Matrix::Zero(N + 1, N + 1);
  double cst = 0.0;

  // Objective row (w0 is carried outside the relaxation).
  double sgn = testing::inject_slack_sign_flip ? -1.0 : 1.0;
  const Vector& w = prob.mobj().w_ell;
  for (Eigen::Index j = 0; j < w.size(); ++j) T(0, blk[ell - 1] + j) += sgn * w(j);

  const AttackSpec& spec = prob.spec();
  const PreactivationBounds& bounds = prob.bounds();
  int n1 = net.layer_dim(1);
  if (spec.norm == Norm::L2) {
    double y0 = mult.y0(0);
    for (int j = 0; j < n1; ++j) {
      T(blk[0] + j, blk[0] + j) += 2.0 * y0;
      T(0, blk[0] + j) += -2.0 * y0 * spec.x_hat(j);
      T(0, blk[0] + j) += -mult.y01(j) + mult.y02(j);
    }
    cst += y0 * (spec.x_hat.squaredNorm() - spec.radius * spec.radius);
    cst -= mult.y02.sum();
  } else {
    for (int j = 0; j < n1; ++j) {
      double c = bounds.input_center(j), r = bounds.input_radius(j);
      T(blk[0] + j, blk[0] + j) += 2.0 * mult.y0(j);
      T(0, blk[0] + j) += -2.0 * mult.y0(j) * c;
      cst += mult.y0(j) * (c * c - r * r);
    }
  }
  if (mult.z_pin.size() > 0 || mult.z_pin2.size() > 0) {
    const auto& pins = prob.pins();
    const auto npin = static_cast<Eigen::Index>(pins.size());
    if ((mult.z_pin.size() > 0 && mult.z_pin.size() != npin) ||
        (mult.z_pin2.size() > 0 && mult.z_pin2.size() != npin))
      throw std::invalid_argument("slack assembly: pin count mismatch");
    for (Eigen::Index t = 0; t < npin; ++t) {
      int at = blk[pins[t].layer] + pins[t].index;
      if (mult.z_pin.size() > 0) {
        T(0, at) += mult.z_pin(t);
        cst -= mult.z_pin(t) * pins[t].value;
      }
      if (mult.z_pin2.size() > 0) {
        T(at, at) += 2.0 * mult.z_pin2(t);
        cst -= mult.z_pin2(t) * pins[t].value * pins[t].value;
      }
    }
  }

  for (int k = 1; k < ell; ++k) {
    const Layer& lay = net.hidden(k);
    int m = net.layer_dim(k + 1);
    const Vector& yk2 = mult.yk2[k - 1];
    const Vector& zk = mult.zk[k - 1];
    for (int i = 0; i < m; ++i) {
      T(0, blk[k] + i) += -yk2(i) - zk(i) * lay.b(i);
      if (!prob.full()) T(0, blk[k] + i) += -mult.yk1[k - 1](i);
      T(blk[k] + i, blk[k] + i) += 2.0 * zk(i);
      for (int j = 0; j < net.layer_dim(k); ++j) {
        T(blk[k - 1] + j, blk[k] + i) += -lay.W(i, j) * zk(i);
        T(0, blk[k - 1] + j) += lay.W(i, j) * yk2(i);
      }
      if (prob.full()) {
        double c = bounds.post_center[k - 1](i), r = bounds.post_radius[k - 1](i);
        double yk = mult.yk[k - 1](i);
        T(blk[k] + i, blk[k] + i) += 2.0 * yk;
        T(0, blk[k] + i) += -2.0 * yk * c;
        cst += yk * (c * c - r * r);
      }
    }
    cst += lay.b.dot(yk2);
  }

  // u0 stationarity fixes the homogeneous entry, and with it z0.
  double s0 = 0.0;
  for (int k = 0; k < ell; ++k)
    for (int j = 0; j < net.layer_dim(k + 1); ++j)
      s0 -= T(0, blk[k] + j) * point.u[k](j);
  T(0, 0) = s0;

  // T holds the upper part of the doubled slack array; symmetrize and halve.
  Matrix A = T + T.transpose();
  A.diagonal() -= T.diagonal();
  SlackReport rep;
  rep.S = 0.5 * A;
  rep.z0 = cst - 0.5 * s0;

  Eigen::SelfAdjointEigenSolver<Matrix> es(rep.S);
  rep.lambda_min = es.eigenvalues()(0) - 1e-9;  // cushion absorbs eigensolver error
  rep.eps_feas = std::max(0.0, -rep.lambda_min);
  rep.xi = es.eigenvectors().col(0);
  return rep;
}

double dual_lower_bound(const SlackReport& report, double R2, double w0) {
  return w0 + report.z0 + R2 * std::min(0.0, report.lambda_min);
}

Multipliers sanitize_multipliers(const Multipliers& m) {
  Multipliers s = m;
  auto clamp = [](Vector& v) {
    if (v.size() > 0) v = v.cwiseMax(0.0);
  };
  clamp(s.y0);
  clamp(s.y01);
  clamp(s.y02);
  for (auto& v : s.yk1) clamp(v);
  for (auto& v : s.yk2) clamp(v);
  for (auto& v : s.yk) clamp(v);
  s.mu = std::min(0.0, s.mu);
  return s;
}

}  // namespace certilax
