#include "certilax/model.hpp"

#include <algorithm>
#include <cmath>

namespace certilax {

namespace {

void check_finite(const Matrix& M, const std::string& what) {
  if (!M.allFinite()) throw std::invalid_argument(what + " has non-finite entries");
}

}  // namespace

MlpNetwork::MlpNetwork(std::vector<Layer> hidden, Layer output)
    : hidden_(std::move(hidden)), output_(std::move(output)) {
  if (output_.W.rows() != output_.b.size())
    throw std::invalid_argument("output layer: W rows != b size");
  if (output_.b.size() < 1) throw std::invalid_argument("output layer is empty");
  dims_.clear();
  Eigen::Index expect = hidden_.empty() ? output_.W.cols() : hidden_.front().W.cols();
  for (size_t i = 0; i < hidden_.size(); ++i) {
    const Layer& l = hidden_[i];
    if (l.W.rows() != l.b.size())
      throw std::invalid_argument("hidden layer " + std::to_string(i + 1) + ": W rows != b size");
    if (l.W.cols() != expect)
      throw std::invalid_argument("hidden layer " + std::to_string(i + 1) +
                                  ": input width breaks the dimension chain");
    if (l.W.rows() < 1) throw std::invalid_argument("hidden layer has no units");
    check_finite(l.W, "W");
    check_finite(l.b, "b");
    dims_.push_back(static_cast<int>(l.W.cols()));
    expect = l.W.rows();
  }
  if (output_.W.cols() != expect)
    throw std::invalid_argument("output layer: input width breaks the dimension chain");
  check_finite(output_.W, "W");
  check_finite(output_.b, "b");
  dims_.push_back(static_cast<int>(output_.W.cols()));
}

int MlpNetwork::total_neurons() const {
  int n = 0;
  for (int d : dims_) n += d;
  return n;
}

int MlpNetwork::total_hidden_units() const {
  int n = 0;
  for (const Layer& l : hidden_) n += static_cast<int>(l.b.size());
  return n;
}

ForwardTrace forward(const MlpNetwork& net, const Vector& input) {
  if (input.size() != net.input_dim())
    throw std::invalid_argument("forward: input dimension mismatch");
  ForwardTrace t;
  t.x.reserve(net.depth());
  t.x.push_back(input);
  for (int k = 1; k < net.depth(); ++k) {
    const Layer& l = net.hidden(k);
    t.x.push_back((l.W * t.x.back() + l.b).cwiseMax(0.0));
  }
  t.logits = net.output().W * t.x.back() + net.output().b;
  return t;
}

int predicted_class(const MlpNetwork& net, const Vector& input) {
  Eigen::Index best = 0;
  forward(net, input).logits.maxCoeff(&best);
  return static_cast<int>(best);
}

void validate(const MlpNetwork& net, const AttackSpec& spec) {
  if (spec.x_hat.size() != net.input_dim())
    throw std::invalid_argument("attack spec: x_hat dimension mismatch");
  if (spec.x_hat.minCoeff() < 0.0 || spec.x_hat.maxCoeff() > 1.0)
    throw std::invalid_argument("attack spec: x_hat outside [0,1]");
  if (spec.radius < 0.0) throw std::invalid_argument("attack spec: negative radius");
  if (spec.true_class < 0 || spec.true_class >= net.num_classes() ||
      spec.target_class < 0 || spec.target_class >= net.num_classes())
    throw std::invalid_argument("attack spec: class index out of range");
  if (spec.true_class == spec.target_class)
    throw std::invalid_argument("attack spec: target class equals true class");
}

MarginObjective margin_objective(const MlpNetwork& net, int true_class,
                                 int target_class) {
  if (true_class < 0 || true_class >= net.num_classes() || target_class < 0 ||
      target_class >= net.num_classes())
    throw std::invalid_argument("margin objective: class index out of range");
  if (true_class == target_class)
    throw std::invalid_argument("margin objective: classes must differ");
  MarginObjective m;
  m.w_ell = net.output().W.row(true_class) - net.output().W.row(target_class);
  m.w0 = net.output().b(true_class) - net.output().b(target_class);
  return m;
}

double margin_value(const MlpNetwork& net, const MarginObjective& mobj,
                    const Vector& input) {
  ForwardTrace t = forward(net, input);
  return mobj.w_ell.dot(t.x.back()) + mobj.w0;
}

namespace {

// Range image of an affine map: lo/hi of W x + b over componentwise x-ranges.
void affine_range(const Matrix& W, const Vector& b, const Vector& xlo,
                  const Vector& xhi, Vector& lo, Vector& hi) {
  Matrix Wp = W.cwiseMax(0.0), Wn = W.cwiseMin(0.0);
  lo = Wp * xlo + Wn * xhi + b;
  hi = Wp * xhi + Wn * xlo + b;
}

// Backward linear pass: a sound lower bound on c . x_m + c0 over the attack
// region, where x_m is the activation of layer m (m = 1 is the input).
// Unstable relu units are replaced by linear envelopes chosen per sign of the
// incoming coefficient; the final affine function is minimized over the input
// box.
double backward_lower_bound(const MlpNetwork& net,
                            const PreactivationBounds& bounds, Vector c,
                            double c0, int m) {
  for (int k = m - 1; k >= 1; --k) {
    const Vector& lo = bounds.pre_lo[k - 1];
    const Vector& hi = bounds.pre_hi[k - 1];
    // Express c . relu(z) >= a . z + a0 componentwise, valid on [lo, hi].
    Vector a(c.size());
    double a0 = 0.0;
    for (Eigen::Index i = 0; i < c.size(); ++i) {
      double l = lo(i), u = hi(i);
      if (u <= 0.0) {
        a(i) = 0.0;
      } else if (l >= 0.0) {
        a(i) = c(i);
      } else if (c(i) >= 0.0) {
        // Lower envelope of relu: either 0 or identity; pick the one with the
        // smaller worst case over [l, u].
        a(i) = (u >= -l) ? c(i) : 0.0;
      } else {
        // Upper envelope (chord) since the coefficient is negative.
        double s = u / (u - l);
        a(i) = c(i) * s;
        a0 += -c(i) * s * l;  // chord intercept: s*(z-l) >= relu(z) on [l,u]
      }
    }
    const Layer& lay = net.hidden(k);
    c0 += a0 + a.dot(lay.b);
    c = lay.W.transpose() * a;
  }
  double v = c0;
  for (Eigen::Index i = 0; i < c.size(); ++i)
    v += std::min(c(i) * bounds.input_lo(i), c(i) * bounds.input_hi(i));
  return v;
}

}  // namespace

PreactivationBounds interval_bounds(const MlpNetwork& net,
                                    const AttackSpec& spec,
                                    const BoundsOptions& opts) {
  validate(net, spec);
  PreactivationBounds b;
  // Enclosing box of the attack region.  An L2 ball of radius rho deviates at
  // most rho per coordinate, so the same clipped box encloses both norms.
  b.input_lo = (spec.x_hat.array() - spec.radius).cwiseMax(0.0).matrix();
  b.input_hi = (spec.x_hat.array() + spec.radius).cwiseMin(1.0).matrix();
  b.input_center = 0.5 * (b.input_hi + b.input_lo);
  b.input_radius = 0.5 * (b.input_hi - b.input_lo);

  Vector xlo = b.input_lo, xhi = b.input_hi;
  for (int k = 1; k < net.depth(); ++k) {
    const Layer& l = net.hidden(k);
    Vector lo, hi;
    affine_range(l.W, l.b, xlo, xhi, lo, hi);
    if (opts.backward_linear && k > 1) {
      // Tighten each preactivation with a backward linear pass; -row gives
      // the upper bound.
      for (Eigen::Index i = 0; i < lo.size(); ++i) {
        Vector row = l.W.row(i);
        double blo = backward_lower_bound(net, b, row, l.b(i), k);
        double bhi = -backward_lower_bound(net, b, -row, -l.b(i), k);
        lo(i) = std::max(lo(i), blo);
        hi(i) = std::min(hi(i), bhi);
      }
    }
    b.pre_lo.push_back(lo);
    b.pre_hi.push_back(hi);
    b.post_center.push_back(0.5 * (hi.cwiseMax(0.0) + lo.cwiseMax(0.0)));
    b.post_radius.push_back(0.5 * (hi.cwiseMax(0.0) - lo.cwiseMax(0.0)));
    xlo = lo.cwiseMax(0.0);
    xhi = hi.cwiseMax(0.0);
  }
  return b;
}

double baseline_margin_bound(const MlpNetwork& net, const AttackSpec& spec,
                             const PreactivationBounds& bounds,
                             const BoundsOptions& opts) {
  MarginObjective m = margin_objective(net, spec.true_class, spec.target_class);
  int ell = net.depth();
  if (opts.backward_linear)
    return backward_lower_bound(net, bounds, m.w_ell, m.w0, ell);
  double v = m.w0;
  if (ell == 1) {
    for (Eigen::Index i = 0; i < m.w_ell.size(); ++i)
      v += std::min(m.w_ell(i) * bounds.input_lo(i),
                    m.w_ell(i) * bounds.input_hi(i));
    return v;
  }
  Vector alo = bounds.pre_lo.back().cwiseMax(0.0);
  Vector ahi = bounds.pre_hi.back().cwiseMax(0.0);
  for (Eigen::Index i = 0; i < m.w_ell.size(); ++i)
    v += std::min(m.w_ell(i) * alo(i), m.w_ell(i) * ahi(i));
  return v;
}

}  // namespace certilax
