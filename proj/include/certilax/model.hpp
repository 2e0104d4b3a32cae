#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace certilax {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class Norm { L2, Linf };

struct Layer {
  Matrix W;
  Vector b;
};

/// Feedforward ReLU classifier.  Hidden layers apply x -> relu(W x + b);
/// the output layer is affine (logits, no activation).
class MlpNetwork {
 public:
  MlpNetwork() = default;
  MlpNetwork(std::vector<Layer> hidden, Layer output);

  int input_dim() const { return dims_.front(); }
  int num_classes() const { return static_cast<int>(output_.b.size()); }
  /// Number of weight layers counting the output layer (ell >= 1).
  int depth() const { return static_cast<int>(hidden_.size()) + 1; }
  int num_hidden_layers() const { return static_cast<int>(hidden_.size()); }
  /// Width of layer value x_k, k = 1..depth(); x_1 is the input.
  int layer_dim(int k) const { return dims_.at(k - 1); }
  int total_neurons() const;  // sum of layer_dim(1..depth())
  int total_hidden_units() const;

  const Layer& hidden(int k) const { return hidden_.at(k - 1); }  // k=1..ell-1
  const Layer& output() const { return output_; }

 private:
  std::vector<Layer> hidden_;
  Layer output_;
  std::vector<int> dims_;  // n_1..n_ell
};

struct ForwardTrace {
  std::vector<Vector> x;  // x[0]=input .. x[ell-1]=last hidden activation
  Vector logits;
};

ForwardTrace forward(const MlpNetwork& net, const Vector& input);
int predicted_class(const MlpNetwork& net, const Vector& input);

/// Attack instance: perturbations of x_hat within the given ball,
/// intersected with the valid-input box [0,1]^n, trying to move the
/// prediction from true_class to target_class.
struct AttackSpec {
  Vector x_hat;
  int true_class = 0;
  int target_class = 0;
  double radius = 0.0;
  Norm norm = Norm::L2;
};

void validate(const MlpNetwork& net, const AttackSpec& spec);

/// Linear functional whose value on the last hidden activation gives the
/// logit margin: margin(x) = w_ell . x_ell + w0.  Positive margin means the
/// true class still beats the target class.
struct MarginObjective {
  Vector w_ell;
  double w0 = 0.0;
};

MarginObjective margin_objective(const MlpNetwork& net, int true_class,
                                 int target_class);
double margin_value(const MlpNetwork& net, const MarginObjective& mobj,
                    const Vector& input);

/// Componentwise pre- and post-activation ranges valid for every input in
/// the attack region.  pre[j], j = 0..ell-2, bounds W_{j+1} x_{j+1} + b_{j+1};
/// post centers/radii describe relu of those ranges.  input_lo/hi is the
/// enclosing box of the attack region (ball clipped to [0,1]^n for L2,
/// the clipped box itself for Linf).
struct PreactivationBounds {
  std::vector<Vector> pre_lo, pre_hi;
  std::vector<Vector> post_center, post_radius;
  Vector input_lo, input_hi;
  Vector input_center, input_radius;
};

struct BoundsOptions {
  bool backward_linear = false;  // tighten with a backward linear pass
};

PreactivationBounds interval_bounds(const MlpNetwork& net,
                                    const AttackSpec& spec,
                                    const BoundsOptions& opts = {});

/// Cheap sound lower bound on the margin over the attack region, obtained by
/// propagating ranges (optionally a backward linear pass) through the net.
double baseline_margin_bound(const MlpNetwork& net, const AttackSpec& spec,
                             const PreactivationBounds& bounds,
                             const BoundsOptions& opts = {});

}  // namespace certilax
