#pragma once

// RealNVP-style normalizing flow with affine coupling layers, trained by
// maximum likelihood with hand-written backpropagation.
//
// Evaluation runs in the normalizing direction (data -> base):
//   v --box probit--> w --marginal--> m --standardize--> u --layers--> z ~ N(0, I)
// The marginal step maps each coordinate through Phi^{-1}(F(w)), F being a
// smoothed estimate of that coordinate's own CDF, so the coupling layers only
// have to model dependence. Affine couplings cannot reshape a single
// coordinate without borrowing from the others, which otherwise shows up as
// spurious correlation.
// A coupling layer keeps the `mask` coordinates and maps the rest as
//   y = x * exp(s) + t,  s = 3 tanh(raw / 3),
// with (raw, t) produced by a two-hidden-layer tanh perceptron fed the
// `cond` coordinates. A dim-1 flow has an empty conditioner input, so each
// layer is a learned affine map.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "mss/io.hpp"
#include "mss/model.hpp"

namespace mss {

struct CouplingLayer {
  Vector mask;  ///< 1 keeps the coordinate, 0 transforms it
  Vector cond;  ///< 1 feeds the coordinate to the conditioner
  Matrix W1, W2, W3;
  Vector b1, b2, b3;

  Eigen::Index dim() const { return mask.size(); }
  Eigen::Index hidden() const { return W1.rows(); }
};

/// Equal-bandwidth Gaussian mixture used as a smooth one-dimensional CDF,
/// mixed with one wide Gaussian of weight tail_weight. The wide component
/// sets the shape of the tails beyond the data range, where the narrow
/// kernels alone would fall off far too fast.
struct MarginalCdf {
  Vector centers;  ///< ascending
  Vector weights;  ///< positive, sum to one
  double bandwidth = 1.0;
  double tail_weight = 0.0;  ///< in [0, 1)
  double tail_mean = 0.0;
  double tail_sd = 1.0;
  Vector log_weights;  ///< derived; filled by prepare()

  /// Validates and fills the derived fields.
  void prepare();
};

/// A sequence of marginal passes for one coordinate, applied in order.
using MarginalChain = std::vector<MarginalCdf>;

/// Binned Gaussian kernel estimate: `bins` linear-binned centers over the
/// data range, bandwidth bw_scale times Silverman's rule, plus a tail
/// component of weight 1e-3 at the sample mean with twice the sample sd.
MarginalCdf fit_marginal_cdf(const Vector& x, int bins, double bw_scale = 1.0);

struct MarginalEval {
  double m;       ///< Phi^{-1}(F(w))
  double log_dm;  ///< log dm/dw
  double dm;      ///< dm/dw
  double dlog_dm; ///< d/dw log dm/dw
};

MarginalEval marginal_forward(const MarginalCdf& c, double w);
double marginal_inverse(const MarginalCdf& c, double m);
MarginalEval marginal_forward(const MarginalChain& chain, double w);
double marginal_inverse(const MarginalChain& chain, double m);

/// Per-coordinate preprocessing. Coordinates with a finite (lower, upper)
/// pass through w = Phi^{-1}((v - lower) / (upper - lower)) first, so a
/// uniform marginal on the box becomes exactly standard normal.
struct Standardizer {
  Vector lower, upper;  ///< +-inf where no box applies
  std::vector<MarginalChain> marginal;  ///< empty, or one (possibly empty) chain per coordinate
  Vector mean, scale;

  Eigen::Index dim() const { return mean.size(); }
  bool boxed(Eigen::Index i) const { return std::isfinite(lower[i]) && std::isfinite(upper[i]); }
  bool gaussianized(Eigen::Index i) const {
    return !marginal.empty() && !marginal[static_cast<std::size_t>(i)].empty();
  }
};

struct FlowModel {
  static constexpr int kVersion = 1;
  int dim = 0;
  Standardizer standardizer;
  std::vector<CouplingLayer> layers;

  std::size_t n_params() const;
};

struct TrainConfig {
  int n_layers = 8;
  int hidden_width = 64;
  int batch = 256;
  int max_epochs = 500;
  double learn_rate = 1e-3;
  double final_lr_frac = 0.01;  ///< cosine decay ends at learn_rate * final_lr_frac
  double val_frac = 0.1;
  int patience = 20;
  double clip_norm = 10.0;
  /// Kernel centers of the per-coordinate marginal step; 0 disables it.
  int marginal_bins = 256;
  /// Repeated passes remove most of the smoothing bias of the first one.
  int marginal_passes = 2;
  double marginal_bw_scale = 1.0;
  std::uint64_t seed = 1;

  void validate() const;
  json to_json() const;
  static TrainConfig from_json(const json& j);
  static TrainConfig from_json(const json& j, const TrainConfig& defaults);
};

struct TrainHistory {
  std::vector<double> train_logp;  ///< mean per epoch
  std::vector<double> val_logp;
  std::vector<double> best_val_logp;  ///< running best, non-decreasing
  int best_epoch = -1;
};

/// Flow whose layers all output zero scale and shift, i.e. the identity on
/// top of the given standardizer.
FlowModel make_identity_flow(int dim, int n_layers, int hidden_width, const Standardizer& standardizer);
Standardizer identity_standardizer(int dim);

/// Fits the standardizer on `samples`; `support` (optional, one bound per
/// column) enables the probit box for bounded columns. marginal_bins > 0
/// adds `marginal_passes` per-coordinate marginal passes.
Standardizer fit_standardizer(const Matrix& samples, const std::vector<Bound>& support = {},
                              int marginal_bins = 0, int marginal_passes = 1, double marginal_bw_scale = 1.0);

/// Random hidden weights, zero output layer.
FlowModel init_flow(const Standardizer& standardizer, const TrainConfig& cfg);

struct FlowEval {
  double logp;
  Vector grad;
};

/// Log-density with its exact gradient. Points outside a box get a finite
/// quadratic penalty pulling them back rather than -inf.
FlowEval flow_log_density(const FlowModel& flow, const Vector& x);
double flow_log_density_value(const FlowModel& flow, const Vector& x);

/// Row-wise log-density, parallel over rows.
Vector flow_log_density_batch(const FlowModel& flow, const Matrix& X);
/// Sequential reference for flow_log_density_batch.
Vector flow_log_density_batch_serial(const FlowModel& flow, const Matrix& X);

/// Data -> base point and back, row-wise.
Matrix flow_to_base(const FlowModel& flow, const Matrix& X);
Matrix flow_from_base(const FlowModel& flow, const Matrix& Z);

Matrix flow_sample(const FlowModel& flow, int n, std::uint64_t seed);

struct TrainResult {
  FlowModel flow;
  TrainHistory history;
};

/// Maximum likelihood with Adam, cosine learning-rate decay, gradient-norm
/// clipping and early stopping on the validation split.
TrainResult train_flow(const Matrix& samples, const TrainConfig& cfg, const std::vector<Bound>& support = {});

/// Parameter-space gradient of the mean log-density over the rows of X;
/// exposed for testing the backward pass.
double flow_mean_logp_param_grad(const FlowModel& flow, const Matrix& X, Vector& grad);
Vector flow_pack_params(const FlowModel& flow);
void flow_unpack_params(FlowModel& flow, const Vector& params);

json flow_to_json(const FlowModel& flow);
FlowModel flow_from_json(const json& j);
void save_flow(const FlowModel& flow, const std::filesystem::path& path);
FlowModel load_flow(const std::filesystem::path& path);

/// TargetModel view of a flow (unbounded space with the given names).
class FlowTarget final : public TargetModel {
 public:
  FlowTarget(FlowModel flow, std::vector<std::string> names);
  const ParameterSpace& space() const override { return space_; }
  double log_density_grad(const Vector& x, Vector& grad) const override;
  const FlowModel& flow() const { return flow_; }

 private:
  FlowModel flow_;
  ParameterSpace space_;
};

}  // namespace mss
