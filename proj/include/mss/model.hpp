#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mss/random.hpp"

namespace mss {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Open interval (lower, upper); both infinite means unbounded.
struct Bound {
  double lower = -kInf;
  double upper = kInf;

  static Bound unbounded() { return {}; }
  static Bound interval(double lo, double hi);

  bool is_bounded() const { return std::isfinite(lower) && std::isfinite(upper); }
  bool contains(double v) const { return v > lower && v < upper; }
  double width() const { return upper - lower; }
};

enum class Block { local, hyper };

struct ParamEntry {
  std::string name;
  Bound bound;
  Block block = Block::local;
};

/// Ordered, named parameter layout shared by a model and everything that
/// samples or serializes it.
class ParameterSpace {
 public:
  ParameterSpace() = default;
  explicit ParameterSpace(std::vector<ParamEntry> entries);

  void add(std::string name, Bound bound, Block block);

  Eigen::Index dim() const { return static_cast<Eigen::Index>(entries_.size()); }
  const ParamEntry& operator[](Eigen::Index i) const { return entries_[static_cast<std::size_t>(i)]; }
  const std::vector<ParamEntry>& entries() const { return entries_; }

  std::vector<std::string> names() const;
  std::vector<Eigen::Index> indices(Block block) const;
  std::optional<Eigen::Index> index_of(const std::string& name) const;

  /// Same names and blocks, every bound removed.
  ParameterSpace unbounded_copy() const;

  /// Throws BoundViolation naming the first offending coordinate.
  void check_inside(const Vector& theta) const;
  bool inside(const Vector& theta) const;

 private:
  std::vector<ParamEntry> entries_;
};

/// Differentiable unnormalized log-density. Implementations must be pure so
/// that many chains can evaluate the same instance concurrently.
class TargetModel {
 public:
  virtual ~TargetModel() = default;

  virtual const ParameterSpace& space() const = 0;

  /// Log-density and its gradient (written into `grad`, resized as needed).
  virtual double log_density_grad(const Vector& theta, Vector& grad) const = 0;

  virtual double log_density(const Vector& theta) const {
    Vector g;
    return log_density_grad(theta, g);
  }

  /// Exact draw from the model's prior blocks, when the model has one.
  virtual std::optional<Vector> draw_prior(Rng& /*rng*/) const { return std::nullopt; }

  Eigen::Index dim() const { return space().dim(); }
};

using ModelPtr = std::shared_ptr<const TargetModel>;

/// Per-coordinate bijection used to move between native and sampling
/// coordinates.
class Transform {
 public:
  enum class Kind { identity, affine, log10, logit_affine };

  static Transform identity() { return Transform(Kind::identity, 1.0, 0.0); }
  /// u = scale * x + shift
  static Transform affine(double scale, double shift);
  static Transform log10() { return Transform(Kind::log10, 1.0, 0.0); }
  /// u = logit((x - lower) / (upper - lower))
  static Transform logit_affine(double lower, double upper);
  /// Identity for unbounded coordinates, logit-affine for bounded ones.
  static Transform for_bound(const Bound& b);

  Kind kind() const { return kind_; }

  double forward(double x) const;
  double inverse(double u) const;
  /// log |du/dx| at x.
  double log_abs_det_forward(double x) const;
  /// log |dx/du| at u.
  double log_abs_det_inverse(double u) const;
  /// dx/du at u.
  double inverse_derivative(double u) const;
  /// d/du log|dx/du| at u.
  double inverse_log_det_gradient(double u) const;

 private:
  Transform(Kind kind, double a, double b) : kind_(kind), a_(a), b_(b) {}
  Kind kind_;
  double a_;
  double b_;
};

struct UnconstrainedPoint {
  Vector theta_u;
  double logdet = 0.0;  ///< log|det d theta_u / d theta|
};

UnconstrainedPoint to_unconstrained(const ParameterSpace& space, const Vector& theta);

struct ConstrainedPoint {
  Vector theta;
  double logdet = 0.0;  ///< log|det d theta / d theta_u|
};

ConstrainedPoint from_unconstrained(const ParameterSpace& space, const Vector& theta_u);

/// The model pulled back to an everywhere-unbounded space, including the
/// inverse-transform Jacobian.
class UnconstrainedTarget final : public TargetModel {
 public:
  explicit UnconstrainedTarget(ModelPtr model);

  const ParameterSpace& space() const override { return space_; }
  double log_density_grad(const Vector& theta_u, Vector& grad) const override;
  double log_density(const Vector& theta_u) const override;
  std::optional<Vector> draw_prior(Rng& rng) const override;

  const TargetModel& base() const { return *model_; }
  const ModelPtr& base_ptr() const { return model_; }
  Vector to_native(const Vector& theta_u) const;
  Vector to_sampling(const Vector& theta) const;

 private:
  ModelPtr model_;
  ParameterSpace space_;
  std::vector<Transform> transforms_;
};

ModelPtr unconstrained_target(ModelPtr model);

/// max_i |analytic_i - central_difference_i| / (|analytic_i| + 1e-12), with
/// stencil half-width h. Throws NonFiniteDensity if any stencil point is
/// outside the support.
double check_gradient(const TargetModel& model, const Vector& theta, double h = 1e-5);

}  // namespace mss
