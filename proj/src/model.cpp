#include "mss/model.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include "mss/errors.hpp"

namespace mss {

Bound Bound::interval(double lo, double hi) {
  if (!std::isfinite(lo) || !std::isfinite(hi) || !(lo < hi)) {
    std::ostringstream os;
    os << "bound requires finite lower < upper, got (" << lo << ", " << hi << ")";
    throw InvalidArgument(os.str());
  }
  return Bound{lo, hi};
}

ParameterSpace::ParameterSpace(std::vector<ParamEntry> entries) {
  for (auto& e : entries) add(std::move(e.name), e.bound, e.block);
}

void ParameterSpace::add(std::string name, Bound bound, Block block) {
  if (index_of(name)) throw InvalidArgument("duplicate parameter name '" + name + "'");
  const bool lo_inf = std::isinf(bound.lower) && bound.lower < 0;
  const bool hi_inf = std::isinf(bound.upper) && bound.upper > 0;
  if (!(lo_inf && hi_inf) && !(bound.is_bounded() && bound.lower < bound.upper)) {
    throw InvalidArgument("parameter '" + name + "' needs finite lower < upper or no bound");
  }
  entries_.push_back(ParamEntry{std::move(name), bound, block});
}

std::vector<std::string> ParameterSpace::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

std::vector<Eigen::Index> ParameterSpace::indices(Block block) const {
  std::vector<Eigen::Index> out;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].block == block) out.push_back(static_cast<Eigen::Index>(i));
  }
  return out;
}

std::optional<Eigen::Index> ParameterSpace::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name == name) return static_cast<Eigen::Index>(i);
  }
  return std::nullopt;
}

ParameterSpace ParameterSpace::unbounded_copy() const {
  ParameterSpace out;
  for (const auto& e : entries_) out.add(e.name, Bound::unbounded(), e.block);
  return out;
}

void ParameterSpace::check_inside(const Vector& theta) const {
  if (theta.size() != dim()) {
    throw DimensionMismatch("expected " + std::to_string(dim()) + " coordinates, got " +
                            std::to_string(theta.size()));
  }
  for (Eigen::Index i = 0; i < dim(); ++i) {
    const auto& e = (*this)[i];
    if (!std::isfinite(theta[i]) || (e.bound.is_bounded() && !e.bound.contains(theta[i]))) {
      std::ostringstream os;
      os.precision(17);
      os << "parameter '" << e.name << "' = " << theta[i] << " outside (" << e.bound.lower << ", "
         << e.bound.upper << ")";
      throw BoundViolation(os.str());
    }
  }
}

bool ParameterSpace::inside(const Vector& theta) const {
  if (theta.size() != dim()) return false;
  for (Eigen::Index i = 0; i < dim(); ++i) {
    const auto& b = (*this)[i].bound;
    if (!std::isfinite(theta[i])) return false;
    if (b.is_bounded() && !b.contains(theta[i])) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Transform

namespace {

double sigmoid(double u) {
  if (u >= 0) return 1.0 / (1.0 + std::exp(-u));
  const double e = std::exp(u);
  return e / (1.0 + e);
}

// log(sigmoid(u)) + log(1 - sigmoid(u)) without cancellation.
double log_sigmoid_pair(double u) {
  const double a = std::abs(u);
  return -a - 2.0 * std::log1p(std::exp(-a));
}

}  // namespace

Transform Transform::affine(double scale, double shift) {
  if (!(scale != 0.0) || !std::isfinite(scale) || !std::isfinite(shift)) {
    throw InvalidArgument("affine transform needs finite non-zero scale");
  }
  return Transform(Kind::affine, scale, shift);
}

Transform Transform::logit_affine(double lower, double upper) {
  Bound::interval(lower, upper);
  return Transform(Kind::logit_affine, lower, upper);
}

Transform Transform::for_bound(const Bound& b) {
  return b.is_bounded() ? logit_affine(b.lower, b.upper) : identity();
}

double Transform::forward(double x) const {
  switch (kind_) {
    case Kind::identity:
      return x;
    case Kind::affine:
      return a_ * x + b_;
    case Kind::log10:
      return std::log10(x);
    case Kind::logit_affine: {
      const double p = (x - a_) / (b_ - a_);
      return std::log(p) - std::log1p(-p);
    }
  }
  return x;
}

double Transform::inverse(double u) const {
  switch (kind_) {
    case Kind::identity:
      return u;
    case Kind::affine:
      return (u - b_) / a_;
    case Kind::log10:
      return std::pow(10.0, u);
    case Kind::logit_affine:
      return a_ + (b_ - a_) * sigmoid(u);
  }
  return u;
}

double Transform::log_abs_det_forward(double x) const {
  switch (kind_) {
    case Kind::identity:
      return 0.0;
    case Kind::affine:
      return std::log(std::abs(a_));
    case Kind::log10:
      return -std::log(x) - std::log(std::log(10.0));
    case Kind::logit_affine:
      return std::log(b_ - a_) - std::log(x - a_) - std::log(b_ - x);
  }
  return 0.0;
}

double Transform::log_abs_det_inverse(double u) const {
  switch (kind_) {
    case Kind::identity:
      return 0.0;
    case Kind::affine:
      return -std::log(std::abs(a_));
    case Kind::log10:
      return u * std::log(10.0) + std::log(std::log(10.0));
    case Kind::logit_affine:
      return std::log(b_ - a_) + log_sigmoid_pair(u);
  }
  return 0.0;
}

double Transform::inverse_derivative(double u) const {
  switch (kind_) {
    case Kind::identity:
      return 1.0;
    case Kind::affine:
      return 1.0 / a_;
    case Kind::log10:
      return std::log(10.0) * std::pow(10.0, u);
    case Kind::logit_affine: {
      const double s = sigmoid(u);
      return (b_ - a_) * s * (1.0 - s);
    }
  }
  return 1.0;
}

double Transform::inverse_log_det_gradient(double u) const {
  switch (kind_) {
    case Kind::identity:
    case Kind::affine:
      return 0.0;
    case Kind::log10:
      return std::log(10.0);
    case Kind::logit_affine:
      return 1.0 - 2.0 * sigmoid(u);
  }
  return 0.0;
}

UnconstrainedPoint to_unconstrained(const ParameterSpace& space, const Vector& theta) {
  space.check_inside(theta);
  UnconstrainedPoint out{Vector(theta.size()), 0.0};
  for (Eigen::Index i = 0; i < space.dim(); ++i) {
    const Transform t = Transform::for_bound(space[i].bound);
    out.theta_u[i] = t.forward(theta[i]);
    out.logdet += t.log_abs_det_forward(theta[i]);
  }
  return out;
}

ConstrainedPoint from_unconstrained(const ParameterSpace& space, const Vector& theta_u) {
  if (theta_u.size() != space.dim()) throw DimensionMismatch("from_unconstrained: dimension mismatch");
  ConstrainedPoint out{Vector(theta_u.size()), 0.0};
  for (Eigen::Index i = 0; i < space.dim(); ++i) {
    const Transform t = Transform::for_bound(space[i].bound);
    out.theta[i] = t.inverse(theta_u[i]);
    out.logdet += t.log_abs_det_inverse(theta_u[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// UnconstrainedTarget

UnconstrainedTarget::UnconstrainedTarget(ModelPtr model)
    : model_(std::move(model)), space_(model_->space().unbounded_copy()) {
  transforms_.reserve(static_cast<std::size_t>(model_->dim()));
  for (const auto& e : model_->space().entries()) transforms_.push_back(Transform::for_bound(e.bound));
}

Vector UnconstrainedTarget::to_native(const Vector& theta_u) const {
  Vector theta(theta_u.size());
  for (Eigen::Index i = 0; i < theta_u.size(); ++i) {
    theta[i] = transforms_[static_cast<std::size_t>(i)].inverse(theta_u[i]);
  }
  return theta;
}

Vector UnconstrainedTarget::to_sampling(const Vector& theta) const {
  return to_unconstrained(model_->space(), theta).theta_u;
}

double UnconstrainedTarget::log_density(const Vector& theta_u) const {
  const Vector theta = to_native(theta_u);
  // Logistic images can round onto the bound itself far out in the tails.
  if (!model_->space().inside(theta)) return -kInf;
  double lp = model_->log_density(theta);
  for (Eigen::Index i = 0; i < theta_u.size(); ++i) {
    lp += transforms_[static_cast<std::size_t>(i)].log_abs_det_inverse(theta_u[i]);
  }
  return lp;
}

double UnconstrainedTarget::log_density_grad(const Vector& theta_u, Vector& grad) const {
  const Vector theta = to_native(theta_u);
  grad.setZero(theta_u.size());
  if (!model_->space().inside(theta)) return -kInf;
  Vector g;
  double lp = model_->log_density_grad(theta, g);
  for (Eigen::Index i = 0; i < theta_u.size(); ++i) {
    const auto& t = transforms_[static_cast<std::size_t>(i)];
    lp += t.log_abs_det_inverse(theta_u[i]);
    grad[i] = g[i] * t.inverse_derivative(theta_u[i]) + t.inverse_log_det_gradient(theta_u[i]);
  }
  return lp;
}

std::optional<Vector> UnconstrainedTarget::draw_prior(Rng& rng) const {
  auto d = model_->draw_prior(rng);
  if (!d) return std::nullopt;
  return to_sampling(*d);
}

ModelPtr unconstrained_target(ModelPtr model) {
  return std::make_shared<UnconstrainedTarget>(std::move(model));
}

double check_gradient(const TargetModel& model, const Vector& theta, double h) {
  if (!(h > 0)) throw InvalidArgument("check_gradient: h must be positive");
  if (!model.space().inside(theta)) throw NonFiniteDensity("check_gradient: base point outside the support");
  Vector grad;
  const double f0 = model.log_density_grad(theta, grad);
  if (!std::isfinite(f0)) {
    throw NonFiniteDensity("check_gradient: log-density not finite at the base point");
  }
  double worst = 0.0;
  Vector probe = theta;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    probe[i] = theta[i] + h;
    const double fp = model.space().inside(probe) ? model.log_density(probe) : -kInf;
    probe[i] = theta[i] - h;
    const double fm = model.space().inside(probe) ? model.log_density(probe) : -kInf;
    probe[i] = theta[i];
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NonFiniteDensity("check_gradient: log-density not finite in the stencil of coordinate '" +
                             model.space()[i].name + "'");
    }
    const double fd = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::abs(grad[i] - fd) / (std::abs(grad[i]) + 1e-12));
  }
  return worst;
}

}  // namespace mss
