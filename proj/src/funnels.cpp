#include "mss/funnels.hpp"

#include <cmath>
#include <numbers>

#include "mss/errors.hpp"

namespace mss {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * ln(2 pi)

void check_layout(const Vector& theta, Eigen::Index expected) {
  if (theta.size() != expected) {
    throw DimensionMismatch("expected " + std::to_string(expected) + " coordinates, got " +
                            std::to_string(theta.size()));
  }
}

}  // namespace

void ClassicFunnelSpec::validate() const {
  if (n_local < 1) throw InvalidArgument("funnel needs n_local >= 1");
  if (!(hyper_sigma > 0)) throw InvalidArgument("funnel needs hyper_sigma > 0");
}

void LikelihoodFunnelSpec::validate() const {
  funnel.validate();
  if (!(data_sigma > 0)) throw InvalidArgument("likelihood funnel needs data_sigma > 0");
}

void GeneralizedFunnelSpec::validate() const {
  if (n_local < 1) throw InvalidArgument("generalized funnel needs n_local >= 1");
  if (!(a_bound > 0)) throw InvalidArgument("generalized funnel needs a_bound > 0");
  if (with_likelihood && !(data_sigma > 0)) throw InvalidArgument("data_sigma must be positive");
}

double log_normal_pdf(double x, double mean, double sigma) {
  const double r = (x - mean) / sigma;
  return -0.5 * r * r - std::log(sigma) - kHalfLog2Pi;
}

double classic_funnel_logp(const Vector& x, double y, const ClassicFunnelSpec& spec) {
  const double inv_var = std::exp(-y);
  const double n = static_cast<double>(x.size());
  return log_normal_pdf(y, 0.0, spec.hyper_sigma) - 0.5 * inv_var * x.squaredNorm() - 0.5 * n * y -
         n * kHalfLog2Pi;
}

double funnel_likelihood_term(const Vector& x, const LikelihoodFunnelSpec& spec) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) s += log_normal_pdf(x[i], spec.data_mean, spec.data_sigma);
  return s;
}

double likelihood_funnel_logp(const Vector& x, double y, const LikelihoodFunnelSpec& spec) {
  return classic_funnel_logp(x, y, spec.funnel) + funnel_likelihood_term(x, spec);
}

double generalized_funnel_logp(const Vector& x, const Vector& log10_z, const GeneralizedFunnelSpec& spec) {
  if (x.size() != log10_z.size()) throw DimensionMismatch("x and log10_z must have equal length");
  const double ln10 = std::numbers::ln10;
  const double log_prior = -std::log(2.0 * spec.a_bound);
  double lp = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = log10_z[i];
    if (!(std::abs(v) < spec.a_bound)) {
      throw BoundViolation("log10_z_" + std::to_string(i + 1) + " outside (-a, a)");
    }
    const double r = x[i] * std::pow(10.0, -v);
    lp += -0.5 * r * r - v * ln10 - kHalfLog2Pi + log_prior;
    if (spec.with_likelihood) lp += log_normal_pdf(x[i], spec.data_mean, spec.data_sigma);
  }
  return lp;
}

Vector funnel_constraint(double y, int n_local) {
  return Vector::Constant(n_local, 0.5 * y * std::numbers::log10e);
}

double likelihood_funnel_analytic_marginal(double y, const LikelihoodFunnelSpec& spec) {
  const double s = std::sqrt(spec.data_sigma * spec.data_sigma + std::exp(y));
  return log_normal_pdf(y, 0.0, spec.funnel.hyper_sigma) +
         spec.funnel.n_local * log_normal_pdf(spec.data_mean, 0.0, s);
}

double likelihood_funnel_analytic_marginal_grad(double y, const LikelihoodFunnelSpec& spec) {
  // d/dy of log N(mu; 0, sqrt(v)) with v = sigma^2 + e^y is (mu^2 / v - 1) e^y / (2 v).
  const double ey = std::exp(y);
  const double v = spec.data_sigma * spec.data_sigma + ey;
  const double mu2 = spec.data_mean * spec.data_mean;
  const double h = spec.funnel.hyper_sigma;
  return -y / (h * h) + spec.funnel.n_local * 0.5 * ey * (mu2 / v - 1.0) / v;
}

// ---------------------------------------------------------------------------

namespace {

ParameterSpace funnel_space(int n_local) {
  ParameterSpace s;
  for (int i = 0; i < n_local; ++i) s.add("x_" + std::to_string(i + 1), Bound::unbounded(), Block::local);
  s.add("y", Bound::unbounded(), Block::hyper);
  return s;
}

// Classic funnel value and gradient; grad must already be sized n + 1.
double classic_value_grad(const Vector& theta, int n, double hyper_sigma, Vector& grad) {
  const double y = theta[n];
  const double inv_var = std::exp(-y);
  double sq = 0.0;
  for (int i = 0; i < n; ++i) {
    sq += theta[i] * theta[i];
    grad[i] = -theta[i] * inv_var;
  }
  grad[n] = -y / (hyper_sigma * hyper_sigma) - 0.5 * n + 0.5 * sq * inv_var;
  return log_normal_pdf(y, 0.0, hyper_sigma) - 0.5 * inv_var * sq - 0.5 * n * y - n * kHalfLog2Pi;
}

Vector funnel_prior_draw(Rng& rng, int n, double hyper_sigma) {
  Vector out(n + 1);
  const double y = hyper_sigma * std_normal(rng);
  const double scale = std::exp(0.5 * y);
  for (int i = 0; i < n; ++i) out[i] = scale * std_normal(rng);
  out[n] = y;
  return out;
}

}  // namespace

ClassicFunnelModel::ClassicFunnelModel(ClassicFunnelSpec spec) : spec_(spec) {
  spec_.validate();
  space_ = funnel_space(spec_.n_local);
}

double ClassicFunnelModel::log_density(const Vector& theta) const {
  check_layout(theta, space_.dim());
  return classic_funnel_logp(theta.head(spec_.n_local), theta[spec_.n_local], spec_);
}

double ClassicFunnelModel::log_density_grad(const Vector& theta, Vector& grad) const {
  check_layout(theta, space_.dim());
  grad.resize(theta.size());
  return classic_value_grad(theta, spec_.n_local, spec_.hyper_sigma, grad);
}

std::optional<Vector> ClassicFunnelModel::draw_prior(Rng& rng) const {
  return funnel_prior_draw(rng, spec_.n_local, spec_.hyper_sigma);
}

LikelihoodFunnelModel::LikelihoodFunnelModel(LikelihoodFunnelSpec spec) : spec_(spec) {
  spec_.validate();
  space_ = funnel_space(spec_.funnel.n_local);
}

double LikelihoodFunnelModel::log_density(const Vector& theta) const {
  check_layout(theta, space_.dim());
  const int n = spec_.funnel.n_local;
  return likelihood_funnel_logp(theta.head(n), theta[n], spec_);
}

double LikelihoodFunnelModel::log_density_grad(const Vector& theta, Vector& grad) const {
  check_layout(theta, space_.dim());
  const int n = spec_.funnel.n_local;
  grad.resize(theta.size());
  double lp = classic_value_grad(theta, n, spec_.funnel.hyper_sigma, grad);
  const double inv_s2 = 1.0 / (spec_.data_sigma * spec_.data_sigma);
  for (int i = 0; i < n; ++i) {
    lp += log_normal_pdf(theta[i], spec_.data_mean, spec_.data_sigma);
    grad[i] -= (theta[i] - spec_.data_mean) * inv_s2;
  }
  return lp;
}

std::optional<Vector> LikelihoodFunnelModel::draw_prior(Rng& rng) const {
  return funnel_prior_draw(rng, spec_.funnel.n_local, spec_.funnel.hyper_sigma);
}

GeneralizedFunnelModel::GeneralizedFunnelModel(GeneralizedFunnelSpec spec) : spec_(spec) {
  spec_.validate();
  for (int i = 0; i < spec_.n_local; ++i) {
    space_.add("x_" + std::to_string(i + 1), Bound::unbounded(), Block::local);
  }
  for (int i = 0; i < spec_.n_local; ++i) {
    space_.add("log10_z_" + std::to_string(i + 1), Bound::interval(-spec_.a_bound, spec_.a_bound),
               Block::hyper);
  }
}

double GeneralizedFunnelModel::log_density_grad(const Vector& theta, Vector& grad) const {
  check_layout(theta, space_.dim());
  const int n = spec_.n_local;
  const double ln10 = std::numbers::ln10;
  const double log_prior = -std::log(2.0 * spec_.a_bound);
  const double inv_s2 = 1.0 / (spec_.data_sigma * spec_.data_sigma);
  grad.resize(theta.size());
  double lp = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = theta[i];
    const double v = theta[n + i];
    if (!(std::abs(v) < spec_.a_bound)) {
      throw BoundViolation("log10_z_" + std::to_string(i + 1) + " outside (-a, a)");
    }
    const double inv_z = std::pow(10.0, -v);
    const double r = x * inv_z;
    lp += -0.5 * r * r - v * ln10 - kHalfLog2Pi + log_prior;
    grad[i] = -r * inv_z;
    grad[n + i] = ln10 * (r * r - 1.0);
    if (spec_.with_likelihood) {
      lp += log_normal_pdf(x, spec_.data_mean, spec_.data_sigma);
      grad[i] -= (x - spec_.data_mean) * inv_s2;
    }
  }
  return lp;
}

std::optional<Vector> GeneralizedFunnelModel::draw_prior(Rng& rng) const {
  const int n = spec_.n_local;
  Vector out(2 * n);
  for (int i = 0; i < n; ++i) {
    const double v = uniform(rng, -spec_.a_bound, spec_.a_bound);
    out[n + i] = v;
    out[i] = std::pow(10.0, v) * std_normal(rng);
  }
  return out;
}

}  // namespace mss
