#include "mss/reparam.hpp"

#include <cmath>
#include <numbers>
#include <utility>

#include "mss/errors.hpp"

namespace mss {

namespace {

constexpr double kLog2Pi = 1.83787706640934548356;

class NaiveTarget final : public ReparamModel {
 public:
  explicit NaiveTarget(ModelPtr model) : model_(std::move(model)) {}
  const ParameterSpace& space() const override { return model_->space(); }
  double log_density_grad(const Vector& u, Vector& grad) const override { return model_->log_density_grad(u, grad); }
  double log_density(const Vector& u) const override { return model_->log_density(u); }
  std::optional<Vector> draw_prior(Rng& rng) const override { return model_->draw_prior(rng); }
  Vector pushforward(const Vector& u) const override { return u; }
  double log_jacobian(const Vector&) const override { return 0.0; }
  const TargetModel& native() const override { return *model_; }

 private:
  ModelPtr model_;
};

class FunnelPRS final : public ReparamModel {
 public:
  explicit FunnelPRS(std::shared_ptr<const FunnelFamilyModel> model)
      : model_(std::move(model)), n_(model_->n_local()), s_(model_->hyper_sigma()) {
    for (int i = 1; i <= n_; ++i) space_.add("x_hat_" + std::to_string(i), Bound::unbounded(), Block::local);
    space_.add("y_hat", Bound::unbounded(), Block::hyper);
  }

  const ParameterSpace& space() const override { return space_; }

  double log_density_grad(const Vector& u, Vector& grad) const override {
    const Vector theta = pushforward(u);
    Vector g;
    const double lp = model_->log_density_grad(theta, g);
    const double y = theta[n_];
    const double scale = std::exp(0.5 * y);
    grad.resize(u.size());
    double gy = g[n_] + 0.5 * n_;
    for (int i = 0; i < n_; ++i) {
      grad[i] = g[i] * scale;
      gy += 0.5 * g[i] * theta[i];
    }
    grad[n_] = s_ * gy;
    return lp + log_jac_y(y);
  }

  std::optional<Vector> draw_prior(Rng& rng) const override { return std_normal_vector(rng, n_ + 1); }

  Vector pushforward(const Vector& u) const override {
    if (u.size() != n_ + 1) throw DimensionMismatch("PRS funnel expects " + std::to_string(n_ + 1) + " coordinates");
    Vector theta(n_ + 1);
    const double y = s_ * u[n_];
    theta.head(n_) = std::exp(0.5 * y) * u.head(n_);
    theta[n_] = y;
    return theta;
  }

  double log_jacobian(const Vector& u) const override { return log_jac_y(s_ * u[n_]); }
  const TargetModel& native() const override { return *model_; }

 private:
  double log_jac_y(double y) const { return std::log(s_) + 0.5 * n_ * y; }

  std::shared_ptr<const FunnelFamilyModel> model_;
  int n_;
  double s_;
  ParameterSpace space_;
};

// Likelihood funnel: y = hyper_sigma * y_hat and x_i = m(y) + s(y) x_hat_i
// with the exact conditional x_i | y, d ~ N(m, s^2),
// s^2 = 1 / (e^{-y} + 1 / data_sigma^2), m = s^2 data_mean / data_sigma^2.
class LikelihoodFunnelCPRS final : public ReparamModel {
 public:
  explicit LikelihoodFunnelCPRS(std::shared_ptr<const LikelihoodFunnelModel> model)
      : model_(std::move(model)), n_(model_->n_local()), h_(model_->hyper_sigma()) {
    for (int i = 1; i <= n_; ++i) space_.add("x_hat_" + std::to_string(i), Bound::unbounded(), Block::local);
    space_.add("y_hat", Bound::unbounded(), Block::hyper);
  }

  const ParameterSpace& space() const override { return space_; }

  double log_density_grad(const Vector& u, Vector& grad) const override {
    if (u.size() != n_ + 1) throw DimensionMismatch("CPRS funnel has the wrong dimension");
    const double y = h_ * u[n_];
    const auto x_hat = u.head(n_);
    grad.resize(u.size());
    grad.head(n_) = -x_hat;
    grad[n_] = h_ * likelihood_funnel_analytic_marginal_grad(y, model_->spec());
    return likelihood_funnel_analytic_marginal(y, model_->spec()) - 0.5 * x_hat.squaredNorm() -
           n_ * 0.5 * kLog2Pi + std::log(h_);
  }

  std::optional<Vector> draw_prior(Rng& rng) const override { return std_normal_vector(rng, n_ + 1); }

  Vector pushforward(const Vector& u) const override {
    if (u.size() != n_ + 1) throw DimensionMismatch("CPRS funnel has the wrong dimension");
    const double y = h_ * u[n_];
    const auto [m, s] = moments(y);
    Vector theta(n_ + 1);
    theta.head(n_) = (m + s * u.head(n_).array()).matrix();
    theta[n_] = y;
    return theta;
  }

  double log_jacobian(const Vector& u) const override {
    return std::log(h_) + n_ * std::log(moments(h_ * u[n_]).second);
  }

  const TargetModel& native() const override { return *model_; }

 private:
  std::pair<double, double> moments(double y) const {
    const auto& spec = model_->spec();
    const double inv_d2 = 1.0 / (spec.data_sigma * spec.data_sigma);
    const double s2 = 1.0 / (std::exp(-y) + inv_d2);
    return {s2 * spec.data_mean * inv_d2, std::sqrt(s2)};
  }

  std::shared_ptr<const LikelihoodFunnelModel> model_;
  int n_;
  double h_;
  ParameterSpace space_;
};

ParameterSpace standardized_pta_space(const PowerLawModel& m) {
  ParameterSpace sp;
  sp.add("log10_A", m.space()[0].bound, Block::hyper);
  sp.add("gamma", m.space()[1].bound, Block::hyper);
  for (int k = 1; k <= m.dataset().n_freq(); ++k) {
    sp.add("a_hat_" + std::to_string(k), Bound::unbounded(), Block::local);
    sp.add("b_hat_" + std::to_string(k), Bound::unbounded(), Block::local);
  }
  return sp;
}

Vector draw_pta_standardized(const PowerLawModel& m, Rng& rng) {
  const auto& spec = m.spec();
  Vector u(2 + 2 * m.dataset().n_freq());
  u[0] = uniform(rng, spec.log10_A_bounds.first, spec.log10_A_bounds.second);
  u[1] = uniform(rng, spec.gamma_bounds.first, spec.gamma_bounds.second);
  for (Eigen::Index i = 2; i < u.size(); ++i) u[i] = std_normal(rng);
  return u;
}

class PowerLawPRS final : public ReparamModel {
 public:
  explicit PowerLawPRS(std::shared_ptr<const PowerLawModel> model)
      : model_(std::move(model)), space_(standardized_pta_space(*model_)) {}

  const ParameterSpace& space() const override { return space_; }

  double log_density_grad(const Vector& u, Vector& grad) const override {
    space_.check_inside(u);
    const Vector phi = expand_bins(model_->phi(u[0], u[1]));
    const Vector sd = phi.cwiseSqrt();
    Vector theta = u;
    theta.tail(sd.size()) = sd.cwiseProduct(u.tail(sd.size()));
    Vector g;
    const double lp = model_->log_density_grad(theta, g);
    const Vector dlog_a = expand_bins(model_->dlogphi_dgamma());
    grad.resize(u.size());
    const Vector ga = g.tail(sd.size());
    grad.tail(sd.size()) = ga.cwiseProduct(sd);
    // a_j depends on eta through sqrt(phi_j); log|J| = 1/2 sum_j log phi_j.
    const Vector ga_a = 0.5 * ga.cwiseProduct(theta.tail(sd.size()));
    grad[0] = g[0] + std::numbers::ln10 * (ga_a.sum() + 0.5 * static_cast<double>(sd.size()));
    grad[1] = g[1] + ga_a.dot(dlog_a) + 0.5 * dlog_a.sum();
    return lp + 0.5 * phi.array().log().sum();
  }

  std::optional<Vector> draw_prior(Rng& rng) const override { return draw_pta_standardized(*model_, rng); }

  Vector pushforward(const Vector& u) const override {
    if (u.size() != space_.dim()) throw DimensionMismatch("PRS power-law target has the wrong dimension");
    const Vector sd = expand_bins(model_->phi(u[0], u[1])).cwiseSqrt();
    Vector theta = u;
    theta.tail(sd.size()) = sd.cwiseProduct(u.tail(sd.size()));
    return theta;
  }

  double log_jacobian(const Vector& u) const override {
    return 0.5 * expand_bins(model_->phi(u[0], u[1])).array().log().sum();
  }

  const TargetModel& native() const override { return *model_; }

 private:
  std::shared_ptr<const PowerLawModel> model_;
  ParameterSpace space_;
};

class PowerLawCPRS final : public ReparamModel {
 public:
  explicit PowerLawCPRS(std::shared_ptr<const PowerLawModel> model)
      : model_(std::move(model)), space_(standardized_pta_space(*model_)) {
    const auto& ds = model_->dataset();
    const auto& spec = model_->spec();
    const double s2 = ds.sigma() * ds.sigma();
    // pta_loglike drops the white-noise normalization; put it back so the
    // value matches native + log|J| exactly.
    constant_ = 0.5 * static_cast<double>(ds.n_samples()) * (kLog2Pi + std::log(s2)) -
                static_cast<double>(ds.n_freq()) * kLog2Pi -
                std::log(spec.log10_A_bounds.second - spec.log10_A_bounds.first) -
                std::log(spec.gamma_bounds.second - spec.gamma_bounds.first);
  }

  const ParameterSpace& space() const override { return space_; }

  // Inner density = log p(d | eta) + log N(a_hat; 0, I) + hyper-prior, up to
  // the white-noise normalization folded into constant_.
  double log_density_grad(const Vector& u, Vector& grad) const override {
    space_.check_inside(u);
    const Vector phi = model_->phi(u[0], u[1]);
    Vector g_log_phi;
    const double marg = pta_marginal_logp_phi(model_->dataset(), phi, &g_log_phi);
    const auto a_hat = u.tail(u.size() - 2);
    grad.resize(u.size());
    grad[0] = std::numbers::ln10 * g_log_phi.sum();
    grad[1] = g_log_phi.dot(model_->dlogphi_dgamma());
    grad.tail(a_hat.size()) = -a_hat;
    return marg - 0.5 * a_hat.squaredNorm() + constant_;
  }

  std::optional<Vector> draw_prior(Rng& rng) const override { return draw_pta_standardized(*model_, rng); }

  Vector pushforward(const Vector& u) const override {
    if (u.size() != space_.dim()) throw DimensionMismatch("CPRS target has the wrong dimension");
    const auto c = cprs_conditional_moments(model_->dataset(), model_->phi(u[0], u[1]));
    Vector theta = u;
    theta.tail(c.mean.size()) = c.mean + c.chol * u.tail(c.mean.size());
    return theta;
  }

  double log_jacobian(const Vector& u) const override {
    return cprs_conditional_moments(model_->dataset(), model_->phi(u[0], u[1])).log_det_chol;
  }

  const TargetModel& native() const override { return *model_; }

 private:
  std::shared_ptr<const PowerLawModel> model_;
  ParameterSpace space_;
  double constant_ = 0.0;
};

// Generalized funnel: x_i = 10^{v_i} x_hat_i with v_i = log10 z_i.
class GeneralizedFunnelPRS final : public ReparamModel {
 public:
  explicit GeneralizedFunnelPRS(std::shared_ptr<const GeneralizedFunnelModel> model)
      : model_(std::move(model)), n_(model_->spec().n_local) {
    for (int i = 1; i <= n_; ++i) space_.add("x_hat_" + std::to_string(i), Bound::unbounded(), Block::local);
    for (int i = 0; i < n_; ++i) {
      const auto& e = model_->space()[n_ + i];
      space_.add(e.name, e.bound, Block::hyper);
    }
  }

  const ParameterSpace& space() const override { return space_; }

  // Written out directly: the prior part is a standard normal in x_hat and
  // flat in log10 z, so only the likelihood couples the two blocks.
  double log_density_grad(const Vector& u, Vector& grad) const override {
    space_.check_inside(u);
    const auto& spec = model_->spec();
    const double inv_d2 = 1.0 / (spec.data_sigma * spec.data_sigma);
    grad.resize(u.size());
    double lp = 0.0;
    for (int i = 0; i < n_; ++i) {
      const double x_hat = u[i];
      lp += -0.5 * x_hat * x_hat - 0.5 * kLog2Pi - std::log(2.0 * spec.a_bound);
      grad[i] = -x_hat;
      grad[n_ + i] = 0.0;
      if (spec.with_likelihood) {
        const double z = std::pow(10.0, u[n_ + i]);
        const double x = z * x_hat;
        const double dl = -(x - spec.data_mean) * inv_d2;
        lp += log_normal_pdf(x, spec.data_mean, spec.data_sigma);
        grad[i] += dl * z;
        grad[n_ + i] = dl * x * std::numbers::ln10;
      }
    }
    return lp;
  }

  std::optional<Vector> draw_prior(Rng& rng) const override {
    Vector u(2 * n_);
    for (int i = 0; i < n_; ++i) u[i] = std_normal(rng);
    const double a = model_->spec().a_bound;
    for (int i = 0; i < n_; ++i) u[n_ + i] = uniform(rng, -a, a);
    return u;
  }

  Vector pushforward(const Vector& u) const override {
    if (u.size() != 2 * n_) throw DimensionMismatch("standardized generalized funnel has the wrong dimension");
    Vector theta = u;
    for (int i = 0; i < n_; ++i) theta[i] = std::pow(10.0, u[n_ + i]) * u[i];
    return theta;
  }

  double log_jacobian(const Vector& u) const override { return std::numbers::ln10 * u.tail(n_).sum(); }
  const TargetModel& native() const override { return *model_; }

 private:
  std::shared_ptr<const GeneralizedFunnelModel> model_;
  int n_;
  ParameterSpace space_;
};

// Free spectral: a = 10^{v_k / 2} a_hat for both coefficients of bin k.
class FreeSpectralPRS final : public ReparamModel {
 public:
  explicit FreeSpectralPRS(std::shared_ptr<const FreeSpectralModel> model)
      : model_(std::move(model)), nf_(model_->spec().n_freq) {
    for (int k = 0; k < nf_; ++k) {
      const auto& e = model_->space()[k];
      space_.add(e.name, e.bound, Block::hyper);
    }
    for (int k = 1; k <= nf_; ++k) {
      space_.add("a_hat_" + std::to_string(k), Bound::unbounded(), Block::local);
      space_.add("b_hat_" + std::to_string(k), Bound::unbounded(), Block::local);
    }
  }

  const ParameterSpace& space() const override { return space_; }

  double log_density_grad(const Vector& u, Vector& grad) const override {
    space_.check_inside(u);
    const Vector theta = pushforward(u);
    Vector g;
    const double lp = model_->log_density_grad(theta, g);
    grad.resize(u.size());
    for (int k = 0; k < nf_; ++k) {
      const double s = std::pow(10.0, 0.5 * u[k]);
      double gv = g[k] + std::numbers::ln10;
      for (int c = 0; c < 2; ++c) {
        const int j = nf_ + 2 * k + c;
        grad[j] = g[j] * s;
        gv += 0.5 * std::numbers::ln10 * g[j] * theta[j];
      }
      grad[k] = gv;
    }
    return lp + log_jacobian(u);
  }

  std::optional<Vector> draw_prior(Rng& rng) const override {
    Vector u(3 * nf_);
    const auto& b = model_->spec().log10_rho_bounds;
    for (int k = 0; k < nf_; ++k) u[k] = uniform(rng, b.first, b.second);
    for (int j = nf_; j < 3 * nf_; ++j) u[j] = std_normal(rng);
    return u;
  }

  Vector pushforward(const Vector& u) const override {
    if (u.size() != 3 * nf_) throw DimensionMismatch("standardized free spectral model has the wrong dimension");
    Vector theta = u;
    for (int k = 0; k < nf_; ++k) {
      const double s = std::pow(10.0, 0.5 * u[k]);
      theta[nf_ + 2 * k] = s * u[nf_ + 2 * k];
      theta[nf_ + 2 * k + 1] = s * u[nf_ + 2 * k + 1];
    }
    return theta;
  }

  double log_jacobian(const Vector& u) const override { return std::numbers::ln10 * u.head(nf_).sum(); }
  const TargetModel& native() const override { return *model_; }

 private:
  std::shared_ptr<const FreeSpectralModel> model_;
  int nf_;
  ParameterSpace space_;
};

// Free spectral: a = mean(rho) + L(rho) a_hat, the exact conditional given
// the per-bin powers.
class FreeSpectralCPRS final : public ReparamModel {
 public:
  explicit FreeSpectralCPRS(std::shared_ptr<const FreeSpectralModel> model)
      : model_(std::move(model)), nf_(model_->spec().n_freq) {
    for (int k = 0; k < nf_; ++k) {
      const auto& e = model_->space()[k];
      space_.add(e.name, e.bound, Block::hyper);
    }
    for (int k = 1; k <= nf_; ++k) {
      space_.add("a_hat_" + std::to_string(k), Bound::unbounded(), Block::local);
      space_.add("b_hat_" + std::to_string(k), Bound::unbounded(), Block::local);
    }
    const auto& ds = model_->dataset();
    const auto& b = model_->spec().log10_rho_bounds;
    const double s2 = ds.sigma() * ds.sigma();
    constant_ = 0.5 * static_cast<double>(ds.n_samples()) * (kLog2Pi + std::log(s2)) - nf_ * kLog2Pi -
                nf_ * std::log(b.second - b.first);
  }

  const ParameterSpace& space() const override { return space_; }

  double log_density_grad(const Vector& u, Vector& grad) const override {
    space_.check_inside(u);
    Vector g_log_phi;
    const double marg = pta_marginal_logp_phi(model_->dataset(), rho(u), &g_log_phi);
    const auto a_hat = u.tail(2 * nf_);
    grad.resize(u.size());
    grad.head(nf_) = std::numbers::ln10 * g_log_phi;
    grad.tail(2 * nf_) = -a_hat;
    return marg - 0.5 * a_hat.squaredNorm() + constant_;
  }

  std::optional<Vector> draw_prior(Rng& rng) const override {
    Vector u(3 * nf_);
    const auto& b = model_->spec().log10_rho_bounds;
    for (int k = 0; k < nf_; ++k) u[k] = uniform(rng, b.first, b.second);
    for (int j = nf_; j < 3 * nf_; ++j) u[j] = std_normal(rng);
    return u;
  }

  Vector pushforward(const Vector& u) const override {
    if (u.size() != 3 * nf_) throw DimensionMismatch("standardized free spectral model has the wrong dimension");
    const auto c = cprs_conditional_moments(model_->dataset(), rho(u));
    Vector theta = u;
    theta.tail(2 * nf_) = c.mean + c.chol * u.tail(2 * nf_);
    return theta;
  }

  double log_jacobian(const Vector& u) const override {
    return cprs_conditional_moments(model_->dataset(), rho(u)).log_det_chol;
  }

  const TargetModel& native() const override { return *model_; }

 private:
  Vector rho(const Vector& u) const {
    return u.head(nf_).unaryExpr([](double v) { return std::pow(10.0, v); });
  }

  std::shared_ptr<const FreeSpectralModel> model_;
  int nf_;
  ParameterSpace space_;
  double constant_ = 0.0;
};

}  // namespace

Scheme parse_scheme(const std::string& name) {
  if (name == "ns") return Scheme::ns;
  if (name == "prs") return Scheme::prs;
  if (name == "cprs") return Scheme::cprs;
  throw InvalidArgument("unknown scheme '" + name + "' (expected ns, prs or cprs)");
}

std::string scheme_name(Scheme s) {
  switch (s) {
    case Scheme::ns: return "ns";
    case Scheme::prs: return "prs";
    case Scheme::cprs: return "cprs";
  }
  return "?";
}

ReparamPtr ns_target(ModelPtr model) {
  if (!model) throw InvalidArgument("null model");
  return std::make_shared<NaiveTarget>(std::move(model));
}

ReparamPtr prs_target(ModelPtr model) {
  if (auto f = std::dynamic_pointer_cast<const FunnelFamilyModel>(model)) return std::make_shared<FunnelPRS>(f);
  if (auto p = std::dynamic_pointer_cast<const PowerLawModel>(model)) return std::make_shared<PowerLawPRS>(p);
  if (auto g = std::dynamic_pointer_cast<const GeneralizedFunnelModel>(model)) {
    return std::make_shared<GeneralizedFunnelPRS>(g);
  }
  if (auto f = std::dynamic_pointer_cast<const FreeSpectralModel>(model)) return std::make_shared<FreeSpectralPRS>(f);
  throw UnsupportedModel("prior reparameterization needs a funnel-family, power-law or generalized model");
}

ReparamPtr cprs_target(std::shared_ptr<const PowerLawModel> model) {
  if (!model) throw InvalidArgument("null model");
  return std::make_shared<PowerLawCPRS>(std::move(model));
}

ReparamPtr cprs_target(std::shared_ptr<const LikelihoodFunnelModel> model) {
  if (!model) throw InvalidArgument("null model");
  return std::make_shared<LikelihoodFunnelCPRS>(std::move(model));
}

ReparamPtr cprs_target(std::shared_ptr<const FreeSpectralModel> model) {
  if (!model) throw InvalidArgument("null model");
  return std::make_shared<FreeSpectralCPRS>(std::move(model));
}

ReparamPtr make_scheme_target(Scheme scheme, ModelPtr model) {
  switch (scheme) {
    case Scheme::ns: return ns_target(std::move(model));
    case Scheme::prs: return prs_target(std::move(model));
    case Scheme::cprs:
      if (auto p = std::dynamic_pointer_cast<const PowerLawModel>(model)) return cprs_target(p);
      if (auto f = std::dynamic_pointer_cast<const FreeSpectralModel>(model)) return cprs_target(f);
      if (auto l = std::dynamic_pointer_cast<const LikelihoodFunnelModel>(model)) return cprs_target(l);
      throw UnsupportedModel(
          "conditional posterior reparameterization needs a likelihood-funnel, power-law or free-spectral model");
  }
  throw InvalidArgument("unknown scheme");
}

Chain push_chain(const ReparamModel& target, const Chain& inner) {
  Chain out = inner;
  out.names = target.native().space().names();
  for (Eigen::Index r = 0; r < inner.size(); ++r) {
    const Vector theta = target.pushforward(inner.draws.row(r).transpose());
    out.draws.row(r) = theta.transpose();
    out.logp[r] = target.native().log_density(theta);
  }
  return out;
}

}  // namespace mss
