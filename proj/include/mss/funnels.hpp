#pragma once

// Neal's funnel family: the classic funnel, the funnel with a Gaussian
// likelihood on each local parameter, and the generalized per-coordinate
// hyper-model used as the first sampling stage for both.
//
// Layouts: classic/likelihood models are (x_1..x_n, y); the generalized
// model is (x_1..x_n, log10_z_1..log10_z_n). Every log-density keeps its
// normalization constants so values can be compared across models.

#include "mss/model.hpp"

namespace mss {

struct ClassicFunnelSpec {
  int n_local = 9;
  double hyper_sigma = 3.0;  ///< y ~ N(0, hyper_sigma); x_i | y ~ N(0, e^{y/2})
  void validate() const;
};

struct LikelihoodFunnelSpec {
  ClassicFunnelSpec funnel;
  double data_mean = 2.0;
  double data_sigma = 5.0;
  void validate() const;
};

struct GeneralizedFunnelSpec {
  int n_local = 9;
  double a_bound = 4.0;  ///< log10 z_i ~ Uniform(-a, a)
  bool with_likelihood = false;
  double data_mean = 2.0;
  double data_sigma = 5.0;
  void validate() const;
};

double log_normal_pdf(double x, double mean, double sigma);

double classic_funnel_logp(const Vector& x, double y, const ClassicFunnelSpec& spec = {});
double likelihood_funnel_logp(const Vector& x, double y, const LikelihoodFunnelSpec& spec = {});
/// Sum over i of log N(x_i; data_mean, data_sigma).
double funnel_likelihood_term(const Vector& x, const LikelihoodFunnelSpec& spec = {});
/// Throws BoundViolation unless every |log10_z_i| < a.
double generalized_funnel_logp(const Vector& x, const Vector& log10_z,
                               const GeneralizedFunnelSpec& spec = {});

/// log10 z_i = (y / 2) log10 e for every i.
Vector funnel_constraint(double y, int n_local = 9);

/// log p(y | d) up to a constant: log N(y; 0, hyper_sigma) +
/// n log N(data_mean; 0, sqrt(data_sigma^2 + e^y)).
double likelihood_funnel_analytic_marginal(double y, const LikelihoodFunnelSpec& spec = {});
double likelihood_funnel_analytic_marginal_grad(double y, const LikelihoodFunnelSpec& spec = {});

/// Models whose local scale is e^{y/2} under a Gaussian hyper-prior; this is
/// what prior reparameterization needs to know.
class FunnelFamilyModel : public TargetModel {
 public:
  virtual int n_local() const = 0;
  virtual double hyper_sigma() const = 0;
  Eigen::Index hyper_index() const { return n_local(); }
};

class ClassicFunnelModel final : public FunnelFamilyModel {
 public:
  explicit ClassicFunnelModel(ClassicFunnelSpec spec = {});
  const ParameterSpace& space() const override { return space_; }
  double log_density_grad(const Vector& theta, Vector& grad) const override;
  double log_density(const Vector& theta) const override;
  std::optional<Vector> draw_prior(Rng& rng) const override;
  int n_local() const override { return spec_.n_local; }
  double hyper_sigma() const override { return spec_.hyper_sigma; }
  const ClassicFunnelSpec& spec() const { return spec_; }

 private:
  ClassicFunnelSpec spec_;
  ParameterSpace space_;
};

class LikelihoodFunnelModel final : public FunnelFamilyModel {
 public:
  explicit LikelihoodFunnelModel(LikelihoodFunnelSpec spec = {});
  const ParameterSpace& space() const override { return space_; }
  double log_density_grad(const Vector& theta, Vector& grad) const override;
  double log_density(const Vector& theta) const override;
  std::optional<Vector> draw_prior(Rng& rng) const override;
  int n_local() const override { return spec_.funnel.n_local; }
  double hyper_sigma() const override { return spec_.funnel.hyper_sigma; }
  const LikelihoodFunnelSpec& spec() const { return spec_; }

 private:
  LikelihoodFunnelSpec spec_;
  ParameterSpace space_;
};

class GeneralizedFunnelModel final : public TargetModel {
 public:
  explicit GeneralizedFunnelModel(GeneralizedFunnelSpec spec = {});
  const ParameterSpace& space() const override { return space_; }
  double log_density_grad(const Vector& theta, Vector& grad) const override;
  std::optional<Vector> draw_prior(Rng& rng) const override;
  const GeneralizedFunnelSpec& spec() const { return spec_; }

 private:
  GeneralizedFunnelSpec spec_;
  ParameterSpace space_;
};

}  // namespace mss
