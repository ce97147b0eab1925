#pragma once

// Red-noise hierarchical models on a PTADataset. Coefficients are laid out
// (a_1, b_1, ..., a_Nf, b_Nf): a_k scales the sine, b_k the cosine of bin k,
// and both share the bin's prior variance phi_k.

#include <memory>
#include <utility>

#include "mss/model.hpp"
#include "mss/pta_sim.hpp"

namespace mss {

using DatasetPtr = std::shared_ptr<const PTADataset>;

struct PowerLawSpec {
  std::pair<double, double> log10_A_bounds{-2.0, 2.0};
  std::pair<double, double> gamma_bounds{0.0, 7.0};
  double f_ref = 0.0;  ///< <= 0 means 1 / T of the dataset
  void validate() const;
  double reference_frequency(const PTADataset& ds) const { return f_ref > 0 ? f_ref : 1.0 / ds.span(); }
  bool inside(double log10_A, double gamma) const;
};

struct FreeSpectralSpec {
  int n_freq = 10;
  std::pair<double, double> log10_rho_bounds{-10.0, 4.0};
  void validate() const;
};

/// -1/2 (d - F a)^T (d - F a) / sigma^2, constant dropped. If `grad` is
/// non-null it receives F^T (d - F a) / sigma^2.
double pta_loglike(const PTADataset& ds, const Vector& a, Vector* grad = nullptr);

/// Gaussian prior on coefficients; phi_diag has one entry per frequency bin.
/// Optional outputs: gradient w.r.t. a, and w.r.t. log(phi_k) per bin.
double pta_coeff_prior_logp(const Vector& a, const Vector& phi_diag, Vector* grad_a = nullptr,
                            Vector* grad_log_phi = nullptr);

/// phi_k = A (f_k / f_ref)^(-gamma).
Vector power_law_phi(double A, double gamma, const Vector& freqs, double f_ref, bool allow_zero = false);

/// Likelihood + coefficient prior + uniform hyper-priors on (log10 A, gamma).
double pta_powerlaw_logp(const PTADataset& ds, const Vector& a, double log10_A, double gamma,
                         const PowerLawSpec& spec = {});

double pta_freespectral_logp(const PTADataset& ds, const Vector& a, const Vector& log10_rho,
                             const FreeSpectralSpec& spec = {});

/// log10 rho_k = log10 A - gamma log10(f_k / f_ref).
Vector pta_constraint(double log10_A, double gamma, const Vector& freqs, double f_ref);

/// log N(d; 0, sigma^2 I + F phi F^T) evaluated through the 2 Nf x 2 Nf
/// inner matrix. Optional gradient w.r.t. (log10 A, gamma).
double pta_analytic_marginal_logp(const PTADataset& ds, double log10_A, double gamma,
                                  const PowerLawSpec& spec = {}, Eigen::Vector2d* grad = nullptr);

/// Same marginal for an arbitrary per-bin phi. `grad_log_phi` (optional)
/// is per bin.
double pta_marginal_logp_phi(const PTADataset& ds, const Vector& phi_bins, Vector* grad_log_phi = nullptr);

/// Expands per-bin variances to per-coefficient ones.
Vector expand_bins(const Vector& per_bin);

class PowerLawModel final : public TargetModel {
 public:
  PowerLawModel(DatasetPtr ds, PowerLawSpec spec = {});
  const ParameterSpace& space() const override { return space_; }
  double log_density_grad(const Vector& theta, Vector& grad) const override;
  double log_density(const Vector& theta) const override;
  std::optional<Vector> draw_prior(Rng& rng) const override;

  const PTADataset& dataset() const { return *ds_; }
  const DatasetPtr& dataset_ptr() const { return ds_; }
  const PowerLawSpec& spec() const { return spec_; }
  double f_ref() const { return f_ref_; }
  Vector phi(double log10_A, double gamma) const;
  /// d log phi_k / d log10_A is ln 10; d log phi_k / d gamma is this vector.
  const Vector& dlogphi_dgamma() const { return dlogphi_dgamma_; }

 private:
  DatasetPtr ds_;
  PowerLawSpec spec_;
  double f_ref_;
  Vector dlogphi_dgamma_;
  ParameterSpace space_;
};

class FreeSpectralModel final : public TargetModel {
 public:
  FreeSpectralModel(DatasetPtr ds, FreeSpectralSpec spec);
  const ParameterSpace& space() const override { return space_; }
  double log_density_grad(const Vector& theta, Vector& grad) const override;
  std::optional<Vector> draw_prior(Rng& rng) const override;
  const FreeSpectralSpec& spec() const { return spec_; }
  const PTADataset& dataset() const { return *ds_; }

 private:
  DatasetPtr ds_;
  FreeSpectralSpec spec_;
  ParameterSpace space_;
};

/// The coefficient-marginalized power-law posterior over (log10 A, gamma).
class PowerLawMarginalModel final : public TargetModel {
 public:
  PowerLawMarginalModel(DatasetPtr ds, PowerLawSpec spec = {});
  const ParameterSpace& space() const override { return space_; }
  double log_density_grad(const Vector& theta, Vector& grad) const override;
  double log_density(const Vector& theta) const override;
  std::optional<Vector> draw_prior(Rng& rng) const override;

 private:
  DatasetPtr ds_;
  PowerLawSpec spec_;
  ParameterSpace space_;
};

/// Exact Gaussian conditional p(a | phi, d).
struct GaussianConditional {
  Vector mean;
  Matrix chol;  ///< lower-triangular L with L L^T = Sigma
  Matrix cov;
  double log_det_chol = 0.0;  ///< sum log diag L
};

GaussianConditional cprs_conditional_moments(const PTADataset& ds, const Vector& phi_bins);
/// Same, from the precomputed products (F^T F, F^T d) directly.
GaussianConditional cprs_conditional_moments(const Matrix& FtF, const Vector& Ftd, double sigma,
                                             const Vector& phi_bins);

}  // namespace mss
