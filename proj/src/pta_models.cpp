#include "mss/pta_models.hpp"

#include <cmath>
#include <numbers>

#include "mss/errors.hpp"

namespace mss {

namespace {

constexpr double kLog2Pi = 1.83787706640934548356;

void check_pair(const std::pair<double, double>& b, const char* what) {
  if (!std::isfinite(b.first) || !std::isfinite(b.second) || !(b.first < b.second)) {
    throw InvalidArgument(std::string(what) + " bounds must be finite with lower < upper");
  }
}

bool open_inside(double v, const std::pair<double, double>& b) { return v > b.first && v < b.second; }

void require_sigma(const PTADataset& ds) {
  if (!(ds.sigma() > 0)) throw InvalidArgument("white-noise sigma must be positive");
}

void require_coeffs(const PTADataset& ds, const Vector& a) {
  if (a.size() != 2 * ds.n_freq()) {
    throw DimensionMismatch("expected " + std::to_string(2 * ds.n_freq()) + " Fourier coefficients, got " +
                            std::to_string(a.size()));
  }
}

// Inner-form factorization of the coefficient conditional:
// M = I + S F^T F S / sigma^2 with S = diag(sqrt(phi)).
struct InnerFactor {
  Vector s;
  Eigen::LLT<Matrix> llt;
  Vector sb;  ///< S F^T d / sigma^2
  Vector w;   ///< M^{-1} S F^T d / sigma^2
};

InnerFactor factor_inner(const Matrix& FtF, const Vector& Ftd, double sigma, const Vector& phi) {
  InnerFactor f;
  const Eigen::Index n = phi.size();
  f.s = phi.cwiseSqrt();
  const double inv_s2 = 1.0 / (sigma * sigma);
  Matrix M = f.s.asDiagonal() * FtF * f.s.asDiagonal() * inv_s2;
  M.diagonal().array() += 1.0;
  f.llt.compute(M);
  if (f.llt.info() != Eigen::Success) throw NumericalSingular("Cholesky of the inner matrix failed");
  f.sb = f.s.cwiseProduct(Ftd) * inv_s2;
  f.w = f.llt.solve(f.sb);
  if (!f.w.allFinite()) throw NumericalSingular("inner solve produced non-finite values");
  (void)n;
  return f;
}

}  // namespace

void PowerLawSpec::validate() const {
  check_pair(log10_A_bounds, "log10_A");
  check_pair(gamma_bounds, "gamma");
  if (f_ref < 0 || !std::isfinite(f_ref)) throw InvalidArgument("f_ref must be positive (or 0 for 1/T)");
}

bool PowerLawSpec::inside(double log10_A, double gamma) const {
  return open_inside(log10_A, log10_A_bounds) && open_inside(gamma, gamma_bounds);
}

void FreeSpectralSpec::validate() const {
  if (n_freq < 1) throw InvalidArgument("free spectral model needs n_freq >= 1");
  check_pair(log10_rho_bounds, "log10_rho");
}

Vector expand_bins(const Vector& per_bin) {
  Vector out(2 * per_bin.size());
  for (Eigen::Index i = 0; i < per_bin.size(); ++i) out[2 * i] = out[2 * i + 1] = per_bin[i];
  return out;
}

double pta_loglike(const PTADataset& ds, const Vector& a, Vector* grad) {
  require_coeffs(ds, a);
  require_sigma(ds);
  const double inv_s2 = 1.0 / (ds.sigma() * ds.sigma());
  const Vector FtFa = ds.FtF() * a;
  const double quad = ds.dtd() - 2.0 * a.dot(ds.Ftd()) + a.dot(FtFa);
  if (grad) *grad = (ds.Ftd() - FtFa) * inv_s2;
  return -0.5 * quad * inv_s2;
}

double pta_coeff_prior_logp(const Vector& a, const Vector& phi_diag, Vector* grad_a, Vector* grad_log_phi) {
  if (a.size() != 2 * phi_diag.size()) {
    throw DimensionMismatch("coefficient vector must have two entries per frequency bin");
  }
  for (Eigen::Index i = 0; i < phi_diag.size(); ++i) {
    if (!(phi_diag[i] > 0)) throw NonPositiveVariance("phi_" + std::to_string(i + 1) + " is not positive");
  }
  if (grad_a) grad_a->resize(a.size());
  if (grad_log_phi) grad_log_phi->setZero(phi_diag.size());
  double lp = 0.0;
  for (Eigen::Index i = 0; i < phi_diag.size(); ++i) {
    const double phi = phi_diag[i];
    const double log_phi = std::log(phi);
    for (int c = 0; c < 2; ++c) {
      const double x = a[2 * i + c];
      lp += -0.5 * x * x / phi - 0.5 * (kLog2Pi + log_phi);
      if (grad_a) (*grad_a)[2 * i + c] = -x / phi;
      if (grad_log_phi) (*grad_log_phi)[i] += 0.5 * x * x / phi - 0.5;
    }
  }
  return lp;
}

Vector power_law_phi(double A, double gamma, const Vector& freqs, double f_ref, bool allow_zero) {
  if (allow_zero ? !(A >= 0) : !(A > 0)) throw NonPositiveAmplitude("power-law amplitude must be positive");
  if (!(f_ref > 0)) throw InvalidArgument("f_ref must be positive");
  Vector phi(freqs.size());
  for (Eigen::Index i = 0; i < freqs.size(); ++i) {
    if (!(freqs[i] > 0)) throw InvalidArgument("frequencies must be positive");
    phi[i] = A * std::pow(freqs[i] / f_ref, -gamma);
  }
  return phi;
}

double pta_powerlaw_logp(const PTADataset& ds, const Vector& a, double log10_A, double gamma,
                         const PowerLawSpec& spec) {
  if (!spec.inside(log10_A, gamma)) throw BoundViolation("power-law hyper-parameters outside the prior box");
  const Vector phi = power_law_phi(std::pow(10.0, log10_A), gamma, ds.freqs(), spec.reference_frequency(ds));
  const double hyper = -std::log(spec.log10_A_bounds.second - spec.log10_A_bounds.first) -
                       std::log(spec.gamma_bounds.second - spec.gamma_bounds.first);
  return pta_loglike(ds, a) + pta_coeff_prior_logp(a, phi) + hyper;
}

double pta_freespectral_logp(const PTADataset& ds, const Vector& a, const Vector& log10_rho,
                             const FreeSpectralSpec& spec) {
  if (log10_rho.size() != ds.n_freq()) throw DimensionMismatch("need one log10_rho per frequency bin");
  for (Eigen::Index i = 0; i < log10_rho.size(); ++i) {
    if (!open_inside(log10_rho[i], spec.log10_rho_bounds)) {
      throw BoundViolation("log10_rho_" + std::to_string(i + 1) + " outside its prior box");
    }
  }
  const Vector phi = log10_rho.unaryExpr([](double v) { return std::pow(10.0, v); });
  const double hyper =
      -static_cast<double>(log10_rho.size()) * std::log(spec.log10_rho_bounds.second - spec.log10_rho_bounds.first);
  return pta_loglike(ds, a) + pta_coeff_prior_logp(a, phi) + hyper;
}

Vector pta_constraint(double log10_A, double gamma, const Vector& freqs, double f_ref) {
  if (freqs.size() < 2) throw DegenerateFrequencies("constraint needs at least two frequency bins");
  if (!(f_ref > 0)) throw InvalidArgument("f_ref must be positive");
  bool distinct = false;
  for (Eigen::Index i = 1; i < freqs.size(); ++i) distinct = distinct || freqs[i] != freqs[0];
  if (!distinct) throw DegenerateFrequencies("all frequencies equal; (A, gamma) not identifiable");
  Vector out(freqs.size());
  for (Eigen::Index i = 0; i < freqs.size(); ++i) out[i] = log10_A - gamma * std::log10(freqs[i] / f_ref);
  return out;
}

double pta_marginal_logp_phi(const PTADataset& ds, const Vector& phi_bins, Vector* grad_log_phi) {
  require_sigma(ds);
  if (phi_bins.size() != ds.n_freq()) throw DimensionMismatch("need one phi per frequency bin");
  const Vector phi = expand_bins(phi_bins);
  for (Eigen::Index i = 0; i < phi.size(); ++i) {
    if (!(phi[i] > 0)) throw NonPositiveVariance("phi must be positive");
  }
  const InnerFactor f = factor_inner(ds.FtF(), ds.Ftd(), ds.sigma(), phi);
  const double s2 = ds.sigma() * ds.sigma();
  const double n = static_cast<double>(ds.n_samples());
  const Matrix& L = f.llt.matrixL();
  const double log_det_M = 2.0 * L.diagonal().array().log().sum();
  const double quad = ds.dtd() / s2 - f.sb.dot(f.w);
  if (grad_log_phi) {
    const Matrix Minv = f.llt.solve(Matrix::Identity(phi.size(), phi.size()));
    grad_log_phi->setZero(phi_bins.size());
    for (Eigen::Index j = 0; j < phi.size(); ++j) {
      (*grad_log_phi)[j / 2] += 0.5 * (f.w[j] * f.w[j] + Minv(j, j) - 1.0);
    }
  }
  return -0.5 * quad - 0.5 * log_det_M - 0.5 * n * (kLog2Pi + std::log(s2));
}

double pta_analytic_marginal_logp(const PTADataset& ds, double log10_A, double gamma, const PowerLawSpec& spec,
                                  Eigen::Vector2d* grad) {
  if (!spec.inside(log10_A, gamma)) throw BoundViolation("power-law hyper-parameters outside the prior box");
  const double f_ref = spec.reference_frequency(ds);
  const Vector phi = power_law_phi(std::pow(10.0, log10_A), gamma, ds.freqs(), f_ref);
  if (!grad) return pta_marginal_logp_phi(ds, phi);
  Vector g;
  const double v = pta_marginal_logp_phi(ds, phi, &g);
  (*grad)[0] = std::numbers::ln10 * g.sum();
  double gg = 0.0;
  for (Eigen::Index i = 0; i < phi.size(); ++i) gg -= g[i] * std::log(ds.freqs()[i] / f_ref);
  (*grad)[1] = gg;
  return v;
}

GaussianConditional cprs_conditional_moments(const Matrix& FtF, const Vector& Ftd, double sigma,
                                             const Vector& phi_bins) {
  if (!(sigma > 0)) throw InvalidArgument("white-noise sigma must be positive");
  const Vector phi = expand_bins(phi_bins);
  if (FtF.rows() != phi.size() || FtF.cols() != phi.size() || Ftd.size() != phi.size()) {
    throw DimensionMismatch("F^T F / F^T d do not match the number of coefficients");
  }
  for (Eigen::Index i = 0; i < phi.size(); ++i) {
    if (!(phi[i] > 0)) throw NonPositiveVariance("phi must be positive");
  }
  const InnerFactor f = factor_inner(FtF, Ftd, sigma, phi);
  GaussianConditional out;
  const Matrix Minv = f.llt.solve(Matrix::Identity(phi.size(), phi.size()));
  out.cov = f.s.asDiagonal() * Minv * f.s.asDiagonal();
  out.cov = 0.5 * (out.cov + out.cov.transpose());
  out.mean = f.s.cwiseProduct(f.w);
  Eigen::LLT<Matrix> llt(out.cov);
  if (llt.info() != Eigen::Success) throw NumericalSingular("Cholesky of the conditional covariance failed");
  out.chol = llt.matrixL();
  out.log_det_chol = out.chol.diagonal().array().log().sum();
  return out;
}

GaussianConditional cprs_conditional_moments(const PTADataset& ds, const Vector& phi_bins) {
  return cprs_conditional_moments(ds.FtF(), ds.Ftd(), ds.sigma(), phi_bins);
}

// ---------------------------------------------------------------------------
// Models

namespace {

void add_coefficients(ParameterSpace& space, int n_freq) {
  for (int k = 1; k <= n_freq; ++k) {
    space.add("a_" + std::to_string(k), Bound::unbounded(), Block::local);
    space.add("b_" + std::to_string(k), Bound::unbounded(), Block::local);
  }
}

void check_size(const Vector& theta, Eigen::Index n) {
  if (theta.size() != n) {
    throw DimensionMismatch("expected " + std::to_string(n) + " coordinates, got " + std::to_string(theta.size()));
  }
}

}  // namespace

PowerLawModel::PowerLawModel(DatasetPtr ds, PowerLawSpec spec) : ds_(std::move(ds)), spec_(spec) {
  spec_.validate();
  require_sigma(*ds_);
  f_ref_ = spec_.reference_frequency(*ds_);
  dlogphi_dgamma_ = (ds_->freqs() / f_ref_).array().log().matrix() * -1.0;
  space_.add("log10_A", Bound::interval(spec_.log10_A_bounds.first, spec_.log10_A_bounds.second), Block::hyper);
  space_.add("gamma", Bound::interval(spec_.gamma_bounds.first, spec_.gamma_bounds.second), Block::hyper);
  add_coefficients(space_, ds_->n_freq());
}

Vector PowerLawModel::phi(double log10_A, double gamma) const {
  return power_law_phi(std::pow(10.0, log10_A), gamma, ds_->freqs(), f_ref_);
}

double PowerLawModel::log_density(const Vector& theta) const {
  check_size(theta, space_.dim());
  return pta_powerlaw_logp(*ds_, theta.tail(2 * ds_->n_freq()), theta[0], theta[1], spec_);
}

double PowerLawModel::log_density_grad(const Vector& theta, Vector& grad) const {
  check_size(theta, space_.dim());
  space_.check_inside(theta);
  const int nf = ds_->n_freq();
  const Vector a = theta.tail(2 * nf);
  const Vector phi_bins = phi(theta[0], theta[1]);
  Vector g_like, g_prior_a, g_log_phi;
  double lp = pta_loglike(*ds_, a, &g_like) + pta_coeff_prior_logp(a, phi_bins, &g_prior_a, &g_log_phi);
  lp += -std::log(spec_.log10_A_bounds.second - spec_.log10_A_bounds.first) -
        std::log(spec_.gamma_bounds.second - spec_.gamma_bounds.first);
  grad.resize(theta.size());
  grad[0] = std::numbers::ln10 * g_log_phi.sum();
  grad[1] = g_log_phi.dot(dlogphi_dgamma_);
  grad.tail(2 * nf) = g_like + g_prior_a;
  return lp;
}

std::optional<Vector> PowerLawModel::draw_prior(Rng& rng) const {
  Vector out(space_.dim());
  out[0] = uniform(rng, spec_.log10_A_bounds.first, spec_.log10_A_bounds.second);
  out[1] = uniform(rng, spec_.gamma_bounds.first, spec_.gamma_bounds.second);
  const Vector p = phi(out[0], out[1]);
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    out[2 + 2 * i] = std::sqrt(p[i]) * std_normal(rng);
    out[3 + 2 * i] = std::sqrt(p[i]) * std_normal(rng);
  }
  return out;
}

FreeSpectralModel::FreeSpectralModel(DatasetPtr ds, FreeSpectralSpec spec) : ds_(std::move(ds)), spec_(spec) {
  spec_.validate();
  require_sigma(*ds_);
  if (spec_.n_freq != ds_->n_freq()) throw DimensionMismatch("free spectral n_freq differs from the dataset's");
  for (int k = 1; k <= spec_.n_freq; ++k) {
    space_.add("log10_rho_" + std::to_string(k),
               Bound::interval(spec_.log10_rho_bounds.first, spec_.log10_rho_bounds.second), Block::hyper);
  }
  add_coefficients(space_, spec_.n_freq);
}

double FreeSpectralModel::log_density_grad(const Vector& theta, Vector& grad) const {
  check_size(theta, space_.dim());
  space_.check_inside(theta);
  const int nf = spec_.n_freq;
  const Vector log10_rho = theta.head(nf);
  const Vector a = theta.tail(2 * nf);
  const Vector phi = log10_rho.unaryExpr([](double v) { return std::pow(10.0, v); });
  Vector g_like, g_prior_a, g_log_phi;
  double lp = pta_loglike(*ds_, a, &g_like) + pta_coeff_prior_logp(a, phi, &g_prior_a, &g_log_phi);
  lp -= nf * std::log(spec_.log10_rho_bounds.second - spec_.log10_rho_bounds.first);
  grad.resize(theta.size());
  grad.head(nf) = std::numbers::ln10 * g_log_phi;
  grad.tail(2 * nf) = g_like + g_prior_a;
  return lp;
}

std::optional<Vector> FreeSpectralModel::draw_prior(Rng& rng) const {
  const int nf = spec_.n_freq;
  Vector out(space_.dim());
  for (int i = 0; i < nf; ++i) {
    out[i] = uniform(rng, spec_.log10_rho_bounds.first, spec_.log10_rho_bounds.second);
  }
  for (int i = 0; i < nf; ++i) {
    const double s = std::pow(10.0, 0.5 * out[i]);
    out[nf + 2 * i] = s * std_normal(rng);
    out[nf + 2 * i + 1] = s * std_normal(rng);
  }
  return out;
}

PowerLawMarginalModel::PowerLawMarginalModel(DatasetPtr ds, PowerLawSpec spec) : ds_(std::move(ds)), spec_(spec) {
  spec_.validate();
  space_.add("log10_A", Bound::interval(spec_.log10_A_bounds.first, spec_.log10_A_bounds.second), Block::hyper);
  space_.add("gamma", Bound::interval(spec_.gamma_bounds.first, spec_.gamma_bounds.second), Block::hyper);
}

double PowerLawMarginalModel::log_density(const Vector& theta) const {
  check_size(theta, 2);
  return pta_analytic_marginal_logp(*ds_, theta[0], theta[1], spec_);
}

double PowerLawMarginalModel::log_density_grad(const Vector& theta, Vector& grad) const {
  check_size(theta, 2);
  Eigen::Vector2d g;
  const double v = pta_analytic_marginal_logp(*ds_, theta[0], theta[1], spec_, &g);
  grad = g;
  return v;
}

std::optional<Vector> PowerLawMarginalModel::draw_prior(Rng& rng) const {
  Vector out(2);
  out[0] = uniform(rng, spec_.log10_A_bounds.first, spec_.log10_A_bounds.second);
  out[1] = uniform(rng, spec_.gamma_bounds.first, spec_.gamma_bounds.second);
  return out;
}

}  // namespace mss
