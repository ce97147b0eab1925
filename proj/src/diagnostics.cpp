#include "mss/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>

#include <unsupported/Eigen/FFT>

#include "mss/errors.hpp"

namespace mss {

namespace {

constexpr std::size_t kMinDraws = 100;

bool is_constant(const Vector& x) { return x.size() == 0 || (x.array() == x[0]).all(); }

// Biased (1/n) autocovariance at lags 0..n-1, via zero-padded FFT.
Vector autocovariance(const Vector& x) {
  const Eigen::Index n = x.size();
  std::size_t nfft = 1;
  while (nfft < static_cast<std::size_t>(2 * n)) nfft <<= 1;
  std::vector<double> buf(nfft, 0.0);
  const double m = x.mean();
  for (Eigen::Index i = 0; i < n; ++i) buf[static_cast<std::size_t>(i)] = x[i] - m;
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> spec;
  fft.fwd(spec, buf);
  for (auto& c : spec) c = std::complex<double>(std::norm(c), 0.0);
  std::vector<double> ac;
  fft.inv(ac, spec);
  Vector out(n);
  for (Eigen::Index t = 0; t < n; ++t) out[t] = ac[static_cast<std::size_t>(t)] / static_cast<double>(n);
  return out;
}

// Geyer's initial monotone sequence applied to autocorrelations rho.
double integrated_time(const Vector& rho) {
  const Eigen::Index n = rho.size();
  std::vector<double> pairs;
  for (Eigen::Index t = 0; t + 1 < n; t += 2) {
    const double p = rho[t] + rho[t + 1];
    if (!(p > 0)) break;
    pairs.push_back(pairs.empty() ? p : std::min(p, pairs.back()));
  }
  double tau = -1.0;
  for (double p : pairs) tau += 2.0 * p;
  return std::max(tau, 1.0 / std::log10(static_cast<double>(std::max<Eigen::Index>(n, 10))));
}

void require_chains(const std::vector<Vector>& chains, std::size_t min_chains) {
  if (chains.size() < min_chains) {
    throw InvalidArgument("need at least " + std::to_string(min_chains) + " chains, got " +
                          std::to_string(chains.size()));
  }
  for (const auto& c : chains) {
    if (c.size() != chains.front().size()) throw InvalidArgument("chains must have equal lengths");
  }
  if (static_cast<std::size_t>(chains.front().size()) < kMinDraws) {
    throw TooFewSamples("chains need at least " + std::to_string(kMinDraws) + " draws");
  }
}

double sample_var(const Vector& x) {
  const double m = x.mean();
  return (x.array() - m).square().sum() / static_cast<double>(x.size() - 1);
}

double split_rhat(const std::vector<Vector>& chains) {
  std::vector<Vector> halves;
  bool all_same = true;
  for (const auto& c : chains) {
    const Eigen::Index h = c.size() / 2;
    halves.push_back(c.head(h));
    halves.push_back(c.tail(h));
    all_same = all_same && is_constant(c) && c[0] == chains.front()[0];
  }
  if (all_same) throw DegenerateChain("all chain values are identical");
  const double h = static_cast<double>(halves.front().size());
  const double m = static_cast<double>(halves.size());
  double W = 0.0, grand = 0.0;
  Vector means(halves.size());
  for (std::size_t j = 0; j < halves.size(); ++j) {
    means[static_cast<Eigen::Index>(j)] = halves[j].mean();
    W += sample_var(halves[j]);
  }
  W /= m;
  grand = means.mean();
  const double B_over_h = (means.array() - grand).square().sum() / (m - 1.0);
  if (!(W > 0)) return kInf;
  const double var_plus = (h - 1.0) / h * W + B_over_h;
  return std::sqrt(var_plus / W);
}

}  // namespace

double effective_sample_size(const Vector& x) {
  if (static_cast<std::size_t>(x.size()) < kMinDraws) {
    throw TooFewSamples("ESS needs at least " + std::to_string(kMinDraws) + " draws");
  }
  if (is_constant(x)) throw DegenerateChain("ESS of a constant chain is undefined");
  const Vector ac = autocovariance(x);
  const double n = static_cast<double>(x.size());
  return std::min(n, n / integrated_time(ac / ac[0]));
}

double effective_sample_size(const std::vector<Vector>& chains) {
  require_chains(chains, 1);
  if (chains.size() == 1) return effective_sample_size(chains.front());
  const double m = static_cast<double>(chains.size());
  const Eigen::Index n = chains.front().size();
  Vector mean_acov = Vector::Zero(n);
  Vector means(chains.size());
  double W = 0.0;
  bool any_var = false;
  for (std::size_t j = 0; j < chains.size(); ++j) {
    const Vector ac = autocovariance(chains[j]);
    mean_acov += ac / m;
    W += ac[0] * static_cast<double>(n) / static_cast<double>(n - 1) / m;
    means[static_cast<Eigen::Index>(j)] = chains[j].mean();
    any_var = any_var || !is_constant(chains[j]);
  }
  if (!any_var) throw DegenerateChain("ESS of constant chains is undefined");
  const double B_over_n = (means.array() - means.mean()).square().sum() / (m - 1.0);
  const double var_plus = W * static_cast<double>(n - 1) / static_cast<double>(n) + B_over_n;
  const Vector rho = (1.0 - (W - mean_acov.array()) / var_plus).matrix();
  const double total = m * static_cast<double>(n);
  return std::min(total, total / integrated_time(rho));
}

double gelman_rubin(const std::vector<Vector>& chains) {
  require_chains(chains, 2);
  return split_rhat(chains);
}

double normal_cdf(double x, double mean, double sd) { return 0.5 * std::erfc(-(x - mean) / (sd * std::sqrt(2.0))); }

double ks_statistic(const Vector& samples, const std::function<double(double)>& cdf) {
  if (samples.size() == 0) throw InvalidArgument("KS statistic needs samples");
  std::vector<double> s(samples.data(), samples.data() + samples.size());
  std::sort(s.begin(), s.end());
  const double n = static_cast<double>(s.size());
  double d = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double F = cdf(s[i]);
    d = std::max({d, static_cast<double>(i + 1) / n - F, F - static_cast<double>(i) / n});
  }
  return d;
}

double ks_two_sample(const Vector& a, const Vector& b) {
  if (a.size() == 0 || b.size() == 0) throw InvalidArgument("two-sample KS needs samples");
  std::vector<double> x(a.data(), a.data() + a.size()), y(b.data(), b.data() + b.size());
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  const double nx = static_cast<double>(x.size()), ny = static_cast<double>(y.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < x.size() && j < y.size()) {
    const double v = std::min(x[i], y[j]);
    while (i < x.size() && x[i] == v) ++i;
    while (j < y.size() && y[j] == v) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / nx - static_cast<double>(j) / ny));
  }
  return d;
}

std::size_t GridSpec::n_cells() const {
  std::size_t n = 1;
  for (int b : bins) n *= static_cast<std::size_t>(b);
  return n;
}

double GridSpec::cell_volume() const {
  double v = 1.0;
  for (std::size_t k = 0; k < dim(); ++k) v *= (upper[k] - lower[k]) / bins[k];
  return v;
}

void GridSpec::validate() const {
  if (dim() < 1 || dim() > 2) throw InvalidArgument("grids must be 1-D or 2-D");
  if (lower.size() != dim() || upper.size() != dim()) throw DimensionMismatch("grid bounds do not match bins");
  for (std::size_t k = 0; k < dim(); ++k) {
    if (bins[k] < 1 || !(lower[k] < upper[k])) throw InvalidArgument("grid axes need bins >= 1 and lower < upper");
  }
}

Vector grid_cell_center(const GridSpec& grid, std::size_t cell) {
  Vector c(static_cast<Eigen::Index>(grid.dim()));
  std::size_t rest = cell;
  for (std::size_t k = grid.dim(); k-- > 0;) {
    const std::size_t i = rest % static_cast<std::size_t>(grid.bins[k]);
    rest /= static_cast<std::size_t>(grid.bins[k]);
    const double w = (grid.upper[k] - grid.lower[k]) / grid.bins[k];
    c[static_cast<Eigen::Index>(k)] = grid.lower[k] + (static_cast<double>(i) + 0.5) * w;
  }
  return c;
}

namespace {

// Sub-point log-densities of one cell, reduced by log-mean-exp.
double cell_log_mass(const LogDensityFn& logp, const GridSpec& grid, std::size_t cell, int subdiv) {
  const Vector center = grid_cell_center(grid, cell);
  const std::size_t k = grid.dim();
  const int n_pts = k == 1 ? subdiv : subdiv * subdiv;
  std::vector<double> vals(static_cast<std::size_t>(n_pts));
  Vector p = center;
  for (int s = 0; s < n_pts; ++s) {
    int rest = s;
    for (std::size_t d = 0; d < k; ++d) {
      const int i = rest % subdiv;
      rest /= subdiv;
      const double w = (grid.upper[d] - grid.lower[d]) / grid.bins[d];
      p[static_cast<Eigen::Index>(d)] = center[static_cast<Eigen::Index>(d)] - 0.5 * w + (i + 0.5) * w / subdiv;
    }
    const double v = logp(p);
    if (std::isnan(v)) throw NonFiniteDensity("oracle log-density is NaN on the grid");
    vals[static_cast<std::size_t>(s)] = v;
  }
  const double m = *std::max_element(vals.begin(), vals.end());
  if (!std::isfinite(m)) return -kInf;
  double sum = 0.0;
  for (double v : vals) sum += std::exp(v - m);
  return m + std::log(sum / n_pts);
}

Vector normalize_log_masses(const Vector& lm) {
  const double m = lm.maxCoeff();
  if (!std::isfinite(m)) throw NonFiniteDensity("oracle has no finite mass on the grid");
  Vector p = (lm.array() - m).exp().matrix();
  return p / p.sum();
}

}  // namespace

Vector grid_probabilities_serial(const LogDensityFn& logp, const GridSpec& grid, int subdiv) {
  grid.validate();
  if (subdiv < 1) throw InvalidArgument("subdiv must be positive");
  Vector lm(static_cast<Eigen::Index>(grid.n_cells()));
  for (std::size_t c = 0; c < grid.n_cells(); ++c) lm[static_cast<Eigen::Index>(c)] = cell_log_mass(logp, grid, c, subdiv);
  return normalize_log_masses(lm);
}

Vector grid_probabilities(const LogDensityFn& logp, const GridSpec& grid, int subdiv) {
  grid.validate();
  if (subdiv < 1) throw InvalidArgument("subdiv must be positive");
  const auto n = static_cast<long long>(grid.n_cells());
  Vector lm(n);
  std::exception_ptr err;
#pragma omp parallel for schedule(dynamic, 16)
  for (long long c = 0; c < n; ++c) {
    try {
      lm[c] = cell_log_mass(logp, grid, static_cast<std::size_t>(c), subdiv);
    } catch (...) {
#pragma omp critical
      if (!err) err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);
  return normalize_log_masses(lm);
}

Vector grid_histogram(const Matrix& samples, const GridSpec& grid) {
  grid.validate();
  if (static_cast<std::size_t>(samples.cols()) != grid.dim()) throw DimensionMismatch("sample columns vs grid dims");
  if (samples.rows() == 0) throw InvalidArgument("histogram needs samples");
  Vector h = Vector::Zero(static_cast<Eigen::Index>(grid.n_cells()));
  long long outside = 0;
  for (Eigen::Index r = 0; r < samples.rows(); ++r) {
    std::size_t cell = 0;
    bool in = true;
    for (std::size_t k = 0; k < grid.dim(); ++k) {
      const double v = samples(r, static_cast<Eigen::Index>(k));
      const double pos = (v - grid.lower[k]) / (grid.upper[k] - grid.lower[k]) * grid.bins[k];
      if (!(pos >= 0 && pos < grid.bins[k])) {
        in = false;
        break;
      }
      cell = cell * static_cast<std::size_t>(grid.bins[k]) + static_cast<std::size_t>(pos);
    }
    if (in) h[static_cast<Eigen::Index>(cell)] += 1.0;
    else ++outside;
  }
  const double frac = static_cast<double>(outside) / static_cast<double>(samples.rows());
  if (frac > 0.01) {
    throw CoverageError(format_double(100.0 * frac) + "% of samples fall outside the grid");
  }
  return h / h.sum();
}

double tv_distance(const Vector& p, const Vector& q) {
  if (p.size() != q.size()) throw DimensionMismatch("TV distance needs equal-length vectors");
  return 0.5 * (p - q).cwiseAbs().sum();
}

double grid_tv_distance(const Matrix& samples, const LogDensityFn& oracle_logp, const GridSpec& grid, int subdiv) {
  const Vector h = grid_histogram(samples, grid);
  return tv_distance(h, grid_probabilities(oracle_logp, grid, subdiv));
}

GridMoments grid_moments(const Vector& probs, const GridSpec& grid) {
  grid.validate();
  if (static_cast<std::size_t>(probs.size()) != grid.n_cells()) throw DimensionMismatch("probabilities vs grid cells");
  const auto k = static_cast<Eigen::Index>(grid.dim());
  GridMoments m{Vector::Zero(k), Matrix::Zero(k, k)};
  for (std::size_t c = 0; c < grid.n_cells(); ++c) m.mean += probs[static_cast<Eigen::Index>(c)] * grid_cell_center(grid, c);
  for (std::size_t c = 0; c < grid.n_cells(); ++c) {
    const Vector d = grid_cell_center(grid, c) - m.mean;
    m.cov += probs[static_cast<Eigen::Index>(c)] * d * d.transpose();
  }
  return m;
}

std::vector<CoordinateSummary> summarize(const std::vector<Chain>& chains) {
  if (chains.empty()) throw InvalidArgument("no chains to summarize");
  const Eigen::Index dim = chains.front().dim();
  std::vector<CoordinateSummary> out;
  for (Eigen::Index j = 0; j < dim; ++j) {
    std::vector<Vector> cols;
    for (const auto& c : chains) {
      if (c.dim() != dim || c.size() != chains.front().size()) throw InvalidArgument("chains differ in shape");
      cols.push_back(c.draws.col(j));
    }
    CoordinateSummary s;
    s.name = chains.front().names.empty() ? "theta_" + std::to_string(j) : chains.front().names[static_cast<std::size_t>(j)];
    Eigen::Index total = 0;
    double sum = 0.0;
    for (const auto& c : cols) {
      sum += c.sum();
      total += c.size();
    }
    s.mean = sum / static_cast<double>(total);
    double ss = 0.0;
    for (const auto& c : cols) ss += (c.array() - s.mean).square().sum();
    s.sd = total > 1 ? std::sqrt(ss / static_cast<double>(total - 1)) : 0.0;
    try {
      s.ess = effective_sample_size(cols);
      s.rhat = split_rhat(cols);
    } catch (const TooFewSamples&) {
      s.ess = std::numeric_limits<double>::quiet_NaN();
      s.rhat = std::numeric_limits<double>::quiet_NaN();
    } catch (const DegenerateChain&) {
      s.ess = 0.0;
      s.rhat = kInf;
    }
    out.push_back(s);
  }
  return out;
}

GateResult convergence_gate(const std::vector<CoordinateSummary>& summaries, const GateThresholds& gates,
                            const std::vector<std::string>& only) {
  GateResult r;
  for (const auto& s : summaries) {
    if (!only.empty() && std::find(only.begin(), only.end(), s.name) == only.end()) continue;
    if (!(s.rhat < gates.max_rhat)) {
      r.failures.push_back(s.name + ": rhat " + format_double(s.rhat) + " >= " + format_double(gates.max_rhat));
    }
    if (!(s.ess > gates.min_ess)) {
      r.failures.push_back(s.name + ": ess " + format_double(s.ess) + " <= " + format_double(gates.min_ess));
    }
  }
  r.passed = r.failures.empty();
  return r;
}

json summaries_to_json(const std::vector<CoordinateSummary>& s) {
  json out = json::array();
  for (const auto& c : s) out.push_back({{"name", c.name}, {"mean", c.mean}, {"sd", c.sd}, {"ess", c.ess}, {"rhat", c.rhat}});
  return out;
}

}  // namespace mss
