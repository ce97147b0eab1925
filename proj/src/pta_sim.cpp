#include "mss/pta_sim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mss/errors.hpp"
#include "mss/io.hpp"
#include "mss/pta_models.hpp"

namespace mss {

void SimConfig::validate() const {
  if (n_samples < 2) throw InvalidArgument("n_samples must be at least 2");
  if (n_freq < 1) throw InvalidArgument("n_freq must be at least 1");
  if (n_samples < 2 * n_freq + 1) throw InvalidArgument("n_samples must be at least 2 n_freq + 1");
  if (!(span > 0)) throw InvalidArgument("span must be positive");
  if (!(jitter_frac >= 0 && jitter_frac < 1)) throw InvalidArgument("jitter_frac must lie in [0, 1)");
  if (!(sigma >= 0)) throw InvalidArgument("sigma must be non-negative");
  if (!(true_log10_A > log10_A_lo && true_log10_A < log10_A_hi)) {
    throw InvalidArgument("true_log10_A outside the power-law prior box");
  }
  if (!(true_gamma > gamma_lo && true_gamma < gamma_hi)) {
    throw InvalidArgument("true_gamma outside the power-law prior box");
  }
}

PTADataset::PTADataset(Vector times, Vector data, double sigma, int n_freq, std::optional<Truth> truth)
    : times_(std::move(times)), data_(std::move(data)), sigma_(sigma), n_freq_(n_freq), truth_(truth) {
  if (times_.size() != data_.size()) throw DimensionMismatch("times and data differ in length");
  if (n_freq_ < 1) throw InvalidArgument("n_freq must be at least 1");
  if (times_.size() < 2 * n_freq_ + 1) throw InvalidArgument("need at least 2 n_freq + 1 samples");
  for (Eigen::Index i = 1; i < times_.size(); ++i) {
    if (!(times_[i] > times_[i - 1])) throw InvalidArgument("times must be strictly increasing");
  }
  if (!(sigma_ >= 0) || !std::isfinite(sigma_)) throw InvalidArgument("sigma must be finite and non-negative");
  span_ = times_[times_.size() - 1] - times_[0];
  freqs_.resize(n_freq_);
  for (int i = 0; i < n_freq_; ++i) freqs_[i] = (i + 1) / span_;
  F_ = fourier_design_matrix(times_, n_freq_);
  FtF_ = F_.transpose() * F_;
  Ftd_ = F_.transpose() * data_;
  dtd_ = data_.squaredNorm();
}

Vector generate_times(const SimConfig& cfg) {
  cfg.validate();
  const int n = cfg.n_samples;
  const double delta = cfg.span / (n - 1);
  Rng rng(derive_seed(cfg.seed, "times"));
  for (int attempt = 0; attempt < 8; ++attempt) {
    Vector t(n);
    for (int i = 0; i < n; ++i) {
      const double u = cfg.jitter_frac > 0 ? uniform(rng, -0.5, 0.5) * cfg.jitter_frac * delta : 0.0;
      t[i] = i * delta + u;
    }
    std::sort(t.begin(), t.end());
    bool ok = true;
    for (int i = 1; i < n; ++i) ok = ok && (t[i] > t[i - 1]);
    if (ok) return t;
  }
  throw JitterCollision("could not draw strictly increasing times in 8 attempts");
}

Matrix fourier_design_matrix(const Vector& times, int n_freq) {
  if (times.size() < 2) throw DegenerateSpan("need at least two time samples");
  const double t0 = times[0];
  const double span = times[times.size() - 1] - t0;
  if (!(span > 0)) throw DegenerateSpan("t_N equals t_1");
  Matrix F(times.size(), 2 * n_freq);
  for (Eigen::Index r = 0; r < times.size(); ++r) {
    const double phase = 2.0 * std::numbers::pi * (times[r] - t0) / span;
    for (int k = 1; k <= n_freq; ++k) {
      F(r, 2 * k - 2) = std::sin(k * phase);
      F(r, 2 * k - 1) = std::cos(k * phase);
    }
  }
  return F;
}

PTADataset simulate_dataset(const SimConfig& cfg) { return simulate_dataset(cfg, nullptr); }

PTADataset simulate_dataset(const SimConfig& cfg, Vector* coefficients) {
  cfg.validate();
  Vector t = generate_times(cfg);
  const Matrix F = fourier_design_matrix(t, cfg.n_freq);
  const double span = t[t.size() - 1] - t[0];
  Vector freqs(cfg.n_freq);
  for (int i = 0; i < cfg.n_freq; ++i) freqs[i] = (i + 1) / span;
  const Vector phi = power_law_phi(std::pow(10.0, cfg.true_log10_A), cfg.true_gamma, freqs, 1.0 / span,
                                   /*allow_zero=*/true);

  Rng coeff_rng(derive_seed(cfg.seed, "coefficients"));
  Vector a(2 * cfg.n_freq);
  for (int i = 0; i < cfg.n_freq; ++i) {
    const double s = std::sqrt(phi[i]);
    a[2 * i] = s * std_normal(coeff_rng);
    a[2 * i + 1] = s * std_normal(coeff_rng);
  }
  Rng noise_rng(derive_seed(cfg.seed, "noise"));
  Vector d = F * a;
  for (Eigen::Index i = 0; i < d.size(); ++i) d[i] += cfg.sigma * std_normal(noise_rng);
  if (coefficients) *coefficients = a;
  return PTADataset(std::move(t), std::move(d), cfg.sigma, cfg.n_freq,
                    Truth{cfg.true_log10_A, cfg.true_gamma, cfg.seed});
}

void save_dataset(const PTADataset& ds, const std::filesystem::path& path) {
  json j;
  j["version"] = 1;
  j["times"] = std::vector<double>(ds.times().begin(), ds.times().end());
  j["data"] = std::vector<double>(ds.data().begin(), ds.data().end());
  j["sigma"] = ds.sigma();
  j["n_freq"] = ds.n_freq();
  if (ds.truth()) {
    j["truth"] = {{"log10_A", ds.truth()->log10_A}, {"gamma", ds.truth()->gamma}, {"seed", ds.truth()->seed}};
  } else {
    j["truth"] = nullptr;
  }
  write_json(path, j);
}

namespace {

const json& require(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw FormatError(std::string("dataset file: missing section '") + key + "'");
  return *it;
}

Vector number_array(const json& j, const char* key) {
  const json& a = require(j, key);
  if (!a.is_array()) throw FormatError(std::string("dataset file: '") + key + "' is not an array");
  Vector v(static_cast<Eigen::Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a[i].is_number()) {
      throw FormatError(std::string("dataset file: '") + key + "'[" + std::to_string(i) + "] is not a number");
    }
    v[static_cast<Eigen::Index>(i)] = a[i].get<double>();
  }
  return v;
}

}  // namespace

PTADataset load_dataset(const std::filesystem::path& path) {
  const json j = read_json(path);
  if (!j.is_object()) throw FormatError("dataset file: top level is not an object");
  const json& version = require(j, "version");
  if (!version.is_number_integer() || version.get<int>() != 1) {
    throw FormatError("dataset file: unsupported version " + version.dump());
  }
  Vector times = number_array(j, "times");
  Vector data = number_array(j, "data");
  const json& sigma = require(j, "sigma");
  const json& n_freq = require(j, "n_freq");
  if (!sigma.is_number()) throw FormatError("dataset file: 'sigma' is not a number");
  if (!n_freq.is_number_integer()) throw FormatError("dataset file: 'n_freq' is not an integer");
  if (times.size() != data.size()) {
    throw FormatError("dataset file: 'times' has " + std::to_string(times.size()) + " entries but 'data' has " +
                      std::to_string(data.size()));
  }
  for (Eigen::Index i = 1; i < times.size(); ++i) {
    if (!(times[i] > times[i - 1])) {
      throw FormatError("dataset file: 'times' not strictly increasing at index " + std::to_string(i));
    }
  }
  std::optional<Truth> truth;
  const json& tj = require(j, "truth");
  if (!tj.is_null()) {
    truth = Truth{require(tj, "log10_A").get<double>(), require(tj, "gamma").get<double>(),
                  require(tj, "seed").get<std::uint64_t>()};
  }
  try {
    return PTADataset(std::move(times), std::move(data), sigma.get<double>(), n_freq.get<int>(), truth);
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("dataset file: ") + e.what());
  }
}

void export_dataset_csv(const PTADataset& ds, const std::filesystem::path& path) {
  Matrix rows(ds.n_samples(), 2);
  rows.col(0) = ds.times();
  rows.col(1) = ds.data();
  write_csv(path, {"t", "d"}, rows);
}

}  // namespace mss
