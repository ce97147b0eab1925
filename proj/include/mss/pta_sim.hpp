#pragma once

// Simplified single-pulsar dataset: irregular times, a power-law red signal
// built through the Fourier design matrix, and white noise of known sigma.

#include <cstdint>
#include <filesystem>
#include <optional>

#include "mss/model.hpp"

namespace mss {

struct SimConfig {
  int n_samples = 500;
  double span = 1.0;
  double jitter_frac = 0.3;
  double sigma = 1.0;
  int n_freq = 10;
  double true_log10_A = 0.5;
  double true_gamma = 13.0 / 3.0;
  std::uint64_t seed = 1;
  /// Power-law prior box that the injected truth must lie in.
  double log10_A_lo = -2.0, log10_A_hi = 2.0;
  double gamma_lo = 0.0, gamma_hi = 7.0;

  void validate() const;
};

struct Truth {
  double log10_A = 0.0;
  double gamma = 0.0;
  std::uint64_t seed = 0;
};

/// Immutable once built; freqs[i] = (i + 1) / span.
class PTADataset {
 public:
  PTADataset(Vector times, Vector data, double sigma, int n_freq, std::optional<Truth> truth = std::nullopt);

  const Vector& times() const { return times_; }
  const Vector& data() const { return data_; }
  double sigma() const { return sigma_; }
  int n_freq() const { return n_freq_; }
  double span() const { return span_; }
  const Vector& freqs() const { return freqs_; }
  const std::optional<Truth>& truth() const { return truth_; }
  Eigen::Index n_samples() const { return times_.size(); }

  /// N x 2 n_freq design matrix and the products every model reuses.
  const Matrix& design() const { return F_; }
  const Matrix& FtF() const { return FtF_; }
  const Vector& Ftd() const { return Ftd_; }
  double dtd() const { return dtd_; }

 private:
  Vector times_;
  Vector data_;
  double sigma_;
  int n_freq_;
  double span_;
  Vector freqs_;
  std::optional<Truth> truth_;
  Matrix F_;
  Matrix FtF_;
  Vector Ftd_;
  double dtd_;
};

Vector generate_times(const SimConfig& cfg);

/// Column 2k-2 is sin(2 pi k (t - t_1) / T), column 2k-1 the matching cosine.
Matrix fourier_design_matrix(const Vector& times, int n_freq);

PTADataset simulate_dataset(const SimConfig& cfg);

/// Variant that also returns the injected coefficients.
PTADataset simulate_dataset(const SimConfig& cfg, Vector* coefficients);

void save_dataset(const PTADataset& ds, const std::filesystem::path& path);
PTADataset load_dataset(const std::filesystem::path& path);
void export_dataset_csv(const PTADataset& ds, const std::filesystem::path& path);

}  // namespace mss
