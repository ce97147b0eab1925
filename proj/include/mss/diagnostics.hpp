#pragma once

// Convergence and comparison statistics.

#include <functional>
#include <string>
#include <vector>

#include "mss/hmc.hpp"
#include "mss/io.hpp"

namespace mss {

/// Initial-monotone-sequence estimator on one chain; capped at n.
double effective_sample_size(const Vector& x);

/// Multi-chain version combining within-chain autocovariances with the
/// between-chain variance; capped at the total draw count.
double effective_sample_size(const std::vector<Vector>& chains);

/// Split R-hat: each chain halved, classic variance ratio.
double gelman_rubin(const std::vector<Vector>& chains);

double normal_cdf(double x, double mean = 0.0, double sd = 1.0);

/// sup |F_n - F|.
double ks_statistic(const Vector& samples, const std::function<double(double)>& cdf);
double ks_two_sample(const Vector& a, const Vector& b);

/// Regular grid over a box of dimension 1 or 2.
struct GridSpec {
  std::vector<double> lower, upper;
  std::vector<int> bins;

  std::size_t dim() const { return bins.size(); }
  std::size_t n_cells() const;
  double cell_volume() const;
  void validate() const;
};

using LogDensityFn = std::function<double(const Vector&)>;

/// Normalized cell probabilities of exp(logp); each cell averages `subdiv`
/// points per axis. Parallel over cells.
Vector grid_probabilities(const LogDensityFn& logp, const GridSpec& grid, int subdiv = 4);
/// Sequential reference for grid_probabilities.
Vector grid_probabilities_serial(const LogDensityFn& logp, const GridSpec& grid, int subdiv = 4);

/// Normalized histogram of the rows of `samples` (n x k) on the grid.
/// Throws CoverageError if more than 1% of the rows fall outside.
Vector grid_histogram(const Matrix& samples, const GridSpec& grid);

double tv_distance(const Vector& p, const Vector& q);

/// 1/2 sum |p - q| between the sample histogram and the normalized oracle.
double grid_tv_distance(const Matrix& samples, const LogDensityFn& oracle_logp, const GridSpec& grid,
                        int subdiv = 4);

/// Mean and covariance of the oracle on the grid (cell-center moments).
struct GridMoments {
  Vector mean;
  Matrix cov;
};
GridMoments grid_moments(const Vector& probs, const GridSpec& grid);
Vector grid_cell_center(const GridSpec& grid, std::size_t cell);

struct CoordinateSummary {
  std::string name;
  double mean = 0.0;
  double sd = 0.0;
  double ess = 0.0;
  double rhat = 1.0;
};

/// Per-coordinate summaries over chains with equal lengths.
std::vector<CoordinateSummary> summarize(const std::vector<Chain>& chains);

struct GateThresholds {
  double max_rhat = 1.01;
  double min_ess = 400.0;
};

struct GateResult {
  bool passed = true;
  std::vector<std::string> failures;
};

GateResult convergence_gate(const std::vector<CoordinateSummary>& summaries, const GateThresholds& gates,
                            const std::vector<std::string>& only = {});

json summaries_to_json(const std::vector<CoordinateSummary>& s);

}  // namespace mss
