#pragma once

// Run configurations for the three reference experiments (classic funnel,
// likelihood funnel, pulsar-timing red noise) and their analytic oracles.

#include <filesystem>
#include <optional>
#include <string>

#include "mss/constraint.hpp"
#include "mss/diagnostics.hpp"
#include "mss/funnels.hpp"
#include "mss/pipeline.hpp"
#include "mss/pta_models.hpp"
#include "mss/pta_sim.hpp"
#include "mss/reparam.hpp"

namespace mss {

enum class ExperimentKind { classic, likelihood, pta };

ExperimentKind parse_experiment_kind(const std::string& name);
std::string experiment_kind_name(ExperimentKind k);

/// Limits applied when hyper-parameter draws are compared with the oracle.
struct ComparisonConfig {
  double ks_max = 0.05;        ///< 1-D KS against the oracle CDF
  double tv_max = 0.05;        ///< grid total variation
  double mean_tol_sd = 0.1;    ///< |mean - oracle mean| / oracle sd
  double sd_tol_frac = 0.15;   ///< |sd / oracle sd - 1|
  std::optional<GridSpec> grid;  ///< default derived from the oracle
  int grid_subdiv = 4;
};

/// Gates for single-stage baseline runs (`sample`).
struct BaselineConfig {
  HMCConfig hmc;
  int n_chains = 4;
  /// Any draw-phase divergence above this count fails the run; < 0 disables.
  int max_divergences = -1;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::classic;
  std::uint64_t seed = 1;
  ClassicFunnelSpec funnel;
  double data_mean = 2.0;
  double data_sigma = 5.0;
  double a_bound = 4.0;
  SimConfig sim;
  std::optional<std::filesystem::path> dataset_path;
  PowerLawSpec power_law;
  FreeSpectralSpec free_spectral;
  MSSConfig mss;
  BaselineConfig baseline;
  ComparisonConfig compare;
  json raw;  ///< the parsed document, echoed into run directories

  /// Unknown keys are rejected; keys starting with '_' are annotations.
  static ExperimentConfig from_json(const json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
};

/// Every model and oracle an experiment needs, built once.
struct Experiment {
  ExperimentConfig cfg;
  DatasetPtr dataset;  ///< pta only
  ModelPtr original;   ///< classic / likelihood funnel or power-law model
  ModelPtr generalized;
  std::shared_ptr<const ConstraintMap> constraint;
  ModelPtr hyper_prior;
  std::vector<std::string> hyper_names;
  /// Unnormalized log marginal posterior of the hyper-parameters.
  LogDensityFn oracle_logp;
  GridSpec grid;  ///< comparison grid covering the oracle mass
  Vector oracle_probs;
  GridMoments oracle_moments;
};

Experiment build_experiment(const ExperimentConfig& cfg);

MSSRun make_mss_run(const Experiment& ex, const std::optional<std::filesystem::path>& out_dir);

/// KS (1-D), grid TV and moment agreement of hyper draws against the oracle.
/// The result carries "passed" according to the experiment's gates.
json compare_with_oracle(const Experiment& ex, const Matrix& hyper_draws);

struct BaselineResult {
  std::vector<Chain> chains;  ///< native coordinates
  Matrix hyper_draws;
  std::vector<CoordinateSummary> summaries;
  int divergences = 0;
  bool all_divergent = false;
  json report;
};

/// Single-stage sampling of the original model under one scheme. Writes
/// chains/, samples.csv and report.json when out_dir is set. Never throws
/// for sampler pathologies; those become gate failures in the report.
BaselineResult run_baseline(const Experiment& ex, Scheme scheme,
                            const std::optional<std::filesystem::path>& out_dir);

}  // namespace mss
