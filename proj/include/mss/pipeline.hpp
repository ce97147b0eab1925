#pragma once

// Multi-stage sampling: sample the generalized model, learn the marginal
// density of its hyper block, then resample that density on the constraint
// surface weighted by the original hyper-prior.

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mss/constraint.hpp"
#include "mss/diagnostics.hpp"
#include "mss/flow.hpp"
#include "mss/hmc.hpp"
#include "mss/kde.hpp"
#include "mss/reparam.hpp"

namespace mss {

/// y ~ N(0, sigma) over a single unbounded coordinate.
class GaussianHyperPrior final : public TargetModel {
 public:
  GaussianHyperPrior(std::string name, double sigma);
  const ParameterSpace& space() const override { return space_; }
  double log_density_grad(const Vector& y, Vector& grad) const override;
  std::optional<Vector> draw_prior(Rng& rng) const override;

 private:
  double sigma_;
  ParameterSpace space_;
};

/// Uniform density on a box given by a fully bounded space.
class UniformBoxPrior final : public TargetModel {
 public:
  explicit UniformBoxPrior(ParameterSpace space);
  const ParameterSpace& space() const override { return space_; }
  double log_density_grad(const Vector& y, Vector& grad) const override;
  std::optional<Vector> draw_prior(Rng& rng) const override;

 private:
  ParameterSpace space_;
  double log_volume_ = 0.0;
};

enum class Estimator { flow, kde };

struct MSSConfig {
  std::uint64_t seed = 1;  ///< master seed; per-stage seeds derive from it
  HMCConfig stage1;
  int stage1_chains = 4;
  /// prs samples the generalized model with its local block standardized by
  /// the prior scale, cprs by the exact Gaussian conditional where one is
  /// available; ns samples it as written.
  Scheme stage1_scheme = Scheme::prs;
  HMCConfig stage2;
  int stage2_chains = 4;
  Estimator estimator = Estimator::flow;
  TrainConfig flow;
  /// Use the generalized hyper box as flow support (probit preprocessing).
  bool box_support = true;
  GateThresholds gates;
  bool enforce_gates = true;
  /// Optional grid (dim <= 2) for the deterministic stage-2 cross-check;
  /// required when estimator = kde.
  std::optional<GridSpec> grid;
  int grid_subdiv = 2;
};

struct MSSResult;

struct MSSRun {
  ModelPtr generalized_model;
  std::shared_ptr<const ConstraintMap> constraint;
  ModelPtr hyper_prior;  ///< over constraint->hyper_in()
  MSSConfig cfg;
  std::optional<std::filesystem::path> out_dir;
  json config_echo;  ///< written verbatim as config.json
  /// Optional oracle comparison merged into report["comparisons"]; a false
  /// "passed" member marks the run as a gate failure.
  std::function<json(const MSSResult&)> evaluate;

  void validate() const;
  /// Corners of a bounded hyper-prior whose constraint image leaves the
  /// generalized hyper box.
  std::vector<std::string> warnings() const;
};

struct Stage1Result {
  std::vector<Chain> chains;  ///< native coordinates of the generalized model
  std::vector<CoordinateSummary> summaries;
  GateResult gate;
  Matrix marginal;  ///< pooled hyper-block draws
  std::vector<std::string> hyper_names;
  int divergences = 0;
};

/// Keeps exactly the columns whose block is hyper, in layout order.
Matrix project_hyper(const Matrix& draws, const ParameterSpace& space);

Stage1Result run_stage1(const MSSRun& run);

/// Stage 1 plus the convergence gate; throws ConvergenceGateFailed listing
/// every failing coordinate.
Matrix stage1_marginal_samples(const MSSRun& run);

/// log p_hat(C(y)) + log p(y) with gradient J^T grad p_hat + grad log p(y).
/// No surface-measure factor is applied for the embedding.
class Stage2Target final : public TargetModel {
 public:
  Stage2Target(FlowModel flow, std::shared_ptr<const ConstraintMap> constraint, ModelPtr hyper_prior);
  const ParameterSpace& space() const override { return hyper_prior_->space(); }
  double log_density_grad(const Vector& y, Vector& grad) const override;
  std::optional<Vector> draw_prior(Rng& rng) const override { return hyper_prior_->draw_prior(rng); }

 private:
  FlowModel flow_;
  std::shared_ptr<const ConstraintMap> constraint_;
  ModelPtr hyper_prior_;
};

ModelPtr build_stage2_target(const FlowModel& flow, std::shared_ptr<const ConstraintMap> constraint,
                             ModelPtr hyper_prior);

/// Stage-2 density on a grid for any estimator of the generalized marginal.
Vector stage2_grid(const LogDensityFn& estimator_logp, const ConstraintMap& constraint, const TargetModel& hyper_prior,
                   const GridSpec& grid, int subdiv);

/// Exact draws from a piecewise-constant grid density (uniform within cells).
Matrix sample_grid(const Vector& probs, const GridSpec& grid, int n, std::uint64_t seed);

struct MSSResult {
  Stage1Result stage1;
  std::optional<FlowModel> flow;
  TrainHistory flow_history;
  std::vector<Chain> stage2_chains;
  Matrix stage2_draws;  ///< pooled, hyper_in coordinates
  std::vector<CoordinateSummary> stage2_summaries;
  GateResult stage2_gate;
  std::optional<Vector> grid_probs;  ///< stage-2 density on cfg.grid
  json report;
};

/// Runs all three stages and, when out_dir is set, writes config.json,
/// stage1/chain_<k>.csv (+ .json stats), marginal.csv, flow.json, stage2.csv
/// and report.json. A failed stage-1 gate (when enforced) still writes the
/// stage-1 artifacts and report before throwing ConvergenceGateFailed.
MSSResult run_mss(const MSSRun& run);

/// report.json keeps wall-clock data in this single field so that reruns
/// are byte-identical elsewhere.
inline constexpr const char* kRunInfoField = "run_info";
json run_info_now(double wall_seconds);

void write_chains_dir(const std::vector<Chain>& chains, const HMCConfig& cfg, const std::filesystem::path& dir);
void write_pooled_csv(const std::vector<Chain>& chains, const std::filesystem::path& path);

}  // namespace mss
