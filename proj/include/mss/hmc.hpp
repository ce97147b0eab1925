#pragma once

// Hamiltonian Monte Carlo with a diagonal metric: leapfrog integration,
// Metropolis correction, dual-averaging step size and windowed mass
// adaptation. Step counts are jittered uniformly in ceil(L/2)..L per
// trajectory rather than built by a no-U-turn tree.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mss/io.hpp"
#include "mss/model.hpp"

namespace mss {

struct HMCConfig {
  int n_warmup = 1000;
  int n_samples = 1000;
  double target_accept = 0.8;
  int max_leapfrog = 1024;
  double init_step = 0.1;
  /// Integration time per trajectory before jitter; L = ceil(path_length / eps).
  /// Near 1.8 on a unit-scale Gaussian both x and x^2 decorrelate in one
  /// transition under the half-range jitter.
  double path_length = 1.8;
  bool mass_adapt = true;
  bool jitter_steps = true;
  std::uint64_t seed = 1;

  void validate() const;
  json to_json() const;
  static HMCConfig from_json(const json& j);
  static HMCConfig from_json(const json& j, const HMCConfig& defaults);
};

struct Chain {
  std::vector<std::string> names;
  Matrix draws;  ///< n_samples x dim, native (constrained) coordinates
  Vector logp;   ///< native-space log-density of each draw
  double accept_rate = 0.0;
  double step_size = 0.0;
  Vector mass_diag;  ///< diagonal of the mass matrix in sampling coordinates
  int divergences = 0;
  int warmup_divergences = 0;
  long long n_grad_evals = 0;
  std::uint64_t seed = 0;

  Eigen::Index dim() const { return draws.cols(); }
  Eigen::Index size() const { return draws.rows(); }
  Vector column(const std::string& name) const;
};

struct PhasePoint {
  Vector q;
  Vector p;
};

/// n_steps of half-kick / drift / half-kick with diagonal inverse mass
/// `inv_mass` (empty means identity). Throws Divergence when the state
/// becomes non-finite or |Delta H| > 1000.
PhasePoint leapfrog(const TargetModel& model, const Vector& q, const Vector& p, double eps, int n_steps,
                    const Vector& inv_mass = {});

/// Hoffman & Gelman dual averaging on log step size.
class DualAveraging {
 public:
  explicit DualAveraging(double initial_step, double target = 0.8, double gamma = 0.05, double t0 = 10.0,
                         double kappa = 0.75);
  void restart(double step);
  /// Feed one acceptance statistic; returns the step for the next iteration.
  double update(double accept_stat);
  double step() const { return std::exp(log_step_); }
  double final_step() const { return std::exp(log_step_bar_); }

 private:
  double target_, gamma_, t0_, kappa_;
  double mu_ = 0.0;
  double log_step_ = 0.0;
  double log_step_bar_ = 0.0;
  double h_bar_ = 0.0;
  double m_ = 0.0;
};

/// One chain. `init` is in native coordinates; without it the chain starts
/// from a prior draw when the model offers one, else at the origin of the
/// sampling space.
Chain sample(const ModelPtr& model, const HMCConfig& cfg, const std::optional<Vector>& init = std::nullopt);

/// Seed of chain k within a batch started from cfg.seed.
std::uint64_t chain_seed(std::uint64_t master, int k);

/// Chains run in parallel (OpenMP); chain k is exactly sample(model, cfg with
/// seed chain_seed(cfg.seed, k)).
std::vector<Chain> sample_chains(const ModelPtr& model, const HMCConfig& cfg, int n_chains);

/// Sequential reference for sample_chains.
std::vector<Chain> sample_chains_serial(const ModelPtr& model, const HMCConfig& cfg, int n_chains);

/// Stacks post-warmup draws of all chains.
Matrix pooled_draws(const std::vector<Chain>& chains);

void save_chain(const Chain& chain, const std::filesystem::path& csv_path);
/// Sampler statistics sidecar with a config echo.
void save_chain_stats(const Chain& chain, const HMCConfig& cfg, const std::filesystem::path& json_path);
Chain load_chain(const std::filesystem::path& csv_path);

}  // namespace mss
