#include "mss/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "mss/errors.hpp"

namespace mss {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Hyper-priors

GaussianHyperPrior::GaussianHyperPrior(std::string name, double sigma) : sigma_(sigma) {
  if (!(sigma > 0)) throw NonPositiveVariance("hyper-prior sigma must be positive");
  space_.add(std::move(name), Bound::unbounded(), Block::hyper);
}

double GaussianHyperPrior::log_density_grad(const Vector& y, Vector& grad) const {
  if (y.size() != 1) throw DimensionMismatch("Gaussian hyper-prior is one-dimensional");
  grad.resize(1);
  grad[0] = -y[0] / (sigma_ * sigma_);
  return log_normal_pdf(y[0], 0.0, sigma_);
}

std::optional<Vector> GaussianHyperPrior::draw_prior(Rng& rng) const {
  Vector y(1);
  y[0] = sigma_ * std_normal(rng);
  return y;
}

UniformBoxPrior::UniformBoxPrior(ParameterSpace space) : space_(std::move(space)) {
  for (const auto& e : space_.entries()) {
    if (!e.bound.is_bounded()) throw InvalidArgument("uniform prior needs a bounded '" + e.name + "'");
    log_volume_ += std::log(e.bound.width());
  }
}

double UniformBoxPrior::log_density_grad(const Vector& y, Vector& grad) const {
  if (y.size() != space_.dim()) throw DimensionMismatch("uniform prior dimension");
  space_.check_inside(y);
  grad.setZero(y.size());
  return -log_volume_;
}

std::optional<Vector> UniformBoxPrior::draw_prior(Rng& rng) const {
  Vector y(space_.dim());
  for (Eigen::Index i = 0; i < y.size(); ++i) y[i] = uniform(rng, space_[i].bound.lower, space_[i].bound.upper);
  return y;
}

// ---------------------------------------------------------------------------
// Run validation

void MSSRun::validate() const {
  if (!generalized_model || !constraint || !hyper_prior) throw InvalidArgument("MSS run is missing a component");
  const auto& gspace = generalized_model->space();
  std::vector<std::string> hyper_names;
  for (auto i : gspace.indices(Block::hyper)) hyper_names.push_back(gspace[i].name);
  if (hyper_names != constraint->hyper_out().names()) {
    throw DimensionMismatch("constraint output does not match the generalized hyper block");
  }
  if (hyper_prior->dim() != constraint->in_dim()) throw DimensionMismatch("hyper-prior vs constraint input");
  if (cfg.stage1_chains < 1 || cfg.stage2_chains < 1) throw InvalidArgument("chain counts must be positive");
  cfg.stage1.validate();
  cfg.stage2.validate();
  cfg.flow.validate();
  if (cfg.grid) {
    cfg.grid->validate();
    if (static_cast<Eigen::Index>(cfg.grid->dim()) != constraint->in_dim()) {
      throw DimensionMismatch("grid dimension vs hyper-prior");
    }
  }
  if (cfg.estimator == Estimator::kde && !cfg.grid) throw InvalidArgument("the kde estimator needs a grid");
  if (cfg.grid_subdiv < 1) throw InvalidArgument("grid_subdiv must be positive");
}

std::vector<std::string> MSSRun::warnings() const {
  std::vector<std::string> out;
  const auto& in = constraint->hyper_in();
  for (const auto& e : in.entries()) {
    if (!e.bound.is_bounded()) return out;
  }
  const auto m = in.dim();
  for (long long corner = 0; corner < (1LL << m); ++corner) {
    Vector y(m);
    for (Eigen::Index i = 0; i < m; ++i) y[i] = (corner >> i) & 1 ? in[i].bound.upper : in[i].bound.lower;
    if (!constraint->image_inside(y)) {
      std::ostringstream os;
      os << "prior corner (";
      for (Eigen::Index i = 0; i < m; ++i) os << (i ? ", " : "") << format_double(y[i]);
      os << ") maps outside the generalized hyper box";
      out.push_back(os.str());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stage 1

Matrix project_hyper(const Matrix& draws, const ParameterSpace& space) {
  if (draws.cols() != space.dim()) throw DimensionMismatch("draw columns vs parameter space");
  const auto idx = space.indices(Block::hyper);
  Matrix out(draws.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = draws.col(idx[j]);
  return out;
}

namespace {

HMCConfig seeded(HMCConfig c, std::uint64_t master, const char* purpose) {
  c.seed = derive_seed(master, purpose);
  return c;
}

std::string join(const std::vector<std::string>& v, const std::string& sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? sep : "") + v[i];
  return s;
}

json chain_stats_json(const std::vector<Chain>& chains) {
  json a = json::array();
  for (const auto& c : chains) {
    a.push_back({{"seed", c.seed},
                 {"step_size", c.step_size},
                 {"accept_rate", c.accept_rate},
                 {"divergences", c.divergences},
                 {"warmup_divergences", c.warmup_divergences},
                 {"n_grad_evals", c.n_grad_evals}});
  }
  return a;
}

json gate_json(const GateResult& g) { return {{"passed", g.passed}, {"failures", g.failures}}; }

std::vector<CoordinateSummary> iid_summaries(const Matrix& draws, const std::vector<std::string>& names) {
  std::vector<CoordinateSummary> out;
  const double n = static_cast<double>(draws.rows());
  for (Eigen::Index j = 0; j < draws.cols(); ++j) {
    CoordinateSummary s;
    s.name = names[static_cast<std::size_t>(j)];
    s.mean = draws.col(j).mean();
    s.sd = std::sqrt((draws.col(j).array() - s.mean).square().sum() / std::max(1.0, n - 1.0));
    s.ess = n;
    s.rhat = 1.0;
    out.push_back(s);
  }
  return out;
}

}  // namespace

Stage1Result run_stage1(const MSSRun& run) {
  run.validate();
  const ReparamPtr target = make_scheme_target(run.cfg.stage1_scheme, run.generalized_model);
  const HMCConfig cfg = seeded(run.cfg.stage1, run.cfg.seed, "stage1");
  Stage1Result r;
  for (const auto& inner : sample_chains(target, cfg, run.cfg.stage1_chains)) {
    r.chains.push_back(push_chain(*target, inner));
  }
  const auto& space = run.generalized_model->space();
  for (auto i : space.indices(Block::hyper)) r.hyper_names.push_back(space[i].name);
  r.summaries = summarize(r.chains);
  r.gate = convergence_gate(r.summaries, run.cfg.gates, r.hyper_names);
  r.marginal = project_hyper(pooled_draws(r.chains), space);
  for (const auto& c : r.chains) r.divergences += c.divergences;
  return r;
}

Matrix stage1_marginal_samples(const MSSRun& run) {
  Stage1Result r = run_stage1(run);
  if (!r.gate.passed) throw ConvergenceGateFailed("stage 1: " + join(r.gate.failures, "; "));
  return std::move(r.marginal);
}

// ---------------------------------------------------------------------------
// Stage 2

Stage2Target::Stage2Target(FlowModel flow, std::shared_ptr<const ConstraintMap> constraint, ModelPtr hyper_prior)
    : flow_(std::move(flow)), constraint_(std::move(constraint)), hyper_prior_(std::move(hyper_prior)) {
  if (!constraint_ || !hyper_prior_) throw InvalidArgument("stage-2 target is missing a component");
  if (flow_.dim != constraint_->out_dim()) throw DimensionMismatch("flow dimension vs constraint output");
  if (hyper_prior_->dim() != constraint_->in_dim()) throw DimensionMismatch("hyper-prior vs constraint input");
}

double Stage2Target::log_density_grad(const Vector& y, Vector& grad) const {
  if (y.size() != constraint_->in_dim()) throw DimensionMismatch("stage-2 point dimension");
  const FlowEval fe = flow_log_density(flow_, (*constraint_)(y));
  Vector gp;
  const double lp = hyper_prior_->log_density_grad(y, gp);
  grad = constraint_->jacobian().transpose() * fe.grad + gp;
  return fe.logp + lp;
}

ModelPtr build_stage2_target(const FlowModel& flow, std::shared_ptr<const ConstraintMap> constraint,
                             ModelPtr hyper_prior) {
  return std::make_shared<Stage2Target>(flow, std::move(constraint), std::move(hyper_prior));
}

Vector stage2_grid(const LogDensityFn& estimator_logp, const ConstraintMap& constraint, const TargetModel& hyper_prior,
                   const GridSpec& grid, int subdiv) {
  if (static_cast<Eigen::Index>(grid.dim()) != constraint.in_dim()) throw DimensionMismatch("grid vs constraint");
  return grid_probabilities(
      [&](const Vector& y) { return estimator_logp(constraint(y)) + hyper_prior.log_density(y); }, grid, subdiv);
}

Matrix sample_grid(const Vector& probs, const GridSpec& grid, int n, std::uint64_t seed) {
  grid.validate();
  if (static_cast<std::size_t>(probs.size()) != grid.n_cells()) throw DimensionMismatch("probabilities vs grid");
  if (n < 1) throw InvalidArgument("sample_grid needs n >= 1");
  std::vector<double> cdf(static_cast<std::size_t>(probs.size()));
  double acc = 0.0;
  for (Eigen::Index c = 0; c < probs.size(); ++c) cdf[static_cast<std::size_t>(c)] = acc += probs[c];
  Rng rng(seed);
  const auto k = static_cast<Eigen::Index>(grid.dim());
  Matrix out(n, k);
  for (int r = 0; r < n; ++r) {
    const double u = uniform(rng, 0.0, acc);
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    if (it == cdf.end()) --it;
    const Vector center = grid_cell_center(grid, static_cast<std::size_t>(it - cdf.begin()));
    for (Eigen::Index d = 0; d < k; ++d) {
      const double w = (grid.upper[static_cast<std::size_t>(d)] - grid.lower[static_cast<std::size_t>(d)]) /
                       grid.bins[static_cast<std::size_t>(d)];
      out(r, d) = center[d] + uniform(rng, -0.5 * w, 0.5 * w);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Artifacts

json run_info_now(double wall_seconds) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return {{"generated_at", os.str()}, {"wall_seconds", wall_seconds}};
}

void write_pooled_csv(const std::vector<Chain>& chains, const fs::path& path) {
  if (chains.empty()) throw InvalidArgument("no chains to write");
  const Matrix d = pooled_draws(chains);
  Matrix rows(d.rows(), d.cols() + 1);
  rows.leftCols(d.cols()) = d;
  Eigen::Index r = 0;
  for (const auto& c : chains) {
    rows.col(d.cols()).segment(r, c.size()) = c.logp;
    r += c.size();
  }
  auto header = chains.front().names;
  header.push_back("logp");
  write_csv(path, header, rows);
}

void write_chains_dir(const std::vector<Chain>& chains, const HMCConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  for (std::size_t k = 0; k < chains.size(); ++k) {
    const std::string stem = "chain_" + std::to_string(k);
    save_chain(chains[k], dir / (stem + ".csv"));
    HMCConfig c = cfg;
    c.seed = chains[k].seed;
    save_chain_stats(chains[k], c, dir / (stem + ".json"));
  }
}

namespace {

void write_grid_csv(const Vector& probs, const GridSpec& grid, const std::vector<std::string>& names,
                    const fs::path& path) {
  const auto k = static_cast<Eigen::Index>(grid.dim());
  Matrix rows(probs.size(), k + 2);
  for (Eigen::Index c = 0; c < probs.size(); ++c) {
    rows.row(c).head(k) = grid_cell_center(grid, static_cast<std::size_t>(c)).transpose();
    rows(c, k) = probs[c];
    rows(c, k + 1) = probs[c] / grid.cell_volume();
  }
  auto header = names;
  header.push_back("probability");
  header.push_back("density");
  write_csv(path, header, rows);
}

void write_history_csv(const TrainHistory& h, const fs::path& path) {
  Matrix rows(static_cast<Eigen::Index>(h.train_logp.size()), 4);
  for (std::size_t e = 0; e < h.train_logp.size(); ++e) {
    const auto r = static_cast<Eigen::Index>(e);
    rows(r, 0) = static_cast<double>(e);
    rows(r, 1) = h.train_logp[e];
    rows(r, 2) = h.val_logp[e];
    rows(r, 3) = h.best_val_logp[e];
  }
  write_csv(path, {"epoch", "train_logp", "val_logp", "best_val_logp"}, rows);
}

std::vector<Bound> flow_support(const MSSRun& run) {
  std::vector<Bound> s;
  if (!run.cfg.box_support) return s;
  for (const auto& e : run.constraint->hyper_out().entries()) s.push_back(e.bound);
  return s;
}

}  // namespace

MSSResult run_mss(const MSSRun& run) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  run.validate();
  const auto& cfg = run.cfg;
  const std::optional<fs::path>& out = run.out_dir;

  MSSResult r;
  json& rep = r.report;
  rep["schema_version"] = 1;
  rep["kind"] = "mss";
  rep["seed"] = cfg.seed;
  rep["warnings"] = run.warnings();
  const auto finish = [&](bool passed) {
    rep["passed"] = passed;
    rep["status"] = passed ? "ok" : "gate_failed";
    rep[kRunInfoField] = run_info_now(elapsed());
    if (out) write_json(*out / "report.json", rep);
  };

  if (out) {
    fs::create_directories(*out);
    write_json(*out / "config.json", run.config_echo);
  }

  r.stage1 = run_stage1(run);
  rep["stage1"] = {{"scheme", scheme_name(cfg.stage1_scheme)},
                   {"chains", chain_stats_json(r.stage1.chains)},
                   {"divergences", r.stage1.divergences},
                   {"summaries", summaries_to_json(r.stage1.summaries)},
                   {"gate", gate_json(r.stage1.gate)}};
  if (out) {
    write_chains_dir(r.stage1.chains, seeded(cfg.stage1, cfg.seed, "stage1"), *out / "stage1");
    write_csv(*out / "marginal.csv", r.stage1.hyper_names, r.stage1.marginal);
  }
  if (!r.stage1.gate.passed && cfg.enforce_gates) {
    rep["failed_stage"] = "stage1";
    finish(false);
    throw ConvergenceGateFailed("stage 1: " + join(r.stage1.gate.failures, "; "));
  }

  const auto in_names = run.constraint->hyper_in().names();
  const int n_stage2 = cfg.stage2_chains * cfg.stage2.n_samples;
  LogDensityFn estimator;
  std::optional<KDEModel> kde;
  if (cfg.estimator == Estimator::flow) {
    TrainConfig fc = cfg.flow;
    fc.seed = derive_seed(cfg.seed, "flow");
    TrainResult tr = train_flow(r.stage1.marginal, fc, flow_support(run));
    r.flow = std::move(tr.flow);
    r.flow_history = std::move(tr.history);
    rep["estimator"] = {{"kind", "flow"},
                        {"n_params", r.flow->n_params()},
                        {"epochs", r.flow_history.train_logp.size()},
                        {"best_epoch", r.flow_history.best_epoch},
                        {"best_val_logp", r.flow_history.best_val_logp.empty() ? 0.0
                                                                                 : r.flow_history.best_val_logp.back()}};
    if (out) {
      save_flow(*r.flow, *out / "flow.json");
      write_history_csv(r.flow_history, *out / "flow_history.csv");
    }
    const FlowModel& flow = *r.flow;
    estimator = [&flow](const Vector& z) { return flow_log_density_value(flow, z); };

    const HMCConfig c2 = seeded(cfg.stage2, cfg.seed, "stage2");
    r.stage2_chains = sample_chains(build_stage2_target(flow, run.constraint, run.hyper_prior), c2, cfg.stage2_chains);
    r.stage2_draws = pooled_draws(r.stage2_chains);
    r.stage2_summaries = summarize(r.stage2_chains);
    r.stage2_gate = convergence_gate(r.stage2_summaries, cfg.gates);
    int div = 0;
    for (const auto& c : r.stage2_chains) div += c.divergences;
    rep["stage2"] = {{"sampler", "hmc"},
                     {"chains", chain_stats_json(r.stage2_chains)},
                     {"divergences", div},
                     {"summaries", summaries_to_json(r.stage2_summaries)},
                     {"gate", gate_json(r.stage2_gate)}};
    if (out) write_pooled_csv(r.stage2_chains, *out / "stage2.csv");
  } else {
    kde = make_kde(r.stage1.marginal);
    rep["estimator"] = {{"kind", "kde"}, {"bandwidth", std::vector<double>(kde->bandwidth.begin(), kde->bandwidth.end())}};
    const KDEModel& k = *kde;
    estimator = [&k](const Vector& z) { return kde_log_density(k, z); };
  }

  if (cfg.grid) {
    r.grid_probs = stage2_grid(estimator, *run.constraint, *run.hyper_prior, *cfg.grid, cfg.grid_subdiv);
    if (out) write_grid_csv(*r.grid_probs, *cfg.grid, in_names, *out / "stage2_grid.csv");
  }

  if (cfg.estimator == Estimator::kde) {
    r.stage2_draws = sample_grid(*r.grid_probs, *cfg.grid, n_stage2, derive_seed(cfg.seed, "stage2-grid"));
    r.stage2_summaries = iid_summaries(r.stage2_draws, in_names);
    rep["stage2"] = {{"sampler", "grid"},
                     {"summaries", summaries_to_json(r.stage2_summaries)},
                     {"gate", gate_json(r.stage2_gate)}};
    if (out) {
      Matrix rows(r.stage2_draws.rows(), r.stage2_draws.cols() + 1);
      rows.leftCols(r.stage2_draws.cols()) = r.stage2_draws;
      for (Eigen::Index i = 0; i < rows.rows(); ++i) {
        rows(i, rows.cols() - 1) = estimator((*run.constraint)(r.stage2_draws.row(i).transpose())) +
                                   run.hyper_prior->log_density(r.stage2_draws.row(i).transpose());
      }
      auto header = in_names;
      header.push_back("logp");
      write_csv(*out / "stage2.csv", header, rows);
    }
  }

  bool passed = r.stage1.gate.passed && r.stage2_gate.passed;
  if (run.evaluate) {
    json cmp = run.evaluate(r);
    if (cmp.contains("passed") && !cmp["passed"].get<bool>()) passed = false;
    rep["comparisons"] = std::move(cmp);
  }
  finish(passed);
  return r;
}

}  // namespace mss
