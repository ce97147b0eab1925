#include "mss/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>

#include "mss/errors.hpp"

namespace mss {

namespace fs = std::filesystem;

ExperimentKind parse_experiment_kind(const std::string& name) {
  if (name == "classic") return ExperimentKind::classic;
  if (name == "likelihood") return ExperimentKind::likelihood;
  if (name == "pta") return ExperimentKind::pta;
  throw FormatError("unknown experiment '" + name + "' (expected classic, likelihood or pta)");
}

std::string experiment_kind_name(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::classic: return "classic";
    case ExperimentKind::likelihood: return "likelihood";
    case ExperimentKind::pta: return "pta";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Config parsing

namespace {

using KeyFn = std::function<bool(const std::string&, const json&)>;

// Calls `fn` for every non-annotation key; `fn` returns false for unknown keys.
void each_key(const json& j, const std::string& section, const KeyFn& fn) {
  if (!j.is_object()) throw FormatError("'" + section + "' must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key().starts_with("_")) continue;
    if (!fn(it.key(), it.value())) throw FormatError("unknown key '" + it.key() + "' in '" + section + "'");
  }
}

// Copy of `j` without the listed keys, for sections that embed another config.
json without(const json& j, std::initializer_list<const char*> keys) {
  json c = j;
  for (const char* k : keys) c.erase(k);
  return c;
}

std::pair<double, double> read_pair(const json& v, const std::string& what) {
  if (!v.is_array() || v.size() != 2) throw FormatError("'" + what + "' must be a two-element array");
  return {v[0].get<double>(), v[1].get<double>()};
}

GridSpec read_grid(const json& j) {
  GridSpec g;
  each_key(j, "grid", [&](const std::string& k, const json& v) {
    if (k == "lower") g.lower = v.get<std::vector<double>>();
    else if (k == "upper") g.upper = v.get<std::vector<double>>();
    else if (k == "bins") g.bins = v.get<std::vector<int>>();
    else return false;
    return true;
  });
  g.validate();
  return g;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  c.raw = j;
  if (!j.is_object() || !j.contains("experiment")) throw FormatError("config needs an 'experiment' field");
  c.kind = parse_experiment_kind(j.at("experiment").get<std::string>());
  bool have_dataset = false;
  json stage1, stage2, flow, baseline;
  each_key(j, "config", [&](const std::string& k, const json& v) {
    if (k == "experiment") return true;
    if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "model") {
      each_key(v, k, [&](const std::string& mk, const json& mv) {
        if (mk == "n_local") c.funnel.n_local = mv.get<int>();
        else if (mk == "hyper_sigma") c.funnel.hyper_sigma = mv.get<double>();
        else if (mk == "a_bound") c.a_bound = mv.get<double>();
        else if (mk == "data_mean") c.data_mean = mv.get<double>();
        else if (mk == "data_sigma") c.data_sigma = mv.get<double>();
        else return false;
        return true;
      });
    } else if (k == "dataset") {
      have_dataset = true;
      each_key(v, k, [&](const std::string& dk, const json& dv) {
        if (dk == "path") {
          if (!dv.is_null()) c.dataset_path = dv.get<std::string>();
        } else if (dk == "n_samples") c.sim.n_samples = dv.get<int>();
        else if (dk == "span") c.sim.span = dv.get<double>();
        else if (dk == "jitter_frac") c.sim.jitter_frac = dv.get<double>();
        else if (dk == "sigma") c.sim.sigma = dv.get<double>();
        else if (dk == "n_freq") c.sim.n_freq = dv.get<int>();
        else if (dk == "true_log10_A") c.sim.true_log10_A = dv.get<double>();
        else if (dk == "true_gamma") c.sim.true_gamma = dv.get<double>();
        else if (dk == "seed") c.sim.seed = dv.get<std::uint64_t>();
        else return false;
        return true;
      });
    } else if (k == "power_law") {
      each_key(v, k, [&](const std::string& pk, const json& pv) {
        if (pk == "log10_A_bounds") c.power_law.log10_A_bounds = read_pair(pv, pk);
        else if (pk == "gamma_bounds") c.power_law.gamma_bounds = read_pair(pv, pk);
        else if (pk == "f_ref") c.power_law.f_ref = pv.get<double>();
        else return false;
        return true;
      });
    } else if (k == "free_spectral") {
      each_key(v, k, [&](const std::string& fk, const json& fv) {
        if (fk == "log10_rho_bounds") c.free_spectral.log10_rho_bounds = read_pair(fv, fk);
        else return false;
        return true;
      });
    } else if (k == "stage1") stage1 = v;
    else if (k == "stage2") stage2 = v;
    else if (k == "flow") flow = v;
    else if (k == "baseline") baseline = v;
    else if (k == "gates") {
      each_key(v, k, [&](const std::string& gk, const json& gv) {
        if (gk == "max_rhat") c.mss.gates.max_rhat = gv.get<double>();
        else if (gk == "min_ess") c.mss.gates.min_ess = gv.get<double>();
        else if (gk == "enforce") c.mss.enforce_gates = gv.get<bool>();
        else return false;
        return true;
      });
    } else if (k == "compare") {
      each_key(v, k, [&](const std::string& ck, const json& cv) {
        if (ck == "ks_max") c.compare.ks_max = cv.get<double>();
        else if (ck == "tv_max") c.compare.tv_max = cv.get<double>();
        else if (ck == "mean_tol_sd") c.compare.mean_tol_sd = cv.get<double>();
        else if (ck == "sd_tol_frac") c.compare.sd_tol_frac = cv.get<double>();
        else if (ck == "grid") c.compare.grid = read_grid(cv);
        else if (ck == "grid_subdiv") c.compare.grid_subdiv = cv.get<int>();
        else return false;
        return true;
      });
    } else return false;
    return true;
  });
  if (have_dataset && c.kind != ExperimentKind::pta) throw FormatError("'dataset' only applies to the pta experiment");

  c.mss.seed = c.seed;
  if (!stage1.is_null()) {
    c.mss.stage1 = HMCConfig::from_json(without(stage1, {"scheme"}));
    c.mss.stage1_chains = stage1.value("n_chains", c.mss.stage1_chains);
    if (stage1.contains("scheme")) c.mss.stage1_scheme = parse_scheme(stage1["scheme"].get<std::string>());
  }
  if (!stage2.is_null()) {
    c.mss.stage2 = HMCConfig::from_json(stage2);
    c.mss.stage2_chains = stage2.value("n_chains", c.mss.stage2_chains);
  }
  if (!flow.is_null()) {
    c.mss.flow = TrainConfig::from_json(without(flow, {"estimator", "box_support"}));
    if (flow.contains("estimator")) {
      const auto e = flow["estimator"].get<std::string>();
      if (e == "flow") c.mss.estimator = Estimator::flow;
      else if (e == "kde") c.mss.estimator = Estimator::kde;
      else throw FormatError("unknown estimator '" + e + "' (expected flow or kde)");
    }
    c.mss.box_support = flow.value("box_support", c.mss.box_support);
  }
  if (!baseline.is_null()) {
    c.baseline.hmc = HMCConfig::from_json(without(baseline, {"max_divergences"}));
    c.baseline.n_chains = baseline.value("n_chains", c.baseline.n_chains);
    c.baseline.max_divergences = baseline.value("max_divergences", c.baseline.max_divergences);
  }
  if (c.baseline.n_chains < 1 || c.mss.stage1_chains < 1 || c.mss.stage2_chains < 1) {
    throw InvalidArgument("n_chains must be positive");
  }
  if (c.compare.grid_subdiv < 1) throw InvalidArgument("grid_subdiv must be positive");
  c.sim.log10_A_lo = c.power_law.log10_A_bounds.first;
  c.sim.log10_A_hi = c.power_law.log10_A_bounds.second;
  c.sim.gamma_lo = c.power_law.gamma_bounds.first;
  c.sim.gamma_hi = c.power_law.gamma_bounds.second;
  c.funnel.validate();
  c.power_law.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) { return from_json(read_json(path)); }

// ---------------------------------------------------------------------------
// Oracles

namespace {

constexpr int kFineCells1D = 4000;
constexpr int kFineCells2D = 200;
constexpr int kCompareBins1D = 40;
constexpr int kCompareBins2D = 24;
constexpr double kGridHalfWidthSd = 5.0;

// Coarse comparison grid: oracle mean +- 5 sd, clipped to `range`.
GridSpec grid_around(const GridMoments& m, const GridSpec& range, int bins) {
  GridSpec g;
  for (std::size_t k = 0; k < range.dim(); ++k) {
    const auto i = static_cast<Eigen::Index>(k);
    const double sd = std::sqrt(m.cov(i, i));
    g.lower.push_back(std::max(range.lower[k], m.mean[i] - kGridHalfWidthSd * sd));
    g.upper.push_back(std::min(range.upper[k], m.mean[i] + kGridHalfWidthSd * sd));
    g.bins.push_back(bins);
  }
  return g;
}

double interp_cdf(const Vector& cdf, const GridSpec& fine, double x) {
  const double w = (fine.upper[0] - fine.lower[0]) / fine.bins[0];
  const double pos = (x - fine.lower[0]) / w;
  if (pos <= 0) return 0.0;
  if (pos >= fine.bins[0]) return 1.0;
  const auto i = static_cast<Eigen::Index>(pos);
  const double below = i > 0 ? cdf[i - 1] : 0.0;
  return below + (pos - static_cast<double>(i)) * (cdf[i] - below);
}

}  // namespace

Experiment build_experiment(const ExperimentConfig& cfg) {
  Experiment ex;
  ex.cfg = cfg;
  GridSpec fine;
  switch (cfg.kind) {
    case ExperimentKind::classic:
    case ExperimentKind::likelihood: {
      const int n = cfg.funnel.n_local;
      GeneralizedFunnelSpec gs;
      gs.n_local = n;
      gs.a_bound = cfg.a_bound;
      gs.data_mean = cfg.data_mean;
      gs.data_sigma = cfg.data_sigma;
      LikelihoodFunnelSpec ls{cfg.funnel, cfg.data_mean, cfg.data_sigma};
      if (cfg.kind == ExperimentKind::classic) {
        ex.original = std::make_shared<ClassicFunnelModel>(cfg.funnel);
        const double s = cfg.funnel.hyper_sigma;
        ex.oracle_logp = [s](const Vector& y) { return log_normal_pdf(y[0], 0.0, s); };
      } else {
        ls.validate();
        gs.with_likelihood = true;
        ex.original = std::make_shared<LikelihoodFunnelModel>(ls);
        ex.oracle_logp = [ls](const Vector& y) { return likelihood_funnel_analytic_marginal(y[0], ls); };
      }
      ex.generalized = std::make_shared<GeneralizedFunnelModel>(gs);
      ex.constraint = std::make_shared<ConstraintMap>(make_funnel_constraint(n, cfg.a_bound));
      ex.hyper_prior = std::make_shared<GaussianHyperPrior>("y", cfg.funnel.hyper_sigma);
      const double half = 10.0 * cfg.funnel.hyper_sigma;
      fine = GridSpec{{-half}, {half}, {kFineCells1D}};
      break;
    }
    case ExperimentKind::pta: {
      PTADataset ds = cfg.dataset_path ? load_dataset(*cfg.dataset_path) : simulate_dataset(cfg.sim);
      ex.dataset = std::make_shared<const PTADataset>(std::move(ds));
      FreeSpectralSpec fs = cfg.free_spectral;
      fs.n_freq = ex.dataset->n_freq();
      const PowerLawSpec pl = cfg.power_law;
      ex.original = std::make_shared<PowerLawModel>(ex.dataset, pl);
      ex.generalized = std::make_shared<FreeSpectralModel>(ex.dataset, fs);
      ex.constraint = std::make_shared<ConstraintMap>(make_pta_constraint(*ex.dataset, pl, fs));
      ex.hyper_prior = std::make_shared<UniformBoxPrior>(ex.constraint->hyper_in());
      const DatasetPtr d = ex.dataset;
      ex.oracle_logp = [d, pl](const Vector& y) { return pta_analytic_marginal_logp(*d, y[0], y[1], pl); };
      // Cell centers stay strictly inside the open prior box.
      fine = GridSpec{{pl.log10_A_bounds.first, pl.gamma_bounds.first},
                      {pl.log10_A_bounds.second, pl.gamma_bounds.second},
                      {kFineCells2D, kFineCells2D}};
      break;
    }
  }
  for (auto i : ex.original->space().indices(Block::hyper)) ex.hyper_names.push_back(ex.original->space()[i].name);

  const Vector fine_probs = grid_probabilities(ex.oracle_logp, fine, 2);
  ex.oracle_moments = grid_moments(fine_probs, fine);
  if (cfg.compare.grid) {
    ex.grid = *cfg.compare.grid;
    if (ex.grid.dim() != ex.hyper_names.size()) throw DimensionMismatch("compare grid vs hyper-parameters");
  } else {
    ex.grid = grid_around(ex.oracle_moments, fine, fine.dim() == 1 ? kCompareBins1D : kCompareBins2D);
  }
  ex.oracle_probs = grid_probabilities(ex.oracle_logp, ex.grid, cfg.compare.grid_subdiv);
  return ex;
}

MSSRun make_mss_run(const Experiment& ex, const std::optional<fs::path>& out_dir) {
  MSSRun run;
  run.generalized_model = ex.generalized;
  run.constraint = ex.constraint;
  run.hyper_prior = ex.hyper_prior;
  run.cfg = ex.cfg.mss;
  if (!run.cfg.grid) run.cfg.grid = ex.grid;
  run.out_dir = out_dir;
  run.config_echo = ex.cfg.raw;
  run.evaluate = [ex](const MSSResult& r) {
    json c = compare_with_oracle(ex, r.stage2_draws);
    if (r.grid_probs && r.grid_probs->size() == ex.oracle_probs.size()) {
      c["estimator_grid_tv"] = tv_distance(*r.grid_probs, ex.oracle_probs);
    }
    return c;
  };
  return run;
}

json compare_with_oracle(const Experiment& ex, const Matrix& hyper_draws) {
  const auto k = static_cast<Eigen::Index>(ex.hyper_names.size());
  if (hyper_draws.cols() != k) throw DimensionMismatch("hyper draws vs experiment hyper-parameters");
  if (hyper_draws.rows() < 2) throw TooFewSamples("comparison needs at least two draws");
  const auto& cmp = ex.cfg.compare;
  json out;
  out["n_draws"] = hyper_draws.rows();
  bool passed = true;

  json moments = json::array();
  bool moments_ok = true;
  for (Eigen::Index i = 0; i < k; ++i) {
    const double om = ex.oracle_moments.mean[i];
    const double osd = std::sqrt(ex.oracle_moments.cov(i, i));
    const double m = hyper_draws.col(i).mean();
    const double sd = std::sqrt((hyper_draws.col(i).array() - m).square().sum() / (hyper_draws.rows() - 1.0));
    const double mean_err = std::abs(m - om) / osd;
    const double sd_err = std::abs(sd / osd - 1.0);
    moments_ok = moments_ok && mean_err < cmp.mean_tol_sd && sd_err < cmp.sd_tol_frac;
    moments.push_back({{"name", ex.hyper_names[static_cast<std::size_t>(i)]},
                       {"oracle_mean", om},
                       {"oracle_sd", osd},
                       {"mean", m},
                       {"sd", sd},
                       {"mean_err_sd", mean_err},
                       {"sd_err_frac", sd_err}});
  }
  out["moments"] = moments;
  out["moments_ok"] = moments_ok;

  double tv = 1.0;
  try {
    tv = tv_distance(grid_histogram(hyper_draws, ex.grid), ex.oracle_probs);
  } catch (const CoverageError& e) {
    out["coverage_error"] = e.what();
  }
  out["tv"] = tv;
  out["tv_max"] = cmp.tv_max;
  out["grid"] = {{"lower", ex.grid.lower}, {"upper", ex.grid.upper}, {"bins", ex.grid.bins}};

  switch (ex.cfg.kind) {
    case ExperimentKind::classic: {
      const double s = ex.cfg.funnel.hyper_sigma;
      const double ks = ks_statistic(hyper_draws.col(0), [s](double y) { return normal_cdf(y, 0.0, s); });
      out["ks"] = ks;
      out["ks_max"] = cmp.ks_max;
      out["criterion"] = "ks";
      passed = ks < cmp.ks_max;
      break;
    }
    case ExperimentKind::likelihood: {
      const double half = 10.0 * ex.cfg.funnel.hyper_sigma;
      const GridSpec fine{{-half}, {half}, {kFineCells1D}};
      Vector cdf = grid_probabilities(ex.oracle_logp, fine, 2);
      for (Eigen::Index i = 1; i < cdf.size(); ++i) cdf[i] += cdf[i - 1];
      out["ks"] = ks_statistic(hyper_draws.col(0), [&](double y) { return interp_cdf(cdf, fine, y); });
      out["criterion"] = "tv";
      passed = tv < cmp.tv_max;
      break;
    }
    case ExperimentKind::pta:
      out["criterion"] = "moments+tv";
      passed = moments_ok && tv < cmp.tv_max;
      break;
  }
  out["passed"] = passed;
  return out;
}

// ---------------------------------------------------------------------------
// Baselines

BaselineResult run_baseline(const Experiment& ex, Scheme scheme, const std::optional<fs::path>& out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& bc = ex.cfg.baseline;
  HMCConfig hmc = bc.hmc;
  hmc.seed = derive_seed(ex.cfg.seed, "baseline-" + scheme_name(scheme));
  const ReparamPtr target = make_scheme_target(scheme, ex.original);

  BaselineResult r;
  json& rep = r.report;
  rep["schema_version"] = 1;
  rep["kind"] = "sample";
  rep["experiment"] = experiment_kind_name(ex.cfg.kind);
  rep["scheme"] = scheme_name(scheme);
  rep["seed"] = ex.cfg.seed;
  if (out_dir) {
    fs::create_directories(*out_dir);
    write_json(*out_dir / "config.json", ex.cfg.raw);
  }

  bool passed = true;
  try {
    for (const auto& inner : sample_chains(target, hmc, bc.n_chains)) r.chains.push_back(push_chain(*target, inner));
  } catch (const AllDivergent& e) {
    r.all_divergent = true;
    rep["error"] = e.what();
    passed = false;
  }
  if (!r.all_divergent) {
    r.hyper_draws = project_hyper(pooled_draws(r.chains), ex.original->space());
    r.summaries = summarize(r.chains);
    for (const auto& c : r.chains) r.divergences += c.divergences;
    std::vector<CoordinateSummary> hyper;
    for (const auto& s : r.summaries) {
      if (std::find(ex.hyper_names.begin(), ex.hyper_names.end(), s.name) != ex.hyper_names.end()) hyper.push_back(s);
    }
    const GateResult gate = convergence_gate(hyper, ex.cfg.mss.gates);
    json chains = json::array();
    for (const auto& c : r.chains) {
      chains.push_back({{"seed", c.seed},
                        {"step_size", c.step_size},
                        {"accept_rate", c.accept_rate},
                        {"divergences", c.divergences},
                        {"warmup_divergences", c.warmup_divergences},
                        {"n_grad_evals", c.n_grad_evals}});
    }
    const bool div_ok = bc.max_divergences < 0 || r.divergences <= bc.max_divergences;
    rep["chains"] = chains;
    rep["divergences"] = r.divergences;
    rep["max_divergences"] = bc.max_divergences;
    rep["summaries"] = summaries_to_json(hyper);
    rep["gate"] = {{"passed", gate.passed}, {"failures", gate.failures}, {"divergences_ok", div_ok}};
    json cmp = compare_with_oracle(ex, r.hyper_draws);
    passed = gate.passed && div_ok && cmp["passed"].get<bool>();
    rep["comparisons"] = std::move(cmp);
    if (out_dir) {
      write_chains_dir(r.chains, hmc, *out_dir / "chains");
      write_pooled_csv(r.chains, *out_dir / "samples.csv");
    }
  }
  rep["passed"] = passed;
  rep["status"] = passed ? "ok" : "gate_failed";
  rep[kRunInfoField] =
      run_info_now(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  if (out_dir) write_json(*out_dir / "report.json", rep);
  return r;
}

}  // namespace mss
