// Command-line front end: simulate, sample, mss, flow-train, diagnose, compare.
// Exit status: 0 success, 2 gate failure, 1 error. Every subcommand writes
// <out>/report.json, including on error.

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "mss/errors.hpp"
#include "mss/experiment.hpp"
#include "mss/flow.hpp"
#include "mss/io.hpp"
#include "mss/pipeline.hpp"
#include "mss/pta_sim.hpp"

namespace fs = std::filesystem;
using mss::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitGate = 2;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool config_required) {
  auto* opt = cmd->add_option("--config", c.config, "Run configuration (JSON)");
  if (config_required) opt->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Master seed (overrides the config)");
  cmd->add_option("--out", c.out, "Output directory")->required();
}

mss::ExperimentConfig load_config(const Common& c) {
  json raw = mss::read_json(c.config);
  if (c.seed) raw["seed"] = *c.seed;
  return mss::ExperimentConfig::from_json(raw);
}

json base_report(const std::string& kind) { return {{"schema_version", 1}, {"kind", kind}}; }

void finish_report(json& rep, const fs::path& out, bool passed, double seconds) {
  rep["passed"] = passed;
  rep["status"] = passed ? "ok" : "gate_failed";
  rep[mss::kRunInfoField] = mss::run_info_now(seconds);
  fs::create_directories(out);
  mss::write_json(out / "report.json", rep);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_simulate(const Common& c) {
  const auto t0 = std::chrono::steady_clock::now();
  mss::SimConfig sim;
  if (!c.config.empty()) sim = load_config(c).sim;
  if (c.seed) sim.seed = *c.seed;
  Eigen::VectorXd coeffs;
  const mss::PTADataset ds = mss::simulate_dataset(sim, &coeffs);
  const fs::path out(c.out);
  fs::create_directories(out);
  mss::save_dataset(ds, out / "dataset.json");
  mss::export_dataset_csv(ds, out / "dataset.csv");
  json rep = base_report("simulate");
  rep["seed"] = sim.seed;
  rep["n_samples"] = ds.n_samples();
  rep["n_freq"] = ds.n_freq();
  rep["sigma"] = ds.sigma();
  rep["truth"] = {{"log10_A", sim.true_log10_A}, {"gamma", sim.true_gamma}};
  rep["coefficients"] = std::vector<double>(coeffs.begin(), coeffs.end());
  finish_report(rep, out, true, seconds_since(t0));
  return kExitOk;
}

int cmd_sample(const Common& c, const std::string& scheme) {
  const auto ex = mss::build_experiment(load_config(c));
  const auto r = mss::run_baseline(ex, mss::parse_scheme(scheme), fs::path(c.out));
  return r.report["passed"].get<bool>() ? kExitOk : kExitGate;
}

int cmd_mss(const Common& c) {
  const auto ex = mss::build_experiment(load_config(c));
  try {
    const auto r = mss::run_mss(mss::make_mss_run(ex, fs::path(c.out)));
    return r.report["passed"].get<bool>() ? kExitOk : kExitGate;
  } catch (const mss::ConvergenceGateFailed& e) {
    std::cerr << "gate failure: " << e.what() << "\n";
    return kExitGate;
  }
}

int cmd_flow_train(const Common& c, const std::string& input) {
  const auto t0 = std::chrono::steady_clock::now();
  const mss::CsvTable table = mss::read_csv(input);
  mss::TrainConfig tc;
  std::vector<mss::Bound> support;
  if (!c.config.empty()) {
    const auto cfg = load_config(c);
    tc = cfg.mss.flow;
    tc.seed = mss::derive_seed(cfg.seed, "flow");
    // Box preprocessing applies when the columns are the generalized hyper block.
    const auto ex = mss::build_experiment(cfg);
    if (cfg.mss.box_support && table.header == ex.constraint->hyper_out().names()) {
      for (const auto& e : ex.constraint->hyper_out().entries()) support.push_back(e.bound);
    }
  }
  if (c.seed) tc.seed = *c.seed;
  const auto tr = mss::train_flow(table.rows, tc, support);
  const fs::path out(c.out);
  fs::create_directories(out);
  mss::save_flow(tr.flow, out / "flow.json");
  json rep = base_report("flow-train");
  rep["input"] = input;
  rep["n_samples"] = table.rows.rows();
  rep["columns"] = table.header;
  rep["config"] = tc.to_json();
  rep["epochs"] = tr.history.train_logp.size();
  rep["best_epoch"] = tr.history.best_epoch;
  rep["best_val_logp"] = tr.history.best_val_logp.empty() ? 0.0 : tr.history.best_val_logp.back();
  rep["train_logp"] = tr.history.train_logp;
  rep["val_logp"] = tr.history.val_logp;
  finish_report(rep, out, true, seconds_since(t0));
  return kExitOk;
}

std::vector<fs::path> chain_files(const std::vector<std::string>& inputs) {
  std::vector<fs::path> files;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(in)) {
        const auto name = e.path().filename().string();
        if (name.starts_with("chain_") && e.path().extension() == ".csv") found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else {
      files.emplace_back(in);
    }
  }
  if (files.empty()) throw mss::InvalidArgument("no chain CSV files found");
  return files;
}

int cmd_diagnose(const Common& c, const std::vector<std::string>& inputs) {
  const auto t0 = std::chrono::steady_clock::now();
  mss::GateThresholds gates;
  if (!c.config.empty()) gates = load_config(c).mss.gates;
  std::vector<mss::Chain> chains;
  json files = json::array();
  for (const auto& f : chain_files(inputs)) {
    chains.push_back(mss::load_chain(f));
    files.push_back(f.string());
  }
  const auto summaries = mss::summarize(chains);
  const auto gate = mss::convergence_gate(summaries, gates);
  json rep = base_report("diagnose");
  rep["inputs"] = files;
  rep["summaries"] = mss::summaries_to_json(summaries);
  rep["gate"] = {{"passed", gate.passed}, {"failures", gate.failures}};
  finish_report(rep, fs::path(c.out), gate.passed, seconds_since(t0));
  return gate.passed ? kExitOk : kExitGate;
}

// Histogram overlays of each input against the oracle on the comparison grid.
int cmd_compare(const Common& c, const std::vector<std::string>& inputs) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto ex = mss::build_experiment(load_config(c));
  const auto k = static_cast<Eigen::Index>(ex.grid.dim());
  mss::Matrix rows(ex.oracle_probs.size(), k + 1 + static_cast<Eigen::Index>(inputs.size()));
  std::vector<std::string> header = ex.hyper_names;
  header.push_back("oracle");
  for (Eigen::Index cell = 0; cell < ex.oracle_probs.size(); ++cell) {
    rows.row(cell).head(k) = mss::grid_cell_center(ex.grid, static_cast<std::size_t>(cell)).transpose();
    rows(cell, k) = ex.oracle_probs[cell];
  }
  json results = json::array();
  bool passed = true;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const mss::CsvTable t = mss::read_csv(inputs[i]);
    mss::Matrix draws(t.rows.rows(), k);
    for (Eigen::Index j = 0; j < k; ++j) {
      const auto& name = ex.hyper_names[static_cast<std::size_t>(j)];
      const auto it = std::find(t.header.begin(), t.header.end(), name);
      if (it == t.header.end()) throw mss::FormatError(inputs[i] + " has no column '" + name + "'");
      draws.col(j) = t.rows.col(it - t.header.begin());
    }
    json cmp = mss::compare_with_oracle(ex, draws);
    passed = passed && cmp["passed"].get<bool>();
    cmp["input"] = inputs[i];
    results.push_back(cmp);
    const auto col = k + 1 + static_cast<Eigen::Index>(i);
    try {
      rows.col(col) = mss::grid_histogram(draws, ex.grid);
    } catch (const mss::CoverageError&) {
      rows.col(col).setConstant(std::numeric_limits<double>::quiet_NaN());
    }
    header.push_back("input_" + std::to_string(i));
  }
  const fs::path out(c.out);
  fs::create_directories(out);
  mss::write_csv(out / "overlay.csv", header, rows);
  json rep = base_report("compare");
  rep["experiment"] = mss::experiment_kind_name(ex.cfg.kind);
  rep["comparisons"] = results;
  finish_report(rep, out, passed, seconds_since(t0));
  return passed ? kExitOk : kExitGate;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-stage sampling for hierarchical models"};
  app.require_subcommand(1);

  Common common;
  std::string scheme = "ns";
  std::string input;
  std::vector<std::string> inputs;

  auto* simulate = app.add_subcommand("simulate", "Simulate a red-noise timing dataset");
  add_common(simulate, common, false);
  auto* sample = app.add_subcommand("sample", "Single-stage HMC on the original model");
  add_common(sample, common, true);
  sample->add_option("--scheme", scheme, "ns, prs or cprs")->check(CLI::IsMember({"ns", "prs", "cprs"}));
  auto* mss_cmd = app.add_subcommand("mss", "Full multi-stage pipeline");
  add_common(mss_cmd, common, true);
  auto* flow_train = app.add_subcommand("flow-train", "Train a flow on a sample CSV");
  add_common(flow_train, common, false);
  flow_train->add_option("--input", input, "Sample CSV with a header row")->required()->check(CLI::ExistingFile);
  auto* diagnose = app.add_subcommand("diagnose", "Convergence summaries of chain CSVs");
  add_common(diagnose, common, false);
  diagnose->add_option("--input", inputs, "Chain CSV files or directories")->required();
  auto* compare = app.add_subcommand("compare", "Overlay draws on the experiment oracle");
  add_common(compare, common, true);
  compare->add_option("--input", inputs, "Draw CSVs with hyper-parameter columns")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kExitError;
  }

  const auto t0 = std::chrono::steady_clock::now();
  try {
    if (simulate->parsed()) return cmd_simulate(common);
    if (sample->parsed()) return cmd_sample(common, scheme);
    if (mss_cmd->parsed()) return cmd_mss(common);
    if (flow_train->parsed()) return cmd_flow_train(common, input);
    if (diagnose->parsed()) return cmd_diagnose(common, inputs);
    if (compare->parsed()) return cmd_compare(common, inputs);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    try {
      json rep = base_report(app.get_subcommands().front()->get_name());
      rep["error"] = e.what();
      rep["status"] = "error";
      rep["passed"] = false;
      rep[mss::kRunInfoField] = mss::run_info_now(seconds_since(t0));
      fs::create_directories(common.out);
      mss::write_json(fs::path(common.out) / "report.json", rep);
    } catch (...) {
      std::cerr << "error: could not write report.json\n";
    }
    return kExitError;
  }
  return kExitError;
}
