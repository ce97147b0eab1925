#include <cmath>
#include <fstream>
#include <memory>
#include <sstream>

#include "doctest.h"

#include "mss/errors.hpp"
#include "mss/experiment.hpp"
#include "mss/pipeline.hpp"
#include "test_support.hpp"

using namespace mss;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json classic_config() { return read_json(fs::path(MSS_CONFIG_DIR) / "classic_funnel.json"); }

// A short classic-funnel run for plumbing tests.
json small_classic_config() {
  json j = classic_config();
  j["stage1"]["n_warmup"] = 300;
  j["stage1"]["n_samples"] = 1000;
  j["flow"]["max_epochs"] = 3;
  j["stage2"]["n_warmup"] = 200;
  j["stage2"]["n_samples"] = 300;
  j["gates"]["enforce"] = false;
  return j;
}

// Flow that is exactly uniform on (-a, a)^n: probit box, identity layers.
FlowModel uniform_box_flow(int n, double a) {
  Standardizer st;
  st.lower = Vector::Constant(n, -a);
  st.upper = Vector::Constant(n, a);
  st.mean = Vector::Zero(n);
  st.scale = Vector::Ones(n);
  return make_identity_flow(n, 2, 4, st);
}

}  // namespace

TEST_CASE("projection keeps exactly the hyper columns") {
  ParameterSpace s;
  s.add("a", Bound::unbounded(), Block::local);
  s.add("h1", Bound::unbounded(), Block::hyper);
  s.add("b", Bound::unbounded(), Block::local);
  s.add("h2", Bound::interval(0, 1), Block::hyper);
  Matrix d(3, 4);
  d << 1, 2, 3, 0.4, 5, 6, 7, 0.8, 9, 10, 11, 0.2;
  const Matrix p = project_hyper(d, s);
  REQUIRE(p.cols() == 2);
  CHECK(p.col(0) == d.col(1));
  CHECK(p.col(1) == d.col(3));
  CHECK_THROWS_AS(project_hyper(Matrix::Zero(2, 3), s), DimensionMismatch);
}

TEST_CASE("stage-2 target from a uniform estimate reduces to the hyper-prior") {
  const auto constraint = std::make_shared<const ConstraintMap>(make_funnel_constraint(9, 4.0));
  auto prior = std::make_shared<GaussianHyperPrior>("y", 3.0);
  const FlowModel flow = uniform_box_flow(9, 4.0);
  const ModelPtr target = build_stage2_target(flow, constraint, prior);
  const double uniform_logp = -9 * std::log(8.0);
  for (double y : {-10.0, -3.0, 0.0, 0.5, 7.0, 15.0}) {
    Vector v(1);
    v << y;
    CHECK(target->log_density(v) == doctest::Approx(uniform_logp + prior->log_density(v)).epsilon(1e-10));
  }

  HMCConfig cfg;
  cfg.n_warmup = 1000;
  cfg.n_samples = 2500;
  cfg.seed = 2;
  const Matrix d = pooled_draws(sample_chains(target, cfg, 4));
  CHECK(ks_statistic(d.col(0), [](double y) { return normal_cdf(y, 0, 3); }) < 0.03);

  // Grid path: the same reduction, normalized.
  GridSpec g;
  g.lower = {-15.0};
  g.upper = {15.0};
  g.bins = {60};
  const Vector p = stage2_grid([&](const Vector& u) { return flow_log_density_value(flow, u); }, *constraint, *prior,
                               g, 2);
  CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-12));
  const Vector q = grid_probabilities([&](const Vector& y) { return prior->log_density(y); }, g, 2);
  CHECK(tv_distance(p, q) < 1e-10);
}

TEST_CASE("stage-2 gradient and behaviour outside the trained support") {
  Rng rng(3);
  Matrix train(2000, 9);
  for (Eigen::Index r = 0; r < train.rows(); ++r) {
    const double y = 3 * std_normal(rng);
    for (int i = 0; i < 9; ++i) train(r, i) = std::clamp(0.5 * y * std::log10(std::exp(1.0)) + 0.3 * std_normal(rng), -3.9, 3.9);
  }
  const Standardizer st = fit_standardizer(train, std::vector<Bound>(9, Bound::interval(-4, 4)), 32, 2);
  TrainConfig tc;
  tc.n_layers = 4;
  tc.hidden_width = 8;
  FlowModel flow = init_flow(st, tc);
  Vector params = flow_pack_params(flow);
  for (Eigen::Index i = 0; i < params.size(); ++i) params[i] = 0.2 * std_normal(rng);
  flow_unpack_params(flow, params);

  const auto constraint = std::make_shared<const ConstraintMap>(make_funnel_constraint(9, 4.0));
  auto prior = std::make_shared<GaussianHyperPrior>("y", 3.0);
  const Stage2Target target(flow, constraint, prior);
  for (double y = -8.0; y <= 8.0; y += 0.8) {
    Vector v(1), g;
    v << y;
    const double lp = target.log_density_grad(v, g);
    const double h = 1e-6;
    const double fd = (target.log_density(v + Vector::Constant(1, h)) - target.log_density(v - Vector::Constant(1, h))) / (2 * h);
    CHECK(std::abs(fd - g[0]) < 1e-4 * std::max(1.0, std::abs(g[0])));
    CHECK(std::isfinite(lp));
  }
  // |y| = 40 maps to |log10 z| ~ 8.7, outside the generalized box.
  for (double y : {-40.0, 40.0}) {
    Vector v(1), g;
    v << y;
    const double lp = target.log_density_grad(v, g);
    CHECK(std::isfinite(lp));
    CHECK(g.allFinite());
    Vector mid(1);
    mid << 0.0;
    CHECK(lp < target.log_density(mid) - 20);
  }
  CHECK_THROWS_AS(Stage2Target(uniform_box_flow(3, 4.0), constraint, prior), DimensionMismatch);
}

TEST_CASE("stage 1 on the generalized funnel gives uniform hyper marginals") {
  json j = classic_config();
  j["stage1"]["n_samples"] = 5000;
  const Experiment ex = build_experiment(ExperimentConfig::from_json(j));
  const MSSRun run = make_mss_run(ex, std::nullopt);
  const Stage1Result r = run_stage1(run);
  CHECK(r.gate.passed);
  CHECK(r.marginal.rows() == 20000);
  CHECK(r.marginal.cols() == 9);
  CHECK(r.hyper_names.front() == "log10_z_1");
  for (Eigen::Index i = 0; i < 9; ++i) {
    CHECK(ks_statistic(r.marginal.col(i), [](double v) { return std::clamp((v + 4) / 8, 0.0, 1.0); }) < 0.03);
  }

  // A second master seed gives a consistent marginal.
  j["seed"] = 2;
  const Experiment ex2 = build_experiment(ExperimentConfig::from_json(j));
  const Stage1Result r2 = run_stage1(make_mss_run(ex2, std::nullopt));
  for (Eigen::Index i = 0; i < 9; ++i) CHECK(ks_two_sample(r.marginal.col(i), r2.marginal.col(i)) < 0.05);
}

TEST_CASE("stage 1 gate failure") {
  json j = classic_config();
  j["stage1"]["n_warmup"] = 50;
  j["stage1"]["n_samples"] = 40;
  const Experiment ex = build_experiment(ExperimentConfig::from_json(j));
  const auto dir = test::temp_dir("gate");
  CHECK_THROWS_AS(stage1_marginal_samples(make_mss_run(ex, std::nullopt)), ConvergenceGateFailed);
  CHECK_THROWS_AS(run_mss(make_mss_run(ex, dir)), ConvergenceGateFailed);
  CHECK(fs::exists(dir / "report.json"));
  CHECK(fs::exists(dir / "stage1" / "chain_0.csv"));
  CHECK(read_json(dir / "report.json")["passed"] == false);
}

TEST_CASE("run validation") {
  const Experiment ex = build_experiment(ExperimentConfig::from_json(small_classic_config()));
  MSSRun run = make_mss_run(ex, std::nullopt);
  CHECK_NOTHROW(run.validate());
  CHECK(run.warnings().empty());
  MSSRun bad = run;
  bad.constraint = std::make_shared<const ConstraintMap>(make_funnel_constraint(5, 4.0));
  CHECK_THROWS_AS(bad.validate(), DimensionMismatch);
  bad = run;
  bad.cfg.stage1_chains = 0;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  bad = run;
  bad.hyper_prior = nullptr;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
}

TEST_CASE("pipeline artifacts and determinism") {
  const Experiment ex = build_experiment(ExperimentConfig::from_json(small_classic_config()));
  const auto a = test::temp_dir("mss_a"), b = test::temp_dir("mss_b");
  const MSSResult ra = run_mss(make_mss_run(ex, a));
  const MSSResult rb = run_mss(make_mss_run(ex, b));
  CHECK(ra.stage2_draws == rb.stage2_draws);
  for (const char* f : {"config.json", "marginal.csv", "flow.json", "stage2.csv", "report.json"}) {
    CAPTURE(f);
    CHECK(fs::exists(a / f));
  }
  for (int k = 0; k < 4; ++k) {
    CHECK(fs::exists(a / "stage1" / ("chain_" + std::to_string(k) + ".csv")));
    CHECK(slurp(a / "stage1" / ("chain_" + std::to_string(k) + ".csv")) ==
          slurp(b / "stage1" / ("chain_" + std::to_string(k) + ".csv")));
  }
  for (const char* f : {"config.json", "marginal.csv", "flow.json", "stage2.csv"}) {
    CAPTURE(f);
    CHECK(slurp(a / f) == slurp(b / f));
  }
  json ja = read_json(a / "report.json"), jb = read_json(b / "report.json");
  CHECK(ja.contains(kRunInfoField));
  ja.erase(kRunInfoField);
  jb.erase(kRunInfoField);
  CHECK(ja == jb);

  const CsvTable marginal = read_csv(a / "marginal.csv");
  CHECK(marginal.header == ex.constraint->hyper_out().names());
  CHECK(marginal.rows.rows() == 4000);
  const CsvTable s2 = read_csv(a / "stage2.csv");
  CHECK(s2.header.front() == "y");
  CHECK(s2.rows.rows() == 1200);
  const FlowModel loaded = load_flow(a / "flow.json");
  CHECK(flow_log_density_value(loaded, marginal.rows.row(0).transpose()) ==
        doctest::Approx(flow_log_density_value(*ra.flow, marginal.rows.row(0).transpose())).epsilon(1e-12));
}

TEST_CASE("exact draws from a grid density") {
  GridSpec g;
  g.lower = {0.0, -1.0};
  g.upper = {5.0, 1.0};
  g.bins = {5, 4};
  Vector p(20);
  for (int i = 0; i < 20; ++i) p[i] = 1.0 + i % 7;
  p /= p.sum();
  const Matrix d = sample_grid(p, g, 100000, 4);
  CHECK(d.rows() == 100000);
  CHECK(d.col(0).minCoeff() >= 0.0);
  CHECK(d.col(0).maxCoeff() <= 5.0);
  CHECK(tv_distance(grid_histogram(d, g), p) < 0.01);
  CHECK(sample_grid(p, g, 50, 9) == sample_grid(p, g, 50, 9));
  CHECK_THROWS(sample_grid(Vector::Ones(3), g, 10, 1));
}

TEST_CASE("hyper-prior models") {
  GaussianHyperPrior gp("y", 3.0);
  Vector y(1);
  y << 1.5;
  CHECK(gp.log_density(y) == doctest::Approx(-0.5 * 0.25 - std::log(3.0) - 0.91893853320467274).epsilon(1e-14));
  CHECK(check_gradient(gp, y) < 1e-8);
  ParameterSpace box;
  box.add("a", Bound::interval(-2, 2), Block::hyper);
  box.add("b", Bound::interval(0, 7), Block::hyper);
  UniformBoxPrior up(box);
  Vector v(2);
  v << 0.0, 3.0;
  CHECK(up.log_density(v) == doctest::Approx(-std::log(28.0)).epsilon(1e-14));
  ParameterSpace open;
  open.add("u", Bound::unbounded(), Block::hyper);
  CHECK_THROWS_AS(UniformBoxPrior{open}, InvalidArgument);
}
