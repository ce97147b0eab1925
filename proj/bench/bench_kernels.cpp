// Parallel kernels against their sequential references.

#include <benchmark/benchmark.h>

#include <memory>

#include "mss/diagnostics.hpp"
#include "mss/flow.hpp"
#include "mss/funnels.hpp"
#include "mss/hmc.hpp"
#include "mss/random.hpp"

namespace {

mss::HMCConfig chain_config() {
  mss::HMCConfig c;
  c.n_warmup = 200;
  c.n_samples = 200;
  c.seed = 7;
  return c;
}

const mss::ModelPtr& funnel_model() {
  static const mss::ModelPtr m = std::make_shared<mss::GeneralizedFunnelModel>();
  return m;
}

void BM_SampleChainsSerial(benchmark::State& state) {
  const auto cfg = chain_config();
  for (auto _ : state) {
    benchmark::DoNotOptimize(mss::sample_chains_serial(funnel_model(), cfg, static_cast<int>(state.range(0))));
  }
}

void BM_SampleChainsParallel(benchmark::State& state) {
  const auto cfg = chain_config();
  for (auto _ : state) {
    benchmark::DoNotOptimize(mss::sample_chains(funnel_model(), cfg, static_cast<int>(state.range(0))));
  }
}

double banana(const mss::Vector& v) {
  const double a = v[0], b = v[1] - 0.5 * v[0] * v[0];
  return -0.5 * (a * a + 4.0 * b * b);
}

mss::GridSpec bench_grid(int bins) { return {{-4.0, -4.0}, {4.0, 6.0}, {bins, bins}}; }

void BM_GridSerial(benchmark::State& state) {
  const auto g = bench_grid(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(mss::grid_probabilities_serial(banana, g, 4));
}

void BM_GridParallel(benchmark::State& state) {
  const auto g = bench_grid(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(mss::grid_probabilities(banana, g, 4));
}

struct FlowFixture {
  mss::FlowModel flow;
  mss::Matrix X;
  FlowFixture() {
    mss::TrainConfig cfg;
    cfg.n_layers = 6;
    cfg.hidden_width = 32;
    cfg.seed = 3;
    flow = mss::init_flow(mss::identity_standardizer(9), cfg);
    mss::Rng rng(11);
    X.resize(8192, 9);
    for (Eigen::Index i = 0; i < X.size(); ++i) X.data()[i] = mss::std_normal(rng);
  }
};

const FlowFixture& flow_fixture() {
  static const FlowFixture f;
  return f;
}

void BM_FlowBatchSerial(benchmark::State& state) {
  const auto& f = flow_fixture();
  for (auto _ : state) benchmark::DoNotOptimize(mss::flow_log_density_batch_serial(f.flow, f.X));
}

void BM_FlowBatchParallel(benchmark::State& state) {
  const auto& f = flow_fixture();
  for (auto _ : state) benchmark::DoNotOptimize(mss::flow_log_density_batch(f.flow, f.X));
}

}  // namespace

BENCHMARK(BM_SampleChainsSerial)->Arg(4)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_SampleChainsParallel)->Arg(4)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_GridSerial)->Arg(50)->Arg(100)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_GridParallel)->Arg(50)->Arg(100)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_FlowBatchSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_FlowBatchParallel)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
