#include <benchmark/benchmark.h>

#include <numeric>
#include <random>

#include "dubscore/active_learning.hpp"
#include "dubscore/fusion_network.hpp"
#include "dubscore/proxy_mos.hpp"

namespace {

using namespace dubscore;

fusion::Batch random_batch(Eigen::Index rows, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> nd(0.0, 0.2);
  fusion::Batch b;
  for (std::size_t s = 0; s < data::kStreamCount; ++s) {
    b.streams[s].resize(rows, data::kStreamDims[s]);
    for (Eigen::Index i = 0; i < b.streams[s].size(); ++i) b.streams[s].data()[i] = nd(g);
  }
  return b;
}

void BM_ForwardEval(benchmark::State& state) {
  const fusion::FusionNetwork net(fusion::NetworkConfig{});
  const auto batch = random_batch(state.range(0), 1);
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(batch, {}));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardEval)->Arg(1)->Arg(64);

void BM_ForwardBackward(benchmark::State& state) {
  const fusion::FusionNetwork net(fusion::NetworkConfig{});
  const auto batch = random_batch(state.range(0), 2);
  const Eigen::VectorXd dscore = Eigen::VectorXd::Ones(state.range(0));
  for (auto _ : state) {
    fusion::ForwardCache cache;
    net.forward(batch, {fusion::Mode::Train, 3}, &cache);
    benchmark::DoNotOptimize(net.backward(cache, dscore));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardBackward)->Arg(64);

data::SyntheticDataset corpus(int n) {
  data::SyntheticSpec s;
  s.n_clips = n;
  s.rated_fraction = 1.0;
  return data::generate_synthetic(s);
}

void BM_LearnWeights(benchmark::State& state) {
  const auto ds = corpus(static_cast<int>(state.range(0)));
  proxy::LabeledPool pool;
  for (const auto& r : ds.manifest.records) {
    pool.objectives.push_back(r.objective);
    pool.mos.push_back(r.human_mos());
  }
  const auto norm = proxy::fit_normalizer(pool.objectives);
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(proxy::learn_weights(pool, norm, ++seed));
}
BENCHMARK(BM_LearnWeights)->Arg(90)->Arg(300);

void BM_ActiveLearningLoop(benchmark::State& state) {
  const auto ds = corpus(600);
  std::vector<std::size_t> rows(ds.manifest.records.size());
  std::iota(rows.begin(), rows.end(), 0);
  const al::RecordedOracle oracle;
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        al::run_al_loop(ds.manifest, rows, oracle, static_cast<std::size_t>(state.range(0)), 1));
  }
}
BENCHMARK(BM_ActiveLearningLoop)->Arg(90)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
