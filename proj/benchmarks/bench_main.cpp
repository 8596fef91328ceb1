#include <benchmark/benchmark.h>

#include <random>

#include "dmrl/evaluation.hpp"
#include "dmrl/numerics.hpp"
#include "dmrl/synthgen.hpp"
#include "dmrl/training.hpp"

using namespace dmrl;

namespace {

Tensor gaussian(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor t(rows, cols);
  for (double& v : t.values()) {
    v = normal(rng);
  }
  return t;
}

struct Synthetic {
  SyntheticData data;
  InteractionDataset dataset;
  ModelConfig model;
  TrainConfig train;

  Synthetic() {
    const SynthConfig config;
    data = generate_synthetic(config);
    dataset = split_dataset(interaction_log(data), {}, 42);
    model.text_input_dim = config.text_dim;
    model.visual_input_dim = config.visual_dim;
  }
  ItemFeatures features() const { return {&data.text_features, &data.visual_features}; }
};

const Synthetic& synthetic() {
  static const Synthetic s;
  return s;
}

} // namespace

static void BM_Dcor(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto x = gaussian(n, 32, 1);
  const auto y = gaussian(n, 32, 2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(numerics::dcor(x, y));
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Dcor)->RangeMultiplier(4)->Range(16, 1024)->Complexity(benchmark::oNSquared);

static void BM_DcorGradient(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto x = gaussian(n, 32, 3);
  const auto y = gaussian(n, 32, 4);
  for (auto _ : state) {
    benchmark::DoNotOptimize(numerics::dcor_gradient(x, y));
  }
}
BENCHMARK(BM_DcorGradient)->Arg(64)->Arg(256);

static void BM_ScoreAll(benchmark::State& state) {
  const auto& s = synthetic();
  const auto params = ModelParams::initialize(s.model, s.dataset.num_users(), s.dataset.num_items(), 1);
  const ItemScorer scorer(params, s.features(), s.model);
  std::vector<double> out(scorer.num_items());
  Index user = 0;
  for (auto _ : state) {
    scorer.score_all(user, out);
    benchmark::DoNotOptimize(out.data());
    user = static_cast<Index>((user + 1) % scorer.num_users());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(out.size()));
}
BENCHMARK(BM_ScoreAll);

static void BM_TotalLossBatch(benchmark::State& state) {
  const auto& s = synthetic();
  const auto params = ModelParams::initialize(s.model, s.dataset.num_users(), s.dataset.num_items(), 1);
  auto rng = epoch_rng(1, 0);
  auto triples = build_epoch_triples(s.dataset, params, s.train, rng);
  triples.resize(std::min<std::size_t>(triples.size(), static_cast<std::size_t>(state.range(0))));
  for (auto _ : state) {
    benchmark::DoNotOptimize(total_loss(triples, params, s.features(), s.model));
  }
}
BENCHMARK(BM_TotalLossBatch)->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);

static void BM_TrainEpoch(benchmark::State& state) {
  const auto& s = synthetic();
  auto params = ModelParams::initialize(s.model, s.dataset.num_users(), s.dataset.num_items(), 1);
  auto train_state = TrainState::fresh(params, s.train.learning_rate);
  for (auto _ : state) {
    benchmark::DoNotOptimize(train_epoch(s.dataset, s.features(), params, train_state, s.model, s.train));
  }
}
BENCHMARK(BM_TrainEpoch)->Unit(benchmark::kMillisecond);

static void BM_EvaluateValidation(benchmark::State& state) {
  const auto& s = synthetic();
  const auto params = ModelParams::initialize(s.model, s.dataset.num_users(), s.dataset.num_items(), 1);
  const ItemScorer scorer(params, s.features(), s.model);
  for (auto _ : state) {
    benchmark::DoNotOptimize(evaluate(s.dataset, scorer, EvalTarget::validation, 20));
  }
}
BENCHMARK(BM_EvaluateValidation)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
