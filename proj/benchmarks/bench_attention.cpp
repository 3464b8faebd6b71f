// Windowed vs dense attention cost over sequence length.

#include <cmath>
#include <random>

#include <benchmark/benchmark.h>

#include "apf/taa.hpp"

namespace {

constexpr std::size_t kHeads = 4;
constexpr std::size_t kHeadDim = 16;

apf::Tensor random_heads(std::size_t length, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  apf::Tensor t({kHeads, length, kHeadDim});
  for (double& v : t.data()) v = normal(rng);
  return t;
}

void BM_WindowedAttention(benchmark::State& state) {
  const auto length = static_cast<std::size_t>(state.range(0));
  const auto window = static_cast<std::size_t>(state.range(1));
  std::mt19937_64 rng(1);
  const apf::Tensor q = random_heads(length, rng), k = random_heads(length, rng), v = random_heads(length, rng);
  const double scale = std::sqrt(static_cast<double>(length));
  apf::AttentionStats stats;
  for (auto _ : state) {
    apf::Graph g;
    stats = {};
    benchmark::DoNotOptimize(apf::gpa_attention(g.constant(q), g.constant(k), g.constant(v), window, scale, true, &stats)
                                 .value()
                                 .data()
                                 .data());
  }
  state.counters["dots_per_head"] = static_cast<double>(stats.dot_products / kHeads);
}

void BM_DenseAttention(benchmark::State& state) {
  const auto length = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(1);
  const apf::Tensor q = random_heads(length, rng), k = random_heads(length, rng), v = random_heads(length, rng);
  const double scale = std::sqrt(static_cast<double>(length));
  for (auto _ : state) {
    apf::Graph g;
    benchmark::DoNotOptimize(
        apf::dense_attention(g.constant(q), g.constant(k), g.constant(v), scale).value().data().data());
  }
  state.counters["dots_per_head"] = static_cast<double>(length * length);
}

void BM_GpaScores(benchmark::State& state) {
  const auto length = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(2);
  const apf::Tensor q = random_heads(length, rng), k = random_heads(length, rng);
  for (auto _ : state) benchmark::DoNotOptimize(apf::gpa_scores(q, k, 5).dot_products);
}

}  // namespace

BENCHMARK(BM_WindowedAttention)->ArgsProduct({{128, 256, 512, 1024}, {3, 5, 7}})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_DenseAttention)->Arg(128)->Arg(256)->Arg(512)->Arg(1024)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_GpaScores)->Arg(128)->Arg(512)->Unit(benchmark::kMicrosecond);
BENCHMARK_MAIN();
