#include "svflow/attention.hpp"
#include "svflow/data.hpp"
#include "svflow/flow.hpp"
#include "svflow/train.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace svflow;

namespace {

Vec randn(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Vec v(static_cast<Eigen::Index>(d));
  for (auto& c : v) c = n(rng);
  return v;
}

FlowModel moons_model(std::size_t Z, std::size_t L, std::mt19937_64& rng) {
  FlowModel m(Family::gaussian, 2, Z, L, 0.01, PosteriorMode::untied);
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t z = 0; z < Z; ++z) m.set_gaussian(l, z, {randn(2, rng), 0.3 * randn(2, rng)});
    Mat W(static_cast<Eigen::Index>(Z), 2);
    for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = 0.1 * randn(1, rng)[0];
    m.set_posterior_logits(l, W, Vec::Zero(static_cast<Eigen::Index>(Z)));
  }
  return m;
}

void BM_VectorField(benchmark::State& state) {
  std::mt19937_64 rng(1);
  const auto Z = static_cast<std::size_t>(state.range(0));
  const auto m = moons_model(Z, 1, rng);
  const Vec x = randn(2, rng);
  for (auto _ : state) benchmark::DoNotOptimize(vector_field(m, 0, x));
}
BENCHMARK(BM_VectorField)->Arg(2)->Arg(8)->Arg(32);

void BM_EvaluateHybrid(benchmark::State& state) {
  std::mt19937_64 rng(2);
  const auto m = moons_model(8, 100, rng);
  ClassifierHead head(2, 2);
  const auto batch = make_moons(static_cast<std::size_t>(state.range(0)), 0.06, 3);
  const auto obj = ObjectiveConfig::hybrid(0.1);
  for (auto _ : state) benchmark::DoNotOptimize(evaluate_hybrid(m, head, batch, obj, true));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_EvaluateHybrid)->Arg(64)->Arg(512)->Unit(benchmark::kMillisecond);

void BM_VmfLogNormalizer(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  double kappa = 0.5;
  for (auto _ : state) {
    benchmark::DoNotOptimize(vmf_log_normalizer(d, kappa));
    kappa = kappa > 1e4 ? 0.5 : kappa * 1.7;
  }
}
BENCHMARK(BM_VmfLogNormalizer)->Arg(3)->Arg(64)->Arg(1024);

void BM_MhaForward(benchmark::State& state) {
  std::mt19937_64 rng(4);
  const std::size_t d = 16, n = static_cast<std::size_t>(state.range(0));
  MhaLayer layer;
  for (int h = 0; h < 4; ++h) {
    AttentionHead head{Mat(d, d), Mat(d, d)};
    for (Eigen::Index i = 0; i < head.QK.size(); ++i) {
      head.QK.data()[i] = 0.25 * randn(1, rng)[0];
      head.OV.data()[i] = 0.25 * randn(1, rng)[0];
    }
    layer.heads.push_back(head);
  }
  std::vector<Vec> keys, values;
  for (std::size_t i = 0; i < n; ++i) {
    keys.push_back(randn(d, rng));
    values.push_back(randn(d, rng));
  }
  const Vec xq = randn(d, rng);
  const auto form = state.range(1) ? MhaForm::svflow : MhaForm::literal;
  for (auto _ : state) benchmark::DoNotOptimize(mha_forward(layer, xq, keys, values, form));
}
BENCHMARK(BM_MhaForward)->ArgsProduct({{8, 64, 512}, {0, 1}});

}  // namespace

BENCHMARK_MAIN();
