#include <benchmark/benchmark.h>

#include <random>

#include "tfn/detection.hpp"
#include "tfn/eval.hpp"
#include "tfn/ops.hpp"

namespace {

using namespace tfn;

Tensor random(const Shape& shape, std::uint64_t seed, bool grad = false) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<Real> u(-1, 1);
  std::vector<Real> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = u(rng);
  return Tensor::from_data(shape, std::move(v), grad);
}

ConvSpec spec3(std::int64_t kt, std::int64_t out) {
  ConvSpec s;
  s.kernel = {kt, 3, 3};
  s.padding = {kt / 2, 1, 1};
  s.out_channels = out;
  return s;
}

// Args: channels, frames, algorithm (0 im2col, 1 direct).
void BM_Conv3dForward(benchmark::State& state) {
  const auto c = state.range(0), t = state.range(1);
  const auto algo = state.range(2) ? ConvAlgorithm::direct : ConvAlgorithm::im2col;
  const auto x = random({1, c, t, 36, 64}, 1), w = random({c, c, 3, 3, 3}, 2), b = random({c}, 3);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(conv3d(x, w, b, spec3(3, c), algo));
  state.SetItemsProcessed(state.iterations() * c * c * 27 * t * 36 * 64);
}
BENCHMARK(BM_Conv3dForward)->Args({16, 4, 0})->Args({16, 4, 1})->Args({64, 2, 0})->Unit(benchmark::kMillisecond);

void BM_Conv3dBackward(benchmark::State& state) {
  const auto c = state.range(0);
  auto x = random({1, c, 4, 36, 64}, 1, true), w = random({c, c, 3, 3, 3}, 2, true), b = random({c}, 3, true);
  for (auto _ : state) {
    x.zero_grad();
    w.zero_grad();
    b.zero_grad();
    backward(sum(conv3d(x, w, b, spec3(3, c))));
  }
}
BENCHMARK(BM_Conv3dBackward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_MaxPool(benchmark::State& state) {
  const auto x = random({1, 64, 4, 72, 128}, 4);
  const PoolSpec spec{PoolMode::max, {1, 3, 3}, {1, 2, 2}, {0, 1, 1}};
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(pool3d(x, spec));
}
BENCHMARK(BM_MaxPool)->Unit(benchmark::kMillisecond);

std::vector<Detection> scene(std::size_t n) {
  std::mt19937_64 rng(n);
  std::uniform_real_distribution<double> pos(0, 500), size(10, 120), conf(0, 1);
  std::vector<Detection> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].box = {pos(rng), pos(rng), size(rng), size(rng), static_cast<int>(i % 2)};
    out[i].confidence = out[i].box.score = conf(rng);
    out[i].class_id = out[i].box.class_id;
    out[i].anchor = static_cast<int>(i);
  }
  return out;
}

void BM_Nms(benchmark::State& state) {
  const auto dets = scene(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(nms(dets, 0.45));
}
BENCHMARK(BM_Nms)->Arg(100)->Arg(1000)->Arg(4608);

void BM_Ap101(benchmark::State& state) {
  std::mt19937_64 rng(9);
  std::vector<bool> flags(static_cast<std::size_t>(state.range(0)));
  int tp = 0;
  for (std::size_t i = 0; i < flags.size(); ++i) tp += (flags[i] = rng() % 3 != 0);
  for (auto _ : state) benchmark::DoNotOptimize(average_precision_101(flags, tp + 10));
}
BENCHMARK(BM_Ap101)->Arg(1000)->Arg(100000);

}  // namespace
