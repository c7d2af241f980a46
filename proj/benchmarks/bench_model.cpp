#include <benchmark/benchmark.h>

#include "tfn/model.hpp"

namespace {

using namespace tfn;

// Full forward pass of the default model at 512x288. Args: arch index, frames.
void BM_ModelForward(benchmark::State& state) {
  ModelConfig config;
  config.arch = state.range(0) == 0 ? Arch::esf : state.range(0) == 1 ? Arch::lsf : Arch::single;
  config.sequence_length = static_cast<int>(state.range(1));
  const auto graph = build_model(config, 1);
  auto params = init_params(graph, 1);
  const auto input = Tensor::full(graph.input_shape(1), 0.5);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(forward(graph, params, input, {NormMode::infer}));
}
BENCHMARK(BM_ModelForward)->Args({2, 1})->Args({0, 4})->Args({1, 4})->Unit(benchmark::kMillisecond)->Iterations(2);

void BM_BuildAndProfile(benchmark::State& state) {
  const ModelConfig config;
  for (auto _ : state) benchmark::DoNotOptimize(profile(build_model(config)));
}
BENCHMARK(BM_BuildAndProfile)->Unit(benchmark::kMicrosecond);

}  // namespace
