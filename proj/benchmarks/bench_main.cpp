// Microbenchmarks for the kernels and the per-step costs a desk run pays.

#include <benchmark/benchmark.h>

#include <filesystem>
#include <unistd.h>

#include "genieblue/bench.hpp"
#include "genieblue/checkpoint.hpp"
#include "genieblue/quant.hpp"
#include "support.hpp"

using namespace genieblue;
using namespace genieblue::testing;
namespace fs = std::filesystem;

namespace {

Tensor random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({rows, cols});
  randomize(t, rng, 1.0);
  return t;
}

HybridModel desk_hybrid() {
  const ModelConfig c;
  return build_genieblue(build_model(c, 0), plan_placement(c.layers, 0.25, PlacementMode::kSkip),
                         kDefaultLoraRank, 0);
}

void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_matrix(n, 64, 1), b = random_matrix(64, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * 64));
}
BENCHMARK(BM_Gemm)->Arg(16)->Arg(29)->Arg(64)->Arg(256);

void BM_Softmax(benchmark::State& state) {
  const Tensor x = random_matrix(64, static_cast<std::size_t>(state.range(0)), 3);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::softmax_rows(x));
}
BENCHMARK(BM_Softmax)->Arg(64)->Arg(256);

void BM_TextForward(benchmark::State& state) {
  const HybridModel m = desk_hybrid();
  Rng rng(4);
  const TokenBatch batch = random_text_batch(m.config(), rng, static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(forward_lm(m.base.lm, batch));
}
BENCHMARK(BM_TextForward)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_MultimodalForward(benchmark::State& state) {
  const HybridModel m = desk_hybrid();
  Rng rng(5);
  const MixedBatch b = random_batch(m.config(), rng, 8, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(forward_multimodal(m, b.tokens, b.grids));
}
BENCHMARK(BM_MultimodalForward)->Unit(benchmark::kMillisecond);

void BM_Stage2Step(benchmark::State& state) {
  HybridModel m = desk_hybrid();
  const DeskConfig desk = DeskConfig::defaults();
  const Dataset data = desk.mm_train();
  StageConfig s2 = desk.stage2;
  s2.steps = 10;
  s2.allow_unaligned_projector = true;
  for (auto _ : state) benchmark::DoNotOptimize(run_stage(m, s2, data));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(s2.steps));
}
BENCHMARK(BM_Stage2Step)->Unit(benchmark::kMillisecond);

void BM_Quantize(benchmark::State& state) {
  const Tensor w = random_matrix(256, 64, 6);
  const auto bits = static_cast<unsigned>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(quantize_weights(w, bits));
}
BENCHMARK(BM_Quantize)->Arg(4)->Arg(8);

void BM_CheckpointRoundTrip(benchmark::State& state) {
  const HybridModel m = desk_hybrid();
  const fs::path dir = fs::temp_directory_path() / ("genieblue-bench-" + std::to_string(::getpid()));
  for (auto _ : state) {
    save_checkpoint(m, dir);
    benchmark::DoNotOptimize(load_checkpoint(dir));
  }
  fs::remove_all(dir);
}
BENCHMARK(BM_CheckpointRoundTrip)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
