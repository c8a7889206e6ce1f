#include <benchmark/benchmark.h>

#include "maskfill/losses.hpp"
#include "maskfill/mlm.hpp"
#include "maskfill/nn/conv.hpp"
#include "maskfill/seg.hpp"
#include "maskfill/synth.hpp"

using namespace maskfill;

namespace {

LabeledCase bench_case(std::int64_t n) {
  return gen_case(builtin_family("A"), builtin_domain("source"), Lattice::cube(n, 128.0 / double(n)), 11);
}

}  // namespace

static void BM_Conv3dForward(benchmark::State& state) {
  const auto n = state.range(0);
  const int ch = static_cast<int>(state.range(1));
  nn::ParamStore<float> store;
  nn::Rng rng(1);
  auto conv = nn::Conv3d<float>::make(store, "c", ch, ch, {}, rng);
  nn::Tensor5<float> x(1, ch, n, n, n, 0.5f);
  for (auto _ : state) benchmark::DoNotOptimize(conv.forward(store, x));
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_Conv3dForward)->Args({16, 8})->Args({32, 8})->Args({32, 16})->Unit(benchmark::kMillisecond);

static void BM_Conv3dBackward(benchmark::State& state) {
  const auto n = state.range(0);
  nn::ParamStore<float> store;
  nn::Rng rng(1);
  auto conv = nn::Conv3d<float>::make(store, "c", 8, 8, {}, rng);
  nn::Tensor5<float> x(1, 8, n, n, n, 0.5f), dy(1, 8, n, n, n, 1.0f);
  for (auto _ : state) benchmark::DoNotOptimize(conv.backward(store, x, dy));
}
BENCHMARK(BM_Conv3dBackward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

static void BM_SegForward(benchmark::State& state) {
  const int scale = static_cast<int>(state.range(0));
  SegModel model(SegConfig{}.scaled(scale), 3);
  auto c = bench_case(128 / scale);
  for (auto _ : state) benchmark::DoNotOptimize(seg_forward(model, c.image));
}
BENCHMARK(BM_SegForward)->Arg(8)->Arg(4)->Unit(benchmark::kMillisecond);

static void BM_MlmForward(benchmark::State& state) {
  const int scale = static_cast<int>(state.range(0));
  MlmModel model(MlmConfig{}.scaled(scale), 5);
  auto c = bench_case(128 / scale);
  auto plan = inference_plan(model, c.mask, 0.75, 7);
  for (auto _ : state) benchmark::DoNotOptimize(mlm_forward(model, c.mask, plan));
}
BENCHMARK(BM_MlmForward)->Arg(8)->Arg(4)->Unit(benchmark::kMillisecond);

static void BM_DiceLoss(benchmark::State& state) {
  auto c = bench_case(state.range(0));
  const SoftMask pred = to_soft(c.mask);
  for (auto _ : state) benchmark::DoNotOptimize(dice_loss(pred, c.mask));
  state.SetItemsProcessed(state.iterations() * pred.lattice().voxel_count());
}
BENCHMARK(BM_DiceLoss)->Arg(32)->Arg(64)->Arg(128);

static void BM_PlanMask(benchmark::State& state) {
  auto c = bench_case(state.range(0));
  auto grid = PatchGrid::for_shape(c.mask.shape(), 4);
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(plan_mask(c.mask, grid, 0.75, seed++));
}
BENCHMARK(BM_PlanMask)->Arg(32)->Arg(64);

BENCHMARK_MAIN();
