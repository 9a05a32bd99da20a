#include <benchmark/benchmark.h>

#include "ulike/blocks.hpp"
#include "ulike/nn_ops.hpp"

namespace {

using namespace ulike;

Tensor<float> random_tensor(Extents shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> t(std::move(shape));
  for (float& v : t.data()) v = static_cast<float>(rng.normal());
  return t;
}

void BM_Conv3d(benchmark::State& state) {
  const Index e = state.range(0);
  const ConvSpec spec = ConvSpec::cubic(16, 32, 3, 2, 1);
  const auto x = random_tensor({16, e, e, e}, 1);
  const auto w = random_tensor(spec.weight_shape(), 2), b = random_tensor({32}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(conv3d(x, spec, w, b));
  state.SetItemsProcessed(state.iterations() * e * e * e);
}

void BM_DwConv3d(benchmark::State& state) {
  const Index e = state.range(0);
  const auto x = random_tensor({32, e, e, e}, 4);
  const auto w = random_tensor({32, 3, 3, 3}, 5), b = random_tensor({32}, 6);
  for (auto _ : state) benchmark::DoNotOptimize(dwconv3d(x, w, b));
  state.SetItemsProcessed(state.iterations() * e * e * e);
}

void BM_DwConv1d(benchmark::State& state) {
  const Index l = state.range(0) * state.range(0) * state.range(0);
  const auto x = random_tensor({32, l}, 7);
  const auto w = random_tensor({32, 4}, 8), b = random_tensor({32}, 9);
  for (auto _ : state) benchmark::DoNotOptimize(dwconv1d(x, w, b));
  state.SetItemsProcessed(state.iterations() * l);
}

void BM_MambaLayer(benchmark::State& state) {
  const Index e = state.range(0);
  MambaLayerConfig cfg;
  cfg.channels = 16;
  cfg.state_dim = 8;
  cfg.dwconv = state.range(1) == 3 ? DWConvKind::Conv3D : DWConvKind::Conv1D;
  Rng rng(10);
  MambaLayer<float> layer(cfg, rng);
  const auto x = random_tensor({16, e, e, e}, 11);
  for (auto _ : state) benchmark::DoNotOptimize(layer.forward(x));
  state.SetItemsProcessed(state.iterations() * e * e * e);
}

}  // namespace

BENCHMARK(BM_Conv3d)->Arg(16)->Arg(32);
BENCHMARK(BM_DwConv3d)->Arg(16)->Arg(32);
BENCHMARK(BM_DwConv1d)->Arg(16)->Arg(32);
BENCHMARK(BM_MambaLayer)->Args({16, 1})->Args({16, 3});
