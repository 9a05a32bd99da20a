#include <benchmark/benchmark.h>

#include "ulike/instrument.hpp"
#include "ulike/ssm.hpp"

namespace {

using namespace ulike;

template <typename T>
struct ScanFixture {
  SSMParams<T> params;
  Tensor<T> x;
  ScanFixture(Index l, Index c, Index n) : params([&] {
    Rng rng(1);
    return SSMParams<T>::init(c, n, rng);
  }()), x({l, c}) {
    Rng rng(2);
    for (T& v : x.data()) v = static_cast<T>(rng.normal());
  }
};

template <typename T, ScanAlgorithm A>
void BM_SelectiveScan(benchmark::State& state) {
  const Index l = state.range(0), c = 16, n = 16;
  ScanFixture<T> f(l, c, n);
  for (auto _ : state) benchmark::DoNotOptimize(selective_scan(f.x, f.params, A));
  state.SetItemsProcessed(state.iterations() * l);
  state.counters["L"] = static_cast<double>(l);
}

template <typename T>
void BM_ScanBackward(benchmark::State& state) {
  const Index l = state.range(0), c = 16, n = 16;
  ScanFixture<T> f(l, c, n);
  SelectiveScanCache<T> cache;
  const Tensor<T> y = selective_scan(f.x, f.params, ScanAlgorithm::Sequential, Discretization::EulerB, &cache);
  for (auto _ : state) benchmark::DoNotOptimize(selective_scan_backward(y, cache, f.params));
  state.SetItemsProcessed(state.iterations() * l);
}

}  // namespace

BENCHMARK(BM_SelectiveScan<float, ScanAlgorithm::Sequential>)->RangeMultiplier(4)->Range(256, 16384);
BENCHMARK(BM_SelectiveScan<float, ScanAlgorithm::Parallel>)->RangeMultiplier(4)->Range(256, 16384);
BENCHMARK(BM_SelectiveScan<double, ScanAlgorithm::Sequential>)->Arg(4096);
BENCHMARK(BM_SelectiveScan<double, ScanAlgorithm::Parallel>)->Arg(4096);
BENCHMARK(BM_ScanBackward<float>)->Arg(1024)->Arg(4096);
