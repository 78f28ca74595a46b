// SPDX-License-Identifier: Apache-2.0
//
// Parallel kernels against the serial reference implementations, on the
// shapes of the desk profile.  Args: channels, spatial extent.
#include <benchmark/benchmark.h>

#include "fmch/kernels.hpp"
#include "fmch/rng.hpp"

using namespace fmch;

namespace {

FeatureMap<float> random_map(int channels, Dims3 dims, std::uint64_t seed) {
  FeatureMap<float> f(channels, dims);
  Rng rng(seed);
  for (auto& v : f.storage()) v = static_cast<float>(rng.normal());
  return f;
}

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
  std::vector<float> v(n);
  Rng rng(seed);
  for (auto& x : v) x = static_cast<float>(0.1 * rng.normal());
  return v;
}

struct ConvCase {
  int c;
  FeatureMap<float> in;
  std::vector<float> w, b;
  explicit ConvCase(const benchmark::State& s)
      : c(static_cast<int>(s.range(0))),
        in(random_map(c, Dims3::cube(static_cast<int>(s.range(1))), 1)),
        w(random_vec(static_cast<std::size_t>(c) * c * 27, 2)),
        b(random_vec(static_cast<std::size_t>(c), 3)) {}
};

template <bool Reference>
void BM_Conv3dForward(benchmark::State& s) {
  ConvCase k(s);
  for (auto _ : s) {
    auto out = Reference ? kernels::reference::conv3d_forward<float>(k.in, k.w, k.b, k.c, 3)
                         : kernels::conv3d_forward<float>(k.in, k.w, k.b, k.c, 3);
    benchmark::DoNotOptimize(out.storage().data());
  }
  s.SetItemsProcessed(s.iterations() * static_cast<std::int64_t>(k.in.size()));
}

template <bool Reference>
void BM_Conv3dBackwardInput(benchmark::State& s) {
  ConvCase k(s);
  for (auto _ : s) {
    auto out = Reference ? kernels::reference::conv3d_backward_input<float>(k.in, k.w, k.c, 3)
                         : kernels::conv3d_backward_input<float>(k.in, k.w, k.c, 3);
    benchmark::DoNotOptimize(out.storage().data());
  }
}

template <bool Reference>
void BM_Conv3dBackwardWeight(benchmark::State& s) {
  ConvCase k(s);
  std::vector<float> gw(k.w.size()), gb(k.b.size());
  for (auto _ : s) {
    if (Reference)
      kernels::reference::conv3d_backward_weight<float>(k.in, k.in, 3, gw, gb);
    else
      kernels::conv3d_backward_weight<float>(k.in, k.in, 3, gw, gb);
    benchmark::DoNotOptimize(gw.data());
  }
}

template <bool Reference>
void BM_Down2Forward(benchmark::State& s) {
  const int c = static_cast<int>(s.range(0));
  const auto in = random_map(c, Dims3::cube(static_cast<int>(s.range(1))), 4);
  const auto w = random_vec(static_cast<std::size_t>(2 * c) * c * 8, 5), b = random_vec(static_cast<std::size_t>(2 * c), 6);
  for (auto _ : s) {
    auto out = Reference ? kernels::reference::down2_forward<float>(in, w, b, 2 * c)
                         : kernels::down2_forward<float>(in, w, b, 2 * c);
    benchmark::DoNotOptimize(out.storage().data());
  }
}

template <bool Reference>
void BM_Up2Forward(benchmark::State& s) {
  const int c = static_cast<int>(s.range(0));
  const auto in = random_map(2 * c, Dims3::cube(static_cast<int>(s.range(1)) / 2), 7);
  const auto w = random_vec(static_cast<std::size_t>(2 * c) * c * 8, 8), b = random_vec(static_cast<std::size_t>(c), 9);
  for (auto _ : s) {
    auto out = Reference ? kernels::reference::up2_forward<float>(in, w, b, c)
                         : kernels::up2_forward<float>(in, w, b, c);
    benchmark::DoNotOptimize(out.storage().data());
  }
}

void shapes(benchmark::internal::Benchmark* b) {
  b->Args({8, 24})->Args({16, 12})->Args({32, 6})->Unit(benchmark::kMillisecond);
}

}  // namespace

BENCHMARK(BM_Conv3dForward<false>)->Name("conv3d_forward/parallel")->Apply(shapes);
BENCHMARK(BM_Conv3dForward<true>)->Name("conv3d_forward/reference")->Apply(shapes);
BENCHMARK(BM_Conv3dBackwardInput<false>)->Name("conv3d_backward_input/parallel")->Apply(shapes);
BENCHMARK(BM_Conv3dBackwardInput<true>)->Name("conv3d_backward_input/reference")->Apply(shapes);
BENCHMARK(BM_Conv3dBackwardWeight<false>)->Name("conv3d_backward_weight/parallel")->Apply(shapes);
BENCHMARK(BM_Conv3dBackwardWeight<true>)->Name("conv3d_backward_weight/reference")->Apply(shapes);
BENCHMARK(BM_Down2Forward<false>)->Name("down2_forward/parallel")->Apply(shapes);
BENCHMARK(BM_Down2Forward<true>)->Name("down2_forward/reference")->Apply(shapes);
BENCHMARK(BM_Up2Forward<false>)->Name("up2_forward/parallel")->Apply(shapes);
BENCHMARK(BM_Up2Forward<true>)->Name("up2_forward/reference")->Apply(shapes);

BENCHMARK_MAIN();
