// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <vector>

#include "skv1/kernels.hpp"
#include "skv1/rng.hpp"

namespace {

using namespace skv1;

struct Operands {
  std::vector<float> a, b, c;
  Operands(size_t m, size_t k, size_t n) : a(m * k), b(k * n), c(m * n) {
    Rng rng(17);
    for (auto& x : a) x = static_cast<float>(rng.normal());
    for (auto& x : b) x = static_cast<float>(rng.normal());
  }
};

// Shapes from a d=128 training step: projections (4d × d × tokens) and the FFN.
template <void (*Gemm)(size_t, size_t, size_t, const float*, const float*, float*)>
void BM_gemm(benchmark::State& state) {
  const auto m = static_cast<size_t>(state.range(0));
  const auto k = static_cast<size_t>(state.range(1));
  const auto n = static_cast<size_t>(state.range(2));
  Operands op(m, k, n);
  for (auto _ : state) {
    Gemm(m, k, n, op.a.data(), op.b.data(), op.c.data());
    benchmark::DoNotOptimize(op.c.data());
  }
  state.counters["GFLOP/s"] =
      benchmark::Counter(2.0 * static_cast<double>(m * k * n), benchmark::Counter::kIsIterationInvariantRate,
                         benchmark::Counter::kIs1000);
}

void shapes(benchmark::internal::Benchmark* b) {
  b->Args({128, 128, 256})->Args({512, 128, 256})->Args({128, 512, 256})->Args({256, 128, 2048});
}

BENCHMARK(BM_gemm<kernels::serial::gemm_nn<float>>)->Name("gemm_nn/serial")->Apply(shapes);
BENCHMARK(BM_gemm<kernels::parallel::gemm_nn<float>>)->Name("gemm_nn/parallel")->Apply(shapes);
BENCHMARK(BM_gemm<kernels::serial::gemm_tn<float>>)->Name("gemm_tn/serial")->Apply(shapes);
BENCHMARK(BM_gemm<kernels::parallel::gemm_tn<float>>)->Name("gemm_tn/parallel")->Apply(shapes);
BENCHMARK(BM_gemm<kernels::serial::gemm_nt<float>>)->Name("gemm_nt/serial")->Apply(shapes);
BENCHMARK(BM_gemm<kernels::parallel::gemm_nt<float>>)->Name("gemm_nt/parallel")->Apply(shapes);

}  // namespace

BENCHMARK_MAIN();
