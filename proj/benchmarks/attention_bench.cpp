#include <benchmark/benchmark.h>

#include <cmath>

#include "evanet/encoder.hpp"
#include "evanet/tensor.hpp"

using namespace evanet;

namespace {

struct Inputs {
  Tensor q, k, v;
};

Inputs make_inputs(std::size_t t, std::size_t dk) {
  Rng rng(17 + t);
  return {Tensor::uniform({t, dk}, -1, 1, rng), Tensor::uniform({t, dk}, -1, 1, rng),
          Tensor::uniform({t, dk}, -1, 1, rng)};
}

}  // namespace

static void BM_FullAttention(benchmark::State& state) {
  const auto t = static_cast<std::size_t>(state.range(0));
  Inputs in = make_inputs(t, 16);
  std::uint64_t macs = 0;
  for (auto _ : state) {
    Tensor out = full_attention(in.q, in.k, in.v, &macs);
    benchmark::DoNotOptimize(out.values().data());
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_FullAttention)->RangeMultiplier(2)->Range(128, 2048)->Complexity();

static void BM_ProbSparseAttention(benchmark::State& state) {
  const auto t = static_cast<std::size_t>(state.range(0));
  Inputs in = make_inputs(t, 16);
  const auto u = static_cast<std::size_t>(std::ceil(5.0 * std::log(static_cast<double>(t))));
  for (auto _ : state) {
    Rng rng(3);
    ProbSparseResult r = probsparse_attention(in.q, in.k, in.v, u, u, rng);
    benchmark::DoNotOptimize(r.output.values().data());
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_ProbSparseAttention)->RangeMultiplier(2)->Range(128, 4096)->Complexity();

static void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(5);
  Tensor a = Tensor::uniform({n, n}, -1, 1, rng);
  Tensor b = Tensor::uniform({n, n}, -1, 1, rng);
  std::vector<double> c(n * n, 0.0);
  for (auto _ : state) {
    gemm_accumulate(a.values().data(), b.values().data(), c.data(), n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n) * n * n);
}
BENCHMARK(BM_Gemm)->Arg(64)->Arg(128)->Arg(256)->Arg(512);

BENCHMARK_MAIN();
