// Microbenchmarks for the hot kernels: fast Walsh-Hadamard transform,
// grouped fake quantization, and the integer GEMM against its float
// reference.

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "dtq/balance.hpp"
#include "dtq/matrix.hpp"
#include "dtq/qgemm.hpp"
#include "dtq/quant.hpp"

namespace {

dtq::Matrix random_matrix(std::size_t rows, std::size_t cols, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  dtq::Matrix m(rows, cols);
  for (double& v : m.data()) v = dist(rng);
  return m;
}

void bm_fwht(benchmark::State& state) {
  const std::size_t n = std::size_t(state.range(0));
  std::vector<double> buf(n);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (double& v : buf) v = dist(rng);
  for (auto _ : state) {
    dtq::fwht(buf.data(), n);
    benchmark::DoNotOptimize(buf.data());
  }
  state.SetItemsProcessed(int64_t(state.iterations()) * int64_t(n));
}
BENCHMARK(bm_fwht)->Arg(64)->Arg(256)->Arg(1024);

void bm_fake_quantize(benchmark::State& state) {
  const std::size_t n = std::size_t(state.range(0));
  const dtq::Matrix x = random_matrix(n, n, 11);
  for (auto _ : state) {
    dtq::Matrix y = dtq::fake_quantize(x, dtq::GroupingScheme::per_token(), 8,
                                       dtq::QuantMode::Dynamic);
    benchmark::DoNotOptimize(y.data().data());
  }
  state.SetItemsProcessed(int64_t(state.iterations()) * int64_t(n * n));
}
BENCHMARK(bm_fake_quantize)->Arg(64)->Arg(128);

void bm_qlinear_int(benchmark::State& state) {
  const std::size_t n = std::size_t(state.range(0));
  const dtq::Matrix x = random_matrix(n, n, 13);
  const dtq::QuantLinear layer =
      dtq::make_quant_linear(random_matrix(n, n, 17), 8, 8);
  for (auto _ : state) {
    dtq::Matrix y = dtq::qlinear_forward(x, layer);
    benchmark::DoNotOptimize(y.data().data());
  }
  state.SetItemsProcessed(int64_t(state.iterations()) * int64_t(n * n * n));
}
BENCHMARK(bm_qlinear_int)->Arg(64)->Arg(128);

void bm_qlinear_float(benchmark::State& state) {
  const std::size_t n = std::size_t(state.range(0));
  const dtq::Matrix x = random_matrix(n, n, 13);
  const dtq::QuantLinear layer =
      dtq::make_quant_linear(random_matrix(n, n, 17), 8, 8);
  for (auto _ : state) {
    dtq::Matrix y = dtq::qlinear_forward_float(x, layer);
    benchmark::DoNotOptimize(y.data().data());
  }
  state.SetItemsProcessed(int64_t(state.iterations()) * int64_t(n * n * n));
}
BENCHMARK(bm_qlinear_float)->Arg(64)->Arg(128);

} // namespace

BENCHMARK_MAIN();
