// Parallel kernels against their serial references.
#include <benchmark/benchmark.h>

#include "../tests/helpers.hpp"
#include "sage/linalg.hpp"
#include "sage/parallel.hpp"
#include "sage/training.hpp"

using namespace sage;
using namespace sage::testing;

namespace {

Matrix square(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  return random_matrix(n, n, rng);
}

void BM_matmul(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const auto a = square(n, 1), b = square(n, 2);
  for (auto _ : st) benchmark::DoNotOptimize(matmul(a, b));
  st.counters["threads"] = num_threads();
}

void BM_matmul_serial(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const auto a = square(n, 1), b = square(n, 2);
  for (auto _ : st) benchmark::DoNotOptimize(matmul_serial(a, b));
}

void BM_gram(benchmark::State& st) {
  Rng rng(3);
  const auto a = random_matrix(4 * static_cast<std::size_t>(st.range(0)), static_cast<std::size_t>(st.range(0)), rng);
  for (auto _ : st) benchmark::DoNotOptimize(gram(a));
  st.counters["threads"] = num_threads();
}

void BM_gram_serial(benchmark::State& st) {
  Rng rng(3);
  const auto a = random_matrix(4 * static_cast<std::size_t>(st.range(0)), static_cast<std::size_t>(st.range(0)), rng);
  for (auto _ : st) benchmark::DoNotOptimize(gram_serial(a));
}

struct BatchFixture {
  Model model;
  std::vector<Example> batch;
  explicit BatchFixture(int n)
      : model(ModelWeights::init(small_config(2, 4, 64, 16, 0, 60, 5))) {
    Rng rng(4);
    for (int i = 0; i < n; ++i) batch.push_back({random_tokens(20, 60, rng), static_cast<Token>(i % 60)});
  }
};

void BM_batch_grad(benchmark::State& st) {
  BatchFixture f(static_cast<int>(st.range(0)));
  auto grad = ModelWeights::zeros(f.model.weights().config);
  for (auto _ : st) benchmark::DoNotOptimize(batch_loss_and_grad(f.model, f.batch, grad));
  st.counters["threads"] = num_threads();
}

void BM_batch_grad_serial(benchmark::State& st) {
  BatchFixture f(static_cast<int>(st.range(0)));
  auto grad = ModelWeights::zeros(f.model.weights().config);
  for (auto _ : st) benchmark::DoNotOptimize(batch_loss_and_grad_serial(f.model, f.batch, grad));
}

}  // namespace

BENCHMARK(BM_matmul)->Arg(64)->Arg(256);
BENCHMARK(BM_matmul_serial)->Arg(64)->Arg(256);
BENCHMARK(BM_gram)->Arg(64)->Arg(256);
BENCHMARK(BM_gram_serial)->Arg(64)->Arg(256);
BENCHMARK(BM_batch_grad)->Arg(32);
BENCHMARK(BM_batch_grad_serial)->Arg(32);

BENCHMARK_MAIN();
