// Serial reference kernels against the OpenMP versions, plus one full
// training step. Thread count follows TANDEM_NUM_THREADS / OMP_NUM_THREADS.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "tandem/kernels.hpp"
#include "tandem/training.hpp"

using namespace tandem;

namespace {

std::vector<float> random_vec(std::size_t n, unsigned seed) {
  std::mt19937 gen(seed);
  std::normal_distribution<float> d;
  std::vector<float> v(n);
  for (auto& x : v) x = d(gen);
  return v;
}

template <bool Parallel>
void BM_Matmul(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0)), k = m, n = m;
  auto a = random_vec(m * k, 1), b = random_vec(k * n, 2), bias = random_vec(n, 3);
  std::vector<float> c(m * n);
  for (auto _ : state) {
    if constexpr (Parallel) kernels::matmul(a.data(), b.data(), bias.data(), c.data(), m, k, n);
    else kernels::serial::matmul(a.data(), b.data(), bias.data(), c.data(), m, k, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * k * n));
}

template <bool Parallel>
void BM_MatmulWeightGrad(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0)), k = m, n = m;
  auto a = random_vec(m * k, 1), g = random_vec(m * n, 2);
  std::vector<float> w(k * n);
  for (auto _ : state) {
    if constexpr (Parallel) kernels::matmul_at_acc(a.data(), g.data(), w.data(), m, k, n);
    else kernels::serial::matmul_at_acc(a.data(), g.data(), w.data(), m, k, n);
    benchmark::DoNotOptimize(w.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * k * n));
}

void BM_TrainStep(benchmark::State& state) {
  const TokenDataset data = TokenDataset::from_documents(synthetic_documents(200'000, 1));
  DecoderModel<float> model({258, static_cast<int>(state.range(0)), 4, 4, 4 * static_cast<int>(state.range(0)), 64},
                            "", 1);
  TrainModels<float> models;
  models.standalone = &model;
  TrainConfig cfg;
  cfg.steps = 1;
  cfg.batch_size = 8;
  cfg.seq_len = 64;
  for (auto _ : state) train(models, data, cfg);
}

}  // namespace

BENCHMARK(BM_Matmul<false>)->Name("matmul/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_Matmul<true>)->Name("matmul/parallel")->Arg(64)->Arg(256);
BENCHMARK(BM_MatmulWeightGrad<false>)->Name("matmul_at_acc/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_MatmulWeightGrad<true>)->Name("matmul_at_acc/parallel")->Arg(64)->Arg(256);
BENCHMARK(BM_TrainStep)->Name("train_step/d")->Arg(64)->Unit(benchmark::kMillisecond);

int main(int argc, char** argv) {
  kernels::configure_threads_from_env();
  benchmark::Initialize(&argc, argv);
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
}
