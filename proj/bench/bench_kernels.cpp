// Parallel kernels against their serial references at model-sized shapes.
#include <benchmark/benchmark.h>

#include <random>

#include "densedit/backbone.hpp"
#include "densedit/kernels.hpp"

namespace {

using densedit::Matrix;
namespace k = densedit::kernels;

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (double& v : m.data) v = n(rng);
  return m;
}

// Token count of a 32x32 query plus noisy latent plus a 32x64 demo at patch 4.
constexpr std::size_t kTokens = 64 + 64 + 128;

template <bool Parallel>
void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix a = random_matrix(kTokens, n, 1), b = random_matrix(n, 4 * n, 2);
  Matrix c;
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::matmul(a, b, c);
    } else {
      k::serial::matmul(a, b, c);
    }
    benchmark::DoNotOptimize(c.data.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(kTokens * n * 4 * n));
}
BENCHMARK(BM_Matmul<true>)->Name("matmul/parallel")->Arg(64)->Arg(128);
BENCHMARK(BM_Matmul<false>)->Name("matmul/serial")->Arg(64)->Arg(128);

template <bool Parallel>
void BM_Attention(benchmark::State& state) {
  const auto len = static_cast<std::size_t>(state.range(0));
  const Matrix q = random_matrix(len, 64, 3), kk = random_matrix(len, 64, 4), v = random_matrix(len, 64, 5);
  Matrix out;
  std::vector<Matrix> probs;
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::attention(q, kk, v, 4, out, &probs);
    } else {
      k::serial::attention(q, kk, v, 4, out, &probs);
    }
    benchmark::DoNotOptimize(out.data.data());
  }
}
BENCHMARK(BM_Attention<true>)->Name("attention/parallel")->Arg(135)->Arg(kTokens);
BENCHMARK(BM_Attention<false>)->Name("attention/serial")->Arg(135)->Arg(kTokens);

template <bool Parallel>
void BM_LayerNorm(benchmark::State& state) {
  const Matrix x = random_matrix(kTokens, 64, 6);
  Matrix y;
  std::vector<double> inv;
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::layer_norm(x, y, inv);
    } else {
      k::serial::layer_norm(x, y, inv);
    }
    benchmark::DoNotOptimize(y.data.data());
  }
}
BENCHMARK(BM_LayerNorm<true>)->Name("layer_norm/parallel");
BENCHMARK(BM_LayerNorm<false>)->Name("layer_norm/serial");

void BM_ForwardVelocity(benchmark::State& state) {
  densedit::ModelState model = densedit::make_model({});
  densedit::apply_lora(model);
  densedit::LatentGrid zt(8, 8, 48, densedit::StreamTag::noisy), query(8, 8, 48, densedit::StreamTag::query);
  zt.data = random_matrix(64, 48, 7);
  query.data = random_matrix(64, 48, 8);
  const densedit::TokenSequence prompt = densedit::embed_prompt(model, "A segmentation mask of shapes");
  for (auto _ : state) {
    auto v = densedit::forward_velocity(model, zt, query, std::nullopt, prompt, 0.5);
    benchmark::DoNotOptimize(v.data.data.data());
  }
}
BENCHMARK(BM_ForwardVelocity)->Name("forward_velocity/toy");

}  // namespace

BENCHMARK_MAIN();
