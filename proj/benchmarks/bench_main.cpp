#include <benchmark/benchmark.h>

#include <vector>

#include "sgdph/autodiff.hpp"
#include "sgdph/nn.hpp"
#include "sgdph/optim.hpp"
#include "sgdph/rng.hpp"
#include "sgdph/tensor.hpp"

namespace {

using namespace sgdph;

template <class T>
Tensor<T> random_tensor(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> t(shape);
  for (T& v : t.data()) v = static_cast<T>(rng.normal());
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_tensor<float>({n, n}, 1);
  const auto b = random_tensor<float>({n, n}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(128);

void BM_Conv2d(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto x = random_tensor<float>({32, c, 14, 14}, 1);
  const auto w = random_tensor<float>({c, c, 3, 3}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, Padding::kSame));
}
BENCHMARK(BM_Conv2d)->Arg(4)->Arg(8);

struct Batch {
  Tensor<float> x;
  std::vector<std::int32_t> labels;
};

Batch mnist_like_batch(std::size_t n) {
  Batch b{random_tensor<float>({n, 1, 28, 28}, 3), std::vector<std::int32_t>(n)};
  for (std::size_t i = 0; i < n; ++i) b.labels[i] = static_cast<std::int32_t>(i % 10);
  return b;
}

// Forward plus first-order backward, the per-step cost of SGDM.
void BM_Backward(benchmark::State& state) {
  auto model = nn::build_model<float>("cnn-bn", {1, 28, 28}, 10, nn::ModelOptions{}, 1);
  const auto batch = mnist_like_batch(32);
  for (auto _ : state) {
    ad::Graph<float> g;
    auto loss = nn::softmax_cross_entropy(model.forward(g, batch.x, nn::Mode::kProbe), batch.labels);
    benchmark::DoNotOptimize(g.backward(loss));
  }
}
BENCHMARK(BM_Backward)->Unit(benchmark::kMillisecond);

// Retained backward plus one hessian_diag_1d per channel-wise parameter, the
// per-step cost of SGD-PH.
void BM_HessianDiag(benchmark::State& state) {
  auto model = nn::build_model<float>("cnn-bn", {1, 28, 28}, 10, nn::ModelOptions{}, 1);
  const auto batch = mnist_like_batch(32);
  const auto channelwise = model.channelwise_parameters();
  for (auto _ : state) {
    ad::Graph<float> g;
    auto loss = nn::softmax_cross_entropy(model.forward(g, batch.x, nn::Mode::kProbe), batch.labels);
    g.backward(loss, true);
    for (auto* p : channelwise) benchmark::DoNotOptimize(ad::hessian_diag_1d(loss, *p));
  }
}
BENCHMARK(BM_HessianDiag)->Unit(benchmark::kMillisecond);

void BM_Step(benchmark::State& state) {
  auto model = nn::build_model<float>("cnn-bn", {1, 28, 28}, 10, nn::ModelOptions{}, 1);
  auto params = model.parameters();
  optim::TensorMap<float> grads, hdiags;
  std::uint64_t seed = 10;
  for (auto* p : params) {
    grads.emplace(p->name(), random_tensor<float>(p->value().shape(), seed++));
    if (p->is_channelwise()) hdiags.emplace(p->name(), random_tensor<float>(p->value().shape(), seed++));
  }
  optim::SgdPhConfig cfg;
  cfg.tau = 1e-6;
  optim::OptState<float> opt;
  for (auto _ : state) optim::step<float>(params, grads, hdiags, cfg, opt);
}
BENCHMARK(BM_Step);

}  // namespace
BENCHMARK_MAIN();
