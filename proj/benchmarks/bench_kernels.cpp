#include <benchmark/benchmark.h>

#include <random>

#include "epi_unwarp/epi_unwarp.hpp"

namespace {

using namespace epi;

nn::Tensor random_tensor(int c, int h, int w, std::uint64_t seed) {
  nn::Tensor t(c, h, w);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (double& v : t.data) v = u(rng);
  return t;
}

const Phantom& phantom() {
  static const Phantom p = [] {
    PhantomSpec s;
    s.seed = 3;
    return generate_phantom(s);
  }();
  return p;
}

void BM_Conv3x3(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  const auto x = random_tensor(c, 128, 128, 1);
  const auto w = random_tensor(c, c, 9, 2);
  const std::vector<double> b(static_cast<std::size_t>(c), 0.0);
  for (auto _ : state) benchmark::DoNotOptimize(nn::conv2d(x, w.data, b, c, 3));
  state.SetItemsProcessed(state.iterations() * 128LL * 128 * c * c * 9);
}
BENCHMARK(BM_Conv3x3)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_UNetForward(benchmark::State& state) {
  nn::UNetConfig cfg;
  cfg.levels = static_cast<int>(state.range(0));
  const nn::UNet net(cfg);
  const auto params = net.init_params(1);
  const auto x = random_tensor(6, 128, 128, 3);
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(x, params));
}
BENCHMARK(BM_UNetForward)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond);

void BM_UNetForwardBackward(benchmark::State& state) {
  nn::UNetConfig cfg;
  cfg.levels = 2;
  const nn::UNet net(cfg);
  const auto params = net.init_params(1);
  const auto x = random_tensor(6, 128, 128, 3);
  const nn::Tensor g(1, 128, 128, 1e-3);
  for (auto _ : state) {
    nn::Tape tape;
    net.forward(x, params, {true, 7}, &tape);
    auto grads = nn::zero_gradients(params);
    benchmark::DoNotOptimize(net.backward(tape, g, params, grads));
  }
}
BENCHMARK(BM_UNetForwardBackward)->Unit(benchmark::kMillisecond);

void BM_CorrectVolume(benchmark::State& state) {
  const Phantom& p = phantom();
  for (auto _ : state) benchmark::DoNotOptimize(correct_b0(p.distorted_b0, p.vdm));
}
BENCHMARK(BM_CorrectVolume)->Unit(benchmark::kMillisecond);

void BM_ForwardDistort(benchmark::State& state) {
  const Phantom& p = phantom();
  for (auto _ : state) benchmark::DoNotOptimize(forward_distort(p.b0, p.vdm));
}
BENCHMARK(BM_ForwardDistort)->Unit(benchmark::kMillisecond);

void BM_SsimWithGrad(benchmark::State& state) {
  const Phantom& p = phantom();
  const Volume3D a = p.b0.slice(40);
  const Volume3D b = p.distorted_b0.slice(40);
  const Mask3D m = p.mask.slice(40);
  for (auto _ : state) benchmark::DoNotOptimize(ssim_with_grad(a.view(), b.view(), m.view()));
}
BENCHMARK(BM_SsimWithGrad)->Unit(benchmark::kMicrosecond);

void BM_MutualInformationVolume(benchmark::State& state) {
  const Phantom& p = phantom();
  for (auto _ : state) benchmark::DoNotOptimize(mutual_information(p.t1.view(), p.distorted_b0.view(), p.mask.view()));
}
BENCHMARK(BM_MutualInformationVolume)->Unit(benchmark::kMillisecond);

void BM_PredictVolumeDefault(benchmark::State& state) {
  const Phantom& p = phantom();
  const nn::UNet net(nn::UNetConfig{});
  const auto params = net.init_params(1);
  for (auto _ : state) benchmark::DoNotOptimize(predict_vdm(net, params, p.distorted_b0, p.t1, p.mask));
}
BENCHMARK(BM_PredictVolumeDefault)->Unit(benchmark::kSecond)->Iterations(1);

}  // namespace

BENCHMARK_MAIN();
