#include <gtest/gtest.h>

#include <cmath>

#include "epi_unwarp/phantom.hpp"
#include "epi_unwarp/training.hpp"
#include "epi_unwarp/unwarp.hpp"
#include "test_support.hpp"

namespace {

using namespace epi;

PhantomSpec small_spec(std::uint64_t seed) {
  PhantomSpec s;
  s.extents = {32, 32, 6};
  s.voxel_size = {7.25, 7.25, 8.0};
  s.width_min = 3.0;
  s.width_max = 6.0;
  s.z_width_min = 1.0;
  s.z_width_max = 2.0;
  s.seed = seed;
  return s;
}

std::vector<SliceStack> phantom_stacks(std::uint64_t seed) {
  const Phantom p = generate_phantom(small_spec(seed));
  return build_stacks(p.distorted_b0, p.t1, p.vdm, p.mask, "p" + std::to_string(seed));
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.net.levels = 2;
  c.net.base_channels = 8;
  c.seed = 3;
  return c;
}

TEST(Training, FixedBatchLossDecreases) {
  const auto stacks = phantom_stacks(1);
  std::vector<const SliceStack*> batch;
  for (std::size_t i = 0; i < stacks.size() && batch.size() < 8; ++i) batch.push_back(&stacks[i]);
  TrainConfig cfg = tiny_config();
  cfg.net.dropout_rate = 0.0;
  const nn::UNet net(cfg.net);
  nn::UNetParams params = net.init_params(cfg.seed);
  nn::OptimState state = nn::OptimState::for_params(params, cfg.learning_rate);
  const double first = train_step(net, params, state, batch, cfg, 1).total;
  double last = first;
  for (int step = 2; step <= 50; ++step) last = train_step(net, params, state, batch, cfg, static_cast<std::uint64_t>(step)).total;
  EXPECT_LT(last, first - 0.05 * std::abs(first));
}

TEST(Training, SampleGradientMatchesFd) {
  const auto stacks = phantom_stacks(2);
  TrainConfig cfg = tiny_config();
  cfg.net.base_channels = 4;
  const nn::UNet net(cfg.net);
  nn::UNetParams params = net.init_params(9);
  for (auto& t : params.tensors) {
    if (t.is_bias) t.values = test::random_values(t.values.size(), 5, -0.05, 0.05);
    if (t.name == "head.weight") t.values = test::random_values(t.values.size(), 6, -0.5, 0.5);
  }
  const SliceStack& s = stacks[stacks.size() / 2];
  const nn::ForwardOptions opt{true, 17};
  nn::Gradients g = nn::zero_gradients(params);
  sample_objective(net, params, s, cfg, opt, &g);
  const auto objective = [&] {
    LossBreakdown l = sample_objective(net, params, s, cfg, opt, nullptr);
    return l.total;
  };
  const double h = 1e-6;
  double worst = 0.0;
  for (std::size_t t = 0; t < params.tensors.size(); t += 3) {
    auto& v = params.tensors[t].values;
    for (std::size_t i = 0; i < v.size(); i += std::max<std::size_t>(1, v.size() / 4)) {
      const double keep = v[i];
      v[i] = keep + h;
      const double up = objective();
      v[i] = keep - h;
      const double dn = objective();
      v[i] = keep;
      const double fd = (up - dn) / (2 * h);
      worst = std::max(worst, std::abs(fd - g[t][i]) / std::max(1e-3, std::abs(fd)));
    }
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(Training, FixedSeedIsDeterministic) {
  const auto train_set = phantom_stacks(3);
  const auto val_set = phantom_stacks(4);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 2;
  const TrainResult a = train(cfg, train_set, val_set);
  const TrainResult b = train(cfg, train_set, val_set);
  ASSERT_EQ(a.history.size(), 2u);
  for (std::size_t e = 0; e < 2; ++e) {
    EXPECT_EQ(a.history[e].train.total, b.history[e].train.total);
    EXPECT_EQ(a.history[e].val_total, b.history[e].val_total);
  }
  for (std::size_t t = 0; t < a.best_params.tensors.size(); ++t) EXPECT_EQ(a.best_params.tensors[t].values, b.best_params.tensors[t].values);
}

TEST(Training, NoT1ZeroesChannels) {
  const auto stacks = phantom_stacks(5);
  const nn::Tensor x = network_input(stacks[0], false);
  for (int c = 3; c < 6; ++c)
    for (double v : x.channel(c)) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(network_input(stacks[0], true).data, stacks[0].input.data);
}

TEST(Training, ZeroParamsPredictZeroField) {
  const Phantom p = generate_phantom(small_spec(6));
  TrainConfig cfg = tiny_config();
  const nn::UNet net(cfg.net);
  const DisplacementMap v = predict_vdm(net, net.zero_params(), p.distorted_b0, p.t1, p.mask);
  for (double x : v.mm().values()) EXPECT_EQ(x, 0.0);
  EXPECT_EQ(v.extents(), p.distorted_b0.extents());
}

TEST(Training, PredictionIsSliceWise) {
  // Batched whole-volume inference equals one stack at a time.
  const Phantom p = generate_phantom(small_spec(7));
  TrainConfig cfg = tiny_config();
  const nn::UNet net(cfg.net);
  nn::UNetParams params = net.init_params(2);
  for (auto& t : params.tensors)
    if (t.name == "head.weight") t.values = test::random_values(t.values.size(), 3, -0.5, 0.5);
  const DisplacementMap v = predict_vdm(net, params, p.distorted_b0, p.t1, p.mask);
  const Volume3D nb = normalize_intensity(p.distorted_b0, p.mask).volume;
  const Volume3D nt = normalize_intensity(p.t1, p.mask).volume;
  for (int z : {0, 3, 5}) {
    const nn::Tensor y = net.forward(stack_input(nb, nt, z), params);
    const auto plane = canonical_plane(v.mm(), z);
    for (std::size_t i = 0; i < plane.size(); ++i) EXPECT_EQ(plane[i], y.data[i]);
  }
}

}  // namespace
