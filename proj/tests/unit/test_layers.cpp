#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "epi_unwarp/layers.hpp"
#include "test_support.hpp"

namespace {

using namespace epi::nn;

Tensor random_tensor(int c, int h, int w, std::uint64_t seed) {
  Tensor t(c, h, w);
  t.data = epi::test::random_values(t.size(), seed);
  return t;
}

// Six nested loops, zero padding outside the image.
Tensor conv_oracle(const Tensor& x, const std::vector<double>& w, const std::vector<double>& b, int co, int k) {
  const int r = k / 2;
  Tensor y(co, x.height, x.width);
  for (int o = 0; o < co; ++o)
    for (int i = 0; i < x.height; ++i)
      for (int j = 0; j < x.width; ++j) {
        double s = b[static_cast<std::size_t>(o)];
        for (int c = 0; c < x.channels; ++c)
          for (int u = 0; u < k; ++u)
            for (int v = 0; v < k; ++v) {
              const int ii = i + u - r, jj = j + v - r;
              if (ii < 0 || jj < 0 || ii >= x.height || jj >= x.width) continue;
              s += w[static_cast<std::size_t>(((o * x.channels + c) * k + u) * k + v)] * x.at(c, ii, jj);
            }
        y.at(o, i, j) = s;
      }
  return y;
}

Tensor conv_transpose_oracle(const Tensor& x, const std::vector<double>& w, const std::vector<double>& b, int co) {
  Tensor y(co, 2 * x.height, 2 * x.width);
  for (int o = 0; o < co; ++o)
    for (int i = 0; i < y.height; ++i)
      for (int j = 0; j < y.width; ++j) {
        double s = b[static_cast<std::size_t>(o)];
        for (int c = 0; c < x.channels; ++c)
          s += w[static_cast<std::size_t>(((c * co + o) * 2 + i % 2) * 2 + j % 2)] * x.at(c, i / 2, j / 2);
        y.at(o, i, j) = s;
      }
  return y;
}

void expect_close(const Tensor& a, const Tensor& b, double tol) {
  ASSERT_TRUE(a.same_shape(b));
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a.data[i], b.data[i], tol) << "index " << i;
}

// d <g, f(x)> / d x by central differences.
std::vector<double> fd_grad(std::vector<double>& x, const Tensor& g, const std::function<Tensor()>& f, double h = 1e-6) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const Tensor up = f();
    x[i] = keep - h;
    const Tensor dn = f();
    x[i] = keep;
    double d = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) d += g.data[k] * (up.data[k] - dn.data[k]);
    out[i] = d / (2.0 * h);
  }
  return out;
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  for (int k : {1, 3, 5}) {
    for (auto [ci, co, h, w] : {std::array{1, 1, 5, 4}, std::array{3, 2, 7, 6}, std::array{4, 5, 9, 11}}) {
      const Tensor x = random_tensor(ci, h, w, 1);
      const auto wt = epi::test::random_values(static_cast<std::size_t>(co * ci * k * k), 2);
      const auto b = epi::test::random_values(static_cast<std::size_t>(co), 3);
      expect_close(conv2d(x, wt, b, co, k), conv_oracle(x, wt, b, co, k), 1e-12);
    }
  }
}

TEST(Conv2d, LargeImageUsesTiledPathConsistently) {
  // Large enough that the lowering is split into several row bands.
  const Tensor x = random_tensor(16, 70, 64, 4);
  const auto wt = epi::test::random_values(16 * 16 * 9, 5);
  const auto b = epi::test::random_values(16, 6);
  expect_close(conv2d(x, wt, b, 16, 3), conv_oracle(x, wt, b, 16, 3), 1e-11);
}

TEST(Conv2d, IdentityAndOnesKernels) {
  const Tensor x = random_tensor(3, 6, 6, 7);
  std::vector<double> ident(3 * 3 * 9, 0.0);
  for (int c = 0; c < 3; ++c) ident[static_cast<std::size_t>((c * 3 + c) * 9 + 4)] = 1.0;
  expect_close(conv2d(x, ident, std::vector<double>(3, 0.0), 3, 3), x, 0.0);

  Tensor ones(4, 5, 5, 1.0);
  const std::vector<double> w(9 * 4, 1.0);
  const Tensor y = conv2d(ones, w, std::vector<double>{0.5}, 1, 3);
  EXPECT_DOUBLE_EQ(y.at(0, 2, 2), 36.5);  // 9 taps x 4 channels + bias
  EXPECT_DOUBLE_EQ(y.at(0, 0, 0), 16.5);  // corner sees 4 taps per channel
}

TEST(Conv2d, BackwardMatchesFd) {
  const int ci = 3, co = 2, k = 3;
  Tensor x = random_tensor(ci, 5, 6, 8);
  auto wt = epi::test::random_values(static_cast<std::size_t>(co * ci * k * k), 9);
  auto b = epi::test::random_values(static_cast<std::size_t>(co), 10);
  const Tensor g = random_tensor(co, 5, 6, 11);
  std::vector<double> gw(wt.size(), 0.0), gb(b.size(), 0.0);
  const Tensor gx = conv2d_backward(x, wt, co, k, g, gw, gb);
  const auto f = [&] { return conv2d(x, wt, b, co, k); };
  const auto fx = fd_grad(x.data, g, f);
  const auto fw = fd_grad(wt, g, f);
  const auto fb = fd_grad(b, g, f);
  for (std::size_t i = 0; i < fx.size(); ++i) EXPECT_NEAR(gx.data[i], fx[i], 1e-7);
  for (std::size_t i = 0; i < fw.size(); ++i) EXPECT_NEAR(gw[i], fw[i], 1e-7);
  for (std::size_t i = 0; i < fb.size(); ++i) EXPECT_NEAR(gb[i], fb[i], 1e-7);
}

TEST(ConvTranspose, MatchesOracleAndFd) {
  const int ci = 3, co = 2;
  Tensor x = random_tensor(ci, 3, 4, 12);
  auto wt = epi::test::random_values(static_cast<std::size_t>(ci * co * 4), 13);
  auto b = epi::test::random_values(static_cast<std::size_t>(co), 14);
  expect_close(conv_transpose2x2(x, wt, b, co), conv_transpose_oracle(x, wt, b, co), 1e-12);

  const Tensor g = random_tensor(co, 6, 8, 15);
  std::vector<double> gw(wt.size(), 0.0), gb(b.size(), 0.0);
  const Tensor gx = conv_transpose2x2_backward(x, wt, co, g, gw, gb);
  const auto f = [&] { return conv_transpose2x2(x, wt, b, co); };
  const auto fx = fd_grad(x.data, g, f);
  const auto fw = fd_grad(wt, g, f);
  const auto fb = fd_grad(b, g, f);
  for (std::size_t i = 0; i < fx.size(); ++i) EXPECT_NEAR(gx.data[i], fx[i], 1e-7);
  for (std::size_t i = 0; i < fw.size(); ++i) EXPECT_NEAR(gw[i], fw[i], 1e-7);
  for (std::size_t i = 0; i < fb.size(); ++i) EXPECT_NEAR(gb[i], fb[i], 1e-7);
}

TEST(Relu, ForwardAndBackward) {
  Tensor x(1, 1, 4);
  x.data = {-1.0, 0.0, 2.0, -3.0};
  const Tensor y = relu(x);
  EXPECT_EQ(y.data, (std::vector<double>{0.0, 0.0, 2.0, 0.0}));
  Tensor g(1, 1, 4, 5.0);
  EXPECT_EQ(relu_backward(y, g).data, (std::vector<double>{0.0, 0.0, 5.0, 0.0}));
}

TEST(MaxPool, PicksWinnerAndRoutesGradient) {
  Tensor x = random_tensor(2, 4, 6, 16);
  std::vector<std::uint32_t> arg;
  const Tensor y = max_pool2x2(x, arg);
  ASSERT_EQ(y.height, 2);
  ASSERT_EQ(y.width, 3);
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 3; ++j) {
        const double m = std::max({x.at(c, 2 * i, 2 * j), x.at(c, 2 * i + 1, 2 * j), x.at(c, 2 * i, 2 * j + 1), x.at(c, 2 * i + 1, 2 * j + 1)});
        EXPECT_EQ(y.at(c, i, j), m);
      }
  const Tensor g = random_tensor(2, 2, 3, 17);
  const Tensor gx = max_pool2x2_backward(x, arg, g);
  const auto fx = fd_grad(x.data, g, [&] {
    std::vector<std::uint32_t> a;
    return max_pool2x2(x, a);
  });
  for (std::size_t i = 0; i < fx.size(); ++i) EXPECT_NEAR(gx.data[i], fx[i], 1e-7);
}

TEST(Channels, ConcatSplitAndScale) {
  const Tensor a = random_tensor(2, 3, 3, 18), b = random_tensor(3, 3, 3, 19);
  const Tensor ab = concat_channels(a, b);
  ASSERT_EQ(ab.channels, 5);
  Tensor ga, gb;
  split_channels(ab, 2, ga, gb);
  EXPECT_EQ(ga.data, a.data);
  EXPECT_EQ(gb.data, b.data);
  const std::vector<double> scale{0.0, 1.25, 1.25};
  const Tensor s = scale_channels(b, scale);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(s.at(c, i, j), scale[static_cast<std::size_t>(c)] * b.at(c, i, j));
  EXPECT_THROW(add(a, b), epi::Error);
}

}  // namespace
