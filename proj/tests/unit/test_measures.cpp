#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <map>

#include "epi_unwarp/measures.hpp"
#include "test_support.hpp"

namespace {

using namespace epi;
using test::error_kind;

struct Pair {
  Extents ext;
  std::vector<double> a, b;
  std::vector<std::uint8_t> mask;
  GridView va() const { return {ext, a}; }
  GridView vb() const { return {ext, b}; }
  MaskView vm() const { return {ext, mask}; }
};

Pair random_pair(Extents e, std::uint64_t seed, bool holes = true) {
  Pair p{e, test::random_values(e.count(), seed, 0.0, 1.0), test::random_values(e.count(), seed + 100, 0.0, 1.0),
         std::vector<std::uint8_t>(e.count(), 1)};
  if (holes) {
    for (std::size_t i = 0; i < p.mask.size(); i += 5) p.mask[i] = 0;
  }
  return p;
}

// Central finite differences of f with respect to every entry of x.
std::vector<double> numeric_grad(std::vector<double> x, const std::function<double(const std::vector<double>&)>& f,
                                 double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double dn = f(x);
    x[i] = keep;
    g[i] = (up - dn) / (2.0 * h);
  }
  return g;
}

// Direct SSIM: 2-D Gaussian window renormalised over the in-slice support.
double ssim_oracle(const Pair& p, const SsimConfig& cfg) {
  const Extents e = p.ext;
  const int r = cfg.window / 2;
  const double c1 = std::pow(cfg.k1 * cfg.dynamic_range, 2), c2 = std::pow(cfg.k2 * cfg.dynamic_range, 2);
  double sum = 0.0;
  int count = 0;
  for (int z = 0; z < e.nz; ++z)
    for (int y = 0; y < e.ny; ++y)
      for (int x = 0; x < e.nx; ++x) {
        if (!p.mask[e.index(x, y, z)]) continue;
        double w = 0, ma = 0, mb = 0, aa = 0, bb = 0, ab = 0;
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx) {
            const int xx = x + dx, yy = y + dy;
            if (xx < 0 || yy < 0 || xx >= e.nx || yy >= e.ny) continue;
            const double k = std::exp(-0.5 * (dx * dx + dy * dy) / (cfg.sigma * cfg.sigma));
            const double va = p.a[e.index(xx, yy, z)], vb = p.b[e.index(xx, yy, z)];
            w += k;
            ma += k * va;
            mb += k * vb;
            aa += k * va * va;
            bb += k * vb * vb;
            ab += k * va * vb;
          }
        ma /= w;
        mb /= w;
        const double sa = aa / w - ma * ma, sb = bb / w - mb * mb, sab = ab / w - ma * mb;
        sum += (2 * ma * mb + c1) * (2 * sab + c2) / ((ma * ma + mb * mb + c1) * (sa + sb + c2));
        ++count;
      }
  return sum / count;
}

TEST(L1, ValueAndGradient) {
  const Pair p = random_pair({5, 4, 2}, 1);
  double s = 0;
  int n = 0;
  for (std::size_t i = 0; i < p.a.size(); ++i)
    if (p.mask[i]) {
      s += std::abs(p.a[i] - p.b[i]);
      ++n;
    }
  EXPECT_NEAR(masked_l1(p.va(), p.vb(), p.vm()), s / n, 1e-14);
  const auto g = masked_l1_grad(p.va(), p.vb(), p.vm());
  const auto fd = numeric_grad(p.a, [&](const std::vector<double>& a) { return masked_l1({p.ext, a}, p.vb(), p.vm()); }, 1e-7);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], fd[i], 1e-6);
}

TEST(GradL2, ZeroForOffsetAndMatchesFd) {
  const Extents e{6, 5, 2};
  Pair p = random_pair(e, 2);
  std::vector<double> shifted = p.a;
  for (double& v : shifted) v += 3.0;
  EXPECT_NEAR(masked_grad_l2(p.va(), {e, shifted}, p.vm()), 0.0, 1e-12);

  const auto g = masked_grad_l2_grad(p.va(), p.vb(), p.vm());
  const auto fd = numeric_grad(p.a, [&](const std::vector<double>& a) { return masked_grad_l2({e, a}, p.vb(), p.vm()); }, 1e-6);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], fd[i], 1e-6);
}

TEST(GradL2, LinearRampHasKnownValue) {
  // a - b = 2x + 3y gives |grad|^2 = 13 at every voxel.
  const Extents e{5, 6, 1};
  std::vector<double> a(e.count()), b(e.count(), 0.0);
  for (int y = 0; y < e.ny; ++y)
    for (int x = 0; x < e.nx; ++x) a[e.index(x, y, 0)] = 2.0 * x + 3.0 * y;
  const std::vector<std::uint8_t> m(e.count(), 1);
  EXPECT_NEAR(masked_grad_l2({e, a}, {e, b}, {e, m}), std::sqrt(13.0), 1e-12);
}

TEST(Ssim, IdentityIsOne) {
  const Pair p = random_pair({12, 10, 2}, 3);
  EXPECT_NEAR(ssim(p.va(), p.va(), p.vm()), 1.0, 1e-12);
}

TEST(Ssim, MatchesDirectWindowedOracle) {
  for (std::uint64_t seed : {4u, 5u}) {
    const Pair p = random_pair({13, 9, 2}, seed);
    for (SsimConfig cfg : {SsimConfig{}, SsimConfig{5, 1.0, 0.01, 0.03, 1.0}}) {
      EXPECT_NEAR(ssim(p.va(), p.vb(), p.vm(), cfg), ssim_oracle(p, cfg), 1e-10);
    }
  }
}

TEST(Ssim, GradientMatchesFd) {
  const Pair p = random_pair({9, 8, 2}, 6);
  const auto vg = ssim_with_grad(p.va(), p.vb(), p.vm());
  EXPECT_NEAR(vg.value, ssim(p.va(), p.vb(), p.vm()), 1e-14);
  const auto fd = numeric_grad(p.b, [&](const std::vector<double>& b) { return ssim(p.va(), {p.ext, b}, p.vm()); }, 1e-6);
  for (std::size_t i = 0; i < fd.size(); ++i) EXPECT_NEAR(vg.grad[i], fd[i], 1e-7);
}

TEST(Ssim, IsSymmetricAndBounded) {
  const Pair p = random_pair({10, 10, 1}, 7);
  const double ab = ssim(p.va(), p.vb(), p.vm());
  EXPECT_NEAR(ab, ssim(p.vb(), p.va(), p.vm()), 1e-12);
  EXPECT_LT(ab, 1.0);
  EXPECT_GT(ab, -1.0);
}

// Entropy of the 32-bin histogram of a, with the same binning rule as the
// hard estimator.
double entropy_oracle(const std::vector<double>& a, int bins) {
  const auto [lo, hi] = std::minmax_element(a.begin(), a.end());
  std::map<int, double> h;
  for (double v : a) h[std::clamp(static_cast<int>(std::floor((v - *lo) / (*hi - *lo) * bins)), 0, bins - 1)] += 1.0 / a.size();
  double ent = 0.0;
  for (const auto& [k, p] : h) ent -= p * std::log(p);
  return ent;
}

TEST(MutualInformation, SelfInformationEqualsEntropy) {
  Pair p = random_pair({16, 16, 1}, 8, false);
  MiConfig cfg;
  cfg.sigma = 0.0;
  EXPECT_NEAR(mutual_information(p.va(), p.va(), p.vm(), cfg), entropy_oracle(p.a, cfg.bins), 1e-12);
}

TEST(MutualInformation, IndependentIsNearZeroAndInvariantToMonotoneMaps) {
  Pair p = random_pair({64, 64, 1}, 9, false);
  MiConfig cfg;
  const double indep = mutual_information(p.va(), p.vb(), p.vm(), cfg);
  EXPECT_GE(indep, -1e-12);
  EXPECT_LT(indep, 0.05);
  std::vector<double> affine = p.a;
  for (double& v : affine) v = 5.0 * v - 2.0;
  EXPECT_NEAR(mutual_information(p.va(), p.vb(), p.vm(), cfg), mutual_information({p.ext, affine}, p.vb(), p.vm(), cfg), 1e-9);
  EXPECT_GT(mutual_information(p.va(), p.va(), p.vm(), cfg), 1.0);
}

TEST(MutualInformation, SoftGradientMatchesFd) {
  for (double sigma : {0.0, 1.0}) {
    const Pair p = random_pair({10, 9, 1}, 10);
    MiConfig cfg;
    cfg.bins = 8;
    cfg.sigma = sigma;
    const auto vg = soft_mutual_information(p.va(), p.vb(), p.vm(), cfg);
    const auto fd = numeric_grad(
        p.b, [&](const std::vector<double>& b) { return soft_mutual_information(p.va(), {p.ext, b}, p.vm(), cfg).value; }, 1e-7);
    for (std::size_t i = 0; i < fd.size(); ++i) EXPECT_NEAR(vg.grad[i], fd[i], 1e-5) << "voxel " << i << " sigma " << sigma;
    for (std::size_t i = 0; i < fd.size(); ++i)
      if (!p.mask[i]) EXPECT_EQ(vg.grad[i], 0.0);
  }
}

TEST(MutualInformation, SoftTracksHard) {
  Pair p = random_pair({48, 48, 1}, 11, false);
  for (std::size_t i = 0; i < p.b.size(); ++i) p.b[i] = 0.7 * p.a[i] + 0.3 * p.b[i];
  const double hard = mutual_information(p.va(), p.vb(), p.vm());
  const double soft = soft_mutual_information(p.va(), p.vb(), p.vm()).value;
  EXPECT_NEAR(soft, hard, 0.25 * hard);
}

TEST(Measures, TypedFailures) {
  const Extents e{4, 4, 1};
  const std::vector<double> a(e.count(), 1.0), b = test::random_values(e.count(), 1);
  const std::vector<std::uint8_t> none(e.count(), 0), all(e.count(), 1);
  EXPECT_EQ(error_kind([&] { masked_l1({e, a}, {e, b}, {e, none}); }), ErrorKind::EmptyMask);
  EXPECT_EQ(error_kind([&] { mutual_information({e, a}, {e, b}, {e, all}); }), ErrorKind::DegenerateIntensity);
  const Extents other{4, 2, 2};
  EXPECT_EQ(error_kind([&] { rmse({e, a}, {other, b}, {e, all}); }), ErrorKind::ShapeMismatch);
}

TEST(TotalLoss, WeightedSumAndSkippedTerms) {
  const Extents e{12, 12, 1};
  const Pair v = random_pair(e, 12, false), img = random_pair(e, 13, false);
  const auto t1 = test::random_values(e.count(), 14);
  const LossInputs in{v.va(), v.vb(), img.va(), img.vb(), {e, t1}, v.vm()};
  const LossWeights w;
  const LossBreakdown l = total_loss(in, w, 2.0);
  EXPECT_DOUBLE_EQ(l.vdm_l1, masked_l1(v.va(), v.vb(), v.vm()));
  EXPECT_DOUBLE_EQ(l.dssim, 1.0 - ssim(img.vb(), img.va(), v.vm()));
  EXPECT_DOUBLE_EQ(l.neg_mi, -mutual_information({e, t1}, img.va(), v.vm()));
  EXPECT_NEAR(l.total, 1.0 * l.vdm_l1 + 0.5 * l.grad_l2 + 0.3 * l.dssim + 0.5 * l.neg_mi + 1e-5 * 2.0, 1e-14);
  LossWeights no_mi = w;
  no_mi.mutual_info = 0.0;
  EXPECT_EQ(total_loss(in, no_mi, 0.0).neg_mi, 0.0);
}

}  // namespace
