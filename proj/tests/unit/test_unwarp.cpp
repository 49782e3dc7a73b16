#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "epi_unwarp/unwarp.hpp"
#include "test_support.hpp"

namespace {

using namespace epi;
using test::error_kind;

constexpr double kPi = std::numbers::pi;

Volume3D constant(Extents e, double v, std::array<double, 3> voxel = {1.8125, 1.8125, 2.0}, int pe = 1) {
  return Volume3D(e, voxel, pe, std::vector<double>(e.count(), v));
}

// Smooth, non-folding displacement (mm) along y.
DisplacementMap smooth_vdm(Extents e, double amplitude_mm, std::array<double, 3> voxel = {1.8125, 1.8125, 2.0}) {
  Volume3D d(e, voxel, 1);
  for (int z = 0; z < e.nz; ++z)
    for (int y = 0; y < e.ny; ++y)
      for (int x = 0; x < e.nx; ++x)
        d(x, y, z) = amplitude_mm * std::sin(2.0 * kPi * y / e.ny + 0.3 * x + 0.1) * std::cos(0.2 * z);
  return DisplacementMap(d);
}

TEST(FieldmapToVdm, ScalesByReadoutAndVoxel) {
  const FieldMap fm(constant({2, 2, 1}, 10.0));
  const AcquisitionParams acq{0.05, 1.8125, +1};
  const DisplacementMap up = fieldmap_to_vdm(fm, acq);
  for (double v : up.mm().values()) EXPECT_DOUBLE_EQ(v, 0.90625);
  const AcquisitionParams flipped{0.05, 1.8125, -1};
  const DisplacementMap down = fieldmap_to_vdm(fm, flipped);
  for (double v : down.mm().values()) EXPECT_DOUBLE_EQ(v, -0.90625);
}

TEST(FieldmapToVdm, ZeroAndInvalid) {
  const FieldMap fm(constant({3, 3, 2}, 0.0));
  const DisplacementMap zero = fieldmap_to_vdm(fm, {});
  for (double v : zero.mm().values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(error_kind([&] { fieldmap_to_vdm(fm, {0.0, 1.8125, 1}); }), ErrorKind::InvalidArgument);
  EXPECT_EQ(error_kind([&] { fieldmap_to_vdm(fm, {0.05, 1.8125, 0}); }), ErrorKind::InvalidArgument);
  EXPECT_EQ(error_kind([&] { fieldmap_to_vdm(fm, {0.05, 3.0, 1}); }), ErrorKind::GridMismatch);
}

TEST(Jacobian, MatchesAnalyticDerivativeOfSine) {
  const Extents e{4, 128, 1};
  const double s = 1.8125;
  const double amp = 2.0;
  Volume3D d(e, {s, s, 2.0}, 1);
  for (int y = 0; y < e.ny; ++y)
    for (int x = 0; x < e.nx; ++x) d(x, y, 0) = amp * std::sin(2.0 * kPi * y / e.ny);
  const Volume3D j = jacobian_along_pe(DisplacementMap(d));
  double worst = 0.0;
  for (int y = 1; y + 1 < e.ny; ++y) {
    const double analytic = 1.0 + amp / s * (2.0 * kPi / e.ny) * std::cos(2.0 * kPi * y / e.ny);
    worst = std::max(worst, std::abs(j(2, y, 0) - analytic));
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(Jacobian, LinearRampIsExactEverywhere) {
  Volume3D d({1, 9, 1}, {1.0, 2.0, 1.0}, 1);
  for (int y = 0; y < 9; ++y) d(0, y, 0) = 0.5 * y;  // 0.25 voxel per voxel
  const Volume3D j = jacobian_along_pe(DisplacementMap(d));
  for (double v : j.values()) EXPECT_DOUBLE_EQ(v, 1.25);
}

TEST(Jacobian, FollowsPeAxis) {
  Volume3D d({9, 1, 1}, {2.0, 1.0, 1.0}, 0);
  for (int x = 0; x < 9; ++x) d(x, 0, 0) = -0.5 * x;
  const Volume3D j = jacobian_along_pe(DisplacementMap(d));
  for (double v : j.values()) EXPECT_DOUBLE_EQ(v, 0.75);
  Volume3D tiny({1, 1, 1}, {1, 1, 1}, 1);
  EXPECT_EQ(error_kind([&] { jacobian_along_pe(DisplacementMap(tiny)); }), ErrorKind::GridTooSmall);
}

TEST(ApplyVdm, ZeroFieldIsIdentity) {
  const Volume3D img = test::random_volume({6, 7, 2}, 1, 0.0, 1.0, {1.8125, 1.8125, 2.0});
  const DisplacementMap zero(constant({6, 7, 2}, 0.0));
  for (bool mod : {false, true}) {
    const Volume3D out = apply_vdm(img, zero, mod);
    for (std::size_t i = 0; i < img.values().size(); ++i) EXPECT_EQ(out.values()[i], img.values()[i]);
  }
  const Volume3D fwd = forward_distort(img, zero);
  for (std::size_t i = 0; i < img.values().size(); ++i) EXPECT_EQ(fwd.values()[i], img.values()[i]);
}

TEST(ApplyVdm, IntegerShiftMovesSamples) {
  // One voxel of displacement pulls from y+1, clamping at the far border.
  const double s = 1.8125;
  Volume3D img({1, 5, 1}, {1.0, s, 1.0}, 1, {10, 20, 30, 40, 50});
  const DisplacementMap one(constant({1, 5, 1}, s, {1.0, s, 1.0}));
  const Volume3D out = apply_vdm(img, one, false);
  const std::vector<double> want{20, 30, 40, 50, 50};
  for (int y = 0; y < 5; ++y) EXPECT_DOUBLE_EQ(out(0, y, 0), want[static_cast<std::size_t>(y)]);
}

TEST(ApplyVdm, VjpMatchesFiniteDifferences) {
  const Extents e{3, 12, 2};
  const Volume3D img = test::random_volume(e, 7, 0.0, 1.0, {1.8125, 1.8125, 2.0});
  // Non-integer sample positions everywhere keep the interpolant smooth
  // under the finite-difference step.
  const DisplacementMap vdm = smooth_vdm(e, 1.3);
  const auto g = test::random_values(e.count(), 8);
  for (bool mod : {false, true}) {
    const auto grad = apply_vdm_vjp(img, vdm, mod, g);
    const auto objective = [&](const DisplacementMap& d) {
      const Volume3D out = apply_vdm(img, d, mod);
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * out.values()[i];
      return acc;
    };
    const double h = 1e-6;
    for (std::size_t i = 0; i < e.count(); ++i) {
      DisplacementMap plus = vdm, minus = vdm;
      plus.mm().values()[i] += h;
      minus.mm().values()[i] -= h;
      const double fd = (objective(plus) - objective(minus)) / (2.0 * h);
      EXPECT_NEAR(grad[i], fd, 1e-5 * std::max(1.0, std::abs(fd))) << "index " << i << " modulate " << mod;
    }
  }
}

TEST(ForwardDistort, CorrectionInvertsSmoothFields) {
  const Extents e{16, 64, 3};
  Volume3D img(e, {1.8125, 1.8125, 2.0}, 1);
  for (int z = 0; z < e.nz; ++z)
    for (int y = 0; y < e.ny; ++y)
      for (int x = 0; x < e.nx; ++x)
        img(x, y, z) = 1.0 + std::exp(-std::pow((y - 32.0) / 9.0, 2)) * (1.0 + 0.2 * std::cos(0.4 * x));
  const DisplacementMap vdm = smooth_vdm(e, 2.5);
  const Volume3D distorted = forward_distort(img, vdm);
  const Volume3D restored = apply_vdm(distorted, vdm, true);
  double err = 0.0;
  double base = 0.0;
  for (int z = 0; z < e.nz; ++z)
    for (int y = 4; y < e.ny - 4; ++y)
      for (int x = 0; x < e.nx; ++x) {
        err = std::max(err, std::abs(restored(x, y, z) - img(x, y, z)));
        base = std::max(base, std::abs(distorted(x, y, z) - img(x, y, z)));
      }
  EXPECT_LT(err, 0.05 * base);
  EXPECT_GT(base, 0.05);
}

TEST(ForwardDistort, PreservesIntegratedIntensity) {
  // The push-forward conserves signal along each line away from the borders.
  const Extents e{1, 96, 1};
  Volume3D img(e, {1.0, 1.8125, 1.0}, 1);
  for (int y = 0; y < e.ny; ++y) img(0, y, 0) = std::exp(-std::pow((y - 48.0) / 8.0, 2));
  Volume3D d(e, {1.0, 1.8125, 1.0}, 1);
  for (int y = 0; y < e.ny; ++y) d(0, y, 0) = 3.0 * std::exp(-std::pow((y - 50.0) / 15.0, 2));
  const Volume3D out = forward_distort(img, DisplacementMap(d));
  double a = 0.0, b = 0.0;
  for (int y = 0; y < e.ny; ++y) {
    a += img(0, y, 0);
    b += out(0, y, 0);
  }
  EXPECT_NEAR(a, b, 1e-2 * a);
}

TEST(ForwardDistort, RejectsFoldingField) {
  const Extents e{1, 8, 1};
  Volume3D d(e, {1.0, 1.0, 1.0}, 1);
  for (int y = 0; y < 8; ++y) d(0, y, 0) = -1.5 * y;  // J = -0.5
  const Volume3D img = test::random_volume(e, 1);
  EXPECT_EQ(error_kind([&] { forward_distort(img, DisplacementMap(d)); }), ErrorKind::NonInvertibleField);
}

TEST(ApplyVdm, GridChecks) {
  const Volume3D img = test::random_volume({4, 4, 1}, 1);
  const DisplacementMap other(constant({4, 5, 1}, 0.0, {1, 1, 1}));
  EXPECT_EQ(error_kind([&] { apply_vdm(img, other, true); }), ErrorKind::GridMismatch);
  const DisplacementMap axis0(constant({4, 4, 1}, 0.0, {1, 1, 1}, 0));
  EXPECT_EQ(error_kind([&] { apply_vdm(img, axis0, true); }), ErrorKind::GridMismatch);
}

TEST(CorrectB0, MatchesPerSliceApply) {
  const Extents e{8, 16, 3};
  const Volume3D img = test::random_volume(e, 2, 0.0, 1.0, {1.8125, 1.8125, 2.0});
  const DisplacementMap vdm = smooth_vdm(e, 1.0);
  const Volume3D whole = correct_b0(img, vdm);
  // A field with no z dependence inside each slice makes 3-D and 2-D agree.
  const Volume3D direct = apply_vdm(img, vdm, true);
  for (std::size_t i = 0; i < e.count(); ++i) EXPECT_NEAR(whole.values()[i], direct.values()[i], 1e-12);
}

}  // namespace
