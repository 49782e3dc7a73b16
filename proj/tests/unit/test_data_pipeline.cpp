#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "epi_unwarp/data_pipeline.hpp"
#include "epi_unwarp/unwarp.hpp"
#include "epi_unwarp/volume_io.hpp"
#include "test_support.hpp"

namespace {

using namespace epi;
using test::error_kind;

struct Subject {
  Volume3D b0, t1;
  DisplacementMap vdm;
  Mask3D mask;
};

Subject small_subject(int pe_axis = 1, Extents e = {8, 12, 4}) {
  const std::array<double, 3> vox{1.5, 2.0, 2.5};
  Subject s{test::random_volume(e, 1, 10.0, 100.0, vox, pe_axis), test::random_volume(e, 2, 0.0, 50.0, vox, pe_axis), {}, Mask3D(e)};
  Volume3D d(e, vox, pe_axis);
  for (int z = 0; z < e.nz; ++z)
    for (int y = 0; y < e.ny; ++y)
      for (int x = 0; x < e.nx; ++x) d(x, y, z) = 0.8 * std::sin(0.5 * x + 0.3 * y + z);
  s.vdm = DisplacementMap(d);
  for (int z = 1; z < e.nz; ++z)  // slice 0 stays empty
    for (int y = 1; y + 1 < e.ny; ++y)
      for (int x = 1; x + 1 < e.nx; ++x) s.mask(x, y, z) = 1;
  return s;
}

std::vector<SliceStack> stacks_of(const Subject& s) { return build_stacks(s.b0, s.t1, s.vdm, s.mask, "sub"); }

TEST(Stacks, SkipsEmptySlicesAndDuplicatesEdges) {
  const Subject s = small_subject();
  const auto stacks = stacks_of(s);
  ASSERT_EQ(stacks.size(), 3u);
  EXPECT_EQ(stacks[0].slice_index, 1);
  const Volume3D nb = normalize_intensity(s.b0, s.mask).volume;
  const Volume3D nt = normalize_intensity(s.t1, s.mask).volume;
  const Extents e = s.b0.extents();
  for (const SliceStack& st : stacks) {
    const int z = st.slice_index;
    const int zs[3] = {std::max(z - 1, 0), z, std::min(z + 1, e.nz - 1)};
    ASSERT_EQ(st.input.channels, 6);
    for (int k = 0; k < 3; ++k)
      for (int y = 0; y < e.ny; ++y)
        for (int x = 0; x < e.nx; ++x) {
          EXPECT_EQ(st.input.at(k, y, x), nb(x, y, zs[k]));
          EXPECT_EQ(st.input.at(3 + k, y, x), nt(x, y, zs[k]));
        }
  }
  // The last slice's upper neighbour is itself.
  EXPECT_EQ(stacks.back().input.channel(2)[5], stacks.back().input.channel(1)[5]);
}

TEST(Stacks, ReferenceIsTheCorrectedCentrePlane) {
  const Subject s = small_subject();
  for (const SliceStack& st : stacks_of(s)) {
    const Volume3D corrected = apply_vdm(st.plane(st.distorted_b0), DisplacementMap(st.plane(st.target_vdm)), true);
    for (std::size_t i = 0; i < st.reference_b0.size(); ++i) EXPECT_EQ(st.reference_b0[i], corrected.values()[i]);
    for (int y = 0; y < st.height; ++y)
      for (int x = 0; x < st.width; ++x) EXPECT_EQ(st.target_vdm[static_cast<std::size_t>(y * st.width + x)], s.vdm.mm()(x, y, st.slice_index));
  }
}

TEST(Stacks, PeAlongXIsTransposed) {
  const Subject s = small_subject(0);
  const auto stacks = stacks_of(s);
  const SliceStack& st = stacks.front();
  EXPECT_EQ(st.width, 12);
  EXPECT_EQ(st.height, 8);
  EXPECT_EQ(st.voxel_size[1], 1.5);
  for (int x = 0; x < 8; ++x)
    for (int y = 0; y < 12; ++y) {
      EXPECT_EQ(st.target_vdm[static_cast<std::size_t>(x * 12 + y)], s.vdm.mm()(x, y, st.slice_index));
      EXPECT_EQ(st.mask[static_cast<std::size_t>(x * 12 + y)], s.mask(x, y, st.slice_index));
    }
  Volume3D back = s.vdm.mm();
  for (double& v : back.values()) v = 0.0;
  set_canonical_plane(back, st.slice_index, st.target_vdm);
  EXPECT_EQ(back.slice(st.slice_index).values()[7], s.vdm.mm().slice(st.slice_index).values()[7]);
}

TEST(Stacks, GridAndAxisChecks) {
  Subject s = small_subject();
  Mask3D other({8, 12, 5});
  EXPECT_EQ(error_kind([&] { build_stacks(s.b0, s.t1, s.vdm, other); }), ErrorKind::GridMismatch);
  Volume3D through = s.vdm.mm();
  through.set_pe_axis(2);
  EXPECT_EQ(error_kind([&] { build_stacks(s.b0, s.t1, DisplacementMap(through), s.mask); }), ErrorKind::InvalidArgument);
}

TEST(Augment, TranslationMatchesShiftOracle) {
  const SliceStack st = stacks_of(small_subject()).front();
  const int dx = 3, dy = -2;
  const SliceStack t = translate(st, dx, dy);
  for (int y = 0; y < st.height; ++y)
    for (int x = 0; x < st.width; ++x) {
      const int sx = x - dx, sy = y - dy;
      const bool inside = sx >= 0 && sy >= 0 && sx < st.width && sy < st.height;
      const std::size_t o = static_cast<std::size_t>(y * st.width + x);
      const std::size_t i = inside ? static_cast<std::size_t>(sy * st.width + sx) : 0;
      for (int c = 0; c < 6; ++c) EXPECT_EQ(t.input.at(c, y, x), inside ? st.input.at(c, sy, sx) : 0.0);
      EXPECT_EQ(t.target_vdm[o], inside ? st.target_vdm[i] : 0.0);
      EXPECT_EQ(t.mask[o], inside ? st.mask[i] : 0);
      EXPECT_EQ(t.distorted_b0[o], inside ? st.distorted_b0[i] : 0.0);
    }
  SliceStack want = t;
  refresh_reference(want);
  EXPECT_EQ(t.reference_b0, want.reference_b0);
}

TEST(Augment, CropKeepsOnlyTheSquare) {
  const SliceStack st = stacks_of(small_subject()).front();
  const SliceStack c = crop_square(st, 2, 3, 5);
  for (int y = 0; y < st.height; ++y)
    for (int x = 0; x < st.width; ++x) {
      const bool keep = x >= 2 && x < 7 && y >= 3 && y < 8;
      EXPECT_EQ(c.input.at(1, y, x), keep ? st.input.at(1, y, x) : 0.0);
      EXPECT_EQ(c.mask[static_cast<std::size_t>(y * st.width + x)], keep ? st.mask[static_cast<std::size_t>(y * st.width + x)] : 0);
    }
}

TEST(Augment, DoubleFlipIsIdentityAndFlipCommutesWithWarp) {
  const SliceStack st = stacks_of(small_subject()).front();
  const SliceStack f = flip_horizontal(st);
  const SliceStack ff = flip_horizontal(f);
  EXPECT_EQ(ff.input.data, st.input.data);
  EXPECT_EQ(ff.target_vdm, st.target_vdm);
  EXPECT_EQ(ff.reference_b0, st.reference_b0);
  // The warp acts along y only, so mirroring x before or after it agrees.
  SliceStack refreshed = f;
  refresh_reference(refreshed);
  for (std::size_t i = 0; i < f.reference_b0.size(); ++i) EXPECT_NEAR(refreshed.reference_b0[i], f.reference_b0[i], 1e-12);
}

TEST(Augment, NoiseTouchesInputsOnly) {
  const SliceStack st = stacks_of(small_subject()).front();
  std::mt19937_64 rng(5);
  const SliceStack n = add_noise(st, 0.05, rng);
  EXPECT_NE(n.input.data, st.input.data);
  EXPECT_EQ(n.distorted_b0, st.distorted_b0);
  EXPECT_EQ(n.reference_b0, st.reference_b0);
  EXPECT_EQ(n.t1, st.t1);
  EXPECT_EQ(n.target_vdm, st.target_vdm);
  double ss = 0.0;
  for (std::size_t i = 0; i < st.input.size(); ++i) ss += std::pow(n.input.data[i] - st.input.data[i], 2);
  EXPECT_NEAR(std::sqrt(ss / static_cast<double>(st.input.size())), 0.05, 0.015);
}

TEST(Augment, MixcutTakesRightHalfFromPartner) {
  const auto stacks = stacks_of(small_subject());
  const SliceStack m = mixcut(stacks[0], stacks[1]);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      const SliceStack& src = x >= m.width / 2 ? stacks[1] : stacks[0];
      EXPECT_EQ(m.input.at(0, y, x), src.input.at(0, y, x));
      EXPECT_EQ(m.target_vdm[static_cast<std::size_t>(y * m.width + x)], src.target_vdm[static_cast<std::size_t>(y * m.width + x)]);
    }
}

TEST(Augment, DisabledConfigIsIdentity) {
  const auto stacks = stacks_of(small_subject());
  AugmentConfig cfg;
  cfg.enabled = false;
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    const SliceStack a = augment(stacks[0], cfg, rng, &stacks[1]);
    EXPECT_EQ(a.input.data, stacks[0].input.data);
    EXPECT_EQ(a.reference_b0, stacks[0].reference_b0);
  }
}

TEST(Augment, SeededAndAlwaysConsistent) {
  const auto stacks = stacks_of(small_subject());
  const AugmentConfig cfg;
  std::mt19937_64 a(9), b(9);
  int changed = 0;
  for (int i = 0; i < 40; ++i) {
    const SliceStack x = augment(stacks[0], cfg, a, &stacks[1]);
    const SliceStack y = augment(stacks[0], cfg, b, &stacks[1]);
    ASSERT_EQ(x.input.data, y.input.data);
    changed += x.input.data != stacks[0].input.data;
    // Geometric changes keep the reference in step with the target.
    SliceStack r = x;
    refresh_reference(r);
    for (std::size_t k = 0; k < r.reference_b0.size(); ++k) ASSERT_NEAR(r.reference_b0[k], x.reference_b0[k], 1e-12);
  }
  EXPECT_GT(changed, 10);
  AugmentConfig bad;
  bad.crop_min = 0.0;
  EXPECT_THROW(bad.validate(), Error);
}

std::vector<std::string> ids(int n) {
  std::vector<std::string> v;
  for (int i = 0; i < n; ++i) v.push_back("sub-" + std::to_string(i));
  return v;
}

TEST(Split, SizesForHundredTwentyFive) {
  const SubjectSplit s = split_subjects(ids(125), SplitSpec{});
  EXPECT_EQ(s.train.size(), 93u);
  EXPECT_EQ(s.val.size(), 18u);
  EXPECT_EQ(s.test.size(), 14u);
}

TEST(Split, IsAPartitionForEverySize) {
  for (int n = 3; n <= 60; ++n) {
    SplitSpec spec;
    spec.seed = static_cast<std::uint64_t>(n);
    const SubjectSplit s = split_subjects(ids(n), spec);
    EXPECT_GE(s.train.size(), 1u);
    EXPECT_GE(s.val.size(), 1u);
    EXPECT_GE(s.test.size(), 1u);
    std::set<std::string> all;
    for (const auto* part : {&s.train, &s.val, &s.test}) all.insert(part->begin(), part->end());
    EXPECT_EQ(all.size(), static_cast<std::size_t>(n));
    EXPECT_EQ(s.train.size() + s.val.size() + s.test.size(), static_cast<std::size_t>(n));
  }
}

TEST(Split, DeterministicPerSeed) {
  SplitSpec a;
  a.seed = 4;
  const SubjectSplit x = split_subjects(ids(30), a), y = split_subjects(ids(30), a);
  EXPECT_EQ(x.train, y.train);
  EXPECT_EQ(x.test, y.test);
  a.seed = 5;
  EXPECT_NE(split_subjects(ids(30), a).train, x.train);
  EXPECT_EQ(error_kind([] { split_subjects(ids(2), SplitSpec{}); }), ErrorKind::TooFewSubjects);
}

TEST(Manifest, RoundTripResolvesRelativePaths) {
  test::TempDir dir("manifest");
  const std::vector<ManifestRow> rows{{"a", dir.path() / "a_b0.nii.gz", dir.path() / "a_t1.nii.gz", dir.path() / "a_vdm.nii.gz", dir.path() / "a_mask.nii.gz"},
                                      {"b", "/abs/b0.nii", "/abs/t1.nii", "/abs/vdm.nii", "/abs/mask.nii"}};
  write_manifest(rows, dir / "manifest.tsv");
  EXPECT_EQ(read_manifest(dir / "manifest.tsv"), rows);
  {
    std::ofstream out(dir / "rel.tsv");
    out << "# id\tb0\tt1\tvdm\tmask\nx\tx_b0.nii\tx_t1.nii\tx_vdm.nii\tx_mask.nii\n";
  }
  const auto rel = read_manifest(dir / "rel.tsv");
  ASSERT_EQ(rel.size(), 1u);
  EXPECT_EQ(rel[0].b0, dir.path() / "x_b0.nii");
  {
    std::ofstream out(dir / "bad.tsv");
    out << "# id\tb0\tt1\tvdm\tmask\nx\tonly_two\n";
  }
  EXPECT_THROW(read_manifest(dir / "bad.tsv"), Error);
}

TEST(Manifest, LoadSubjectRoundTrip) {
  test::TempDir dir("subject");
  const Subject s = small_subject();
  save_volume(s.b0, dir / "b0.nii.gz");
  save_volume(s.t1, dir / "t1.nii.gz");
  save_volume(s.vdm.mm(), dir / "vdm.nii.gz");
  save_mask(s.mask, s.b0, dir / "mask.nii.gz");
  const SubjectVolumes v = load_subject({"s", dir / "b0.nii.gz", dir / "t1.nii.gz", dir / "vdm.nii.gz", dir / "mask.nii.gz"});
  EXPECT_EQ(v.mask, s.mask);
  for (std::size_t i = 0; i < s.b0.values().size(); ++i) EXPECT_NEAR(v.b0.values()[i], s.b0.values()[i], 1e-4);
  EXPECT_NEAR(v.vdm.pe_voxel_size(), 2.0, 1e-6);
}

}  // namespace
