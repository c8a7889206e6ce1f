#include <cmath>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "maskfill/preprocess.hpp"
#include "maskfill/volume.hpp"
#include "maskfill/volume_io.hpp"

using namespace maskfill;

namespace {

LabelMask ellipsoid(const Lattice& lat, Vec3 radii_mm) {
  LabelMask m(lat);
  const auto& s = lat.shape;
  for (std::int64_t i = 0; i < s[0]; ++i)
    for (std::int64_t j = 0; j < s[1]; ++j)
      for (std::int64_t k = 0; k < s[2]; ++k) {
        // physical offsets from the volume center
        double x = (i - (s[0] - 1) / 2.0) * lat.spacing[0] / radii_mm[0];
        double y = (j - (s[1] - 1) / 2.0) * lat.spacing[1] / radii_mm[1];
        double z = (k - (s[2] - 1) / 2.0) * lat.spacing[2] / radii_mm[2];
        if (x * x + y * y + z * z <= 1.0) m.set(i, j, k, 1);
      }
  return m;
}

Volume random_volume(const Lattice& lat, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.f, 100.f);
  Volume v(lat);
  for (auto& x : v.mutable_values()) x = d(rng);
  return v;
}

std::filesystem::path temp_dir(const char* name) {
  auto p = std::filesystem::temp_directory_path() / ("maskfill_test_" + std::string(name));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(Grid, RejectsInvalidValuesAndShapes) {
  EXPECT_THROW(LabelMask(Lattice::cube(2), std::vector<std::uint8_t>(8, 2)), InvalidArgument);
  EXPECT_THROW(SoftMask(Lattice::cube(2), std::vector<float>(8, 1.5f)), InvalidArgument);
  EXPECT_THROW(Volume(Lattice::cube(2), std::vector<float>(7)), ShapeError);
  EXPECT_THROW(Volume(Lattice{{2, 2, 2}, {1.0, 0.0, 1.0}, {}}), InvalidArgument);
  EXPECT_THROW(Volume(Lattice{{2, 0, 2}, {1.0, 1.0, 1.0}, {}}), InvalidArgument);
}

TEST(Resample, IdentitySpacingIsExact) {
  auto v = random_volume(Lattice{{6, 7, 5}, {1.5, 2.0, 0.7}, {3, 4, 5}}, 1);
  EXPECT_EQ(resample(v, v.spacing()), v);
}

TEST(Resample, EllipsoidVoxelCountScalesByEight) {
  Lattice coarse{{64, 64, 64}, {2.0, 2.0, 2.0}, {}};
  auto m = ellipsoid(coarse, {40.0, 30.0, 24.0});
  auto fine = resample(m, {1.0, 1.0, 1.0});
  EXPECT_EQ(fine.shape(), (Index3{128, 128, 128}));
  EXPECT_EQ(fine.spacing(), (Vec3{1.0, 1.0, 1.0}));
  const double ratio = double(foreground_count(fine)) / double(foreground_count(m));
  EXPECT_NEAR(ratio, 8.0, 8.0 * 0.05);
}

TEST(Resample, ConstantStaysConstant) {
  Volume v(Lattice{{9, 8, 7}, {1.3, 0.9, 2.1}, {}}, 42.5f);
  for (Vec3 sp : {Vec3{0.5, 0.5, 0.5}, Vec3{2.0, 1.0, 3.0}}) {
    auto r = resample(v, sp);
    for (float x : r.values()) ASSERT_FLOAT_EQ(x, 42.5f);
    auto back = resample(r, v.spacing());
    for (float x : back.values()) ASSERT_FLOAT_EQ(x, 42.5f);
  }
}

TEST(Resample, ExtentPreservedWithinOneVoxel) {
  Volume v(Lattice{{10, 13, 7}, {1.7, 0.8, 2.3}, {}});
  const Vec3 target{1.0, 1.1, 0.6};
  auto r = resample(v, target);
  for (int a = 0; a < 3; ++a) {
    EXPECT_LE(std::abs(r.shape()[a] * target[a] - v.shape()[a] * v.spacing()[a]), target[a]);
  }
}

TEST(Resample, RejectsNonPositiveSpacing) {
  Volume v(Lattice::cube(4));
  EXPECT_THROW(resample(v, {1.0, 0.0, 1.0}), InvalidArgument);
  EXPECT_THROW(resample(LabelMask(Lattice::cube(4)), {-1.0, 1.0, 1.0}), InvalidArgument);
}

TEST(Normalize, WindowEndpointsAndClipping) {
  Volume v(Lattice{{1, 1, 5}, {1, 1, 1}, {}}, std::vector<float>{-200.f, 400.f, 100.f, -5000.f, 9000.f});
  auto n = normalize_intensity(v);
  EXPECT_FLOAT_EQ(n[0], -1.f);
  EXPECT_FLOAT_EQ(n[1], 1.f);
  EXPECT_NEAR(n[2], 0.f, 1e-7);
  EXPECT_FLOAT_EQ(n[3], -1.f);
  EXPECT_FLOAT_EQ(n[4], 1.f);
  EXPECT_THROW(normalize_intensity(v, 5.0, 5.0), InvalidArgument);
}

TEST(Normalize, IdempotentOnUnitWindow) {
  auto n = normalize_intensity(random_volume(Lattice::cube(8), 3));
  for (float x : n.values()) {
    ASSERT_GE(x, -1.f);
    ASSERT_LE(x, 1.f);
  }
  EXPECT_EQ(normalize_intensity(n, -1.0, 1.0), n);
}

TEST(Crop, SingleVoxelPadZero) {
  Lattice lat = Lattice::cube(9);
  LabelMask m(lat);
  m.set(4, 4, 4, 1);
  Volume v = random_volume(lat, 5);
  auto c = crop_to_bbox(v, m, 0);
  EXPECT_EQ(c.mask.shape(), (Index3{1, 1, 1}));
  EXPECT_EQ(c.mask[0], 1);
  EXPECT_EQ(c.image[0], v.at(4, 4, 4));
}

TEST(Crop, KeepsForegroundAndClampsPad) {
  Lattice lat{{24, 20, 16}, {1, 1, 1}, {}};
  auto m = ellipsoid(lat, {6.0, 4.0, 5.0});
  Volume v = random_volume(lat, 6);
  auto c = crop_to_bbox(v, m, 2);
  EXPECT_EQ(foreground_count(c.mask), foreground_count(m));
  EXPECT_EQ(c.mask.shape()[0], c.mask.shape()[1]);
  EXPECT_EQ(c.mask.shape()[1], c.mask.shape()[2]);
  EXPECT_EQ(c.image.lattice().shape, c.mask.lattice().shape);

  auto full = crop_to_bbox(v, m, 100);
  EXPECT_EQ(full.mask, m);
  EXPECT_EQ(full.image, v);

  EXPECT_THROW(crop_to_bbox(v, LabelMask(lat), 0), EmptyMaskError);
}

TEST(Resize, OwnShapeIsIdentity) {
  auto v = random_volume(Lattice{{6, 5, 4}, {1, 2, 3}, {}}, 7);
  EXPECT_EQ(resize_to(v, v.shape()), v);
}

TEST(Resize, AllOnesStaysAllOnes) {
  LabelMask m(Lattice::cube(64), 1);
  auto r = resize_to(m, {128, 128, 128});
  EXPECT_EQ(r.shape(), (Index3{128, 128, 128}));
  EXPECT_EQ(foreground_count(r), r.size());
}

TEST(Resize, HalfSpaceFractionPreserved) {
  Lattice lat{{30, 22, 18}, {1, 1, 1}, {}};
  LabelMask m(lat);
  for (std::int64_t i = 0; i < 30; ++i)
    for (std::int64_t j = 0; j < 22; ++j)
      for (std::int64_t k = 0; k < 18; ++k)
        if (i + 0.5 * j < 20) m.set(i, j, k, 1);
  const double f0 = double(foreground_count(m)) / m.size();
  for (Index3 shape : {Index3{32, 32, 32}, Index3{17, 40, 9}}) {
    auto r = resize_to(m, shape);
    EXPECT_EQ(r.shape(), shape);
    EXPECT_NEAR(double(foreground_count(r)) / r.size(), f0, 0.02);
  }
}

TEST(Augment, DeterministicPerSeed) {
  Lattice lat = Lattice::cube(20);
  auto m = ellipsoid(lat, {6, 5, 4});
  auto v = random_volume(lat, 8);
  auto a = augment(v, m, 99);
  auto b = augment(v, m, 99);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.mask, b.mask);
}

TEST(Augment, IdentityDrawLeavesMaskUnchanged) {
  Lattice lat = Lattice::cube(16);
  auto m = ellipsoid(lat, {5, 4, 3});
  auto v = random_volume(lat, 9);
  AugmentParams p;
  p.intensity_scale = 1.1;
  auto out = apply_augment(v, m, p);
  EXPECT_EQ(out.mask, m);
  for (std::int64_t i = 0; i < v.size(); ++i) ASSERT_FLOAT_EQ(out.image[i], float(v[i] * 1.1));
}

TEST(Augment, DrawsStayInRanges) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    auto p = draw_augment(s);
    ASSERT_GE(p.intensity_scale, 0.85);
    ASSERT_LE(p.intensity_scale, 1.15);
    for (int a = 0; a < 3; ++a) {
      ASSERT_LE(std::abs(p.rotation_deg[a]), 20.0);
      ASSERT_LE(std::abs(p.translation_vox[a]), 5.0);
    }
  }
}

TEST(Augment, CenteredEllipsoidVolumeStable) {
  Lattice lat = Lattice::cube(32);
  auto m = ellipsoid(lat, {7, 6, 5});
  Volume v(lat, 0.f);
  const double n0 = double(foreground_count(m));
  for (std::uint64_t s = 0; s < 100; ++s) {
    auto out = augment(v, m, s);
    ASSERT_EQ(out.mask.lattice().shape, out.image.lattice().shape);
    ASSERT_LT(std::abs(foreground_count(out.mask) - n0) / n0, 0.10) << "seed " << s;
  }
}

TEST(VolumeIo, RoundTripIsBitExact) {
  auto dir = temp_dir("volume_io");
  auto v = random_volume(Lattice{{5, 6, 7}, {0.5, 1.25, 3.0}, {-1.5, 2.0, 1e-3}}, 10);
  LabelMask m(v.lattice());
  for (std::int64_t i = 0; i < m.size(); i += 3) m.mutable_values()[std::size_t(i)] = 1;
  SoftMask s(v.lattice(), 0.25f);
  save_volume(dir / "img", v);
  save_mask(dir / "mask.vol.json", m);
  save_soft(dir / "soft", s);
  EXPECT_EQ(load_volume(dir / "img"), v);
  EXPECT_EQ(load_mask(dir / "mask"), m);
  EXPECT_EQ(load_soft(dir / "soft.vol.json"), s);
  EXPECT_TRUE(std::filesystem::exists(dir / "img.vol.raw"));
  EXPECT_THROW(load_mask(dir / "img"), FormatError);
  EXPECT_THROW(load_volume(dir / "missing"), FormatError);
}
