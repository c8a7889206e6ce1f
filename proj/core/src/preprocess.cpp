#include "maskfill/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace maskfill {
namespace {

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 mat_mul(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
  return r;
}

// Rotation about a single lattice axis.
Mat3 axis_rotation(int axis, double deg) {
  const double t = deg * std::numbers::pi / 180.0;
  const double c = std::cos(t), s = std::sin(t);
  Mat3 r{};
  for (int i = 0; i < 3; ++i) r[i][i] = 1.0;
  const int a = (axis + 1) % 3, b = (axis + 2) % 3;
  r[a][a] = c;
  r[a][b] = -s;
  r[b][a] = s;
  r[b][b] = c;
  return r;
}

template <typename T>
T trilinear_clamped(std::span<const T> data, const Index3& n, double x, double y, double z) {
  const double c[3] = {std::clamp(x, 0.0, double(n[0] - 1)), std::clamp(y, 0.0, double(n[1] - 1)),
                       std::clamp(z, 0.0, double(n[2] - 1))};
  std::int64_t lo[3], hi[3];
  double w[3];
  for (int a = 0; a < 3; ++a) {
    lo[a] = static_cast<std::int64_t>(std::floor(c[a]));
    hi[a] = std::min<std::int64_t>(lo[a] + 1, n[a] - 1);
    w[a] = c[a] - double(lo[a]);
  }
  auto at = [&](std::int64_t i, std::int64_t j, std::int64_t k) {
    return double(data[static_cast<std::size_t>((i * n[1] + j) * n[2] + k)]);
  };
  double acc = 0.0;
  for (int di = 0; di < 2; ++di)
    for (int dj = 0; dj < 2; ++dj)
      for (int dk = 0; dk < 2; ++dk) {
        const double wt = (di ? w[0] : 1.0 - w[0]) * (dj ? w[1] : 1.0 - w[1]) * (dk ? w[2] : 1.0 - w[2]);
        if (wt == 0.0) continue;
        acc += wt * at(di ? hi[0] : lo[0], dj ? hi[1] : lo[1], dk ? hi[2] : lo[2]);
      }
  return static_cast<T>(acc);
}

template <typename T>
T nearest_clamped(std::span<const T> data, const Index3& n, double x, double y, double z) {
  const double c[3] = {x, y, z};
  std::int64_t idx[3];
  for (int a = 0; a < 3; ++a) {
    idx[a] = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(c[a] + 0.5)), 0, n[a] - 1);
  }
  return data[static_cast<std::size_t>((idx[0] * n[1] + idx[1]) * n[2] + idx[2])];
}

void check_spacing(const Vec3& s) {
  for (double v : s) {
    if (!(v > 0.0)) throw InvalidArgument("target spacing must be positive");
  }
}

// Maps output voxel centers back into input index space for a pure rescale.
template <typename G, typename Sampler>
G rescale(const G& in, const Index3& out_shape, Sampler sample) {
  const auto& n = in.shape();
  Lattice out_lat;
  out_lat.shape = out_shape;
  double factor[3];
  for (int a = 0; a < 3; ++a) {
    factor[a] = double(n[a]) / double(out_shape[a]);
    out_lat.spacing[a] = in.spacing()[a] * factor[a];
    out_lat.origin[a] = in.origin()[a] - 0.5 * in.spacing()[a] + 0.5 * out_lat.spacing[a];
  }
  std::vector<typename G::value_type> out(static_cast<std::size_t>(out_lat.voxel_count()));
  std::size_t o = 0;
  for (std::int64_t i = 0; i < out_shape[0]; ++i) {
    const double x = (double(i) + 0.5) * factor[0] - 0.5;
    for (std::int64_t j = 0; j < out_shape[1]; ++j) {
      const double y = (double(j) + 0.5) * factor[1] - 0.5;
      for (std::int64_t k = 0; k < out_shape[2]; ++k) {
        const double z = (double(k) + 0.5) * factor[2] - 0.5;
        out[o++] = sample(in.values(), n, x, y, z);
      }
    }
  }
  return G(out_lat, std::move(out));
}

Index3 shape_for_spacing(const Lattice& lat, const Vec3& target) {
  Index3 s{};
  for (int a = 0; a < 3; ++a) {
    s[a] = std::max<std::int64_t>(1, std::llround(double(lat.shape[a]) * lat.spacing[a] / target[a]));
  }
  return s;
}

void check_shape(const Index3& shape) {
  for (auto v : shape) {
    if (v < 1) throw ShapeError("target shape components must be >= 1");
  }
}

}  // namespace

Volume resample(const Volume& v, const Vec3& target_spacing) {
  check_spacing(target_spacing);
  if (target_spacing == v.spacing()) return v;
  auto out = rescale(v, shape_for_spacing(v.lattice(), target_spacing), trilinear_clamped<float>);
  return out;
}

LabelMask resample(const LabelMask& m, const Vec3& target_spacing) {
  check_spacing(target_spacing);
  if (target_spacing == m.spacing()) return m;
  return rescale(m, shape_for_spacing(m.lattice(), target_spacing), nearest_clamped<std::uint8_t>);
}

Volume normalize_intensity(const Volume& v, double lo, double hi) {
  if (!(lo < hi)) throw InvalidArgument("normalize_intensity requires lo < hi");
  std::vector<float> out(v.values().size());
  // (2x - (lo + hi)) / (hi - lo) is exact for the (-1, 1) window.
  std::transform(v.values().begin(), v.values().end(), out.begin(), [lo, hi](float x) {
    const double c = std::clamp(double(x), lo, hi);
    return static_cast<float>((2.0 * c - (lo + hi)) / (hi - lo));
  });
  return Volume(v.lattice(), std::move(out));
}

Crop crop_to_bbox(const Volume& v, const LabelMask& m, int pad_voxels) {
  require_same_grid(v.lattice(), m.lattice(), "crop_to_bbox");
  if (pad_voxels < 0) throw InvalidArgument("pad_voxels must be >= 0");
  const auto& n = m.shape();
  Index3 lo{n[0], n[1], n[2]}, hi{-1, -1, -1};
  for (std::int64_t i = 0; i < n[0]; ++i)
    for (std::int64_t j = 0; j < n[1]; ++j)
      for (std::int64_t k = 0; k < n[2]; ++k) {
        if (!m.at(i, j, k)) continue;
        const std::int64_t p[3] = {i, j, k};
        for (int a = 0; a < 3; ++a) {
          lo[a] = std::min(lo[a], p[a]);
          hi[a] = std::max(hi[a], p[a]);
        }
      }
  if (hi[0] < 0) throw EmptyMaskError("crop_to_bbox: mask has no foreground");

  std::int64_t side = 0;
  for (int a = 0; a < 3; ++a) side = std::max(side, hi[a] - lo[a] + 1);
  side += 2 * static_cast<std::int64_t>(pad_voxels);

  Index3 start{}, extent{};
  for (int a = 0; a < 3; ++a) {
    if (side >= n[a]) {
      start[a] = 0;
      extent[a] = n[a];
      continue;
    }
    const std::int64_t ext = hi[a] - lo[a] + 1;
    std::int64_t s = lo[a] - (side - ext) / 2;
    s = std::clamp<std::int64_t>(s, 0, n[a] - side);
    start[a] = s;
    extent[a] = side;
  }

  Lattice lat;
  lat.shape = extent;
  lat.spacing = v.spacing();
  for (int a = 0; a < 3; ++a) lat.origin[a] = v.origin()[a] + double(start[a]) * v.spacing()[a];

  std::vector<float> img(static_cast<std::size_t>(lat.voxel_count()));
  std::vector<std::uint8_t> msk(img.size());
  std::size_t o = 0;
  for (std::int64_t i = 0; i < extent[0]; ++i)
    for (std::int64_t j = 0; j < extent[1]; ++j)
      for (std::int64_t k = 0; k < extent[2]; ++k, ++o) {
        img[o] = v.at(start[0] + i, start[1] + j, start[2] + k);
        msk[o] = m.at(start[0] + i, start[1] + j, start[2] + k);
      }
  return Crop{Volume(lat, std::move(img)), LabelMask(lat, std::move(msk))};
}

Volume resize_to(const Volume& v, const Index3& shape) {
  check_shape(shape);
  if (shape == v.shape()) return v;
  return rescale(v, shape, trilinear_clamped<float>);
}

LabelMask resize_to(const LabelMask& m, const Index3& shape) {
  check_shape(shape);
  if (shape == m.shape()) return m;
  return rescale(m, shape, nearest_clamped<std::uint8_t>);
}

SoftMask resize_to(const SoftMask& m, const Index3& shape) {
  check_shape(shape);
  if (shape == m.shape()) return m;
  return rescale(m, shape, trilinear_clamped<float>);
}

bool AugmentParams::is_identity() const {
  return intensity_scale == 1.0 && rotation_deg == Vec3{0, 0, 0} && translation_vox == Vec3{0, 0, 0};
}

AugmentParams draw_augment(std::uint64_t seed, const AugmentRanges& ranges) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> scale(ranges.scale_lo, ranges.scale_hi);
  std::uniform_real_distribution<double> rot(-ranges.max_rotation_deg, ranges.max_rotation_deg);
  std::uniform_real_distribution<double> shift(-ranges.max_translation_vox, ranges.max_translation_vox);
  AugmentParams p;
  p.intensity_scale = scale(rng);
  for (auto& r : p.rotation_deg) r = rot(rng);
  for (auto& t : p.translation_vox) t = shift(rng);
  return p;
}

Crop apply_augment(const Volume& v, const LabelMask& m, const AugmentParams& params) {
  require_same_grid(v.lattice(), m.lattice(), "augment");
  if (params.is_identity()) return Crop{v, m};

  // Forward map p = R (q - c) + c + t with R = R2 R1 R0; sample at q = R^T (p - c - t) + c.
  const Mat3 rot = mat_mul(axis_rotation(2, params.rotation_deg[2]),
                           mat_mul(axis_rotation(1, params.rotation_deg[1]),
                                   axis_rotation(0, params.rotation_deg[0])));
  const auto& n = v.shape();
  const double c[3] = {0.5 * double(n[0] - 1), 0.5 * double(n[1] - 1), 0.5 * double(n[2] - 1)};
  const auto img_in = v.values();
  const auto msk_in = m.values();
  std::vector<float> img(img_in.size());
  std::vector<std::uint8_t> msk(msk_in.size());
  const float scale = static_cast<float>(params.intensity_scale);
  constexpr double kEdge = 1e-9;

  std::size_t o = 0;
  for (std::int64_t i = 0; i < n[0]; ++i)
    for (std::int64_t j = 0; j < n[1]; ++j)
      for (std::int64_t k = 0; k < n[2]; ++k, ++o) {
        const double d[3] = {double(i) - c[0] - params.translation_vox[0],
                             double(j) - c[1] - params.translation_vox[1],
                             double(k) - c[2] - params.translation_vox[2]};
        double q[3];
        for (int a = 0; a < 3; ++a) q[a] = rot[0][a] * d[0] + rot[1][a] * d[1] + rot[2][a] * d[2] + c[a];

        bool inside = true;
        for (int a = 0; a < 3; ++a) inside = inside && q[a] >= -kEdge && q[a] <= double(n[a] - 1) + kEdge;
        img[o] = inside ? scale * trilinear_clamped<float>(img_in, n, q[0], q[1], q[2]) : -1.0f;

        bool near_inside = true;
        std::int64_t r[3];
        for (int a = 0; a < 3; ++a) {
          r[a] = static_cast<std::int64_t>(std::floor(q[a] + 0.5));
          near_inside = near_inside && r[a] >= 0 && r[a] < n[a];
        }
        msk[o] = near_inside ? msk_in[static_cast<std::size_t>((r[0] * n[1] + r[1]) * n[2] + r[2])] : 0;
      }
  return Crop{Volume(v.lattice(), std::move(img)), LabelMask(m.lattice(), std::move(msk))};
}

}  // namespace maskfill
