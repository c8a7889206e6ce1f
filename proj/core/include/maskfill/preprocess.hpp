#pragma once

#include <array>
#include <cstdint>
#include <utility>

#include "maskfill/volume.hpp"

namespace maskfill {

/// Resample onto a new voxel spacing covering the same physical extent.
/// Images use trilinear interpolation, label masks nearest-neighbor.
Volume resample(const Volume& v, const Vec3& target_spacing);
LabelMask resample(const LabelMask& m, const Vec3& target_spacing);

/// Clip to [lo, hi] and map affinely so that lo -> -1 and hi -> +1.
Volume normalize_intensity(const Volume& v, double lo = -200.0, double hi = 400.0);

struct Crop {
  Volume image;
  LabelMask mask;
};

/// Smallest cube around the foreground, padded by `pad_voxels` and clamped to
/// the volume bounds. Throws EmptyMaskError when the mask has no foreground.
Crop crop_to_bbox(const Volume& v, const LabelMask& m, int pad_voxels);

/// Same-kind resampling onto an explicit shape; spacing is adjusted so the
/// physical extent is preserved.
Volume resize_to(const Volume& v, const Index3& shape);
LabelMask resize_to(const LabelMask& m, const Index3& shape);
SoftMask resize_to(const SoftMask& m, const Index3& shape);

/// One draw of the training-time augmentation.
struct AugmentParams {
  double intensity_scale = 1.0;
  Vec3 rotation_deg{0.0, 0.0, 0.0};   // about axes 0, 1, 2, applied in that order
  Vec3 translation_vox{0.0, 0.0, 0.0};

  bool is_identity() const;
};

struct AugmentRanges {
  double scale_lo = 0.85;
  double scale_hi = 1.15;
  double max_rotation_deg = 20.0;
  double max_translation_vox = 5.0;
};

/// Deterministic draw from the augmentation ranges for a given seed.
AugmentParams draw_augment(std::uint64_t seed, const AugmentRanges& ranges = {});

/// Apply a rigid transform (single resample, rotation about the volume
/// center) to both members of a pair; the intensity scale hits the image
/// only. Out-of-bounds fill: -1 for the image, 0 for the mask.
Crop apply_augment(const Volume& v, const LabelMask& m, const AugmentParams& params);

inline Crop augment(const Volume& v, const LabelMask& m, std::uint64_t seed,
                    const AugmentRanges& ranges = {}) {
  return apply_augment(v, m, draw_augment(seed, ranges));
}

}  // namespace maskfill
