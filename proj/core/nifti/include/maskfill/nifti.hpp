#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "maskfill/volume.hpp"

namespace maskfill {

/// Read-only NIfTI-1 ingestion (single-file `.nii`, optionally gzipped).
///
/// The x axis of the file is the fastest-varying axis, so it becomes lattice
/// axis 2: shape/spacing/origin are reported as (z, y, x). Only the qoffset
/// translation is honored; rotations in the qform/sform are ignored.
struct NiftiHeader {
  Index3 shape{1, 1, 1};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};
  std::int16_t datatype = 0;
  double slope = 1.0;
  double intercept = 0.0;
  std::int64_t vox_offset = 352;
};

NiftiHeader read_nifti_header(const std::filesystem::path& path);

/// Scaled intensities (scl_slope/scl_inter applied when slope != 0).
Volume read_nifti_volume(const std::filesystem::path& path);

/// Voxels equal to `label` become foreground; without a label any nonzero
/// voxel does.
LabelMask read_nifti_mask(const std::filesystem::path& path, std::optional<int> label = std::nullopt);

}  // namespace maskfill
