#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "maskfill/volume.hpp"

namespace maskfill {

/// Partition of a lattice into non-overlapping P^3 blocks. Patch (a, b, c)
/// has index (a * g1 + b) * g2 + c; voxels inside a patch are row-major.
struct PatchGrid {
  int patch_size = 1;
  Index3 volume_shape{1, 1, 1};
  Index3 grid_dims{1, 1, 1};

  std::int64_t num_patches() const { return grid_dims[0] * grid_dims[1] * grid_dims[2]; }
  std::int64_t patch_voxels() const {
    return std::int64_t(patch_size) * patch_size * patch_size;
  }
  /// Patch containing voxel (i, j, k).
  std::int64_t patch_of(std::int64_t i, std::int64_t j, std::int64_t k) const;
  Index3 patch_coords(std::int64_t patch) const;

  /// Throws ShapeError unless every dimension is divisible by `patch_size`.
  static PatchGrid for_shape(const Index3& shape, int patch_size);
};

/// Flattened patches, one row of P^3 values per patch.
template <typename T>
struct PatchSet {
  PatchGrid grid;
  std::vector<T> values;

  std::int64_t rows() const {
    return grid.patch_voxels() ? std::int64_t(values.size()) / grid.patch_voxels() : 0;
  }
  std::span<const T> row(std::int64_t p) const {
    return std::span<const T>(values).subspan(std::size_t(p * grid.patch_voxels()),
                                              std::size_t(grid.patch_voxels()));
  }
};

PatchSet<std::uint8_t> patchify(const LabelMask& m, int patch_size);
PatchSet<float> patchify(const SoftMask& m, int patch_size);
/// Generic flat field (row-major over `shape`) to patches.
template <typename T>
PatchSet<T> patchify(std::span<const T> data, const Index3& shape, int patch_size);
/// Inverse of patchify; the lattice supplies spacing/origin for the result.
template <typename T>
std::vector<T> unpatchify(const PatchSet<T>& patches);

LabelMask unpatchify_mask(const PatchSet<std::uint8_t>& patches, const Lattice& lattice);
SoftMask unpatchify_soft(const PatchSet<float>& patches, const Lattice& lattice);

/// Organ-aware corruption plan: corrupted patches are drawn uniformly without
/// replacement from the patches holding at least one foreground voxel.
struct MaskPlan {
  double ratio = 0.0;
  std::uint64_t seed = 0;
  std::int64_t num_patches = 0;
  std::vector<std::int64_t> organ_patches;  // sorted
  std::vector<std::int64_t> corrupted;      // sorted, subset of organ_patches

  std::vector<std::int64_t> visible() const;
  bool is_corrupted(std::int64_t patch) const;

  /// Plan with nothing corrupted.
  static MaskPlan none(std::int64_t num_patches);
};

/// round-half-up(ratio * n), except that fewer than two organ patches
/// corrupt nothing.
std::int64_t corrupted_count(double ratio, std::int64_t organ_patches);

/// Throws EmptyMaskError when the mask has no foreground.
MaskPlan plan_mask(const LabelMask& m, const PatchGrid& grid, double ratio, std::uint64_t seed);
/// Soft inputs are binarized at 0.5 before organ-patch detection.
MaskPlan plan_mask(const SoftMask& m, const PatchGrid& grid, double ratio, std::uint64_t seed);

template <typename T>
struct PlannedPatches {
  std::vector<std::int64_t> visible_indices;  // ascending
  std::vector<std::int64_t> corrupted_indices;
  std::vector<T> visible_values;  // visible_indices.size() rows of P^3
};

template <typename T>
PlannedPatches<T> apply_plan(const PatchSet<T>& patches, const MaskPlan& plan);

void to_json(nlohmann::json& j, const MaskPlan& plan);
void from_json(const nlohmann::json& j, MaskPlan& plan);

}  // namespace maskfill
