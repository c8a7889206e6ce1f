#pragma once

#include <span>

#include "maskfill/volume.hpp"

namespace maskfill {

inline constexpr double kDiceEpsilon = 1e-6;

/// Soft Dice loss  -2 <p, r> / (|p|_1 + |r|_1 + eps), in [-1, 0].
/// When `grad` is non-empty it receives dL/dp.
template <typename T>
double dice_loss(std::span<const T> pred, std::span<const T> ref, std::span<T> grad = {},
                 double eps = kDiceEpsilon);

double dice_loss(const SoftMask& pred, const SoftMask& ref);
double dice_loss(const SoftMask& pred, const LabelMask& ref);

/// Overlap metric 2|A n B| / (|A| + |B|); two empty masks score 1.
double dice_score(const LabelMask& pred, const LabelMask& ref);
/// Soft predictions are binarized at 0.5 first.
double dice_score(const SoftMask& pred, const LabelMask& ref);

/// Mean over all voxels of |g - r|^2. When `grad` is non-empty it receives
/// dL/dr (the reconstruction side).
template <typename T>
double mse_loss(std::span<const T> target, std::span<const T> recon, std::span<T> grad = {});

double mlm_mse_loss(const SoftMask& target, const SoftMask& recon);
double mlm_mse_loss(const LabelMask& target, const SoftMask& recon);

}  // namespace maskfill
