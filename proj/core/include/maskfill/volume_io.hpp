#pragma once

#include <filesystem>

#include "maskfill/volume.hpp"

namespace maskfill {

/// Native on-disk volume: `<stem>.vol.json` header
/// {shape, spacing, origin, dtype: "f32"|"u8", kind: "image"|"mask"} plus a
/// `<stem>.vol.raw` little-endian row-major payload.
///
/// `stem` may be given with or without the `.vol.json` suffix.
void save_volume(const std::filesystem::path& stem, const Volume& v);
void save_mask(const std::filesystem::path& stem, const LabelMask& m);
/// Soft masks are stored as f32 images.
void save_soft(const std::filesystem::path& stem, const SoftMask& m);

Volume load_volume(const std::filesystem::path& stem);
LabelMask load_mask(const std::filesystem::path& stem);
SoftMask load_soft(const std::filesystem::path& stem);

std::filesystem::path header_path(const std::filesystem::path& stem);
std::filesystem::path payload_path(const std::filesystem::path& stem);

}  // namespace maskfill
