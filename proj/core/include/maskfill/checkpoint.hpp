#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "maskfill/mlm.hpp"
#include "maskfill/seg.hpp"

namespace maskfill {

/// Header fields of a checkpoint file.
struct CheckpointInfo {
  std::string kind;  // "mlm" or "seg"
  std::string role;  // seg role, or "mlm"
  nlohmann::json config;
  std::int64_t iter = 0;
  std::uint64_t seed = 0;
};

/// Layout: 8-byte magic "MFCKPT01", u64 little-endian header length, JSON
/// header, then every tensor as little-endian f32 in header order.
void save_checkpoint(const std::filesystem::path& path, const MlmModel& model, std::int64_t iter, std::uint64_t seed);
void save_checkpoint(const std::filesystem::path& path, const SegModel& model, std::int64_t iter, std::uint64_t seed);

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);
MlmModel load_mlm(const std::filesystem::path& path, CheckpointInfo* info = nullptr);
SegModel load_seg(const std::filesystem::path& path, CheckpointInfo* info = nullptr);

/// FNV-1a over a file's bytes, hex encoded.
std::string file_digest(const std::filesystem::path& path);
std::string hex64(std::uint64_t v);

}  // namespace maskfill
