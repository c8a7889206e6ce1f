#include "maskfill/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace maskfill {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");
constexpr char kMagic[8] = {'M', 'F', 'C', 'K', 'P', 'T', '0', '1'};

void write_file(const fs::path& path, json header, const nn::ParamStore<float>& params) {
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const auto& p : params) {
    tensors.push_back({{"name", p.name},
                       {"shape", p.shape},
                       {"trainable", p.trainable},
                       {"offset", offset},
                       {"count", p.value.size()}});
    offset += p.value.size();
  }
  header["tensors"] = tensors;
  const std::string text = header.dump();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), std::streamsize(text.size()));
  for (const auto& p : params) {
    out.write(reinterpret_cast<const char*>(p.value.data()), std::streamsize(p.value.size() * sizeof(float)));
  }
  if (!out) throw FormatError("short write on checkpoint " + path.string());
}

struct Raw {
  json header;
  std::vector<float> payload;
};

Raw read_file(const fs::path& path, bool with_payload) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("not a checkpoint file: " + path.string());
  }
  if (!in.read(reinterpret_cast<char*>(&len), sizeof(len)) || len > (std::uint64_t(1) << 30)) {
    throw FormatError("corrupt checkpoint header length: " + path.string());
  }
  std::string text(len, '\0');
  if (!in.read(text.data(), std::streamsize(len))) throw FormatError("truncated checkpoint header: " + path.string());
  Raw r;
  try {
    r.header = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError("bad checkpoint header in " + path.string() + ": " + e.what());
  }
  if (with_payload) {
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() % sizeof(float) != 0) throw FormatError("checkpoint payload is not f32-aligned");
    r.payload.resize(bytes.size() / sizeof(float));
    std::memcpy(r.payload.data(), bytes.data(), bytes.size());
  }
  return r;
}

CheckpointInfo info_of(const json& h) {
  CheckpointInfo info;
  try {
    info.kind = h.at("kind").get<std::string>();
    info.role = h.at("role").get<std::string>();
    info.config = h.at("config");
    info.iter = h.at("iter").get<std::int64_t>();
    info.seed = h.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("incomplete checkpoint header: ") + e.what());
  }
  return info;
}

void fill_params(nn::ParamStore<float>& params, const Raw& raw) {
  const auto& tensors = raw.header.at("tensors");
  if (tensors.size() != params.size()) throw FormatError("checkpoint tensor count does not match the model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = tensors[i];
    auto& p = params[i];
    if (t.at("name").get<std::string>() != p.name || t.at("shape").get<std::vector<std::int64_t>>() != p.shape) {
      throw FormatError("checkpoint tensor " + t.at("name").get<std::string>() + " does not match " + p.name);
    }
    const auto offset = t.at("offset").get<std::size_t>();
    const auto count = t.at("count").get<std::size_t>();
    if (count != p.value.size() || offset + count > raw.payload.size()) {
      throw FormatError("checkpoint tensor " + p.name + " is truncated");
    }
    std::copy_n(raw.payload.begin() + std::ptrdiff_t(offset), count, p.value.begin());
  }
}

}  // namespace

void save_checkpoint(const fs::path& path, const MlmModel& model, std::int64_t iter, std::uint64_t seed) {
  write_file(path, json{{"kind", "mlm"}, {"role", "mlm"}, {"config", model.config()}, {"iter", iter}, {"seed", seed}},
             model.params());
}

void save_checkpoint(const fs::path& path, const SegModel& model, std::int64_t iter, std::uint64_t seed) {
  write_file(path,
             json{{"kind", "seg"},
                  {"role", to_string(model.role())},
                  {"config", model.config()},
                  {"iter", iter},
                  {"seed", seed}},
             model.params());
}

CheckpointInfo read_checkpoint_info(const fs::path& path) { return info_of(read_file(path, false).header); }

MlmModel load_mlm(const fs::path& path, CheckpointInfo* info) {
  const Raw raw = read_file(path, true);
  auto meta = info_of(raw.header);
  if (meta.kind != "mlm") throw FormatError(path.string() + " is not an MLM checkpoint");
  MlmModel model(meta.config.get<MlmConfig>(), 0);
  fill_params(model.params(), raw);
  if (info) *info = std::move(meta);
  return model;
}

SegModel load_seg(const fs::path& path, CheckpointInfo* info) {
  const Raw raw = read_file(path, true);
  auto meta = info_of(raw.header);
  if (meta.kind != "seg") throw FormatError(path.string() + " is not a segmentation checkpoint");
  SegModel model(meta.config.get<SegConfig>(), 0, seg_role_from_string(meta.role));
  fill_params(model.params(), raw);
  if (info) *info = std::move(meta);
  return model;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[std::size_t(i)] = digits[v & 0xf];
  return s;
}

std::string file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::uint64_t h = 1469598103934665603ull;
  char buf[1 << 14];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  return hex64(h);
}

}  // namespace maskfill
