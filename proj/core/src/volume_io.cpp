#include "maskfill/volume_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <nlohmann/json.hpp>

namespace maskfill {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "payload I/O assumes a little-endian host");

fs::path strip_suffix(const fs::path& stem) {
  const std::string s = stem.string();
  for (const char* suffix : {".vol.json", ".vol.raw"}) {
    const std::string suf(suffix);
    if (s.size() > suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0) {
      return fs::path(s.substr(0, s.size() - suf.size()));
    }
  }
  return stem;
}

json lattice_header(const Lattice& lat, const char* dtype, const char* kind) {
  return json{{"shape", lat.shape}, {"spacing", lat.spacing}, {"origin", lat.origin},
              {"dtype", dtype},     {"kind", kind}};
}

template <typename T>
void write_pair(const fs::path& stem, const json& header, const std::vector<T>& data) {
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  {
    std::ofstream h(header_path(stem));
    if (!h) throw FormatError("cannot write " + header_path(stem).string());
    h << header.dump(2) << '\n';
  }
  std::ofstream raw(payload_path(stem), std::ios::binary);
  if (!raw) throw FormatError("cannot write " + payload_path(stem).string());
  raw.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(T)));
}

struct Loaded {
  Lattice lattice;
  std::string dtype;
  std::string kind;
  std::vector<char> bytes;
};

Loaded read_pair(const fs::path& stem) {
  std::ifstream h(header_path(stem));
  if (!h) throw FormatError("cannot open " + header_path(stem).string());
  json header;
  try {
    header = json::parse(h);
  } catch (const json::exception& e) {
    throw FormatError("bad volume header " + header_path(stem).string() + ": " + e.what());
  }
  Loaded out;
  try {
    out.lattice.shape = header.at("shape").get<Index3>();
    out.lattice.spacing = header.at("spacing").get<Vec3>();
    out.lattice.origin = header.at("origin").get<Vec3>();
    out.dtype = header.at("dtype").get<std::string>();
    out.kind = header.at("kind").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError("incomplete volume header " + header_path(stem).string() + ": " + e.what());
  }
  out.lattice.validate();
  std::ifstream raw(payload_path(stem), std::ios::binary);
  if (!raw) throw FormatError("cannot open " + payload_path(stem).string());
  out.bytes.assign(std::istreambuf_iterator<char>(raw), std::istreambuf_iterator<char>());
  return out;
}

template <typename T>
std::vector<T> decode(const Loaded& l, const char* dtype) {
  if (l.dtype != dtype) throw FormatError("expected dtype " + std::string(dtype) + ", found " + l.dtype);
  const auto n = static_cast<std::size_t>(l.lattice.voxel_count());
  if (l.bytes.size() != n * sizeof(T)) throw FormatError("payload size does not match header shape");
  std::vector<T> data(n);
  std::memcpy(data.data(), l.bytes.data(), l.bytes.size());
  return data;
}

}  // namespace

fs::path header_path(const fs::path& stem) { return fs::path(strip_suffix(stem).string() + ".vol.json"); }
fs::path payload_path(const fs::path& stem) { return fs::path(strip_suffix(stem).string() + ".vol.raw"); }

void save_volume(const fs::path& stem, const Volume& v) {
  write_pair(stem, lattice_header(v.lattice(), "f32", "image"), v.vector());
}

void save_mask(const fs::path& stem, const LabelMask& m) {
  write_pair(stem, lattice_header(m.lattice(), "u8", "mask"), m.vector());
}

void save_soft(const fs::path& stem, const SoftMask& m) {
  write_pair(stem, lattice_header(m.lattice(), "f32", "image"), m.vector());
}

Volume load_volume(const fs::path& stem) {
  auto l = read_pair(stem);
  if (l.kind != "image") throw FormatError("expected an image volume, found kind " + l.kind);
  return Volume(l.lattice, decode<float>(l, "f32"));
}

LabelMask load_mask(const fs::path& stem) {
  auto l = read_pair(stem);
  if (l.kind != "mask") throw FormatError("expected a mask volume, found kind " + l.kind);
  return LabelMask(l.lattice, decode<std::uint8_t>(l, "u8"));
}

SoftMask load_soft(const fs::path& stem) {
  auto l = read_pair(stem);
  if (l.dtype == "u8") return to_soft(LabelMask(l.lattice, decode<std::uint8_t>(l, "u8")));
  return SoftMask(l.lattice, decode<float>(l, "f32"));
}

}  // namespace maskfill
