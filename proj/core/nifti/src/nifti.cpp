#include "maskfill/nifti.hpp"

#include <cmath>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include <zlib.h>

namespace maskfill {
namespace {

constexpr int kHeaderSize = 348;

struct GzCloser {
  void operator()(gzFile_s* f) const { gzclose(f); }
};
using GzFile = std::unique_ptr<gzFile_s, GzCloser>;

// gzread also passes plain files through unchanged.
std::vector<char> read_all(const std::filesystem::path& path) {
  GzFile f(gzopen(path.c_str(), "rb"));
  if (!f) throw FormatError("cannot open " + path.string());
  std::vector<char> out;
  char buf[1 << 16];
  for (;;) {
    const int n = gzread(f.get(), buf, sizeof buf);
    if (n < 0) throw FormatError("read error in " + path.string());
    if (n == 0) break;
    out.insert(out.end(), buf, buf + n);
  }
  return out;
}

template <typename T>
T load(const char* p, bool swap) {
  T v;
  std::memcpy(&v, p, sizeof v);
  if (swap) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    for (std::size_t i = 0; i < sizeof v / 2; ++i) std::swap(b[i], b[sizeof v - 1 - i]);
  }
  return v;
}

struct Parsed {
  NiftiHeader header;
  bool swap = false;
};

Parsed parse_header(const std::vector<char>& bytes, const std::filesystem::path& path) {
  if (bytes.size() < kHeaderSize) throw FormatError(path.string() + ": truncated NIfTI header");
  const char* h = bytes.data();
  Parsed p;
  const auto size = load<std::int32_t>(h, false);
  if (size != kHeaderSize) {
    if (load<std::int32_t>(h, true) != kHeaderSize) throw FormatError(path.string() + ": not a NIfTI-1 file");
    p.swap = true;
  }
  if (std::memcmp(h + 344, "n+1", 4) != 0) {
    throw FormatError(path.string() + ": only single-file NIfTI-1 (magic n+1) is supported");
  }
  std::int16_t dim[8];
  float pixdim[8];
  for (int i = 0; i < 8; ++i) {
    dim[i] = load<std::int16_t>(h + 40 + 2 * i, p.swap);
    pixdim[i] = load<float>(h + 76 + 4 * i, p.swap);
  }
  if (dim[0] < 1 || dim[0] > 7) throw FormatError(path.string() + ": bad dim[0]");
  for (int i = 4; i <= dim[0]; ++i) {
    if (dim[i] > 1) throw FormatError(path.string() + ": only 3D volumes are supported");
  }
  auto& hd = p.header;
  for (int a = 0; a < 3; ++a) {
    const int src = 3 - a;  // lattice axis a <- file axis (z, y, x)
    hd.shape[a] = src <= dim[0] ? std::max<std::int16_t>(dim[src], 1) : 1;
    const double sp = std::abs(double(pixdim[src]));
    hd.spacing[a] = sp > 0 ? sp : 1.0;
  }
  hd.datatype = load<std::int16_t>(h + 70, p.swap);
  hd.vox_offset = std::int64_t(load<float>(h + 108, p.swap));
  hd.slope = load<float>(h + 112, p.swap);
  hd.intercept = load<float>(h + 116, p.swap);
  const float qx = load<float>(h + 268, p.swap), qy = load<float>(h + 272, p.swap), qz = load<float>(h + 276, p.swap);
  hd.origin = {qz, qy, qx};
  return p;
}

template <typename T>
std::vector<double> decode(const char* data, std::int64_t n, bool swap) {
  std::vector<double> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) out[std::size_t(i)] = double(load<T>(data + i * std::int64_t(sizeof(T)), swap));
  return out;
}

std::vector<double> voxels(const std::vector<char>& bytes, const Parsed& p, const std::filesystem::path& path) {
  const auto& hd = p.header;
  const std::int64_t n = hd.shape[0] * hd.shape[1] * hd.shape[2];
  int width = 0;
  switch (hd.datatype) {
    case 2: case 256: width = 1; break;
    case 4: case 512: width = 2; break;
    case 8: case 768: case 16: width = 4; break;
    case 64: width = 8; break;
    default: throw FormatError(path.string() + ": unsupported NIfTI datatype " + std::to_string(hd.datatype));
  }
  if (hd.vox_offset < kHeaderSize || std::int64_t(bytes.size()) < hd.vox_offset + n * width) {
    throw FormatError(path.string() + ": voxel payload is truncated");
  }
  const char* d = bytes.data() + hd.vox_offset;
  switch (hd.datatype) {
    case 2: return decode<std::uint8_t>(d, n, false);
    case 256: return decode<std::int8_t>(d, n, false);
    case 4: return decode<std::int16_t>(d, n, p.swap);
    case 512: return decode<std::uint16_t>(d, n, p.swap);
    case 8: return decode<std::int32_t>(d, n, p.swap);
    case 768: return decode<std::uint32_t>(d, n, p.swap);
    case 16: return decode<float>(d, n, p.swap);
    default: return decode<double>(d, n, p.swap);
  }
}

Lattice lattice_of(const NiftiHeader& h) { return Lattice{h.shape, h.spacing, h.origin}; }

}  // namespace

NiftiHeader read_nifti_header(const std::filesystem::path& path) {
  return parse_header(read_all(path), path).header;
}

Volume read_nifti_volume(const std::filesystem::path& path) {
  const auto bytes = read_all(path);
  const auto p = parse_header(bytes, path);
  const auto raw = voxels(bytes, p, path);
  const bool scaled = p.header.slope != 0.0 && std::isfinite(p.header.slope);
  std::vector<float> data(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    data[i] = float(scaled ? raw[i] * p.header.slope + p.header.intercept : raw[i]);
  }
  return Volume(lattice_of(p.header), std::move(data));
}

LabelMask read_nifti_mask(const std::filesystem::path& path, std::optional<int> label) {
  const auto bytes = read_all(path);
  const auto p = parse_header(bytes, path);
  const auto raw = voxels(bytes, p, path);
  std::vector<std::uint8_t> data(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    data[i] = label ? std::uint8_t(std::lround(raw[i]) == *label) : std::uint8_t(raw[i] != 0.0);
  }
  return LabelMask(lattice_of(p.header), std::move(data));
}

}  // namespace maskfill
