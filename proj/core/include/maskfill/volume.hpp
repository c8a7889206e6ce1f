#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "maskfill/errors.hpp"

namespace maskfill {

using Index3 = std::array<std::int64_t, 3>;
using Vec3 = std::array<double, 3>;

/// Physical placement of a dense 3D grid. Axis 2 is the fastest-varying axis
/// of the row-major payload; spacing and origin follow the same axis order.
/// `origin` is the physical position (mm) of the center of voxel (0,0,0).
struct Lattice {
  Index3 shape{1, 1, 1};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};

  std::int64_t voxel_count() const { return shape[0] * shape[1] * shape[2]; }
  std::int64_t index(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return (i * shape[1] + j) * shape[2] + k;
  }
  bool same_grid(const Lattice& other) const {
    return shape == other.shape && spacing == other.spacing;
  }
  void validate() const;

  static Lattice cube(std::int64_t n, double spacing = 1.0) {
    return Lattice{{n, n, n}, {spacing, spacing, spacing}, {0.0, 0.0, 0.0}};
  }
};

struct ImageKind {};
struct LabelKind {};
struct SoftKind {};

/// Dense scalar field on a lattice. The Kind tag keeps images, binary label
/// masks and soft (probability) masks distinct at the type level.
template <typename T, typename Kind>
class Grid {
 public:
  using value_type = T;

  Grid() = default;
  explicit Grid(const Lattice& lattice, T fill = T{})
      : lattice_(lattice), data_(checked_count(lattice), fill) {}
  Grid(const Lattice& lattice, std::vector<T> data) : lattice_(lattice), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != checked_count(lattice_)) {
      throw ShapeError("grid payload size does not match lattice shape");
    }
    check_values();
  }

  const Lattice& lattice() const { return lattice_; }
  const Index3& shape() const { return lattice_.shape; }
  const Vec3& spacing() const { return lattice_.spacing; }
  const Vec3& origin() const { return lattice_.origin; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

  std::span<const T> values() const { return data_; }
  std::span<T> mutable_values() { return data_; }
  const std::vector<T>& vector() const { return data_; }

  T operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }
  T at(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return data_[static_cast<std::size_t>(lattice_.index(i, j, k))];
  }
  void set(std::int64_t i, std::int64_t j, std::int64_t k, T v) {
    data_[static_cast<std::size_t>(lattice_.index(i, j, k))] = v;
  }

  void set_origin(const Vec3& origin) { lattice_.origin = origin; }

  friend bool operator==(const Grid& a, const Grid& b) {
    return a.lattice_.shape == b.lattice_.shape && a.lattice_.spacing == b.lattice_.spacing &&
           a.lattice_.origin == b.lattice_.origin && a.data_ == b.data_;
  }

 private:
  static std::int64_t checked_count(const Lattice& lattice) {
    lattice.validate();
    return lattice.voxel_count();
  }
  void check_values() const;

  Lattice lattice_;
  std::vector<T> data_;
};

using Volume = Grid<float, ImageKind>;
using LabelMask = Grid<std::uint8_t, LabelKind>;
using SoftMask = Grid<float, SoftKind>;

/// Image with its paired label; `id` names the case in reports and manifests.
struct LabeledCase {
  std::string id;
  Volume image;
  LabelMask mask;
};

template <typename T, typename Kind>
void Grid<T, Kind>::check_values() const {
  if constexpr (std::is_same_v<Kind, LabelKind>) {
    for (auto v : data_) {
      if (v > 1) throw InvalidArgument("label mask values must be 0 or 1");
    }
  } else if constexpr (std::is_same_v<Kind, SoftKind>) {
    for (auto v : data_) {
      if (!(v >= T(0) && v <= T(1))) throw InvalidArgument("soft mask values must lie in [0, 1]");
    }
  }
}

/// Threshold a soft mask (p >= threshold -> 1).
LabelMask binarize(const SoftMask& soft, float threshold = 0.5f);
SoftMask to_soft(const LabelMask& mask);
std::int64_t foreground_count(const LabelMask& mask);

/// Requires identical shape and spacing; throws ShapeError otherwise.
void require_same_grid(const Lattice& a, const Lattice& b, const char* what);

}  // namespace maskfill
