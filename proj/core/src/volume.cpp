#include "maskfill/volume.hpp"

#include <algorithm>

namespace maskfill {

void Lattice::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (shape[a] < 1) throw InvalidArgument("lattice dimensions must be >= 1");
    if (!(spacing[a] > 0.0)) throw InvalidArgument("lattice spacing must be positive");
  }
}

LabelMask binarize(const SoftMask& soft, float threshold) {
  std::vector<std::uint8_t> out(soft.values().size());
  std::transform(soft.values().begin(), soft.values().end(), out.begin(),
                 [threshold](float p) { return static_cast<std::uint8_t>(p >= threshold ? 1 : 0); });
  return LabelMask(soft.lattice(), std::move(out));
}

SoftMask to_soft(const LabelMask& mask) {
  std::vector<float> out(mask.values().begin(), mask.values().end());
  return SoftMask(mask.lattice(), std::move(out));
}

std::int64_t foreground_count(const LabelMask& mask) {
  return std::count(mask.values().begin(), mask.values().end(), std::uint8_t{1});
}

void require_same_grid(const Lattice& a, const Lattice& b, const char* what) {
  if (a.shape != b.shape || a.spacing != b.spacing) {
    throw ShapeError(std::string(what) + ": lattices differ");
  }
}

}  // namespace maskfill
