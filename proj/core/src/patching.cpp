#include "maskfill/patching.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

namespace maskfill {

PatchGrid PatchGrid::for_shape(const Index3& shape, int patch_size) {
  if (patch_size < 1) throw InvalidArgument("patch size must be >= 1");
  PatchGrid g;
  g.patch_size = patch_size;
  g.volume_shape = shape;
  for (int a = 0; a < 3; ++a) {
    if (shape[a] < 1 || shape[a] % patch_size != 0) {
      throw ShapeError("volume shape must be divisible by the patch size (resize first)");
    }
    g.grid_dims[a] = shape[a] / patch_size;
  }
  return g;
}

std::int64_t PatchGrid::patch_of(std::int64_t i, std::int64_t j, std::int64_t k) const {
  return ((i / patch_size) * grid_dims[1] + j / patch_size) * grid_dims[2] + k / patch_size;
}

Index3 PatchGrid::patch_coords(std::int64_t patch) const {
  return {patch / (grid_dims[1] * grid_dims[2]), (patch / grid_dims[2]) % grid_dims[1], patch % grid_dims[2]};
}

template <typename T>
PatchSet<T> patchify(std::span<const T> data, const Index3& shape, int patch_size) {
  PatchSet<T> out;
  out.grid = PatchGrid::for_shape(shape, patch_size);
  if (std::int64_t(data.size()) != shape[0] * shape[1] * shape[2]) {
    throw ShapeError("patchify: data size does not match shape");
  }
  out.values.resize(data.size());
  const auto& g = out.grid;
  const std::int64_t P = patch_size;
  std::size_t o = 0;
  for (std::int64_t a = 0; a < g.grid_dims[0]; ++a)
    for (std::int64_t b = 0; b < g.grid_dims[1]; ++b)
      for (std::int64_t c = 0; c < g.grid_dims[2]; ++c)
        for (std::int64_t u = 0; u < P; ++u)
          for (std::int64_t v = 0; v < P; ++v) {
            const std::int64_t base = ((a * P + u) * shape[1] + (b * P + v)) * shape[2] + c * P;
            for (std::int64_t w = 0; w < P; ++w) out.values[o++] = data[std::size_t(base + w)];
          }
  return out;
}

template <typename T>
std::vector<T> unpatchify(const PatchSet<T>& patches) {
  const auto& g = patches.grid;
  const auto& shape = g.volume_shape;
  if (std::int64_t(patches.values.size()) != shape[0] * shape[1] * shape[2]) {
    throw ShapeError("unpatchify: patch payload does not cover the grid");
  }
  std::vector<T> out(patches.values.size());
  const std::int64_t P = g.patch_size;
  std::size_t o = 0;
  for (std::int64_t a = 0; a < g.grid_dims[0]; ++a)
    for (std::int64_t b = 0; b < g.grid_dims[1]; ++b)
      for (std::int64_t c = 0; c < g.grid_dims[2]; ++c)
        for (std::int64_t u = 0; u < P; ++u)
          for (std::int64_t v = 0; v < P; ++v) {
            const std::int64_t base = ((a * P + u) * shape[1] + (b * P + v)) * shape[2] + c * P;
            for (std::int64_t w = 0; w < P; ++w) out[std::size_t(base + w)] = patches.values[o++];
          }
  return out;
}

template PatchSet<float> patchify<float>(std::span<const float>, const Index3&, int);
template PatchSet<double> patchify<double>(std::span<const double>, const Index3&, int);
template PatchSet<std::uint8_t> patchify<std::uint8_t>(std::span<const std::uint8_t>, const Index3&, int);
template std::vector<float> unpatchify<float>(const PatchSet<float>&);
template std::vector<double> unpatchify<double>(const PatchSet<double>&);
template std::vector<std::uint8_t> unpatchify<std::uint8_t>(const PatchSet<std::uint8_t>&);

PatchSet<std::uint8_t> patchify(const LabelMask& m, int patch_size) {
  return patchify<std::uint8_t>(m.values(), m.shape(), patch_size);
}

PatchSet<float> patchify(const SoftMask& m, int patch_size) {
  return patchify<float>(m.values(), m.shape(), patch_size);
}

LabelMask unpatchify_mask(const PatchSet<std::uint8_t>& patches, const Lattice& lattice) {
  if (lattice.shape != patches.grid.volume_shape) throw ShapeError("unpatchify: lattice shape mismatch");
  return LabelMask(lattice, unpatchify(patches));
}

SoftMask unpatchify_soft(const PatchSet<float>& patches, const Lattice& lattice) {
  if (lattice.shape != patches.grid.volume_shape) throw ShapeError("unpatchify: lattice shape mismatch");
  return SoftMask(lattice, unpatchify(patches));
}

std::vector<std::int64_t> MaskPlan::visible() const {
  std::vector<std::int64_t> out;
  out.reserve(std::size_t(num_patches) - corrupted.size());
  auto it = corrupted.begin();
  for (std::int64_t p = 0; p < num_patches; ++p) {
    if (it != corrupted.end() && *it == p) {
      ++it;
      continue;
    }
    out.push_back(p);
  }
  return out;
}

bool MaskPlan::is_corrupted(std::int64_t patch) const {
  return std::binary_search(corrupted.begin(), corrupted.end(), patch);
}

MaskPlan MaskPlan::none(std::int64_t num_patches) {
  MaskPlan p;
  p.num_patches = num_patches;
  return p;
}

std::int64_t corrupted_count(double ratio, std::int64_t organ_patches) {
  if (organ_patches < 2) return 0;
  return std::min<std::int64_t>(organ_patches,
                                static_cast<std::int64_t>(std::floor(ratio * double(organ_patches) + 0.5)));
}

MaskPlan plan_mask(const LabelMask& m, const PatchGrid& grid, double ratio, std::uint64_t seed) {
  if (m.shape() != grid.volume_shape) throw ShapeError("plan_mask: mask is not on the patch grid lattice");
  if (!(ratio >= 0.0 && ratio < 1.0)) throw InvalidArgument("mask ratio must lie in [0, 1)");
  std::vector<std::uint8_t> has_organ(std::size_t(grid.num_patches()), 0);
  const auto& n = m.shape();
  for (std::int64_t i = 0; i < n[0]; ++i)
    for (std::int64_t j = 0; j < n[1]; ++j)
      for (std::int64_t k = 0; k < n[2]; ++k)
        if (m.at(i, j, k)) has_organ[std::size_t(grid.patch_of(i, j, k))] = 1;

  MaskPlan plan;
  plan.ratio = ratio;
  plan.seed = seed;
  plan.num_patches = grid.num_patches();
  for (std::int64_t p = 0; p < plan.num_patches; ++p)
    if (has_organ[std::size_t(p)]) plan.organ_patches.push_back(p);
  if (plan.organ_patches.empty()) throw EmptyMaskError("plan_mask: no patch contains foreground");

  const std::int64_t k = corrupted_count(ratio, std::int64_t(plan.organ_patches.size()));
  std::vector<std::int64_t> pool = plan.organ_patches;
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first k entries are a uniform sample without replacement.
  for (std::int64_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::int64_t> pick(i, std::int64_t(pool.size()) - 1);
    std::swap(pool[std::size_t(i)], pool[std::size_t(pick(rng))]);
  }
  plan.corrupted.assign(pool.begin(), pool.begin() + k);
  std::sort(plan.corrupted.begin(), plan.corrupted.end());
  return plan;
}

MaskPlan plan_mask(const SoftMask& m, const PatchGrid& grid, double ratio, std::uint64_t seed) {
  return plan_mask(binarize(m, 0.5f), grid, ratio, seed);
}

template <typename T>
PlannedPatches<T> apply_plan(const PatchSet<T>& patches, const MaskPlan& plan) {
  if (plan.num_patches != patches.grid.num_patches() || patches.rows() != plan.num_patches) {
    throw InvalidArgument("apply_plan: plan does not match the patch grid");
  }
  PlannedPatches<T> out;
  out.visible_indices = plan.visible();
  out.corrupted_indices = plan.corrupted;
  const auto pv = std::size_t(patches.grid.patch_voxels());
  out.visible_values.reserve(out.visible_indices.size() * pv);
  for (auto p : out.visible_indices) {
    auto r = patches.row(p);
    out.visible_values.insert(out.visible_values.end(), r.begin(), r.end());
  }
  return out;
}

template PlannedPatches<float> apply_plan<float>(const PatchSet<float>&, const MaskPlan&);
template PlannedPatches<double> apply_plan<double>(const PatchSet<double>&, const MaskPlan&);
template PlannedPatches<std::uint8_t> apply_plan<std::uint8_t>(const PatchSet<std::uint8_t>&, const MaskPlan&);

void to_json(nlohmann::json& j, const MaskPlan& plan) {
  j = nlohmann::json{{"ratio", plan.ratio},
                     {"seed", plan.seed},
                     {"num_patches", plan.num_patches},
                     {"organ_patches", plan.organ_patches},
                     {"corrupted", plan.corrupted}};
}

void from_json(const nlohmann::json& j, MaskPlan& plan) {
  plan.ratio = j.at("ratio").get<double>();
  plan.seed = j.at("seed").get<std::uint64_t>();
  plan.corrupted = j.at("corrupted").get<std::vector<std::int64_t>>();
  plan.num_patches = j.value("num_patches", std::int64_t{0});
  plan.organ_patches = j.value("organ_patches", std::vector<std::int64_t>{});
  std::sort(plan.corrupted.begin(), plan.corrupted.end());
}

}  // namespace maskfill
