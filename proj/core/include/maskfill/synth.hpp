#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "maskfill/volume.hpp"

namespace maskfill {

enum class Primitive { ellipsoid, capsule, lobed };

std::string to_string(Primitive p);
Primitive primitive_from_string(const std::string& s);

/// Generator parameters for one organ-like shape family. Lengths are
/// fractions of the volume side so a family scales with the volume.
struct ShapeFamily {
  std::string id = "A";
  Primitive primitive = Primitive::ellipsoid;
  double size_min = 0.18;  // principal radius range
  double size_max = 0.26;
  /// ellipsoid: semi-axis ratios; capsule: {radius, half-length, unused};
  /// lobed: {lobe radius, lobe offset, lobe count}.
  Vec3 aspect{1.0, 0.8, 0.65};
  /// Radial perturbation amplitude per angular order (order = index + 2).
  std::vector<double> harmonics{0.08, 0.05};
  double max_tilt_deg = 30.0;
  double center_jitter = 0.06;
};

/// Image appearance of a domain. Intensities are in raw scanner units and are
/// expected to pass through normalize_intensity(-200, 400).
struct DomainProfile {
  std::string id = "source";
  double fg_mean = 120.0;
  double fg_std = 60.0;      // organ texture amplitude
  double bg_mean = 40.0;
  double bg_std = 15.0;      // background texture amplitude
  double texture_scale = 1.0;  // smoothing radius of texture, voxels
  double noise_sigma = 10.0;
  double bias_amplitude = 0.0;
  double blur_sigma = 0.0;   // voxels
  bool invert = false;       // x -> 200 - x, i.e. mirrored about the window center
};

void to_json(nlohmann::json& j, const ShapeFamily& f);
void from_json(const nlohmann::json& j, ShapeFamily& f);
void to_json(nlohmann::json& j, const DomainProfile& d);
void from_json(const nlohmann::json& j, DomainProfile& d);

/// Built-in families "A" (ellipsoid), "B" (capsule), "C" (lobed).
ShapeFamily builtin_family(const std::string& id);
/// Built-in domains "source", "shifted", "inverted".
DomainProfile builtin_domain(const std::string& id);

/// Connected single-component mask of the family, occupying 1-20 % of the grid.
LabelMask gen_mask(const ShapeFamily& family, const Lattice& lattice, std::uint64_t seed);
/// Raw-intensity image for a given mask.
Volume gen_image(const LabelMask& mask, const DomainProfile& domain, std::uint64_t seed);
LabeledCase gen_case(const ShapeFamily& family, const DomainProfile& domain, const Lattice& lattice,
                     std::uint64_t seed);

struct Cohort {
  ShapeFamily family;
  DomainProfile domain;
  Lattice lattice;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> case_seeds;
  std::vector<LabeledCase> cases;
  bool labeled = true;  // false: masks are placeholders (unlabeled target data)
};

/// Per-case seed i is derive_seed(seed, i).
Cohort gen_cohort(const ShapeFamily& family, const DomainProfile& domain, const Lattice& lattice, int n,
                  std::uint64_t seed);

/// Copy with normalize_intensity applied to every image.
Cohort normalized(const Cohort& cohort);
std::vector<Volume> images_of(const std::vector<LabeledCase>& cases);
std::vector<LabelMask> masks_of(const std::vector<LabeledCase>& cases);

/// Manifest: {family, domain, lattice, seed, cases: [{id, seed, image, mask}]}.
nlohmann::json cohort_manifest(const Cohort& cohort);
/// Writes every case in native format under `dir` plus `dir/manifest.json`.
void write_cohort(const Cohort& cohort, const std::filesystem::path& dir);
Cohort read_cohort(const std::filesystem::path& dir);

/// 6-connected components.
int component_count(const LabelMask& mask);
LabelMask largest_component(const LabelMask& mask);

struct ShapeDescriptor {
  double volume_fraction = 0.0;
  double elongation = 1.0;  // sqrt of largest / smallest principal variance
};
ShapeDescriptor describe(const LabelMask& mask);

}  // namespace maskfill
