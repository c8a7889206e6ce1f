#include "maskfill/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "maskfill/preprocess.hpp"
#include "maskfill/seeding.hpp"
#include "maskfill/volume_io.hpp"

namespace maskfill {
namespace {

using nlohmann::json;
using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

Eigen::Vector3d random_unit(Rng& rng) {
  std::normal_distribution<double> n;
  Eigen::Vector3d v;
  do {
    v = {n(rng), n(rng), n(rng)};
  } while (v.norm() < 1e-9);
  return v.normalized();
}

Eigen::Matrix3d random_rotation(Rng& rng, double max_deg) {
  const double r = max_deg * std::numbers::pi / 180.0;
  const double a = uniform(rng, -r, r), b = uniform(rng, -r, r), c = uniform(rng, -r, r);
  return (Eigen::AngleAxisd(c, Eigen::Vector3d::UnitZ()) * Eigen::AngleAxisd(b, Eigen::Vector3d::UnitY()) *
          Eigen::AngleAxisd(a, Eigen::Vector3d::UnitX()))
      .toRotationMatrix();
}

struct Harmonic {
  Eigen::Vector3d axis;
  double order, amplitude, phase;
};

// One shape draw: q (rotated, centered, side-fraction coords) -> inside?
struct ShapeDraw {
  Primitive primitive;
  Eigen::Vector3d center;
  Eigen::Matrix3d rotation;
  Eigen::Vector3d axes;  // ellipsoid semi-axes / capsule (radius, half length)
  std::vector<Eigen::Vector3d> lobe_centers;
  std::vector<double> lobe_radii;
  std::vector<Harmonic> harmonics;

  double distance(const Eigen::Vector3d& q) const {
    switch (primitive) {
      case Primitive::ellipsoid:
        return q.cwiseQuotient(axes).norm();
      case Primitive::capsule: {
        const double x = std::clamp(q.x(), -axes.y(), axes.y());
        return (q - Eigen::Vector3d(x, 0, 0)).norm() / axes.x();
      }
      case Primitive::lobed: {
        double d = q.norm() / axes.x();
        for (std::size_t l = 0; l < lobe_centers.size(); ++l) d = std::min(d, (q - lobe_centers[l]).norm() / lobe_radii[l]);
        return d;
      }
    }
    return 1e9;
  }

  double threshold(const Eigen::Vector3d& q) const {
    const double n = q.norm();
    if (n < 1e-12) return 1.0;
    const Eigen::Vector3d u = q / n;
    double t = 1.0;
    for (const auto& h : harmonics) t += h.amplitude * std::sin(h.order * std::numbers::pi / 2 * h.axis.dot(u) + h.phase);
    return t;
  }
};

ShapeDraw draw_shape(const ShapeFamily& f, Rng& rng) {
  ShapeDraw s;
  s.primitive = f.primitive;
  s.center = {uniform(rng, -f.center_jitter, f.center_jitter), uniform(rng, -f.center_jitter, f.center_jitter),
              uniform(rng, -f.center_jitter, f.center_jitter)};
  s.rotation = random_rotation(rng, f.max_tilt_deg);
  const double size = uniform(rng, f.size_min, f.size_max);
  switch (f.primitive) {
    case Primitive::ellipsoid:
      for (int i = 0; i < 3; ++i) s.axes[i] = size * f.aspect[std::size_t(i)] * uniform(rng, 0.9, 1.1);
      break;
    case Primitive::capsule:
      s.axes = {size * f.aspect[0] * uniform(rng, 0.9, 1.1), size * f.aspect[1] * uniform(rng, 0.9, 1.1), 0.0};
      break;
    case Primitive::lobed: {
      s.axes = {size * f.aspect[0] * uniform(rng, 0.9, 1.1), 0.0, 0.0};
      const int lobes = std::max(2, int(std::lround(f.aspect[2])));
      for (int l = 0; l < lobes; ++l) {
        s.lobe_centers.push_back(random_unit(rng) * size * f.aspect[1]);
        s.lobe_radii.push_back(s.axes.x() * uniform(rng, 0.7, 1.0));
      }
      break;
    }
  }
  for (std::size_t k = 0; k < f.harmonics.size(); ++k) {
    for (int term = 0; term < 2; ++term) {
      s.harmonics.push_back({random_unit(rng), double(k + 2), f.harmonics[k] * uniform(rng, 0.5, 1.0),
                             uniform(rng, 0.0, 2 * std::numbers::pi)});
    }
  }
  return s;
}

LabelMask rasterize(const ShapeDraw& s, const Lattice& lat) {
  LabelMask m(lat, 0);
  auto vals = m.mutable_values();
  const auto& n = lat.shape;
  for (std::int64_t i = 0; i < n[0]; ++i)
    for (std::int64_t j = 0; j < n[1]; ++j)
      for (std::int64_t k = 0; k < n[2]; ++k) {
        const Eigen::Vector3d p((double(i) + 0.5) / double(n[0]) - 0.5, (double(j) + 0.5) / double(n[1]) - 0.5,
                                (double(k) + 0.5) / double(n[2]) - 0.5);
        const Eigen::Vector3d q = s.rotation.transpose() * (p - s.center);
        if (s.distance(q) <= s.threshold(q)) vals[std::size_t(lat.index(i, j, k))] = 1;
      }
  return m;
}

// Labels 6-connected components; returns per-voxel labels (0 = background) and sizes.
std::vector<std::int64_t> label_components(const LabelMask& m, std::vector<int>& labels) {
  const auto& n = m.shape();
  const auto v = m.values();
  labels.assign(v.size(), 0);
  std::vector<std::int64_t> sizes{0};
  std::vector<std::int64_t> stack;
  for (std::int64_t start = 0; start < std::int64_t(v.size()); ++start) {
    if (!v[std::size_t(start)] || labels[std::size_t(start)]) continue;
    const int id = int(sizes.size());
    sizes.push_back(0);
    stack.push_back(start);
    labels[std::size_t(start)] = id;
    while (!stack.empty()) {
      const std::int64_t idx = stack.back();
      stack.pop_back();
      ++sizes.back();
      const std::int64_t k = idx % n[2], j = (idx / n[2]) % n[1], i = idx / (n[1] * n[2]);
      const std::int64_t nb[6][3] = {{i - 1, j, k}, {i + 1, j, k}, {i, j - 1, k},
                                     {i, j + 1, k}, {i, j, k - 1}, {i, j, k + 1}};
      for (const auto& c : nb) {
        if (c[0] < 0 || c[1] < 0 || c[2] < 0 || c[0] >= n[0] || c[1] >= n[1] || c[2] >= n[2]) continue;
        const std::int64_t q = m.lattice().index(c[0], c[1], c[2]);
        if (v[std::size_t(q)] && !labels[std::size_t(q)]) {
          labels[std::size_t(q)] = id;
          stack.push_back(q);
        }
      }
    }
  }
  return sizes;
}

// Separable Gaussian smoothing with renormalized weights at the borders.
void smooth(std::vector<double>& f, const Index3& n, double sigma) {
  if (sigma <= 0) return;
  const int r = std::max(1, int(std::ceil(2.5 * sigma)));
  std::vector<double> kernel(std::size_t(2 * r + 1));
  for (int t = -r; t <= r; ++t) kernel[std::size_t(t + r)] = std::exp(-0.5 * t * t / (sigma * sigma));
  const std::int64_t strides[3] = {n[1] * n[2], n[2], 1};
  std::vector<double> tmp(f.size());
  for (int axis = 0; axis < 3; ++axis) {
    for (std::int64_t idx = 0; idx < std::int64_t(f.size()); ++idx) {
      const std::int64_t pos = (idx / strides[axis]) % n[std::size_t(axis)];
      double acc = 0.0, wsum = 0.0;
      for (int t = -r; t <= r; ++t) {
        const std::int64_t q = pos + t;
        if (q < 0 || q >= n[std::size_t(axis)]) continue;
        acc += kernel[std::size_t(t + r)] * f[std::size_t(idx + t * strides[axis])];
        wsum += kernel[std::size_t(t + r)];
      }
      tmp[std::size_t(idx)] = acc / wsum;
    }
    std::swap(f, tmp);
  }
}

// Zero-mean, unit-variance smoothed white noise.
std::vector<double> texture_field(const Index3& n, double sigma, Rng& rng) {
  std::normal_distribution<double> nd;
  std::vector<double> f(std::size_t(n[0] * n[1] * n[2]));
  for (auto& x : f) x = nd(rng);
  smooth(f, n, sigma);
  double mean = 0.0, sq = 0.0;
  for (double x : f) mean += x;
  mean /= double(f.size());
  for (double x : f) sq += (x - mean) * (x - mean);
  const double sd = std::sqrt(sq / double(f.size()));
  for (auto& x : f) x = (x - mean) / (sd > 0 ? sd : 1.0);
  return f;
}

}  // namespace

std::string to_string(Primitive p) {
  switch (p) {
    case Primitive::ellipsoid: return "ellipsoid";
    case Primitive::capsule: return "capsule";
    case Primitive::lobed: return "lobed";
  }
  return "ellipsoid";
}

Primitive primitive_from_string(const std::string& s) {
  if (s == "ellipsoid") return Primitive::ellipsoid;
  if (s == "capsule") return Primitive::capsule;
  if (s == "lobed") return Primitive::lobed;
  throw InvalidArgument("unknown primitive: " + s);
}

void to_json(json& j, const ShapeFamily& f) {
  j = json{{"id", f.id},
           {"primitive", to_string(f.primitive)},
           {"size_min", f.size_min},
           {"size_max", f.size_max},
           {"aspect", f.aspect},
           {"harmonics", f.harmonics},
           {"max_tilt_deg", f.max_tilt_deg},
           {"center_jitter", f.center_jitter}};
}

void from_json(const json& j, ShapeFamily& f) {
  ShapeFamily d = builtin_family(j.value("id", std::string("A")) == "B"   ? "B"
                                 : j.value("id", std::string("A")) == "C" ? "C"
                                                                          : "A");
  f.id = j.value("id", d.id);
  f.primitive = primitive_from_string(j.value("primitive", to_string(d.primitive)));
  f.size_min = j.value("size_min", d.size_min);
  f.size_max = j.value("size_max", d.size_max);
  f.aspect = j.value("aspect", d.aspect);
  f.harmonics = j.value("harmonics", d.harmonics);
  f.max_tilt_deg = j.value("max_tilt_deg", d.max_tilt_deg);
  f.center_jitter = j.value("center_jitter", d.center_jitter);
}

void to_json(json& j, const DomainProfile& d) {
  j = json{{"id", d.id},
           {"fg_mean", d.fg_mean},
           {"fg_std", d.fg_std},
           {"bg_mean", d.bg_mean},
           {"bg_std", d.bg_std},
           {"texture_scale", d.texture_scale},
           {"noise_sigma", d.noise_sigma},
           {"bias_amplitude", d.bias_amplitude},
           {"blur_sigma", d.blur_sigma},
           {"invert", d.invert}};
}

void from_json(const json& j, DomainProfile& d) {
  const std::string id = j.value("id", std::string("source"));
  DomainProfile b = (id == "shifted" || id == "inverted") ? builtin_domain(id) : builtin_domain("source");
  d.id = id;
  d.fg_mean = j.value("fg_mean", b.fg_mean);
  d.fg_std = j.value("fg_std", b.fg_std);
  d.bg_mean = j.value("bg_mean", b.bg_mean);
  d.bg_std = j.value("bg_std", b.bg_std);
  d.texture_scale = j.value("texture_scale", b.texture_scale);
  d.noise_sigma = j.value("noise_sigma", b.noise_sigma);
  d.bias_amplitude = j.value("bias_amplitude", b.bias_amplitude);
  d.blur_sigma = j.value("blur_sigma", b.blur_sigma);
  d.invert = j.value("invert", b.invert);
}

ShapeFamily builtin_family(const std::string& id) {
  ShapeFamily f;
  f.id = id;
  if (id == "A") return f;
  if (id == "B") {
    f.primitive = Primitive::capsule;
    f.size_min = 0.20;
    f.size_max = 0.25;
    f.aspect = {0.45, 1.1, 0.0};
    f.harmonics = {0.06, 0.04};
    return f;
  }
  if (id == "C") {
    f.primitive = Primitive::lobed;
    f.size_min = 0.15;
    f.size_max = 0.19;
    f.aspect = {0.75, 1.0, 3.0};
    f.harmonics = {0.05};
    return f;
  }
  throw InvalidArgument("unknown shape family: " + id);
}

DomainProfile builtin_domain(const std::string& id) {
  DomainProfile d;
  d.id = id;
  if (id == "source") return d;
  if (id == "shifted") {
    d.fg_mean = 85.0;
    d.noise_sigma = 20.0;
    d.blur_sigma = 0.5;
    return d;
  }
  if (id == "inverted") {
    d.invert = true;
    d.noise_sigma = 15.0;
    return d;
  }
  throw InvalidArgument("unknown domain profile: " + id);
}

LabelMask gen_mask(const ShapeFamily& family, const Lattice& lattice, std::uint64_t seed) {
  lattice.validate();
  Rng rng(seed);
  const double total = double(lattice.voxel_count());
  for (int attempt = 0; attempt < 64; ++attempt) {
    LabelMask m = largest_component(rasterize(draw_shape(family, rng), lattice));
    const double frac = double(foreground_count(m)) / total;
    if (frac >= 0.01 && frac <= 0.20) return m;
  }
  throw InvalidArgument("shape family " + family.id + " cannot produce a 1-20% mask on this lattice");
}

Volume gen_image(const LabelMask& mask, const DomainProfile& d, std::uint64_t seed) {
  Rng rng(seed);
  const auto& n = mask.shape();
  const auto fg_tex = texture_field(n, d.texture_scale, rng);
  const auto bg_tex = texture_field(n, d.texture_scale, rng);
  const auto m = mask.values();
  std::vector<double> img(m.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    img[i] = m[i] ? d.fg_mean + d.fg_std * fg_tex[i] : d.bg_mean + d.bg_std * bg_tex[i];
  }
  smooth(img, n, d.blur_sigma);
  const Eigen::Vector3d freq = random_unit(rng) * uniform(rng, 0.6, 1.2);
  const double phase = uniform(rng, 0.0, 2 * std::numbers::pi);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<float> out(img.size());
  for (std::int64_t i = 0; i < n[0]; ++i)
    for (std::int64_t j = 0; j < n[1]; ++j)
      for (std::int64_t k = 0; k < n[2]; ++k) {
        const std::size_t idx = std::size_t(mask.lattice().index(i, j, k));
        const Eigen::Vector3d p(double(i) / double(n[0]), double(j) / double(n[1]), double(k) / double(n[2]));
        double x = img[idx] + d.bias_amplitude * std::sin(2 * std::numbers::pi * freq.dot(p) + phase);
        x += d.noise_sigma * noise(rng);
        if (d.invert) x = 200.0 - x;
        out[idx] = float(x);
      }
  return Volume(mask.lattice(), std::move(out));
}

LabeledCase gen_case(const ShapeFamily& family, const DomainProfile& domain, const Lattice& lattice,
                     std::uint64_t seed) {
  LabeledCase c;
  c.id = family.id + "_" + domain.id + "_" + std::to_string(seed % 1000000);
  c.mask = gen_mask(family, lattice, derive_seed(seed, 1));
  c.image = gen_image(c.mask, domain, derive_seed(seed, 2));
  return c;
}

Cohort gen_cohort(const ShapeFamily& family, const DomainProfile& domain, const Lattice& lattice, int n,
                  std::uint64_t seed) {
  if (n < 1) throw InvalidArgument("gen_cohort: n must be >= 1");
  Cohort c{family, domain, lattice, seed, {}, {}};
  for (int i = 0; i < n; ++i) {
    const auto s = derive_seed(seed, std::uint64_t(i));
    c.case_seeds.push_back(s);
    auto lc = gen_case(family, domain, lattice, s);
    char buf[16];
    std::snprintf(buf, sizeof(buf), "case_%03d", i);
    lc.id = buf;
    c.cases.push_back(std::move(lc));
  }
  return c;
}

Cohort normalized(const Cohort& cohort) {
  Cohort out = cohort;
  for (auto& c : out.cases) c.image = normalize_intensity(c.image);
  return out;
}

std::vector<Volume> images_of(const std::vector<LabeledCase>& cases) {
  std::vector<Volume> v;
  for (const auto& c : cases) v.push_back(c.image);
  return v;
}

std::vector<LabelMask> masks_of(const std::vector<LabeledCase>& cases) {
  std::vector<LabelMask> v;
  for (const auto& c : cases) v.push_back(c.mask);
  return v;
}

json cohort_manifest(const Cohort& cohort) {
  json cases = json::array();
  for (std::size_t i = 0; i < cohort.cases.size(); ++i) {
    const auto& id = cohort.cases[i].id;
    cases.push_back({{"id", id},
                     {"seed", cohort.case_seeds.at(i)},
                     {"image", "images/" + id + ".vol.json"},
                     {"mask", "masks/" + id + ".vol.json"}});
  }
  return json{{"family", cohort.family},
              {"domain", cohort.domain},
              {"lattice", {{"shape", cohort.lattice.shape}, {"spacing", cohort.lattice.spacing}, {"origin", cohort.lattice.origin}}},
              {"seed", cohort.seed},
              {"labeled", cohort.labeled},
              {"cases", cases}};
}

void write_cohort(const Cohort& cohort, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const json manifest = cohort_manifest(cohort);
  for (std::size_t i = 0; i < cohort.cases.size(); ++i) {
    save_volume(dir / manifest["cases"][i]["image"].get<std::string>(), cohort.cases[i].image);
    save_mask(dir / manifest["cases"][i]["mask"].get<std::string>(), cohort.cases[i].mask);
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

Cohort read_cohort(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("no manifest.json in " + dir.string());
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad cohort manifest: ") + e.what());
  }
  Cohort c;
  c.family = m.at("family").get<ShapeFamily>();
  c.domain = m.at("domain").get<DomainProfile>();
  c.lattice.shape = m.at("lattice").at("shape").get<Index3>();
  c.lattice.spacing = m.at("lattice").at("spacing").get<Vec3>();
  c.lattice.origin = m.at("lattice").at("origin").get<Vec3>();
  c.seed = m.at("seed").get<std::uint64_t>();
  c.labeled = m.value("labeled", true);
  for (const auto& e : m.at("cases")) {
    LabeledCase lc;
    lc.id = e.at("id").get<std::string>();
    lc.image = load_volume(dir / e.at("image").get<std::string>());
    lc.mask = load_mask(dir / e.at("mask").get<std::string>());
    c.case_seeds.push_back(e.at("seed").get<std::uint64_t>());
    c.cases.push_back(std::move(lc));
  }
  if (c.cases.empty()) throw EmptyDatasetError("cohort manifest lists no cases");
  return c;
}

int component_count(const LabelMask& mask) {
  std::vector<int> labels;
  return int(label_components(mask, labels).size()) - 1;
}

LabelMask largest_component(const LabelMask& mask) {
  std::vector<int> labels;
  const auto sizes = label_components(mask, labels);
  if (sizes.size() <= 1) return mask;
  const int best = int(std::max_element(sizes.begin() + 1, sizes.end()) - sizes.begin());
  std::vector<std::uint8_t> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = labels[i] == best ? 1 : 0;
  return LabelMask(mask.lattice(), std::move(out));
}

ShapeDescriptor describe(const LabelMask& mask) {
  ShapeDescriptor d;
  const auto& n = mask.shape();
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  Eigen::Matrix3d second = Eigen::Matrix3d::Zero();
  double count = 0;
  for (std::int64_t i = 0; i < n[0]; ++i)
    for (std::int64_t j = 0; j < n[1]; ++j)
      for (std::int64_t k = 0; k < n[2]; ++k) {
        if (!mask.at(i, j, k)) continue;
        const Eigen::Vector3d p{double(i), double(j), double(k)};
        mean += p;
        second += p * p.transpose();
        count += 1;
      }
  d.volume_fraction = count / double(mask.size());
  if (count < 2) return d;
  mean /= count;
  const Eigen::Matrix3d cov = second / count - mean * mean.transpose();
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
  const auto ev = es.eigenvalues();
  d.elongation = std::sqrt(ev.maxCoeff() / std::max(ev.minCoeff(), 1e-12));
  return d;
}

}  // namespace maskfill
