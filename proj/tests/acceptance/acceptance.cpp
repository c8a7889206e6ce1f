// Acceptance run: one PASS/FAIL line per criterion on stdout, progress on stderr.
// Usage: maskfill_acceptance [benchmark.json] [work-dir]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "maskfill/adaptation.hpp"
#include "maskfill/checkpoint.hpp"
#include "maskfill/config.hpp"
#include "maskfill/eval.hpp"
#include "maskfill/losses.hpp"
#include "maskfill/patching.hpp"
#include "maskfill/synth.hpp"
#include "maskfill/volume_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace maskfill;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void progress(const char* fmt, auto... args) {
  std::fprintf(stderr, fmt, args...);
  std::fputc('\n', stderr);
}

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("failed: ") + what;
    }
  }
  void note(const std::string& s) { detail += (detail.empty() ? "" : "; ") + s; }
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

int failures = 0;

// `budget` > 0 makes the criterion's runtime limit part of the verdict.
void emit(int n, const char* title, const std::function<Verdict()>& body, double budget = 0.0) {
  const auto t0 = Clock::now();
  Verdict v;
  try {
    v = body();
  } catch (const std::exception& e) {
    v.pass = false;
    v.detail = std::string("exception: ") + e.what();
  }
  const double elapsed = seconds_since(t0);
  if (budget > 0.0) v.require(elapsed < budget, fmt("runtime < %.0f s", budget));
  if (!v.pass) ++failures;
  std::printf("criterion %2d %-24s %s  %s [%.1f s]\n", n, title, v.pass ? "PASS" : "FAIL", v.detail.c_str(),
              elapsed);
  std::fflush(stdout);
}

double rel_err(long double got, long double want) {
  if (want == 0.0L) return got == 0.0L ? 0.0 : INFINITY;
  return double(std::fabs(got - want) / std::fabs(want));
}

// ---------------------------------------------------------------- oracles

// Brute-force voxel loops in long double.
long double oracle_dice(const std::vector<long double>& p, const std::vector<long double>& r) {
  long double inter = 0, sp = 0, sr = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * r[i];
    sp += p[i];
    sr += r[i];
  }
  return -2.0L * inter / (sp + sr + kDiceEpsilon);
}

// Same quotient without the stabilizer; undefined for two empty masks.
long double oracle_dice_plain(const std::vector<long double>& p, const std::vector<long double>& r) {
  long double inter = 0, denom = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * r[i];
    denom += p[i] + r[i];
  }
  return -2.0L * inter / denom;
}

long double oracle_mse(const std::vector<long double>& g, const std::vector<long double>& r) {
  long double s = 0;
  for (std::size_t i = 0; i < g.size(); ++i) s += (g[i] - r[i]) * (g[i] - r[i]);
  return s / (long double)g.size();
}

template <typename G>
std::vector<long double> widen(const G& g) {
  std::vector<long double> out;
  for (auto v : g.values()) out.push_back((long double)v);
  return out;
}

LabelMask bits_mask(unsigned bits) {
  std::vector<std::uint8_t> v(8);
  for (int i = 0; i < 8; ++i) v[std::size_t(i)] = (bits >> i) & 1u;
  return LabelMask(Lattice::cube(2), v);
}

SoftMask random_soft(std::mt19937_64& rng, std::int64_t n) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  const float sparsity = u(rng);
  std::vector<float> v(std::size_t(n * n * n));
  for (auto& x : v) x = u(rng) < sparsity ? 0.0f : u(rng);
  return SoftMask(Lattice::cube(n), v);
}

LabelMask random_label(std::mt19937_64& rng, std::int64_t n, double p) {
  std::bernoulli_distribution b(p);
  std::vector<std::uint8_t> v(std::size_t(n * n * n));
  for (auto& x : v) x = b(rng) ? 1 : 0;
  return LabelMask(Lattice::cube(n), v);
}

Verdict loss_oracles() {
  Verdict v;
  double worst = 0.0, worst_plain = 0.0;
  std::int64_t checks = 0;
  auto track = [&](double e) {
    worst = std::max(worst, e);
    ++checks;
  };

  // Every pair of binary 2^3 masks.
  std::vector<LabelMask> all;
  std::vector<SoftMask> all_soft;
  std::vector<std::vector<long double>> all_wide;
  for (unsigned b = 0; b < 256; ++b) {
    all.push_back(bits_mask(b));
    all_soft.push_back(to_soft(all.back()));
    all_wide.push_back(widen(all.back()));
  }
  const double lambdas[] = {0.0, 0.5, 1.0, 2.0};
  for (unsigned a = 0; a < 256; ++a) {
    for (unsigned b = 0; b < 256; ++b) {
      const auto want = oracle_dice(all_wide[a], all_wide[b]);
      track(rel_err(dice_loss(all_soft[a], all[b]), want));
      track(rel_err(dice_loss(all_soft[a], all_soft[b]), want));
      if (a | b) worst_plain = std::max(worst_plain, rel_err(dice_loss(all_soft[a], all[b]), oracle_dice_plain(all_wide[a], all_wide[b])));
      track(rel_err(mlm_mse_loss(all[a], all_soft[b]), oracle_mse(all_wide[a], all_wide[b])));
      const unsigned c = (a * 37u + b * 11u) & 255u;
      const double lambda = lambdas[(a + b) % 4];
      track(rel_err(total_loss(all_soft[a], all_soft[b], all_soft[c], lambda),
                    (long double)lambda * oracle_dice(all_wide[a], all_wide[b]) + oracle_dice(all_wide[a], all_wide[c])));
    }
  }

  // Random soft and binary 4^3 masks.
  std::mt19937_64 rng(20240601);
  for (int t = 0; t < 2000; ++t) {
    const auto p = random_soft(rng, 4), r = random_soft(rng, 4), q = random_soft(rng, 4);
    const auto g = random_label(rng, 4, 0.3);
    const auto wp = widen(p), wr = widen(r), wq = widen(q), wg = widen(g);
    track(rel_err(dice_loss(p, r), oracle_dice(wp, wr)));
    track(rel_err(dice_loss(p, g), oracle_dice(wp, wg)));
    track(rel_err(mlm_mse_loss(r, p), oracle_mse(wr, wp)));
    track(rel_err(mlm_mse_loss(g, p), oracle_mse(wg, wp)));
    const double lambda = lambdas[t % 4];
    track(rel_err(total_loss(p, r, q, lambda), (long double)lambda * oracle_dice(wp, wr) + oracle_dice(wp, wq)));
    worst_plain = std::max(worst_plain, rel_err(dice_loss(p, g), oracle_dice_plain(wp, wg)));
  }
  v.require(worst <= 1e-6, "max relative error <= 1e-6");
  v.require(worst_plain <= 1e-6, "agreement with the unstabilized Dice quotient <= 1e-6");
  v.note(fmt("%lld comparisons, max rel err %.2e (vs unstabilized quotient %.2e)", (long long)checks, worst, worst_plain));
  return v;
}

// ---------------------------------------------------------------- gradients

double dice_grad_error(const std::vector<double>& pred, const std::vector<double>& ref) {
  std::vector<double> grad(pred.size());
  dice_loss<double>(pred, ref, grad);
  double worst = 0.0;
  const double h = 1e-6;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    auto p = pred;
    p[i] += h;
    const double up = dice_loss<double>(p, ref);
    p[i] -= 2 * h;
    const double down = dice_loss<double>(p, ref);
    const double numeric = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(numeric - grad[i]) / std::max({std::abs(numeric), std::abs(grad[i]), 1e-8}));
  }
  return worst;
}

Verdict gradient_checks() {
  Verdict v;
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(0.02, 0.98);
  double dice_worst = 0.0;
  for (int n : {2, 4}) {
    for (int t = 0; t < 20; ++t) {
      std::vector<double> p(std::size_t(n * n * n)), r(p.size());
      for (auto& x : p) x = u(rng);
      for (auto& x : r) x = (t % 2) ? double(u(rng) > 0.5) : u(rng);
      dice_worst = std::max(dice_worst, dice_grad_error(p, r));
    }
  }

  MlmConfig cfg;
  cfg.input_shape = {4, 4, 4};
  cfg.patch_size = 2;
  cfg.encoder_blocks = cfg.decoder_blocks = 1;
  cfg.encoder_dim = cfg.decoder_dim = 8;
  cfg.encoder_heads = cfg.decoder_heads = 2;
  cfg.mlp_ratio = 2;
  MlmNetwork<double> net(cfg, 5);
  const auto lm = random_label(rng, 4, 0.4);
  std::vector<double> mask(lm.values().begin(), lm.values().end());
  const auto plan = plan_mask(lm, net.grid(), 0.75, 9);
  net.params().zero_grad();
  MlmNetwork<double>::Pass pass;
  auto out = net.forward(mask, plan, &pass);
  std::vector<double> grad(mask.size());
  mse_loss<double>(mask, out, grad);
  net.backward(pass, grad);

  auto loss = [&] { return mse_loss<double>(mask, net.forward(mask, plan), {}); };
  const double h = 1e-5;
  double mlm_worst = 0.0;
  std::int64_t entries = 0;
  for (auto& p : net.params()) {
    if (!p.trainable) continue;
    for (std::size_t k = 0; k < p.value.size(); ++k, ++entries) {
      const double orig = p.value[k];
      p.value[k] = orig + h;
      const double up = loss();
      p.value[k] = orig - h;
      const double down = loss();
      p.value[k] = orig;
      const double numeric = (up - down) / (2 * h);
      mlm_worst = std::max(mlm_worst, std::abs(numeric - p.grad[k]) /
                                          std::max({std::abs(numeric), std::abs(p.grad[k]), 1e-8}));
    }
  }
  v.require(dice_worst < 1e-3, "dice_loss gradient");
  v.require(mlm_worst < 1e-3, "micro-MLM gradient");
  v.note(fmt("dice max rel err %.2e; micro-MLM %lld params (%zu corrupted patches), max rel err %.2e", dice_worst,
             (long long)entries, plan.corrupted.size(), mlm_worst));
  return v;
}

// ---------------------------------------------------------------- patching

std::vector<std::int64_t> oracle_organ_patches(const LabelMask& m, int P) {
  const auto& s = m.shape();
  const std::int64_t g1 = s[1] / P, g2 = s[2] / P;
  std::vector<char> hit(std::size_t((s[0] / P) * g1 * g2), 0);
  for (std::int64_t i = 0; i < s[0]; ++i)
    for (std::int64_t j = 0; j < s[1]; ++j)
      for (std::int64_t k = 0; k < s[2]; ++k)
        if (m.at(i, j, k)) hit[std::size_t(((i / P) * g1 + j / P) * g2 + k / P)] = 1;
  std::vector<std::int64_t> out;
  for (std::size_t p = 0; p < hit.size(); ++p)
    if (hit[p]) out.push_back(std::int64_t(p));
  return out;
}

std::int64_t oracle_count(double r, std::int64_t n) {
  return n < 2 ? 0 : std::int64_t(std::floor(r * double(n) + 0.5));
}

LabelMask random_blob(std::mt19937_64& rng, std::int64_t n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double cx = u(rng) * n, cy = u(rng) * n, cz = u(rng) * n;
  const double a = 1 + u(rng) * n / 3, b = 1 + u(rng) * n / 3, c = 1 + u(rng) * n / 3;
  LabelMask m(Lattice::cube(n));
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t k = 0; k < n; ++k) {
        const double d = std::pow((i - cx) / a, 2) + std::pow((j - cy) / b, 2) + std::pow((k - cz) / c, 2);
        if (d <= 1.0 || u(rng) < 0.002) m.set(i, j, k, 1);
      }
  if (foreground_count(m) == 0) m.set(n / 2, n / 2, n / 2, 1);
  return m;
}

Verdict patching_properties() {
  Verdict v;
  std::mt19937_64 rng(4242);

  const auto big = random_label(rng, 128, 0.5);
  const auto ps = patchify(big, 16);
  v.require(PatchGrid::for_shape({128, 128, 128}, 16).num_patches() == 512 && ps.rows() == 512,
            "512 patches for 128^3 at P=16");
  const auto back = unpatchify_mask(ps, big.lattice());
  v.require(back == big, "binary round trip");
  const auto soft = random_soft(rng, 32);
  const auto soft_back = unpatchify_soft(patchify(soft, 4), soft.lattice());
  v.require(std::memcmp(soft_back.values().data(), soft.values().data(), soft.values().size_bytes()) == 0,
            "soft round trip bit-exact");

  int plans = 0;
  bool organ_ok = true, count_ok = true, fg_ok = true, partition_ok = true, seed_ok = true;
  for (int t = 0; t < 300; ++t) {
    const bool large = t % 10 == 0;
    const std::int64_t n = large ? 128 : 32;
    const int P = large ? 16 : 4;
    const auto m = random_blob(rng, n);
    const auto grid = PatchGrid::for_shape(m.shape(), P);
    const auto organ = oracle_organ_patches(m, P);
    const double ratio = (t % 3 == 0) ? 0.75 : std::uniform_real_distribution<double>(0.0, 0.99)(rng);
    const auto plan = plan_mask(m, grid, ratio, std::uint64_t(t));
    const auto rows = patchify(m, P);
    ++plans;
    organ_ok &= plan.organ_patches == organ;
    count_ok &= std::int64_t(plan.corrupted.size()) == oracle_count(ratio, std::int64_t(organ.size()));
    for (auto c : plan.corrupted) {
      auto row = rows.row(c);
      fg_ok &= std::any_of(row.begin(), row.end(), [](std::uint8_t x) { return x != 0; });
    }
    auto vis = plan.visible();
    std::vector<std::int64_t> all;
    std::merge(vis.begin(), vis.end(), plan.corrupted.begin(), plan.corrupted.end(), std::back_inserter(all));
    std::vector<std::int64_t> expect(std::size_t(grid.num_patches()));
    for (std::size_t i = 0; i < expect.size(); ++i) expect[i] = std::int64_t(i);
    partition_ok &= all == expect;
    seed_ok &= plan_mask(m, grid, ratio, std::uint64_t(t)).corrupted == plan.corrupted;
  }
  v.require(organ_ok, "organ patches match brute-force enumeration");
  v.require(count_ok, "|corrupted| == round(r * |organ_patches|)");
  v.require(fg_ok, "every corrupted patch holds foreground");
  v.require(partition_ok, "visible and corrupted partition all patches");
  v.require(seed_ok, "plans are seed-stable");
  v.note(fmt("%d random plans on 32^3/P=4 and 128^3/P=16", plans));
  return v;
}

// ---------------------------------------------------------------- EMA

nn::ParamStore<double> scalar_store(double x) {
  nn::ParamStore<double> s;
  s.add("w", {1});
  s[0].value[0] = x;
  return s;
}

Verdict ema_checks() {
  Verdict v;
  auto r = scalar_store(3.0);
  ema_update(r, scalar_store(-1.25), 0.0);
  v.require(r[0].value[0] == -1.25, "beta=0 copies the student");

  bool probe_ok = true;
  for (double beta : {0.25, 0.5, 0.9, 0.99, 0.999}) {
    auto a = scalar_store(1.0);
    ema_update(a, scalar_store(0.0), beta);
    auto b = scalar_store(0.0);
    ema_update(b, scalar_store(1.0), beta);
    probe_ok &= a[0].value[0] == beta && b[0].value[0] == 1.0 - beta;
  }
  v.require(probe_ok, "scalar probes give beta and 1-beta exactly");

  bool geo_ok = true;
  double worst_pow = 0.0;
  for (double beta : {0.5, 0.9, 0.99}) {
    auto g = scalar_store(1.0);
    const auto zero = scalar_store(0.0);
    double expected = 1.0;
    for (int k = 1; k <= 500; ++k) {
      ema_update(g, zero, beta);
      expected *= beta;
      geo_ok &= g[0].value[0] == expected;
      if (expected > 1e-300) worst_pow = std::max(worst_pow, rel_err(g[0].value[0], std::pow(beta, k)));
    }
  }
  v.require(geo_ok, "geometric decay matches beta^k");
  v.require(worst_pow < 1e-12, "beta^k within round-off of pow");

  SegConfig cfg;
  cfg.channels = {4, 4, 8};
  cfg.input_shape = {16, 16, 16};
  SegModel teacher(cfg, 1), student(cfg, 2);
  auto& bn = *std::find_if(student.params().begin(), student.params().end(), [](auto& p) { return !p.trainable; });
  std::fill(bn.value.begin(), bn.value.end(), 0.375f);
  ema_update(teacher, student, 0.0);
  bool copy_ok = true;
  for (std::size_t i = 0; i < teacher.params().size(); ++i) copy_ok &= teacher.params()[i].value == student.params()[i].value;
  v.require(copy_ok, "beta=0 copies every network entry, running stats included");
  v.note(fmt("max |beta^k - pow| rel %.1e", worst_pow));
  return v;
}

// ---------------------------------------------------------------- benchmark

struct Bench {
  json flat;
  json spec;  // benchmark.* keys
  json thresholds;
  int scale = 4;
  Lattice lattice;

  std::vector<LabeledCase> source;
  std::vector<LabeledCase> target_train, target_test;
  std::vector<LabelMask> mlm_masks;

  SegModel seg;
  MlmModel mlm;
  AblationResult grid;
  ExperimentReport direct, upper;
  double lambda0_volume = 0, lambda1_volume = 0, pseudo_volume = 0;
  LossScatter scatter;

  double inverted_direct = 0, inverted_full = 0;
  double organ_direct = 0, organ_full = 0, probe_before = 0, probe_after = 0;

  double th(const char* key) const { return thresholds.at(key).get<double>(); }
  int n(const char* key) const { return spec.at(key).get<int>(); }
  std::uint64_t seed(const char* key) const { return spec.at(key).get<std::uint64_t>(); }

  std::pair<std::vector<LabeledCase>, std::vector<LabeledCase>> target_split(const ShapeFamily& fam,
                                                                              const DomainProfile& dom) const {
    auto c = normalized(gen_cohort(fam, dom, lattice, n("target_cases"), seed("target_seed"))).cases;
    const auto cut = c.begin() + n("target_train");
    return {{c.begin(), cut}, {cut, c.end()}};
  }
};

double probe_recon(const MlmModel& m, const std::vector<LabelMask>& masks, double ratio) {
  double s = 0.0;
  for (const auto& x : masks) s += dice_score(binarize(reconstruct_prediction(m, to_soft(x), ratio, 1)), x);
  return s / double(masks.size());
}

void run_benchmark(Bench& b, const fs::path& work) {
  auto t0 = Clock::now();
  b.scale = b.flat.value("scale", 4);
  const std::int64_t size = b.spec.at("size").get<std::int64_t>();
  b.lattice = Lattice::cube(size, 128.0 / double(size));
  const auto famA = builtin_family("A");
  b.source = normalized(gen_cohort(famA, builtin_domain("source"), b.lattice, b.n("source_cases"), b.seed("source_seed"))).cases;
  std::tie(b.target_train, b.target_test) = b.target_split(famA, builtin_domain("shifted"));
  b.mlm_masks = masks_of(gen_cohort(famA, builtin_domain("source"), b.lattice, b.n("mlm_cases"), b.seed("mlm_seed")).cases);

  const auto seg_cfg = configured(b.flat, "seg", SegConfig{}.scaled(b.scale));
  const auto seg_opts = configured(b.flat, "seg_train", SegTrainOptions{});
  b.seg = train_source(b.source, seg_cfg, seg_opts).model;
  save_checkpoint(work / "seg.ckpt", b.seg, seg_opts.iters, seg_opts.seed);
  progress("  source segmenter: %.0f s", seconds_since(t0));

  t0 = Clock::now();
  const auto mlm_cfg = configured(b.flat, "mlm", MlmConfig{}.scaled(b.scale));
  const auto mlm_opts = configured(b.flat, "mlm_train", MlmTrainOptions{});
  b.mlm = train_mlm(b.mlm_masks, mlm_cfg, mlm_opts).model;
  save_checkpoint(work / "mlm.ckpt", b.mlm, mlm_opts.iters, mlm_opts.seed);
  progress("  MLM: %.0f s", seconds_since(t0));

  t0 = Clock::now();
  b.direct = run_direct_test(b.seg, b.target_test);
  AblationSetup setup;
  setup.source = &b.seg;
  setup.mlm = &b.mlm;
  setup.adapt_images = images_of(b.target_train);
  setup.test_cases = b.target_test;
  setup.distill = configured(b.flat, "distill", DistillConfig{});
  setup.adapt = configured(b.flat, "adapt", AdaptConfig{});
  b.grid = run_ablation_grid(setup);
  write_reports(b.grid.reports, work / "ablation");
  progress("  ablation grid: %.0f s", seconds_since(t0));

  t0 = Clock::now();
  SegTrainOptions ub_base;
  ub_base.augment = false;
  b.upper = run_upper_bound(b.seg, b.target_train, b.target_test, configured(b.flat, "upper_bound", ub_base));
  progress("  upper bound: %.0f s", seconds_since(t0));

  t0 = Clock::now();
  const auto test_images = images_of(b.target_test);
  b.pseudo_volume = mean_foreground_volume(b.grid.distilled.model, test_images);
  b.lambda1_volume = mean_foreground_volume(b.grid.adapted.at("full").target, test_images);
  auto no_pseudo = setup.adapt;
  no_pseudo.lambda_pseudo = 0.0;
  b.lambda0_volume = mean_foreground_volume(adapt(b.grid.distilled.model, b.mlm, setup.adapt_images, no_pseudo).target, test_images);
  progress("  lambda_pseudo=0 run: %.0f s", seconds_since(t0));

  b.scatter = emit_loss_scatter(b.grid.adapted.at("full").target, b.grid.distilled.model, b.mlm, b.target_test,
                                setup.adapt.mask_ratio, b.seed("scatter_seed"));
  b.scatter.write_csv(work / "scatter.csv");

  t0 = Clock::now();
  {
    auto [train, test] = b.target_split(famA, builtin_domain("inverted"));
    auto inv_adapt = setup.adapt;
    inv_adapt.iters = b.n("inverted_adapt_iters");
    auto dist = distill(b.seg, b.mlm, images_of(train), setup.distill);
    auto ad = adapt(dist.model, b.mlm, images_of(train), inv_adapt);
    b.inverted_direct = run_direct_test(b.seg, test).mean;
    b.inverted_full = run_direct_test(ad.target, test).mean;
  }
  progress("  inverted domain: %.0f s", seconds_since(t0));

  t0 = Clock::now();
  {
    const auto famB = builtin_family("B");
    auto [train, test] = b.target_split(famB, builtin_domain("shifted"));
    const auto support = gen_cohort(famB, builtin_domain("source"), b.lattice, 1, b.seed("support_seed")).cases[0].mask;
    const auto probe = masks_of(gen_cohort(famA, builtin_domain("source"), b.lattice, b.n("probe_cases"), b.seed("probe_seed")).cases);
    const double ratio = b.spec.at("probe_ratio").get<double>();
    MlmTrainOptions ft_base;
    ft_base.iters = 40;
    ft_base.batch = 1;
    UnseenOrganConfig uc;
    uc.finetune = configured(b.flat, "finetune", ft_base);
    uc.distill = setup.distill;
    uc.adapt = setup.adapt;
    uc.adapt.iters = b.n("organ_adapt_iters");
    auto r = unseen_organ_pipeline(support, images_of(train), b.seg, b.mlm, uc);
    b.organ_direct = run_direct_test(b.seg, test).mean;
    b.organ_full = run_direct_test(r.adapted.target, test).mean;
    b.probe_before = probe_recon(b.mlm, probe, ratio);
    b.probe_after = probe_recon(r.mlm, probe, ratio);
  }
  progress("  unseen organ: %.0f s", seconds_since(t0));
}

const ExperimentReport& row(const Bench& b, const std::string& label) {
  for (const auto& r : b.grid.reports)
    if (r.condition == label) return r;
  throw InvalidArgument("no ablation row " + label);
}

Verdict pipeline_trend(const Bench& b) {
  Verdict v;
  const double d = b.direct.mean, s = row(b, "distill_only").mean, f = row(b, "full").mean, u = b.upper.mean;
  const double m = b.th("rung_margin");
  v.require(s - d >= m, "direct_test < distill_only by the margin");
  v.require(f - s >= m, "distill_only < full_pipeline by the margin");
  v.require(u - f >= m, "full_pipeline <= upper_bound by the margin");
  v.require(f - d >= b.th("pipeline_gain"), "full_pipeline - direct_test gain");
  v.note(fmt("direct %.4f < distill %.4f < full %.4f <= upper %.4f; gain %+.4f", d, s, f, u, f - d));
  return v;
}

Verdict ablation_grid(const Bench& b) {
  Verdict v;
  const auto& off = b.grid.reports.front();
  bool same = off.condition == "direct_test" && off.cases.size() == b.direct.cases.size();
  for (std::size_t i = 0; same && i < off.cases.size(); ++i) same = off.cases[i].dice == b.direct.cases[i].dice;
  v.require(same && off.mean == b.direct.mean, "all-off row equals the direct test");
  const auto best = std::max_element(b.grid.reports.begin(), b.grid.reports.end(),
                                     [](const auto& x, const auto& y) { return x.mean < y.mean; });
  v.require(b.grid.reports.size() == 8, "8 rows");
  v.require(best->condition == "full", "full row has the maximum mean Dice");
  std::string rows;
  for (const auto& r : b.grid.reports) rows += fmt(" %s=%.3f", r.condition.c_str(), r.mean);
  v.note("rows:" + rows);
  return v;
}

Verdict unseen_domain(const Bench& b) {
  Verdict v;
  v.require(b.inverted_full - b.inverted_direct >= b.th("inverted_gain"), "inverted-domain gain");
  v.note(fmt("direct %.4f, full %.4f, gain %+.4f", b.inverted_direct, b.inverted_full, b.inverted_full - b.inverted_direct));
  return v;
}

Verdict unseen_organ(const Bench& b) {
  Verdict v;
  v.require(b.organ_full - b.organ_direct >= b.th("organ_gain"), "family-B gain");
  v.require(b.probe_after >= b.probe_before - b.th("forgetting_allowance"), "family-A reconstruction retained");
  v.note(fmt("family B direct %.4f, pipeline %.4f (%+.4f); family-A recon %.4f -> %.4f", b.organ_direct, b.organ_full,
             b.organ_full - b.organ_direct, b.probe_before, b.probe_after));
  return v;
}

Verdict collapse_probe(const Bench& b) {
  Verdict v;
  const double d0 = std::abs(b.lambda0_volume - b.pseudo_volume), d1 = std::abs(b.lambda1_volume - b.pseudo_volume);
  v.require(d0 >= b.th("collapse_ratio") * d1, "lambda=0 drift >= ratio x lambda=1 drift");
  v.note(fmt("pseudo-label volume %.1f; lambda=0 %.1f (drift %.1f), lambda=1 %.1f (drift %.1f), ratio %.2f", b.pseudo_volume,
             b.lambda0_volume, d0, b.lambda1_volume, d1, d1 > 0 ? d0 / d1 : INFINITY));
  return v;
}

Verdict scatter_centroids(const Bench& b) {
  Verdict v;
  const auto [px, py] = b.scatter.centroid("pseudo_label");
  const auto [qx, qy] = b.scatter.centroid("prediction");
  const auto [gx, gy] = b.scatter.centroid("ground_truth");
  const double dq = std::hypot(qx - gx, qy - gy), dp = std::hypot(px - gx, py - gy);
  v.require(b.scatter.points.size() == 3 * b.target_test.size(), "3 rows per case");
  v.require(dq < dp, "prediction centroid nearer ground truth than pseudo-label centroid");
  v.note(fmt("centroids (L_pseudo, L_recon): pseudo (%.3f, %.3f), prediction (%.3f, %.3f), gt (%.3f, %.3f); "
             "dist %.4f vs %.4f",
             px, py, qx, qy, gx, gy, dq, dp));
  return v;
}

// ---------------------------------------------------------------- determinism

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::string report_text(ExperimentReport r) {
  r.runtime_seconds = 0.0;  // wall clock
  return json(r).dump();
}

Verdict determinism(const fs::path& work) {
  Verdict v;
  const auto dir = work / "determinism";
  fs::create_directories(dir);
  const auto lat = Lattice::cube(16, 8.0);
  const auto cohort = normalized(gen_cohort(builtin_family("A"), builtin_domain("source"), lat, 4, 5));
  const auto target = normalized(gen_cohort(builtin_family("A"), builtin_domain("shifted"), lat, 4, 6)).cases;
  const auto target_images = images_of(target);

  SegTrainOptions so;
  so.iters = 12;
  so.seed = 1;
  MlmTrainOptions mo;
  mo.iters = 12;
  mo.seed = 2;
  DistillConfig dc;
  dc.iters = 4;
  dc.seed = 3;
  AdaptConfig ac;
  ac.iters = 6;
  ac.ema_interval = 2;
  ac.seed = 4;

  auto run = [&](const std::string& tag) {
    auto seg = train_source(cohort.cases, SegConfig{}.scaled(8), so);
    auto mlm = train_mlm(masks_of(cohort.cases), MlmConfig{}.scaled(8), mo);
    auto dist = distill(seg.model, mlm.model, target_images, dc);
    auto ad = adapt(dist.model, mlm.model, target_images, ac);
    save_checkpoint(dir / (tag + "_seg.ckpt"), seg.model, so.iters, so.seed);
    save_checkpoint(dir / (tag + "_mlm.ckpt"), mlm.model, mo.iters, mo.seed);
    save_checkpoint(dir / (tag + "_pseudo.ckpt"), dist.model, dc.iters, dc.seed);
    save_checkpoint(dir / (tag + "_target.ckpt"), ad.target, ac.iters, ac.seed);
    std::ofstream(dir / (tag + "_report.json")) << report_text(run_direct_test(ad.target, target));
    std::ofstream(dir / (tag + "_log.csv")) << seg.log.to_csv() << mlm.log.to_csv() << dist.log.to_csv() << ad.log.to_csv();
  };
  run("a");
  run("b");
  int same = 0, total = 0;
  for (const char* f : {"_seg.ckpt", "_mlm.ckpt", "_pseudo.ckpt", "_target.ckpt", "_report.json", "_log.csv"}) {
    const auto a = slurp(dir / (std::string("a") + f)), b = slurp(dir / (std::string("b") + f));
    ++total;
    if (!a.empty() && a == b) ++same;
    else v.require(false, std::string("rerun identical: ") + f);
  }

  // Format round trips.
  const auto& c = cohort.cases[0];
  save_volume(dir / "img", c.image);
  save_mask(dir / "mask", c.mask);
  const auto soft = to_soft(c.mask);
  save_soft(dir / "soft", soft);
  const auto img2 = load_volume(dir / "img");
  v.require(img2 == c.image &&
                std::memcmp(img2.values().data(), c.image.values().data(), c.image.values().size_bytes()) == 0,
            "volume round trip");
  v.require(load_mask(dir / "mask") == c.mask, "mask round trip");
  v.require(load_soft(dir / "soft") == soft, "soft mask round trip");
  save_volume(dir / "img2", img2);
  v.require(slurp(payload_path(dir / "img")) == slurp(payload_path(dir / "img2")) &&
                slurp(header_path(dir / "img")) == slurp(header_path(dir / "img2")),
            "volume re-save identical");

  for (const char* f : {"a_seg.ckpt", "a_target.ckpt"}) {
    const auto m = load_seg(dir / f);
    save_checkpoint(dir / "resaved.ckpt", m, read_checkpoint_info(dir / f).iter, read_checkpoint_info(dir / f).seed);
    v.require(slurp(dir / f) == slurp(dir / "resaved.ckpt"), std::string("checkpoint round trip ") + f);
  }
  const auto mlm = load_mlm(dir / "a_mlm.ckpt");
  save_checkpoint(dir / "resaved.ckpt", mlm, mo.iters, mo.seed);
  v.require(slurp(dir / "a_mlm.ckpt") == slurp(dir / "resaved.ckpt"), "MLM checkpoint round trip");
  v.note(fmt("%d/%d stage artifacts identical on rerun; volume, mask, soft and checkpoint files round-trip", same, total));
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  Eigen::setNbThreads(1);
  const fs::path config = argc > 1 ? fs::path(argv[1]) : fs::path(MASKFILL_BENCHMARK_CONFIG);
  const fs::path work = argc > 2 ? fs::path(argv[2]) : fs::current_path() / "acceptance_work";
  fs::create_directories(work);

  Bench bench;
  bench.flat = load_flat_config(config);
  bench.spec = config_section(bench.flat, "benchmark");
  bench.thresholds = config_section(bench.flat, "acceptance");
  const auto t_all = Clock::now();

  emit(1, "loss oracles", loss_oracles, 5.0);
  emit(2, "gradient checks", gradient_checks, 60.0);
  emit(3, "patching/masking", patching_properties, 5.0);
  emit(4, "EMA", ema_checks);

  bool bench_ok = true;
  std::string bench_error;
  progress("running the desk benchmark (%s)", config.c_str());
  try {
    run_benchmark(bench, work);
  } catch (const std::exception& e) {
    bench_ok = false;
    bench_error = e.what();
  }
  auto on_bench = [&](Verdict (*f)(const Bench&)) {
    return [&, f]() -> Verdict {
      if (!bench_ok) throw std::runtime_error("benchmark run failed: " + bench_error);
      return f(bench);
    };
  };
  emit(5, "pipeline trend", on_bench(pipeline_trend));
  emit(6, "ablation grid", on_bench(ablation_grid));
  emit(7, "unseen domain", on_bench(unseen_domain));
  emit(8, "unseen organ", on_bench(unseen_organ));
  emit(9, "collapse probe", on_bench(collapse_probe));
  emit(10, "determinism & formats", [&] { return determinism(work); });
  emit(11, "loss scatter", on_bench(scatter_centroids));

  std::printf("%d of 11 criteria failed; total %.0f s\n", failures, seconds_since(t_all));
  return failures == 0 ? 0 : 1;
}
