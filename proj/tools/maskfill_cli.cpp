#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "maskfill/adaptation.hpp"
#include "maskfill/checkpoint.hpp"
#include "maskfill/config.hpp"
#include "maskfill/eval.hpp"
#include "maskfill/preprocess.hpp"
#include "maskfill/synth.hpp"
#include "maskfill/volume_io.hpp"
#ifdef MASKFILL_HAVE_NIFTI
#include "maskfill/nifti.hpp"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace maskfill;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> scale;
  fs::path out_dir = ".";
  bool deterministic = false;
  json flat = json::object();

  void load() {
    if (!config_path.empty()) flat = load_flat_config(config_path);
    if (!scale) scale = flat.value("scale", 4);
    if (!seed && flat.contains("seed")) seed = flat["seed"].get<std::uint64_t>();
    if (*scale < 1) throw InvalidArgument("--scale must be >= 1");
    if (deterministic) Eigen::setNbThreads(1);
    fs::create_directories(out_dir);
  }

  // Section values over `base`; the global seed wins over any section seed.
  template <typename T>
  T section(std::string_view name, const T& base) const {
    T t = configured(flat, name, base);
    if constexpr (requires { t.seed; }) {
      if (seed) t.seed = *seed;
    }
    return t;
  }

  std::uint64_t seed_or(std::uint64_t fallback) const { return seed.value_or(fallback); }
  fs::path out(const std::string& name) const { return out_dir / name; }
};

void write_manifest(const Globals& g, const std::string& stage, const std::map<std::string, fs::path>& inputs,
                    const json& config, std::uint64_t seed, const fs::path& output) {
  json m = stage_manifest(stage, inputs, config, seed, output);
  m["deterministic"] = g.deterministic;
  m["scale"] = *g.scale;
  std::ofstream(g.out(stage + ".manifest.json")) << m.dump(2) << '\n';
}

Lattice synth_lattice(int scale, std::optional<int> size) {
  const std::int64_t n = size ? *size : 128 / scale;
  return Lattice::cube(n, 128.0 / double(n));
}

std::vector<Volume> images(const fs::path& cohort) { return images_of(read_cohort(cohort).cases); }

std::vector<LabeledCase> labeled_cases(const fs::path& dir) {
  auto c = read_cohort(dir);
  if (!c.labeled) throw InvalidArgument(dir.string() + " is an unlabeled cohort");
  return c.cases;
}

void print_report(const ExperimentReport& r) {
  std::cout << r.condition << ": mean Dice " << r.mean << " (sd " << r.stddev << ", n=" << r.cases.size() << ")\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"maskfill: shape-prior domain adaptation for 3D organ segmentation"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "Flat JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Seed for every stage (overrides the config)");
  app.add_option("--scale", g.scale, "Desk scale divisor for default network sizes (default 4)");
  app.add_option("--out-dir", g.out_dir, "Directory for checkpoints, logs, reports and manifests");
  app.add_flag("--deterministic", g.deterministic, "Single-threaded linear algebra for bit-exact reruns");

  // gen-cohort
  auto* gen = app.add_subcommand("gen-cohort", "Generate a synthetic labeled cohort (raw intensities)");
  std::string family = "A", domain = "source", gen_dir;
  int n_cases = 20;
  std::optional<int> size;
  gen->add_option("--family", family, "Shape family A, B or C")->check(CLI::IsMember({"A", "B", "C"}));
  gen->add_option("--domain", domain, "Domain profile")->check(CLI::IsMember({"source", "shifted", "inverted"}));
  gen->add_option("-n,--cases", n_cases, "Number of cases")->check(CLI::PositiveNumber);
  gen->add_option("--size", size, "Cube side in voxels (default 128 / scale)");
  gen->add_option("--dir", gen_dir, "Output cohort directory (default <out-dir>/cohort)");

  // preprocess
  auto* pre = app.add_subcommand("preprocess", "Window, resample, crop and resize a cohort");
  std::string pre_in, pre_dir;
  std::vector<double> window{-200.0, 400.0}, spacing;
  std::optional<int> shape, crop_pad;
  pre->add_option("--in", pre_in, "Input cohort directory")->required()->check(CLI::ExistingDirectory);
  pre->add_option("--dir", pre_dir, "Output cohort directory (default <out-dir>/preprocessed)");
  pre->add_option("--window", window, "Intensity window lo hi")->expected(2);
  pre->add_option("--spacing", spacing, "Target spacing (three values, mm)")->expected(3);
  pre->add_option("--crop-pad", crop_pad, "Crop to the label bounding cube with this padding");
  pre->add_option("--shape", shape, "Resize to a cube of this side");

  // ingest-nifti
  auto* ing = app.add_subcommand("ingest-nifti", "Convert NIfTI-1 volumes into a native cohort");
  std::vector<std::string> nii_images, nii_masks;
  std::optional<int> nii_label;
  std::string ing_dir;
  ing->add_option("--image", nii_images, "Image .nii/.nii.gz (repeatable)")->required();
  ing->add_option("--mask", nii_masks, "Label .nii/.nii.gz, one per image (omit for unlabeled data)");
  ing->add_option("--label", nii_label, "Label value to keep as foreground (default: any nonzero)");
  ing->add_option("--dir", ing_dir, "Output cohort directory (default <out-dir>/ingested)");

  // train-seg
  auto* tseg = app.add_subcommand("train-seg", "Supervised source training of S^S");
  std::string tseg_cohort;
  tseg->add_option("--cohort", tseg_cohort, "Labeled source cohort")->required()->check(CLI::ExistingDirectory);

  // train-mlm
  auto* tmlm = app.add_subcommand("train-mlm", "Train the masked label-mask model on cohort masks");
  std::string tmlm_cohort;
  tmlm->add_option("--cohort", tmlm_cohort, "Cohort whose masks are used")->required()->check(CLI::ExistingDirectory);

  // finetune-mlm
  auto* ft = app.add_subcommand("finetune-mlm", "One-shot MLM fine-tuning on a support mask");
  std::string ft_mlm, ft_support;
  ft->add_option("--mlm", ft_mlm, "MLM checkpoint")->required()->check(CLI::ExistingFile);
  ft->add_option("--support", ft_support, "Support mask (.vol.json)")->required();

  // distill
  auto* dis = app.add_subcommand("distill", "Shape-aware self-distillation: S^S -> S^R");
  std::string dis_seg, dis_mlm, dis_cohort;
  dis->add_option("--seg", dis_seg, "Source checkpoint")->required()->check(CLI::ExistingFile);
  dis->add_option("--mlm", dis_mlm, "MLM checkpoint")->required()->check(CLI::ExistingFile);
  dis->add_option("--cohort", dis_cohort, "Unlabeled target cohort")->required()->check(CLI::ExistingDirectory);

  // adapt
  auto* ad = app.add_subcommand("adapt", "Dual-loss target training with EMA teacher: S^R -> S^T");
  std::string ad_pseudo, ad_mlm, ad_cohort;
  ad->add_option("--pseudo", ad_pseudo, "Pseudo-model checkpoint")->required()->check(CLI::ExistingFile);
  ad->add_option("--mlm", ad_mlm, "MLM checkpoint")->required()->check(CLI::ExistingFile);
  ad->add_option("--cohort", ad_cohort, "Unlabeled target cohort")->required()->check(CLI::ExistingDirectory);

  // eval
  auto* ev = app.add_subcommand("eval", "Dice of one or more segmenters on a labeled cohort");
  std::vector<std::string> ev_models;
  std::string ev_cohort, ev_name = "eval";
  ev->add_option("--model", ev_models, "Segmenter checkpoint (repeatable)")->required()->check(CLI::ExistingFile);
  ev->add_option("--cohort", ev_cohort, "Labeled test cohort")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--name", ev_name, "Report file stem");

  // upper-bound
  auto* ub = app.add_subcommand("upper-bound", "Supervised fine-tuning on labeled target data");
  std::string ub_seg, ub_train, ub_test;
  ub->add_option("--seg", ub_seg, "Source checkpoint")->required()->check(CLI::ExistingFile);
  ub->add_option("--train-cohort", ub_train, "Labeled target training cohort")->required()->check(CLI::ExistingDirectory);
  ub->add_option("--test-cohort", ub_test, "Labeled target test cohort")->required()->check(CLI::ExistingDirectory);

  // ablate
  auto* ab = app.add_subcommand("ablate", "All eight on/off combinations of distill, pseudo and recon");
  std::string ab_seg, ab_mlm, ab_adapt, ab_test;
  ab->add_option("--seg", ab_seg, "Source checkpoint")->required()->check(CLI::ExistingFile);
  ab->add_option("--mlm", ab_mlm, "MLM checkpoint")->required()->check(CLI::ExistingFile);
  ab->add_option("--adapt-cohort", ab_adapt, "Target images for adaptation")->required()->check(CLI::ExistingDirectory);
  ab->add_option("--test-cohort", ab_test, "Labeled target test cohort")->required()->check(CLI::ExistingDirectory);

  // scatter
  auto* sc = app.add_subcommand("scatter", "Per-case (L_pseudo, L_recon) points as CSV");
  std::string sc_target, sc_pseudo, sc_mlm, sc_cohort;
  double sc_ratio = 0.75;
  sc->add_option("--target", sc_target, "Adapted checkpoint")->required()->check(CLI::ExistingFile);
  sc->add_option("--pseudo", sc_pseudo, "Pseudo-model checkpoint")->required()->check(CLI::ExistingFile);
  sc->add_option("--mlm", sc_mlm, "MLM checkpoint")->required()->check(CLI::ExistingFile);
  sc->add_option("--cohort", sc_cohort, "Labeled target cohort")->required()->check(CLI::ExistingDirectory);
  sc->add_option("--ratio", sc_ratio, "MLM corruption ratio");

  CLI11_PARSE(app, argc, argv);

  try {
    g.load();
    const int scale = *g.scale;

    if (*gen) {
      const auto fam = configured(g.flat, "family", builtin_family(family));
      const auto dom = configured(g.flat, "domain", builtin_domain(domain));
      const fs::path dir = gen_dir.empty() ? g.out("cohort") : fs::path(gen_dir);
      const auto seed = g.seed_or(0);
      auto cohort = gen_cohort(fam, dom, synth_lattice(scale, size), n_cases, seed);
      write_cohort(cohort, dir);
      write_manifest(g, "gen-cohort", {}, json{{"family", fam}, {"domain", dom}, {"cases", n_cases}}, seed,
                     dir / "manifest.json");
      std::cout << "wrote " << cohort.cases.size() << " cases to " << dir << "\n";
    } else if (*pre) {
      auto cohort = read_cohort(pre_in);
      for (auto& c : cohort.cases) {
        c.image = normalize_intensity(c.image, window[0], window[1]);
        if (!spacing.empty()) {
          const Vec3 sp{spacing[0], spacing[1], spacing[2]};
          c.image = resample(c.image, sp);
          c.mask = resample(c.mask, sp);
        }
        if (crop_pad) {
          if (!cohort.labeled) throw InvalidArgument("--crop-pad needs a labeled cohort");
          auto cropped = crop_to_bbox(c.image, c.mask, *crop_pad);
          c.image = std::move(cropped.image);
          c.mask = std::move(cropped.mask);
        }
        if (shape) {
          c.image = resize_to(c.image, Index3{*shape, *shape, *shape});
          c.mask = resize_to(c.mask, Index3{*shape, *shape, *shape});
        }
      }
      cohort.lattice = cohort.cases.front().image.lattice();
      const fs::path dir = pre_dir.empty() ? g.out("preprocessed") : fs::path(pre_dir);
      write_cohort(cohort, dir);
      json cfg{{"window", window}, {"spacing", spacing}};
      if (crop_pad) cfg["crop_pad"] = *crop_pad;
      if (shape) cfg["shape"] = *shape;
      write_manifest(g, "preprocess", {{"cohort", fs::path(pre_in) / "manifest.json"}}, cfg, 0, dir / "manifest.json");
      std::cout << "wrote " << cohort.cases.size() << " preprocessed cases to " << dir << "\n";
    } else if (*ing) {
#ifdef MASKFILL_HAVE_NIFTI
      if (!nii_masks.empty() && nii_masks.size() != nii_images.size()) {
        throw InvalidArgument("give one --mask per --image, or none");
      }
      Cohort cohort;
      cohort.family.id = "external";
      cohort.domain.id = "external";
      cohort.labeled = !nii_masks.empty();
      for (std::size_t i = 0; i < nii_images.size(); ++i) {
        LabeledCase c;
        c.id = fs::path(nii_images[i]).stem().stem().string();
        c.image = read_nifti_volume(nii_images[i]);
        c.mask = cohort.labeled ? read_nifti_mask(nii_masks[i], nii_label) : LabelMask(c.image.lattice());
        require_same_grid(c.image.lattice(), c.mask.lattice(), "ingest-nifti");
        cohort.cases.push_back(std::move(c));
        cohort.case_seeds.push_back(0);
      }
      cohort.lattice = cohort.cases.front().image.lattice();
      const fs::path dir = ing_dir.empty() ? g.out("ingested") : fs::path(ing_dir);
      write_cohort(cohort, dir);
      std::cout << "ingested " << cohort.cases.size() << " volumes into " << dir << "\n";
#else
      throw InvalidArgument("this build has no NIfTI support (configure with MASKFILL_WITH_NIFTI=ON)");
#endif
    } else if (*tseg) {
      const auto cfg = g.section("seg", SegConfig{}.scaled(scale));
      const auto opts = g.section("seg_train", SegTrainOptions{});
      auto r = train_source(labeled_cases(tseg_cohort), cfg, opts);
      const auto out = g.out("seg.ckpt");
      save_checkpoint(out, r.model, opts.iters, opts.seed);
      r.log.write_csv(g.out("train-seg_log.csv"));
      write_manifest(g, "train-seg", {{"cohort", fs::path(tseg_cohort) / "manifest.json"}},
                     json{{"seg", cfg}, {"seg_train", opts}}, opts.seed, out);
      std::cout << "final dice_loss " << r.log.tail_mean(1, 10) << ", wrote " << out << "\n";
    } else if (*tmlm) {
      const auto cfg = g.section("mlm", MlmConfig{}.scaled(scale));
      const auto opts = g.section("mlm_train", MlmTrainOptions{});
      auto r = train_mlm(masks_of(read_cohort(tmlm_cohort).cases), cfg, opts);
      const auto out = g.out("mlm.ckpt");
      save_checkpoint(out, r.model, opts.iters, opts.seed);
      r.log.write_csv(g.out("train-mlm_log.csv"));
      write_manifest(g, "train-mlm", {{"cohort", fs::path(tmlm_cohort) / "manifest.json"}},
                     json{{"mlm", cfg}, {"mlm_train", opts}}, opts.seed, out);
      std::cout << "final loss " << r.log.tail_mean(1, 10) << ", wrote " << out << "\n";
    } else if (*ft) {
      MlmTrainOptions base;
      base.iters = 40;
      base.batch = 1;
      const auto opts = g.section("finetune", base);
      auto r = finetune_mlm(load_mlm(ft_mlm), {load_mask(ft_support)}, opts);
      const auto out = g.out("mlm_finetuned.ckpt");
      save_checkpoint(out, r.model, opts.iters, opts.seed);
      r.log.write_csv(g.out("finetune-mlm_log.csv"));
      write_manifest(g, "finetune-mlm", {{"mlm", ft_mlm}, {"support", header_path(ft_support)}}, json(opts), opts.seed,
                     out);
      std::cout << "wrote " << out << "\n";
    } else if (*dis) {
      const auto cfg = g.section("distill", DistillConfig{});
      auto r = distill(load_seg(dis_seg), load_mlm(dis_mlm), images(dis_cohort), cfg);
      const auto out = g.out("pseudo.ckpt");
      save_checkpoint(out, r.model, cfg.iters, cfg.seed);
      r.log.write_csv(g.out("distill_log.csv"));
      write_manifest(g, "distill",
                     {{"seg", dis_seg}, {"mlm", dis_mlm}, {"cohort", fs::path(dis_cohort) / "manifest.json"}},
                     json(cfg), cfg.seed, out);
      std::cout << "wrote " << out << "\n";
    } else if (*ad) {
      const auto cfg = g.section("adapt", AdaptConfig{});
      auto r = adapt(load_seg(ad_pseudo), load_mlm(ad_mlm), images(ad_cohort), cfg);
      for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
      const auto out = g.out("target.ckpt");
      save_checkpoint(out, r.target, cfg.iters, cfg.seed);
      save_checkpoint(g.out("teacher.ckpt"), r.teacher, cfg.iters, cfg.seed);
      r.log.write_csv(g.out("adapt_log.csv"));
      write_manifest(g, "adapt",
                     {{"pseudo", ad_pseudo}, {"mlm", ad_mlm}, {"cohort", fs::path(ad_cohort) / "manifest.json"}},
                     json(cfg), cfg.seed, out);
      std::cout << r.ema_updates << " EMA updates, wrote " << out << "\n";
    } else if (*ev) {
      const auto cases = labeled_cases(ev_cohort);
      std::vector<ExperimentReport> reports;
      for (const auto& path : ev_models) {
        CheckpointInfo info;
        auto model = load_seg(path, &info);
        auto r = run_direct_test(model, cases);
        r.condition = fs::path(path).stem().string();
        r.metadata = {{"checkpoint", path}, {"digest", file_digest(path)}, {"role", info.role}};
        print_report(r);
        reports.push_back(std::move(r));
      }
      write_reports(reports, g.out(ev_name));
    } else if (*ub) {
      SegTrainOptions base;
      base.augment = false;
      const auto opts = g.section("upper_bound", base);
      SegModel trained;
      auto r = run_upper_bound(load_seg(ub_seg), labeled_cases(ub_train), labeled_cases(ub_test), opts, &trained);
      print_report(r);
      save_checkpoint(g.out("upper_bound.ckpt"), trained, opts.iters, opts.seed);
      write_reports({r}, g.out("upper_bound"));
    } else if (*ab) {
      const auto source = load_seg(ab_seg);
      const auto mlm = load_mlm(ab_mlm);
      AblationSetup setup;
      setup.source = &source;
      setup.mlm = &mlm;
      setup.adapt_images = images(ab_adapt);
      setup.test_cases = labeled_cases(ab_test);
      setup.distill = g.section("distill", DistillConfig{});
      setup.adapt = g.section("adapt", AdaptConfig{});
      auto grid = run_ablation_grid(setup);
      for (const auto& r : grid.reports) print_report(r);
      write_reports(grid.reports, g.out("ablation"));
      std::cout << to_markdown(grid.reports);
    } else if (*sc) {
      auto points = emit_loss_scatter(load_seg(sc_target), load_seg(sc_pseudo), load_mlm(sc_mlm),
                                      labeled_cases(sc_cohort), sc_ratio, g.seed_or(0));
      points.write_csv(g.out("scatter.csv"));
      for (const char* c : {"pseudo_label", "prediction", "ground_truth"}) {
        auto [x, y] = points.centroid(c);
        std::cout << c << " centroid: L_pseudo " << x << ", L_recon " << y << "\n";
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
