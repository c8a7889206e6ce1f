#include "maskfill/adaptation.hpp"

#include <algorithm>
#include <optional>
#include <random>

#include <nlohmann/json.hpp>

#include "maskfill/checkpoint.hpp"
#include "maskfill/losses.hpp"
#include "maskfill/nn/optim.hpp"
#include "maskfill/seeding.hpp"

namespace maskfill {

using nlohmann::json;

void AdaptConfig::validate() const {
  if (!(lambda_pseudo >= 0.0)) throw InvalidArgument("lambda_pseudo must be >= 0");
  if (!(beta >= 0.0 && beta < 1.0)) throw InvalidArgument("beta must lie in [0, 1)");
  if (ema_interval < 1) throw InvalidArgument("ema_interval must be >= 1");
  if (iters < 0) throw InvalidArgument("iters must be >= 0");
  if (batch < 1) throw InvalidArgument("batch must be >= 1");
  if (binarize_recon && backprop_through_mlm) {
    throw InvalidArgument("binarize_recon and backprop_through_mlm are mutually exclusive");
  }
}

void to_json(json& j, const DistillConfig& c) {
  j = json{{"lr", c.lr},       {"iters", c.iters}, {"batch", c.batch}, {"mask_ratio", c.mask_ratio},
           {"seed", c.seed},   {"warmup_fraction", c.warmup_fraction}, {"binarize_target", c.binarize_target},
           {"freeze_norm", c.freeze_norm},
           {"recalibrate", c.recalibrate}};
}

void from_json(const json& j, DistillConfig& c) {
  DistillConfig d;
  c.lr = j.value("lr", d.lr);
  c.iters = j.value("iters", d.iters);
  c.batch = j.value("batch", d.batch);
  c.mask_ratio = j.value("mask_ratio", d.mask_ratio);
  c.seed = j.value("seed", d.seed);
  c.warmup_fraction = j.value("warmup_fraction", d.warmup_fraction);
  c.binarize_target = j.value("binarize_target", d.binarize_target);
  c.freeze_norm = j.value("freeze_norm", d.freeze_norm);
  c.recalibrate = j.value("recalibrate", d.recalibrate);
}

void to_json(json& j, const AdaptConfig& c) {
  j = json{{"lambda_pseudo", c.lambda_pseudo},
           {"use_recon", c.use_recon},
           {"beta", c.beta},
           {"ema_interval", c.ema_interval},
           {"iters", c.iters},
           {"lr", c.lr},
           {"batch", c.batch},
           {"mask_ratio", c.mask_ratio},
           {"seed", c.seed},
           {"warmup_fraction", c.warmup_fraction},
           {"binarize_pseudo", c.binarize_pseudo},
           {"binarize_recon", c.binarize_recon},
           {"freeze_norm", c.freeze_norm},
           {"backprop_through_mlm", c.backprop_through_mlm}};
}

void from_json(const json& j, AdaptConfig& c) {
  AdaptConfig d;
  c.lambda_pseudo = j.value("lambda_pseudo", d.lambda_pseudo);
  c.use_recon = j.value("use_recon", d.use_recon);
  c.beta = j.value("beta", d.beta);
  c.ema_interval = j.value("ema_interval", d.ema_interval);
  c.iters = j.value("iters", d.iters);
  c.lr = j.value("lr", d.lr);
  c.batch = j.value("batch", d.batch);
  c.mask_ratio = j.value("mask_ratio", d.mask_ratio);
  c.seed = j.value("seed", d.seed);
  c.warmup_fraction = j.value("warmup_fraction", d.warmup_fraction);
  c.binarize_pseudo = j.value("binarize_pseudo", d.binarize_pseudo);
  c.binarize_recon = j.value("binarize_recon", d.binarize_recon);
  c.freeze_norm = j.value("freeze_norm", d.freeze_norm);
  c.backprop_through_mlm = j.value("backprop_through_mlm", d.backprop_through_mlm);
}

double pseudo_loss(const SoftMask& y_t, const SoftMask& y_p) { return dice_loss(y_t, y_p); }

double recon_loss(const SoftMask& y_t, const SoftMask& y_r) { return dice_loss(y_t, y_r); }

double total_loss(const SoftMask& y_t, const SoftMask& y_p, const SoftMask& y_r, double lambda_pseudo) {
  if (!(lambda_pseudo >= 0.0)) throw InvalidArgument("lambda_pseudo must be >= 0");
  return total_loss(pseudo_loss(y_t, y_p), recon_loss(y_t, y_r), lambda_pseudo);
}

template <typename T>
void ema_update(nn::ParamStore<T>& teacher, const nn::ParamStore<T>& student, double beta) {
  if (!(beta >= 0.0 && beta < 1.0)) throw InvalidArgument("beta must lie in [0, 1)");
  if (!teacher.same_layout(student)) throw ShapeError("ema_update: parameter layouts differ");
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    auto& r = teacher[i].value;
    const auto& t = student[i].value;
    for (std::size_t k = 0; k < r.size(); ++k) r[k] = T(beta * double(r[k]) + (1.0 - beta) * double(t[k]));
  }
}

template void ema_update(nn::ParamStore<float>&, const nn::ParamStore<float>&, double);
template void ema_update(nn::ParamStore<double>&, const nn::ParamStore<double>&, double);

void ema_update(SegModel& teacher, const SegModel& student, double beta) {
  ema_update(teacher.params(), student.params(), beta);
}

namespace {

std::vector<std::size_t> draw_batch(std::mt19937_64& rng, std::size_t n, int batch) {
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::size_t> idx(static_cast<std::size_t>(batch));
  for (auto& i : idx) i = pick(rng);
  return idx;
}

nn::Tensor5<float> gather(const std::vector<Volume>& targets, const std::vector<std::size_t>& idx) {
  std::vector<const Volume*> xs;
  for (auto i : idx) xs.push_back(&targets[i]);
  return to_tensor(xs);
}

std::span<const float> sample_span(const nn::Tensor5<float>& t, std::int64_t n) {
  return {t.channel(n, 0), std::size_t(t.spatial())};
}

std::span<float> sample_span(nn::Tensor5<float>& t, std::int64_t n) { return {t.channel(n, 0), std::size_t(t.spatial())}; }

}  // namespace

DistillResult distill(const SegModel& source, const MlmModel& mlm, const std::vector<Volume>& targets,
                      const DistillConfig& cfg) {
  if (targets.empty()) throw EmptyDatasetError("distill: no target images");
  if (cfg.batch < 1) throw InvalidArgument("batch must be >= 1");
  DistillResult r{source, {}};
  r.model.set_role(SegRole::pseudo);
  r.log.columns = {"iter", "l_distill"};
  if (cfg.iters <= 0) return r;
  std::vector<const Volume*> images;
  for (const auto& t : targets) images.push_back(&t);
  if (cfg.freeze_norm) r.model.recalibrate(images, cfg.batch);
  nn::Adam<float> adam(r.model.params());
  std::mt19937_64 rng(cfg.seed);
  SegModel::Pass pass;
  const Lattice& lat = targets.front().lattice();
  for (std::int64_t it = 0; it < cfg.iters; ++it) {
    const auto idx = draw_batch(rng, targets.size(), cfg.batch);
    r.model.params().zero_grad();
    const auto x = gather(targets, idx);
    const auto prob = cfg.freeze_norm ? r.model.forward_eval(x, &pass) : r.model.forward_train(x, &pass);
    nn::Tensor5<float> grad(prob.n(), 1, prob.shape[2], prob.shape[3], prob.shape[4]);
    double loss = 0.0;
    for (std::int64_t n = 0; n < prob.n(); ++n) {
      const auto y_p = slice_prob(prob, n, lat);
      auto y_m = reconstruct_prediction(mlm, y_p, cfg.mask_ratio, derive_seed(cfg.seed, std::uint64_t(it), std::uint64_t(n)));
      if (cfg.binarize_target) y_m = to_soft(binarize(y_m));
      loss += dice_loss<float>(sample_span(prob, n), y_m.values(), sample_span(grad, n));
    }
    for (auto& g : grad.data) g /= float(prob.n());
    r.model.backward(pass, grad);
    adam.step(r.model.params(), nn::cosine_lr(cfg.lr, it, cfg.iters, cfg.warmup_fraction));
    r.log.add({double(it), loss / double(prob.n())});
  }
  if (cfg.recalibrate) r.model.recalibrate(images, cfg.batch);
  return r;
}

AdaptResult adapt(const SegModel& pseudo, const MlmModel& mlm, const std::vector<Volume>& targets,
                  const AdaptConfig& cfg, const AdaptHooks& hooks) {
  cfg.validate();
  if (targets.empty()) throw EmptyDatasetError("adapt: no target images");
  AdaptResult r{pseudo, pseudo, {}, 0, {}};
  r.target.set_role(SegRole::target);
  r.teacher.set_role(SegRole::pseudo);
  r.log.columns = {"iter", "l_pseudo", "l_recon", "l_total"};
  if (cfg.ema_interval > cfg.iters && cfg.iters > 0) {
    r.warnings.push_back("ema_interval " + std::to_string(cfg.ema_interval) + " exceeds iters " +
                         std::to_string(cfg.iters) + "; the EMA update never fires");
  }
  if (cfg.iters == 0) return r;

  nn::Adam<float> adam(r.target.params());
  std::mt19937_64 rng(cfg.seed);
  SegModel::Pass pass;
  const Lattice& lat = targets.front().lattice();
  // Gradients through the MLM land in a scratch copy so the caller's model stays frozen.
  std::optional<MlmModel> scratch;
  if (cfg.backprop_through_mlm) scratch.emplace(mlm);
  MlmModel::Pass mlm_pass;

  for (std::int64_t it = 0; it < cfg.iters; ++it) {
    const auto idx = draw_batch(rng, targets.size(), cfg.batch);
    const auto x = gather(targets, idx);
    const auto y_p = r.teacher.forward_eval(x);
    if (hooks.on_pseudo) hooks.on_pseudo(it, r.teacher);

    r.target.params().zero_grad();
    const auto y_t = cfg.freeze_norm ? r.target.forward_eval(x, &pass) : r.target.forward_train(x, &pass);
    nn::Tensor5<float> grad(y_t.n(), 1, y_t.shape[2], y_t.shape[3], y_t.shape[4]);
    std::vector<float> g(std::size_t(y_t.spatial())), ref(std::size_t(y_t.spatial()));
    double lp = 0.0, lr = 0.0;
    for (std::int64_t n = 0; n < y_t.n(); ++n) {
      auto gn = sample_span(grad, n);
      if (cfg.lambda_pseudo > 0.0) {
        const auto p = sample_span(y_p, n);
        if (cfg.binarize_pseudo) {
          for (std::size_t v = 0; v < ref.size(); ++v) ref[v] = p[v] >= 0.5f ? 1.0f : 0.0f;
        } else {
          std::copy(p.begin(), p.end(), ref.begin());
        }
        lp += dice_loss<float>(sample_span(y_t, n), ref, g);
        for (std::size_t v = 0; v < g.size(); ++v) gn[v] += float(cfg.lambda_pseudo) * g[v];
      }
      if (cfg.use_recon) {
        const auto seed = derive_seed(cfg.seed, std::uint64_t(it), std::uint64_t(n));
        const LabelMask bin = binarize(slice_prob(y_t, n, lat));
        const auto plan = inference_plan(mlm, bin, cfg.mask_ratio, seed);
        std::vector<float> input(bin.values().begin(), bin.values().end());
        auto y_r = scratch ? scratch->forward(input, plan, &mlm_pass) : mlm.forward(input, plan);
        if (cfg.binarize_recon) {
          for (auto& v : y_r) v = v >= 0.5f ? 1.0f : 0.0f;
        }
        lr += dice_loss<float>(sample_span(y_t, n), y_r, g);
        for (std::size_t v = 0; v < g.size(); ++v) gn[v] += g[v];
        if (scratch) {
          std::vector<float> g_r(y_r.size());
          dice_loss<float>(y_r, sample_span(y_t, n), g_r);
          const auto g_in = scratch->backward(mlm_pass, g_r, true);
          for (std::size_t v = 0; v < g.size(); ++v) gn[v] += g_in[v];
        }
      }
    }
    const float inv = 1.0f / float(y_t.n());
    for (auto& v : grad.data) v *= inv;
    r.target.backward(pass, grad);
    adam.step(r.target.params(), nn::cosine_lr(cfg.lr, it, cfg.iters, cfg.warmup_fraction));
    lp /= double(y_t.n());
    lr /= double(y_t.n());
    r.log.add({double(it), lp, lr, total_loss(lp, lr, cfg.lambda_pseudo)});

    if ((it + 1) % cfg.ema_interval == 0) {
      ema_update(r.teacher, r.target, cfg.beta);
      ++r.ema_updates;
      if (hooks.on_ema) hooks.on_ema(it, r.teacher);
    }
  }
  return r;
}

UnseenOrganResult unseen_organ_pipeline(const LabelMask& support, const std::vector<Volume>& targets,
                                        const SegModel& source, const MlmModel& mlm, const UnseenOrganConfig& cfg) {
  UnseenOrganResult r{mlm, {}, {}, {}};
  if (!cfg.skip_finetune) {
    auto ft = finetune_mlm(mlm, {support}, cfg.finetune);
    r.mlm = std::move(ft.model);
    r.finetune_log = std::move(ft.log);
  }
  r.distilled = distill(source, r.mlm, targets, cfg.distill);
  r.adapted = adapt(r.distilled.model, r.mlm, targets, cfg.adapt);
  return r;
}

json stage_manifest(const std::string& stage, const std::map<std::string, std::filesystem::path>& inputs,
                    const json& config, std::uint64_t seed, const std::filesystem::path& output) {
  json in = json::object();
  for (const auto& [name, path] : inputs) {
    json entry{{"path", path.string()}};
    if (std::filesystem::is_regular_file(path)) entry["digest"] = file_digest(path);
    in[name] = entry;
  }
  json out{{"path", output.string()}};
  if (std::filesystem::is_regular_file(output)) out["digest"] = file_digest(output);
  return json{{"stage", stage}, {"inputs", in}, {"config", config}, {"seed", seed}, {"output", out}};
}

}  // namespace maskfill
