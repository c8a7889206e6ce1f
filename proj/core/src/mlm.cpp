#include "maskfill/mlm.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "maskfill/losses.hpp"
#include "maskfill/nn/optim.hpp"
#include "maskfill/seeding.hpp"

namespace maskfill {

MlmConfig MlmConfig::scaled(int scale) const {
  if (scale < 1) throw InvalidArgument("scale must be >= 1");
  MlmConfig c = *this;
  for (auto& s : c.input_shape) s = std::max<std::int64_t>(1, s / scale);
  c.patch_size = std::max(1, patch_size / scale);
  c.encoder_blocks = std::max(1, encoder_blocks / scale);
  c.encoder_dim = std::max(1, encoder_dim / scale);
  c.encoder_heads = std::max(1, encoder_heads / scale);
  c.decoder_blocks = std::max(1, decoder_blocks / scale);
  c.decoder_dim = std::max(1, decoder_dim / scale);
  c.decoder_heads = std::max(1, decoder_heads / scale);
  return c;
}

void MlmConfig::validate() const {
  (void)grid();
  if (encoder_blocks < 1 || decoder_blocks < 1) throw InvalidArgument("MLM needs at least one block per side");
  if (encoder_heads < 1 || encoder_dim % encoder_heads != 0)
    throw InvalidArgument("encoder_dim must be divisible by encoder_heads");
  if (decoder_heads < 1 || decoder_dim % decoder_heads != 0)
    throw InvalidArgument("decoder_dim must be divisible by decoder_heads");
  if (mlp_ratio < 1) throw InvalidArgument("mlp_ratio must be >= 1");
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) throw InvalidArgument("mask_ratio must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const MlmConfig& c) {
  j = nlohmann::json{{"input_shape", c.input_shape},       {"patch_size", c.patch_size},
                     {"encoder_blocks", c.encoder_blocks}, {"encoder_dim", c.encoder_dim},
                     {"encoder_heads", c.encoder_heads},   {"decoder_blocks", c.decoder_blocks},
                     {"decoder_dim", c.decoder_dim},       {"decoder_heads", c.decoder_heads},
                     {"mlp_ratio", c.mlp_ratio},           {"mask_ratio", c.mask_ratio}};
}

void from_json(const nlohmann::json& j, MlmConfig& c) {
  MlmConfig d;
  c.input_shape = j.value("input_shape", d.input_shape);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.encoder_blocks = j.value("encoder_blocks", d.encoder_blocks);
  c.encoder_dim = j.value("encoder_dim", d.encoder_dim);
  c.encoder_heads = j.value("encoder_heads", d.encoder_heads);
  c.decoder_blocks = j.value("decoder_blocks", d.decoder_blocks);
  c.decoder_dim = j.value("decoder_dim", d.decoder_dim);
  c.decoder_heads = j.value("decoder_heads", d.decoder_heads);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.mask_ratio = j.value("mask_ratio", d.mask_ratio);
}

void to_json(nlohmann::json& j, const MlmTrainOptions& o) {
  j = nlohmann::json{{"lr", o.lr},
                     {"iters", o.iters},
                     {"batch", o.batch},
                     {"seed", o.seed},
                     {"warmup_fraction", o.warmup_fraction},
                     {"weight_decay", o.weight_decay}};
}

void from_json(const nlohmann::json& j, MlmTrainOptions& o) {
  MlmTrainOptions d;
  o.lr = j.value("lr", d.lr);
  o.iters = j.value("iters", d.iters);
  o.batch = j.value("batch", d.batch);
  o.seed = j.value("seed", d.seed);
  o.warmup_fraction = j.value("warmup_fraction", d.warmup_fraction);
  o.weight_decay = j.value("weight_decay", d.weight_decay);
}

template <typename T>
MlmNetwork<T>::MlmNetwork(const MlmConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  grid_ = config_.grid();
  nn::Rng rng(seed);
  const int pv = static_cast<int>(grid_.patch_voxels());
  patch_embed_ = nn::Linear<T>::make(params_, "patch_embed", pv, config_.encoder_dim, rng);
  for (int b = 0; b < config_.encoder_blocks; ++b) {
    encoder_.push_back(nn::TransformerBlock<T>::make(params_, "encoder." + std::to_string(b), config_.encoder_dim,
                                                     config_.encoder_heads, config_.mlp_ratio, rng));
  }
  encoder_norm_ = nn::LayerNorm<T>::make(params_, "encoder_norm", config_.encoder_dim);
  decoder_embed_ = nn::Linear<T>::make(params_, "decoder_embed", config_.encoder_dim, config_.decoder_dim, rng);
  mask_token_ = params_.add("mask_token", {config_.decoder_dim});
  nn::fill_normal(params_[mask_token_].value, 0.02, rng);
  for (int b = 0; b < config_.decoder_blocks; ++b) {
    decoder_.push_back(nn::TransformerBlock<T>::make(params_, "decoder." + std::to_string(b), config_.decoder_dim,
                                                     config_.decoder_heads, config_.mlp_ratio, rng));
  }
  decoder_norm_ = nn::LayerNorm<T>::make(params_, "decoder_norm", config_.decoder_dim);
  head_ = nn::Linear<T>::make(params_, "head", config_.decoder_dim, pv, rng);
  encoder_pos_ = nn::sincos_position_encoding(config_.encoder_dim, grid_.grid_dims).cast<T>();
  decoder_pos_ = nn::sincos_position_encoding(config_.decoder_dim, grid_.grid_dims).cast<T>();
}

template <typename T>
std::vector<T> MlmNetwork<T>::forward(std::span<const T> mask_values, const MaskPlan& plan, Pass* pass,
                                      std::span<const std::int64_t> visible_order) const {
  if (std::int64_t(mask_values.size()) != grid_.volume_shape[0] * grid_.volume_shape[1] * grid_.volume_shape[2]) {
    throw ShapeError("mlm_forward: input does not match the configured input shape");
  }
  if (plan.num_patches != grid_.num_patches()) throw InvalidArgument("mlm_forward: plan does not match patch grid");

  const auto patches = patchify<T>(mask_values, grid_.volume_shape, grid_.patch_size);
  const std::int64_t np = grid_.num_patches();
  const std::int64_t pv = grid_.patch_voxels();
  std::vector<std::int64_t> visible;
  if (visible_order.empty()) {
    visible = plan.visible();
  } else {
    visible.assign(visible_order.begin(), visible_order.end());
    auto sorted = visible;
    std::sort(sorted.begin(), sorted.end());
    if (sorted != plan.visible()) throw InvalidArgument("visible_order must permute the plan's visible patches");
  }
  const auto nv = static_cast<Eigen::Index>(visible.size());

  nn::Mat<T> vis(nv, pv);
  for (Eigen::Index r = 0; r < nv; ++r) {
    vis.row(r) = Eigen::Map<const nn::RowVec<T>>(patches.row(visible[std::size_t(r)]).data(), pv);
  }

  nn::Mat<T> encoded(nv, config_.encoder_dim);
  if (pass) pass->encoder.resize(encoder_.size());
  if (nv > 0) {
    nn::Mat<T> x = patch_embed_.forward(params_, vis);
    for (Eigen::Index r = 0; r < nv; ++r) x.row(r) += encoder_pos_.row(visible[std::size_t(r)]);
    for (std::size_t b = 0; b < encoder_.size(); ++b) {
      x = encoder_[b].forward(params_, x, pass ? &pass->encoder[b] : nullptr);
    }
    encoded = encoder_norm_.forward(params_, x, pass ? &pass->encoder_norm : nullptr);
  }

  nn::Mat<T> z(np, config_.decoder_dim);
  const auto token = Eigen::Map<const nn::RowVec<T>>(params_[mask_token_].value.data(), config_.decoder_dim);
  for (auto p : plan.corrupted) z.row(p) = token;
  if (nv > 0) {
    const nn::Mat<T> dvis = decoder_embed_.forward(params_, encoded);
    for (Eigen::Index r = 0; r < nv; ++r) z.row(visible[std::size_t(r)]) = dvis.row(r);
  }
  z += decoder_pos_;
  if (pass) pass->decoder.resize(decoder_.size());
  for (std::size_t b = 0; b < decoder_.size(); ++b) {
    z = decoder_[b].forward(params_, z, pass ? &pass->decoder[b] : nullptr);
  }
  nn::Mat<T> decoded = decoder_norm_.forward(params_, z, pass ? &pass->decoder_norm : nullptr);
  nn::Mat<T> out = head_.forward(params_, decoded);
  out = out.unaryExpr([](T v) { return T(1) / (T(1) + std::exp(-v)); });

  PatchSet<T> recon;
  recon.grid = grid_;
  recon.values.assign(out.data(), out.data() + out.size());
  auto result = unpatchify(recon);

  if (pass) {
    pass->visible = std::move(visible);
    pass->corrupted = plan.corrupted;
    pass->visible_patches = std::move(vis);
    pass->encoded = std::move(encoded);
    pass->decoded = std::move(decoded);
    pass->output = std::move(out);
    pass->decoder_tokens = np;
  }
  return result;
}

template <typename T>
std::vector<T> MlmNetwork<T>::backward(const Pass& pass, std::span<const T> grad_output, bool want_input_grad) {
  const std::int64_t pv = grid_.patch_voxels();
  const auto gpatch = patchify<T>(grad_output, grid_.volume_shape, grid_.patch_size);
  nn::Mat<T> dlogits = Eigen::Map<const nn::Mat<T>>(gpatch.values.data(), grid_.num_patches(), pv);
  dlogits = dlogits.cwiseProduct(pass.output.cwiseProduct((T(1) - pass.output.array()).matrix()));

  nn::Mat<T> dz = head_.backward(params_, pass.decoded, dlogits);
  dz = decoder_norm_.backward(params_, pass.decoder_norm, dz);
  for (std::size_t b = decoder_.size(); b-- > 0;) dz = decoder_[b].backward(params_, pass.decoder[b], dz);

  auto token_grad = Eigen::Map<nn::RowVec<T>>(params_[mask_token_].grad.data(), config_.decoder_dim);
  for (auto p : pass.corrupted) token_grad += dz.row(p);

  const auto nv = static_cast<Eigen::Index>(pass.visible.size());
  std::vector<T> input_grad;
  if (nv == 0) {
    if (want_input_grad) input_grad.assign(grad_output.size(), T(0));
    return input_grad;
  }
  nn::Mat<T> dvis(nv, config_.decoder_dim);
  for (Eigen::Index r = 0; r < nv; ++r) dvis.row(r) = dz.row(pass.visible[std::size_t(r)]);
  nn::Mat<T> dx = decoder_embed_.backward(params_, pass.encoded, dvis);
  dx = encoder_norm_.backward(params_, pass.encoder_norm, dx);
  for (std::size_t b = encoder_.size(); b-- > 0;) dx = encoder_[b].backward(params_, pass.encoder[b], dx);
  const nn::Mat<T> dpatch = patch_embed_.backward(params_, pass.visible_patches, dx);

  if (want_input_grad) {
    PatchSet<T> g;
    g.grid = grid_;
    g.values.assign(std::size_t(grid_.num_patches() * pv), T(0));
    for (Eigen::Index r = 0; r < nv; ++r) {
      std::copy(dpatch.row(r).data(), dpatch.row(r).data() + pv,
                g.values.begin() + std::ptrdiff_t(pass.visible[std::size_t(r)] * pv));
    }
    input_grad = unpatchify(g);
  }
  return input_grad;
}

template class MlmNetwork<float>;
template class MlmNetwork<double>;

SoftMask mlm_forward(const MlmModel& model, const LabelMask& mask, const MaskPlan& plan) {
  if (mask.shape() != model.config().input_shape) throw ShapeError("mlm_forward: mask shape != config input_shape");
  std::vector<float> in(mask.values().begin(), mask.values().end());
  auto out = model.forward(in, plan);
  return SoftMask(mask.lattice(), std::move(out));
}

SoftMask mlm_forward(const MlmModel& model, const SoftMask& mask, const MaskPlan& plan) {
  return mlm_forward(model, binarize(mask), plan);
}

MaskPlan inference_plan(const MlmModel& model, const LabelMask& mask, double ratio, std::uint64_t seed) {
  if (foreground_count(mask) == 0) return MaskPlan::none(model.grid().num_patches());
  return plan_mask(mask, model.grid(), ratio, seed);
}

SoftMask reconstruct_prediction(const MlmModel& model, const SoftMask& prediction, double ratio, std::uint64_t seed) {
  const LabelMask bin = binarize(prediction);
  return mlm_forward(model, bin, inference_plan(model, bin, ratio, seed));
}

namespace {

void fit(MlmModel& model, const std::vector<LabelMask>& masks, const MlmTrainOptions& opts, TrainLog& log) {
  log.columns = {"iter", "loss"};
  if (opts.iters <= 0) return;
  if (opts.batch < 1) throw InvalidArgument("batch must be >= 1");
  const auto& cfg = model.config();
  std::vector<std::vector<float>> inputs;
  for (const auto& m : masks) {
    if (m.shape() != cfg.input_shape) throw ShapeError("train_mlm: mask shape != config input_shape");
    inputs.emplace_back(m.values().begin(), m.values().end());
  }
  nn::Adam<float> adam(model.params(), {.weight_decay = opts.weight_decay});
  nn::Rng rng(opts.seed);
  std::uniform_int_distribution<std::size_t> pick(0, masks.size() - 1);
  std::vector<float> grad(inputs.front().size());
  MlmModel::Pass pass;
  for (std::int64_t it = 0; it < opts.iters; ++it) {
    model.params().zero_grad();
    double loss = 0.0;
    for (int b = 0; b < opts.batch; ++b) {
      const std::size_t idx = pick(rng);
      const auto plan = inference_plan(model, masks[idx], cfg.mask_ratio, derive_seed(opts.seed, std::uint64_t(it), std::uint64_t(b)));
      const auto out = model.forward(inputs[idx], plan, &pass);
      loss += mse_loss<float>(inputs[idx], out, grad);
      model.backward(pass, grad);
    }
    model.params().scale_grad(1.0f / float(opts.batch));
    adam.step(model.params(), nn::cosine_lr(opts.lr, it, opts.iters, opts.warmup_fraction));
    log.add({double(it), loss / opts.batch});
  }
}

}  // namespace

MlmTrainResult train_mlm(const std::vector<LabelMask>& masks, const MlmConfig& config, const MlmTrainOptions& opts) {
  if (masks.empty()) throw EmptyDatasetError("train_mlm: no masks");
  MlmTrainResult r{MlmModel(config, derive_seed(opts.seed, 0x4d4c4d)), {}};
  fit(r.model, masks, opts, r.log);
  return r;
}

MlmTrainResult finetune_mlm(const MlmModel& model, const std::vector<LabelMask>& support,
                            const MlmTrainOptions& opts) {
  if (support.empty()) throw EmptyDatasetError("finetune_mlm: empty support set");
  MlmTrainResult r{model, {}};
  fit(r.model, support, opts, r.log);
  return r;
}

}  // namespace maskfill
