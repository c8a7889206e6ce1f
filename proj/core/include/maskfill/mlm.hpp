#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "maskfill/nn/params.hpp"
#include "maskfill/nn/transformer.hpp"
#include "maskfill/patching.hpp"
#include "maskfill/train_log.hpp"
#include "maskfill/volume.hpp"

namespace maskfill {

/// Masked label-mask model geometry. Defaults are the full-size network;
/// `scaled(s)` divides sizes by s for small desk runs.
struct MlmConfig {
  Index3 input_shape{128, 128, 128};
  int patch_size = 16;
  int encoder_blocks = 12;
  int encoder_dim = 768;
  int encoder_heads = 12;
  int decoder_blocks = 8;
  int decoder_dim = 384;
  int decoder_heads = 6;
  int mlp_ratio = 4;
  double mask_ratio = 0.75;

  MlmConfig scaled(int scale) const;
  void validate() const;
  PatchGrid grid() const { return PatchGrid::for_shape(input_shape, patch_size); }
};

void to_json(nlohmann::json& j, const MlmConfig& c);
void from_json(const nlohmann::json& j, MlmConfig& c);

/// Transformer encoder over visible patch tokens, a shared learnable mask
/// token, and a transformer decoder over all N_p positions that predicts
/// every voxel of every patch through a sigmoid head.
template <typename T>
class MlmNetwork {
 public:
  /// Activations of one forward pass, kept for backward.
  struct Pass {
    std::vector<std::int64_t> visible;    // encoder feed order
    std::vector<std::int64_t> corrupted;
    nn::Mat<T> visible_patches;           // encoder input rows, feed order
    std::vector<typename nn::TransformerBlock<T>::Cache> encoder;
    typename nn::LayerNorm<T>::Cache encoder_norm;
    nn::Mat<T> encoded;                   // normalized encoder output
    std::vector<typename nn::TransformerBlock<T>::Cache> decoder;
    typename nn::LayerNorm<T>::Cache decoder_norm;
    nn::Mat<T> decoded;                   // normalized decoder output
    nn::Mat<T> output;                    // sigmoid, N_p x P^3
    std::int64_t decoder_tokens = 0;
  };

  MlmNetwork() = default;
  MlmNetwork(const MlmConfig& config, std::uint64_t seed);

  const MlmConfig& config() const { return config_; }
  const PatchGrid& grid() const { return grid_; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }

  /// `mask_values` is row-major over config().input_shape. `visible_order`
  /// optionally permutes the encoder feed order (must be a permutation of
  /// plan.visible()). Returns the reconstruction in the same layout.
  std::vector<T> forward(std::span<const T> mask_values, const MaskPlan& plan, Pass* pass = nullptr,
                         std::span<const std::int64_t> visible_order = {}) const;

  /// Accumulates parameter gradients from dL/d(output). Returns dL/d(input)
  /// when requested (zero on corrupted patches), otherwise an empty vector.
  std::vector<T> backward(const Pass& pass, std::span<const T> grad_output, bool want_input_grad = false);

 private:
  MlmConfig config_;
  PatchGrid grid_;
  nn::ParamStore<T> params_;
  nn::Linear<T> patch_embed_;
  std::vector<nn::TransformerBlock<T>> encoder_;
  nn::LayerNorm<T> encoder_norm_;
  nn::Linear<T> decoder_embed_;
  std::size_t mask_token_ = 0;
  std::vector<nn::TransformerBlock<T>> decoder_;
  nn::LayerNorm<T> decoder_norm_;
  nn::Linear<T> head_;
  nn::Mat<T> encoder_pos_, decoder_pos_;
};

using MlmModel = MlmNetwork<float>;

/// Reconstruct a label mask under a corruption plan (eval mode).
SoftMask mlm_forward(const MlmModel& model, const LabelMask& mask, const MaskPlan& plan);
/// Soft input is binarized at 0.5 first.
SoftMask mlm_forward(const MlmModel& model, const SoftMask& mask, const MaskPlan& plan);

/// Organ-aware plan at `ratio` for the binarized prediction; a prediction
/// without foreground gets the empty plan.
MaskPlan inference_plan(const MlmModel& model, const LabelMask& mask, double ratio, std::uint64_t seed);

/// Binarize, plan with `ratio`, reconstruct.
SoftMask reconstruct_prediction(const MlmModel& model, const SoftMask& prediction, double ratio, std::uint64_t seed);

struct MlmTrainOptions {
  double lr = 1.5e-4;
  std::int64_t iters = 200;
  int batch = 4;
  std::uint64_t seed = 0;
  double warmup_fraction = 0.05;
  double weight_decay = 0.0;
};

void to_json(nlohmann::json& j, const MlmTrainOptions& o);
void from_json(const nlohmann::json& j, MlmTrainOptions& o);

struct MlmTrainResult {
  MlmModel model;
  TrainLog log;  // iter,loss
};

/// Fresh model from `config`, trained with the voxel-wise MSE on organ-aware
/// corrupted inputs. Throws EmptyDatasetError for an empty mask list.
MlmTrainResult train_mlm(const std::vector<LabelMask>& masks, const MlmConfig& config, const MlmTrainOptions& opts);

/// Warm-started continuation of training on a (small) support set.
MlmTrainResult finetune_mlm(const MlmModel& model, const std::vector<LabelMask>& support,
                            const MlmTrainOptions& opts);

}  // namespace maskfill
