#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "maskfill/nn/conv.hpp"
#include "maskfill/nn/params.hpp"
#include "maskfill/preprocess.hpp"
#include "maskfill/train_log.hpp"
#include "maskfill/volume.hpp"

namespace maskfill {

/// 3D U-Net geometry. `channels[0]` is the stem width; each further entry adds
/// one stride-2 level, so depth == channels.size() - 1.
struct SegConfig {
  std::vector<int> channels{8, 16, 32, 64, 128, 256};
  Index3 input_shape{128, 128, 128};
  int num_classes = 2;

  int depth() const { return static_cast<int>(channels.size()) - 1; }
  /// Divides the input shape by `scale` and the widths by `scale` (floor 4).
  /// Levels are dropped so the coarsest feature map keeps at least 4 voxels
  /// per axis.
  SegConfig scaled(int scale) const;
  void validate() const;
};

void to_json(nlohmann::json& j, const SegConfig& c);
void from_json(const nlohmann::json& j, SegConfig& c);

enum class SegRole { source, pseudo, target };

std::string to_string(SegRole role);
SegRole seg_role_from_string(const std::string& s);

/// Encoder-decoder segmenter with skip connections and a two-class softmax
/// head. Only the foreground probability is returned.
template <typename T>
class SegNetwork {
 public:
  using Tensor = nn::Tensor5<T>;

  /// Convolution with optional batch-norm + ReLU.
  struct Unit {
    nn::Conv3d<T> conv;
    bool norm = true;
    nn::BatchNorm3d<T> bn;
  };
  struct UnitCache {
    Tensor x, y;
    typename nn::BatchNorm3d<T>::Cache bn;
  };
  struct Pass {
    UnitCache stem;
    std::vector<std::vector<UnitCache>> down, up;
    std::vector<Tensor> up_in;  // transposed-conv inputs
    std::vector<std::int64_t> up_channels;
    UnitCache head;
    Tensor prob;
  };

  SegNetwork() = default;
  SegNetwork(const SegConfig& config, std::uint64_t seed, SegRole role = SegRole::source);

  const SegConfig& config() const { return config_; }
  SegRole role() const { return role_; }
  void set_role(SegRole role) { role_ = role; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }

  /// Training-mode forward: batch statistics, running buffers updated.
  Tensor forward_train(const Tensor& x, Pass* pass);
  /// Inference with running statistics; `x` is [N,1,D,H,W], result [N,1,D,H,W].
  Tensor forward_eval(const Tensor& x, Pass* pass = nullptr) const;
  /// Accumulates parameter gradients from dL/d(foreground probability).
  void backward(const Pass& pass, const Tensor& grad_prob);
  /// Replaces the normalization running statistics by their average over
  /// `images` (train-mode batches of `batch`).
  void recalibrate(const std::vector<const Volume*>& images, int batch);

 private:
  Tensor run(const Tensor& x, bool train, Pass* pass);
  Tensor run_unit(const Unit& u, const Tensor& x, bool train, UnitCache* cache);
  Tensor unit_backward(const Unit& u, const UnitCache& cache, const Tensor& dy);

  SegConfig config_;
  SegRole role_ = SegRole::source;
  nn::ParamStore<T> params_;
  Unit stem_;
  std::vector<std::vector<Unit>> down_, up_;
  std::vector<nn::ConvTranspose3d<T>> up_conv_;
  Unit head_;
};

using SegModel = SegNetwork<float>;

nn::Tensor5<float> to_tensor(const std::vector<const Volume*>& batch);
SoftMask slice_prob(const nn::Tensor5<float>& prob, std::int64_t n, const Lattice& lattice);

/// Eval-mode foreground probability on the input's lattice.
SoftMask seg_forward(const SegModel& model, const Volume& x);
std::vector<SoftMask> seg_forward(const SegModel& model, const std::vector<Volume>& xs);

struct SegTrainOptions {
  double lr = 1e-3;
  std::int64_t iters = 300;
  int batch = 2;
  std::uint64_t seed = 0;
  double warmup_fraction = 0.05;
  double weight_decay = 0.0;
  bool augment = true;
  AugmentRanges ranges{};
  /// Re-estimate normalization statistics on the un-augmented cases after
  /// training, so eval mode matches the clean input distribution.
  bool recalibrate = true;
};

void to_json(nlohmann::json& j, const SegTrainOptions& o);
void from_json(const nlohmann::json& j, SegTrainOptions& o);

struct SegTrainResult {
  SegModel model;
  TrainLog log;  // iter,dice_loss
};

/// Supervised training of a fresh source model S^S. Throws EmptyDatasetError.
SegTrainResult train_source(const std::vector<LabeledCase>& cases, const SegConfig& config,
                            const SegTrainOptions& opts);
/// Supervised continuation of an existing model (upper-bound runs).
SegTrainResult train_supervised(const SegModel& init, const std::vector<LabeledCase>& cases,
                                const SegTrainOptions& opts);

}  // namespace maskfill
