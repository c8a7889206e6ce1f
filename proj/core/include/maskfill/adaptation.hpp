#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "maskfill/mlm.hpp"
#include "maskfill/seg.hpp"
#include "maskfill/train_log.hpp"
#include "maskfill/volume.hpp"

namespace maskfill {

struct DistillConfig {
  double lr = 1e-4;
  std::int64_t iters = 100;
  int batch = 2;
  double mask_ratio = 0.75;  // MLM inference corruption ratio
  std::uint64_t seed = 0;
  double warmup_fraction = 0.05;
  /// Threshold the MLM reconstruction at 0.5 before it serves as the target.
  bool binarize_target = false;
  /// Re-estimate normalization statistics on the target images once, then
  /// train with them frozen (the network runs exactly as at inference).
  bool freeze_norm = false;
  /// Re-estimate normalization statistics on the target images after training.
  bool recalibrate = false;
};

struct AdaptConfig {
  double lambda_pseudo = 1.0;
  bool use_recon = true;
  double beta = 0.99;
  std::int64_t ema_interval = 100;  // M
  std::int64_t iters = 200;         // N
  double lr = 1e-4;
  int batch = 2;
  double mask_ratio = 0.75;
  std::uint64_t seed = 0;
  double warmup_fraction = 0.05;
  bool binarize_pseudo = false;
  bool binarize_recon = false;
  /// Train the student with the normalization statistics it inherits, frozen.
  bool freeze_norm = false;
  /// Experimental: also differentiate the reconstruction term through the
  /// frozen MLM (straight-through over the binarization).
  bool backprop_through_mlm = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const DistillConfig& c);
void from_json(const nlohmann::json& j, DistillConfig& c);
void to_json(nlohmann::json& j, const AdaptConfig& c);
void from_json(const nlohmann::json& j, AdaptConfig& c);

/// Dice-form losses of the target stage. Both delegate to dice_loss.
double pseudo_loss(const SoftMask& y_t, const SoftMask& y_p);
double recon_loss(const SoftMask& y_t, const SoftMask& y_r);
double total_loss(const SoftMask& y_t, const SoftMask& y_p, const SoftMask& y_r, double lambda_pseudo);
inline double total_loss(double l_pseudo, double l_recon, double lambda_pseudo) {
  return lambda_pseudo * l_pseudo + l_recon;
}

/// theta_r <- beta * theta_r + (1 - beta) * theta_t over every entry,
/// normalization running statistics included.
template <typename T>
void ema_update(nn::ParamStore<T>& teacher, const nn::ParamStore<T>& student, double beta);
void ema_update(SegModel& teacher, const SegModel& student, double beta);

struct DistillResult {
  SegModel model;  // S^R
  TrainLog log;    // iter,l_distill
};

/// Stage 2: copy S^S and fit it to MLM reconstructions of its own
/// predictions. The MLM is never written.
DistillResult distill(const SegModel& source, const MlmModel& mlm, const std::vector<Volume>& targets,
                      const DistillConfig& cfg);

struct AdaptHooks {
  /// Called after each pseudo-label pass with the teacher that produced it.
  std::function<void(std::int64_t iter, const SegModel& teacher)> on_pseudo;
  /// Called right after every EMA update.
  std::function<void(std::int64_t iter, const SegModel& teacher)> on_ema;
};

struct AdaptResult {
  SegModel target;   // S^T
  SegModel teacher;  // S^R after the last EMA update
  TrainLog log;      // iter,l_pseudo,l_recon,l_total
  std::int64_t ema_updates = 0;
  std::vector<std::string> warnings;
};

/// Stage 3: dual-loss optimization of S^T with periodic EMA into S^R.
AdaptResult adapt(const SegModel& pseudo, const MlmModel& mlm, const std::vector<Volume>& targets,
                  const AdaptConfig& cfg, const AdaptHooks& hooks = {});

struct UnseenOrganConfig {
  MlmTrainOptions finetune;
  DistillConfig distill;
  AdaptConfig adapt;
  bool skip_finetune = false;
};

struct UnseenOrganResult {
  MlmModel mlm;  // after one-shot fine-tuning
  TrainLog finetune_log;
  DistillResult distilled;
  AdaptResult adapted;
};

/// One-shot MLM fine-tune on `support`, then distill, then adapt.
UnseenOrganResult unseen_organ_pipeline(const LabelMask& support, const std::vector<Volume>& targets,
                                        const SegModel& source, const MlmModel& mlm, const UnseenOrganConfig& cfg);

/// Provenance record of one stage run: input files with digests, config,
/// seed and the output checkpoint.
nlohmann::json stage_manifest(const std::string& stage, const std::map<std::string, std::filesystem::path>& inputs,
                              const nlohmann::json& config, std::uint64_t seed, const std::filesystem::path& output);

}  // namespace maskfill
