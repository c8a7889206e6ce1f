#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "maskfill/adaptation.hpp"
#include "maskfill/mlm.hpp"
#include "maskfill/seg.hpp"
#include "maskfill/volume.hpp"

namespace maskfill {

struct CaseScore {
  std::string id;
  double dice = 0.0;
};

struct ExperimentReport {
  std::string condition;  // direct_test, distill_only, ..., full, upper_bound, ...
  std::vector<CaseScore> cases;
  double mean = 0.0;
  double stddev = 0.0;
  std::string config_hash;
  double runtime_seconds = 0.0;
  nlohmann::json metadata = nlohmann::json::object();

  /// Recomputes mean and (population) standard deviation from `cases`.
  void summarize();
};

void to_json(nlohmann::json& j, const ExperimentReport& r);
void from_json(const nlohmann::json& j, ExperimentReport& r);

/// Human-readable table, one row per report.
std::string to_markdown(const std::vector<ExperimentReport>& reports);
/// Writes `<stem>.json` and `<stem>.md`.
void write_reports(const std::vector<ExperimentReport>& reports, const std::filesystem::path& stem);

/// FNV-1a of the compact JSON dump, hex encoded.
std::string config_hash(const nlohmann::json& config);

using Predictor = std::function<SoftMask(const Volume&)>;

/// Dice of binarized predictions against held-out labels, one row per case.
ExperimentReport evaluate(const Predictor& predict, const std::vector<LabeledCase>& cases,
                          const std::string& condition);
ExperimentReport run_direct_test(const SegModel& model, const std::vector<LabeledCase>& cases);
ExperimentReport run_direct_test(const Predictor& predict, const std::vector<LabeledCase>& cases);

/// Mean predicted foreground voxel count (binarized at 0.5).
double mean_foreground_volume(const SegModel& model, const std::vector<Volume>& images);

struct AblationSetup {
  const SegModel* source = nullptr;
  const MlmModel* mlm = nullptr;
  std::vector<Volume> adapt_images;      // unlabeled target training images
  std::vector<LabeledCase> test_cases;   // held-out labeled target cases
  DistillConfig distill;
  AdaptConfig adapt;  // lambda_pseudo/use_recon are overridden per row
};

struct AblationRow {
  bool distill = false, pseudo = false, recon = false;
  std::string label() const;
};

/// All eight on/off combinations, in a fixed order starting with the all-off row.
std::vector<AblationRow> ablation_rows();

struct AblationResult {
  std::vector<ExperimentReport> reports;  // ablation_rows() order
  DistillResult distilled;
  std::map<std::string, AdaptResult> adapted;  // keyed by row label
};

/// Throws InvalidArgument when a model is missing.
AblationResult run_ablation_grid(const AblationSetup& setup);

/// Supervised fine-tune of `init` on labeled target cases, evaluated on `test_cases`.
ExperimentReport run_upper_bound(const SegModel& init, const std::vector<LabeledCase>& train_cases,
                                 const std::vector<LabeledCase>& test_cases, const SegTrainOptions& opts,
                                 SegModel* trained = nullptr);

struct LossPoint {
  std::string case_id;
  std::string condition;  // pseudo_label | prediction | ground_truth
  double l_recon = 0.0;
  double l_pseudo = 0.0;
};

struct LossScatter {
  std::vector<LossPoint> points;

  /// Mean (l_pseudo, l_recon) of one condition.
  std::pair<double, double> centroid(const std::string& condition) const;
  std::string to_csv() const;
  void write_csv(const std::filesystem::path& path) const;
};

/// For each case and each of pseudo label, adapted prediction and ground
/// truth: the reconstruction loss against its own MLM reconstruction and the
/// pseudo loss against the pseudo label.
LossScatter emit_loss_scatter(const SegModel& target, const SegModel& pseudo, const MlmModel& mlm,
                              const std::vector<LabeledCase>& cases, double mask_ratio, std::uint64_t seed);

}  // namespace maskfill
