#include "maskfill/eval.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "maskfill/checkpoint.hpp"
#include "maskfill/losses.hpp"
#include "maskfill/seeding.hpp"

namespace maskfill {

using nlohmann::json;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

void ExperimentReport::summarize() {
  mean = stddev = 0.0;
  if (cases.empty()) return;
  for (const auto& c : cases) mean += c.dice;
  mean /= double(cases.size());
  for (const auto& c : cases) stddev += (c.dice - mean) * (c.dice - mean);
  stddev = std::sqrt(stddev / double(cases.size()));
}

void to_json(json& j, const ExperimentReport& r) {
  json cases = json::array();
  for (const auto& c : r.cases) cases.push_back({{"id", c.id}, {"dice", c.dice}});
  j = json{{"condition", r.condition},
           {"cases", cases},
           {"mean", r.mean},
           {"std", r.stddev},
           {"config_hash", r.config_hash},
           {"runtime_seconds", r.runtime_seconds},
           {"metadata", r.metadata}};
}

void from_json(const json& j, ExperimentReport& r) {
  r.condition = j.at("condition").get<std::string>();
  r.cases.clear();
  for (const auto& c : j.at("cases")) r.cases.push_back({c.at("id").get<std::string>(), c.at("dice").get<double>()});
  r.mean = j.at("mean").get<double>();
  r.stddev = j.at("std").get<double>();
  r.config_hash = j.value("config_hash", std::string());
  r.runtime_seconds = j.value("runtime_seconds", 0.0);
  r.metadata = j.value("metadata", json::object());
}

std::string to_markdown(const std::vector<ExperimentReport>& reports) {
  std::ostringstream os;
  os << "| condition | cases | mean Dice | std | config | runtime (s) |\n";
  os << "|---|---:|---:|---:|---|---:|\n";
  char buf[256];
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof(buf), "| %s | %zu | %.4f | %.4f | %s | %.1f |\n", r.condition.c_str(), r.cases.size(),
                  r.mean, r.stddev, r.config_hash.c_str(), r.runtime_seconds);
    os << buf;
  }
  return os.str();
}

void write_reports(const std::vector<ExperimentReport>& reports, const std::filesystem::path& stem) {
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  std::ofstream(stem.string() + ".json") << json(reports).dump(2) << '\n';
  std::ofstream(stem.string() + ".md") << to_markdown(reports);
}

std::string config_hash(const json& config) {
  const std::string s = config.dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return hex64(h);
}

ExperimentReport evaluate(const Predictor& predict, const std::vector<LabeledCase>& cases,
                          const std::string& condition) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentReport r;
  r.condition = condition;
  for (const auto& c : cases) r.cases.push_back({c.id, dice_score(binarize(predict(c.image)), c.mask)});
  r.summarize();
  r.runtime_seconds = seconds_since(t0);
  return r;
}

ExperimentReport run_direct_test(const SegModel& model, const std::vector<LabeledCase>& cases) {
  return run_direct_test([&](const Volume& x) { return seg_forward(model, x); }, cases);
}

ExperimentReport run_direct_test(const Predictor& predict, const std::vector<LabeledCase>& cases) {
  return evaluate(predict, cases, "direct_test");
}

double mean_foreground_volume(const SegModel& model, const std::vector<Volume>& images) {
  if (images.empty()) return 0.0;
  double total = 0.0;
  for (const auto& x : images) total += double(foreground_count(binarize(seg_forward(model, x))));
  return total / double(images.size());
}

std::string AblationRow::label() const {
  if (!distill && !pseudo && !recon) return "direct_test";
  if (distill && pseudo && recon) return "full";
  if (distill && !pseudo && !recon) return "distill_only";
  if (!distill && pseudo && !recon) return "pseudo_only";
  if (!distill && !pseudo && recon) return "recon_only";
  std::string s;
  if (distill) s += "distill";
  if (pseudo) s += s.empty() ? "pseudo" : "+pseudo";
  if (recon) s += s.empty() ? "recon" : "+recon";
  return s;
}

std::vector<AblationRow> ablation_rows() {
  std::vector<AblationRow> rows;
  for (int mask = 0; mask < 8; ++mask) rows.push_back({bool(mask & 1), bool(mask & 2), bool(mask & 4)});
  return rows;
}

AblationResult run_ablation_grid(const AblationSetup& setup) {
  if (!setup.source || !setup.mlm) throw InvalidArgument("run_ablation_grid: source and MLM checkpoints are required");
  AblationResult out;
  const auto t0 = std::chrono::steady_clock::now();
  out.distilled = distill(*setup.source, *setup.mlm, setup.adapt_images, setup.distill);
  const double distill_seconds = seconds_since(t0);
  for (const auto& row : ablation_rows()) {
    const SegModel& start = row.distill ? out.distilled.model : *setup.source;
    json cfg{{"row", row.label()}, {"distill", row.distill ? json(setup.distill) : json(nullptr)}};
    const auto t1 = std::chrono::steady_clock::now();
    const SegModel* evaluated = &start;
    if (row.pseudo || row.recon) {
      AdaptConfig a = setup.adapt;
      a.lambda_pseudo = row.pseudo ? (setup.adapt.lambda_pseudo > 0 ? setup.adapt.lambda_pseudo : 1.0) : 0.0;
      a.use_recon = row.recon;
      cfg["adapt"] = a;
      auto [it, _] = out.adapted.emplace(row.label(), adapt(start, *setup.mlm, setup.adapt_images, a));
      evaluated = &it->second.target;
    }
    auto report = run_direct_test(*evaluated, setup.test_cases);
    report.condition = row.label();
    report.config_hash = config_hash(cfg);
    report.runtime_seconds = seconds_since(t1) + (row.distill ? distill_seconds : 0.0);
    report.metadata = {{"distill", row.distill}, {"pseudo", row.pseudo}, {"recon", row.recon}};
    out.reports.push_back(std::move(report));
  }
  return out;
}

ExperimentReport run_upper_bound(const SegModel& init, const std::vector<LabeledCase>& train_cases,
                                 const std::vector<LabeledCase>& test_cases, const SegTrainOptions& opts,
                                 SegModel* trained) {
  const auto t0 = std::chrono::steady_clock::now();
  auto fit = train_supervised(init, train_cases, opts);
  auto report = run_direct_test(fit.model, test_cases);
  report.condition = "upper_bound";
  report.config_hash = config_hash(json(opts));
  report.runtime_seconds = seconds_since(t0);
  if (trained) *trained = std::move(fit.model);
  return report;
}

std::pair<double, double> LossScatter::centroid(const std::string& condition) const {
  double x = 0.0, y = 0.0;
  int n = 0;
  for (const auto& p : points) {
    if (p.condition != condition) continue;
    x += p.l_pseudo;
    y += p.l_recon;
    ++n;
  }
  if (n == 0) throw InvalidArgument("no scatter points for condition " + condition);
  return {x / n, y / n};
}

std::string LossScatter::to_csv() const {
  std::ostringstream os;
  os.precision(9);
  os << "case,condition,l_recon,l_pseudo\n";
  for (const auto& p : points) os << p.case_id << ',' << p.condition << ',' << p.l_recon << ',' << p.l_pseudo << '\n';
  return os.str();
}

void LossScatter::write_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << to_csv();
}

LossScatter emit_loss_scatter(const SegModel& target, const SegModel& pseudo, const MlmModel& mlm,
                              const std::vector<LabeledCase>& cases, double mask_ratio, std::uint64_t seed) {
  LossScatter s;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto& c = cases[i];
    const SoftMask y_p = seg_forward(pseudo, c.image);
    const SoftMask y_t = seg_forward(target, c.image);
    const SoftMask gt = to_soft(c.mask);
    const std::pair<const char*, const SoftMask*> conds[] = {
        {"pseudo_label", &y_p}, {"prediction", &y_t}, {"ground_truth", &gt}};
    for (const auto& [name, m] : conds) {
      const SoftMask y_r = reconstruct_prediction(mlm, *m, mask_ratio, derive_seed(seed, i));
      s.points.push_back({c.id, name, recon_loss(*m, y_r), pseudo_loss(*m, y_p)});
    }
  }
  return s;
}

}  // namespace maskfill
