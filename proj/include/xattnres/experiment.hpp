#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xattnres/attention.hpp"
#include "xattnres/backbone.hpp"
#include "xattnres/config.hpp"
#include "xattnres/data.hpp"
#include "xattnres/gradcheck.hpp"
#include "xattnres/metrics.hpp"
#include "xattnres/training.hpp"

namespace xattnres {

using ProgressFn = std::function<void(const std::string&)>;

/// Synthetic data from the config, or the PGM directory when data_dir is set.
Dataset build_dataset(const ExperimentConfig& config);

/// Outcome of one training run, evaluated on the test split with the
/// best-validation parameters.
struct RunRecord {
  std::string run_id;
  std::string label;
  std::uint64_t seed = 0;
  BackboneConfig model;
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  MetricsReport test;
  /// Batch-averaged routing traces over the test split.
  std::vector<AttentionTrace> traces;
  ParameterCount parameters;
  double seconds = 0.0;

  /// Largest uniformity score over the model's routing sites (0 without sites).
  double max_uniformity() const;
};

struct TrainedRun {
  RunRecord record;
  Backbone<float> model;
};

/// Trains `config.model` with `config.training` (seeds already applied).
TrainedRun train_run(const ExperimentConfig& config, const Dataset& dataset, const std::string& run_id,
                     const std::string& label = {}, const ProgressFn& progress = {});

/// Routing traces of `model` on the given samples, forwarded as one batch.
std::vector<AttentionTrace> routing_traces(const Backbone<float>& model, const Dataset& dataset,
                                           std::span<const std::size_t> indices);

/// Per-epoch training/validation rows followed by per-class and mean test rows.
std::vector<MetricRow> run_metric_rows(const RunRecord& record);

/// Trains one run and writes metrics.csv, traces.csv, checkpoint.xars,
/// config.txt and summary.txt under config.out_dir.
RunRecord run_experiment(const ExperimentConfig& config, const ProgressFn& progress = {});

std::string run_summary(const RunRecord& record);

enum class AblationSuite { Skip, Position, Init };
std::string to_string(AblationSuite suite);
AblationSuite parse_ablation_suite(std::string_view text);

struct AblationVariant {
  std::string key;    // short identifier used in CSV rows
  std::string label;  // table label
  BackboneConfig model;
};

/// The configurations compared by a suite, derived from `base`.
std::vector<AblationVariant> ablation_variants(AblationSuite suite, const BackboneConfig& base);

/// Maps configurations that build identical networks (same layers, same
/// parameters, same initial values) onto one canonical form.
BackboneConfig effective_config(const BackboneConfig& config);

struct VariantSummary {
  AblationVariant variant;
  std::vector<RunRecord> runs;
  double mean_dice = 0.0, std_dice = 0.0;
  double mean_iou = 0.0, std_iou = 0.0;
  double mean_hd95 = 0.0, std_hd95 = 0.0;
};

struct AblationResult {
  AblationSuite suite = AblationSuite::Skip;
  std::vector<VariantSummary> variants;

  const VariantSummary& find(std::string_view key) const;
};

/// Reuses finished runs whose effective configuration and seed match.
class RunCache {
 public:
  const RunRecord* find(const ExperimentConfig& config) const;
  void store(const ExperimentConfig& config, const RunRecord& record);
  std::size_t size() const { return runs_.size(); }

 private:
  static std::string key(const ExperimentConfig& config);
  std::map<std::string, RunRecord> runs_;
};

AblationResult run_ablation(const ExperimentConfig& config, AblationSuite suite, const Dataset& dataset,
                            RunCache* cache = nullptr, const ProgressFn& progress = {});

std::vector<MetricRow> ablation_metric_rows(const AblationResult& result);
/// Mean ± std table in percent (Dice, mIoU) and pixels (HD95).
std::string ablation_table(const AblationResult& result);

/// Runs an ablation and writes ablation.csv, ablation.txt and config.txt
/// under config.out_dir.
AblationResult run_ablation_experiment(const ExperimentConfig& config, AblationSuite suite,
                                       const ProgressFn& progress = {});

struct GradcheckCase {
  std::string name;
  std::function<GradcheckReport()> run;
};

/// Every differentiable operation plus attend, the losses and a tiny
/// end-to-end backbone, all in double precision.
std::vector<GradcheckCase> gradcheck_cases(std::uint64_t seed = 7);

struct GradcheckSuiteResult {
  std::vector<GradcheckReport> reports;
  double seconds = 0.0;
  bool passed() const;
  std::vector<std::string> failures() const;
};

GradcheckSuiteResult run_gradcheck_suite(const std::vector<GradcheckCase>& cases, const ProgressFn& progress = {});
std::string gradcheck_report_text(const GradcheckSuiteResult& result);
std::string gradcheck_csv(const GradcheckSuiteResult& result);

/// Per-site table of mean/min/max weights with each site's uniformity score.
std::string routing_report(const std::vector<AttentionTrace>& traces);

}  // namespace xattnres
