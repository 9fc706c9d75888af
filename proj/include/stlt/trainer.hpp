#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "stlt/config.hpp"
#include "stlt/dataset.hpp"
#include "stlt/fusion.hpp"
#include "stlt/report.hpp"

namespace stlt {

struct TrainedModel {
  FusionModelConfig config;
  FusionWeights weights;
};

// Container with the model config under "__fusion__", the resolved training
// config under "__train__" when given, and the scheme's parameters.
void save_model(const std::filesystem::path& path, const TrainedModel& model, const std::string& train_config = "");
TrainedModel load_model(const std::filesystem::path& path);

struct EvalResult {
  TaskMode mode = TaskMode::single_label;
  std::vector<std::string> ids;
  Tensor logits;
  Tensor layout_logits;  // CACNF only
  Tensor appearance_logits;
  std::vector<std::size_t> labels;  // single-label
  std::vector<double> multi_hot;    // multi-label, N x C
};

// NaN marks metrics that do not apply.
struct EvalSummary {
  double top1 = NAN;
  double top5 = NAN;
  double map = NAN;
  double layout_top1 = NAN;
  double appearance_top1 = NAN;
  // top-1 in single-label mode, mAP in multi-label mode.
  double primary() const;
};

// Uniformly sampled, no dropout, no gradient history.
EvalResult evaluate_model(const TrainedModel& model, const Dataset& data, std::size_t batch_size,
                          const FeatureStore* features = nullptr);
EvalSummary summarize(const EvalResult& result);
// Adds the summary's applicable metrics to the report.
void record_summary(MetricsReport& report, std::size_t epoch, const std::string& split, const EvalSummary& s);

struct TrainResult {
  TrainedModel model;  // weights of the best validation epoch
  MetricsReport report;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  EvalSummary best_validation;
};

// Adam on the scheme's parameters, training-mode frame sampling, early
// stopping on the validation metric (patience, or the target reached). A
// non-finite loss raises NumericalError naming the step and the batch ids.
// `log` receives one line per epoch.
TrainResult train(const TrainConfig& config, const DataBundle& data, const FeatureStore* features = nullptr,
                  std::ostream* log = nullptr);

struct FewShotResult {
  TrainedModel model;
  MetricsReport report;
  std::uint64_t backbone_hash_before = 0;
  std::uint64_t backbone_hash_after = 0;
  EvalSummary test;
};

// Re-initializes the fused-logit classifier for `novel_classes` and trains
// only it on `finetune`; every other parameter stays bit-identical. A
// fine-tune set whose classes are not exactly 0..novel_classes-1 raises
// DataError.
FewShotResult fewshot_finetune(const TrainedModel& pretrained, const Dataset& finetune, const Dataset& test,
                               std::size_t novel_classes, const FewShotSettings& settings, std::uint64_t seed,
                               const FeatureStore* features = nullptr, std::ostream* log = nullptr);

}  // namespace stlt
