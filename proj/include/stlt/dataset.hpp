#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "stlt/config.hpp"
#include "stlt/fusion.hpp"
#include "stlt/synthetic.hpp"

namespace stlt {

using FeatureStore = std::unordered_map<std::string, std::vector<double>>;

struct DatasetItem {
  VideoLayout layout;  // what the layout branch sees; carries the label
  // Synthetic ground truth used for rendering; empty for annotation data,
  // whose frames come from <rgb_dir>/<id>.rgb.
  VideoLayout scene;
  std::vector<std::size_t> style_ids;
};

struct Dataset {
  std::vector<DatasetItem> items;
  std::vector<ObjectStyle> styles;
  std::filesystem::path rgb_dir;
  std::size_t num_classes = 0;
  TaskMode mode = TaskMode::single_label;

  std::size_t size() const { return items.size(); }
  std::vector<std::string> ids() const;
  // Single-label class indices.
  std::vector<std::size_t> labels() const;
  // Row-major N x num_classes.
  std::vector<double> multi_hot() const;
  Dataset subset(std::span<const std::size_t> rows) const;
};

struct DataBundle {
  Dataset train, validation, test;
  Dataset finetune;  // few-shot data only
  Vocabulary vocabulary;
  LabelSet actions;
  // Classes of the pretraining classifier and of the few-shot classifier.
  std::size_t classes = 0;
  std::size_t novel_classes = 0;
};

// Builds or reads every split named by the config, holds out the
// validation share of the training set and fills in the model's class count
// and vocabulary size.
DataBundle load_data(TrainConfig& config);

// Synthetic videos as a dataset; `label_map[a]` is the class of action a.
Dataset synthetic_dataset(const std::vector<SyntheticVideo>& videos, const std::vector<ObjectStyle>& styles,
                          std::size_t classes, TaskMode mode, const std::vector<std::size_t>& label_map);

struct Batch {
  FusionBatch inputs;
  Targets targets;
  std::vector<std::string> ids;
};

// Samples n layout frames and T' clip frames per video (random or uniform)
// and renders only what the scheme consumes. With `features`, schemes that
// use a video vector read it from the store instead of rendering a clip.
Batch make_batch(const Dataset& data, std::span<const std::size_t> rows, const FusionModelConfig& model,
                 SamplingMode mode, Rng& rng, const FeatureStore* features = nullptr);

}  // namespace stlt
