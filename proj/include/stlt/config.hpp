#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "stlt/annotations.hpp"
#include "stlt/fusion.hpp"
#include "stlt/synthetic.hpp"

namespace stlt {

enum class DataSource { synthetic, annotations };

struct AnnotationSource {
  std::filesystem::path train, test, finetune;
  // Directory of <video id>.rgb archives; only needed by appearance schemes.
  std::filesystem::path rgb_dir;
  std::vector<std::string> categories{"hand", "object"};
  // Optional action names in index order; needed for files that store
  // labels as indices.
  std::vector<std::string> actions;
  bool strict = true;
  bool oracle = true;
  double score_threshold = 0.5;
};

struct FewShotSettings {
  std::size_t epochs = 100;
  std::size_t batch_size = 8;
  double learning_rate = 1e-2;
};

struct TrainConfig {
  std::optional<std::uint64_t> seed;
  TaskMode mode = TaskMode::single_label;
  DataSource source = DataSource::synthetic;
  SplitSpec synthetic;
  bool synthetic_seed_set = false;  // otherwise the data seed follows `seed`
  AnnotationSource annotations;
  std::filesystem::path appearance_features;

  // Class count, vocabulary size and the few-shot class count are filled in
  // from the data at load time.
  FusionModelConfig model;

  std::size_t epochs = 60;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::size_t patience = 10;
  // Training stops once validation top-1 (mAP in multi-label mode) reaches it.
  double target_metric = 1.0;
  double validation_fraction = 0.1;
  FewShotSettings fewshot;

  std::uint64_t data_seed() const { return synthetic_seed_set ? synthetic.seed : seed.value_or(0); }
  // Seed present, numeric ranges, model invariants and existence of every
  // referenced path. Throws ConfigError.
  void validate() const;
};

struct ConfigKey {
  std::string name;
  std::string type;
  std::string help;
};

// Every key with its type and meaning, for --help.
const std::vector<ConfigKey>& config_keys();
std::string config_help();

// Flat "key = value" lines; '#' starts a comment. Keys that only apply to a
// fusion scheme are rejected unless that scheme is selected. Errors are
// ConfigError naming the origin and line.
TrainConfig parse_train_config(std::istream& is, const std::string& origin = "config");
TrainConfig load_train_config(const std::filesystem::path& path);
// Applies one "key=value" override on top of a parsed config.
void apply_config_override(TrainConfig& config, const std::string& assignment);

// Every applicable key with its effective value, one per line in key order.
std::string resolved_config(const TrainConfig& config);

}  // namespace stlt
