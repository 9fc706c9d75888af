#include "stlt/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>
#include <set>

#include "stlt/checkpoint.hpp"
#include "stlt/errors.hpp"
#include "stlt/metrics.hpp"
#include "stlt/ops.hpp"
#include "stlt/optim.hpp"

namespace stlt {

namespace {

constexpr const char* kModelEntry = "__fusion__";
constexpr const char* kTrainEntry = "__train__";

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::size_t batch_hits(const Tensor& logits, const Targets& t) {
  if (t.multi_label) return 0;
  const std::size_t c = logits.cols();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < t.classes.size(); ++i) {
    const auto row = logits.values().subspan(i * c, c);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    hits += best == t.classes[i];
  }
  return hits;
}

std::vector<std::size_t> shuffled(std::size_t n, Rng rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

std::string join_ids(const std::vector<std::string>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) out += (i ? "," : "") + ids[i];
  return out;
}

struct EpochStats {
  double loss = 0.0;
  double top1 = 0.0;
};

// One pass over `data` in shuffled batches, stepping `optimizer`.
EpochStats run_epoch(const TrainedModel& model, const Dataset& data, std::size_t batch_size, Adam& optimizer,
                     const Rng& epoch_rng, std::size_t epoch, const FeatureStore* features) {
  const auto order = shuffled(data.size(), epoch_rng.split("order"));
  double loss_sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t start = 0, step = 0; start < order.size(); start += batch_size, ++step) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    const std::span<const std::size_t> rows(order.data() + start, end - start);
    Rng step_rng = epoch_rng.split(step);
    Rng data_rng = step_rng.split("data");
    Rng dropout_rng = step_rng.split("dropout");
    const Batch batch = make_batch(data, rows, model.config, SamplingMode::random, data_rng, features);
    const std::string where =
        " at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) + "; batch ids: " + join_ids(batch.ids);
    FusionOutput out;
    Tensor loss;
    try {
      out = fusion_forward(model.weights, model.config, batch.inputs, {true, &dropout_rng});
      loss = fusion_loss(out, model.config.fusion, batch.targets);
    } catch (const NumericalError& e) {
      // Diverged parameters usually surface inside the forward pass.
      throw NumericalError(std::string("non-finite loss (") + e.what() + ")" + where);
    }
    const double value = loss.item();
    if (!std::isfinite(value)) throw NumericalError("non-finite loss " + std::to_string(value) + where);
    backward(loss);
    optimizer.step();
    loss_sum += value * static_cast<double>(rows.size());
    hits += batch_hits(out.logits, batch.targets);
  }
  return {loss_sum / static_cast<double>(data.size()), static_cast<double>(hits) / static_cast<double>(data.size())};
}

std::vector<Tensor> tensors(const NamedTensors& named) { return tensors_of(named); }

}  // namespace

void save_model(const std::filesystem::path& path, const TrainedModel& model, const std::string& train_config) {
  Container c;
  c.texts.push_back({kModelEntry, model.config.to_json()});
  if (!train_config.empty()) c.texts.push_back({kTrainEntry, train_config});
  c.tensors = snapshot(model.weights.parameters());
  save_container(path, c);
}

TrainedModel load_model(const std::filesystem::path& path) {
  const Container c = load_container(path);
  const TextEntry* meta = c.find_text(kModelEntry);
  if (!meta) throw DataError("checkpoint " + path.string() + " holds no fusion model");
  TrainedModel m;
  m.config = FusionModelConfig::from_json(meta->text);
  Rng rng(0);
  m.weights = FusionWeights::init(m.config, rng);
  const auto params = m.weights.parameters();
  if (params.size() != c.tensors.size()) throw DataError("checkpoint " + path.string() + " has extra tensors");
  restore(params, c.tensors);
  return m;
}

double EvalSummary::primary() const { return std::isnan(map) ? top1 : map; }

EvalResult evaluate_model(const TrainedModel& model, const Dataset& data, std::size_t batch_size,
                          const FeatureStore* features) {
  if (data.size() == 0) throw DataError("cannot evaluate an empty dataset");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  NoGradGuard no_grad;
  EvalResult r;
  r.mode = data.mode;
  r.ids = data.ids();
  std::vector<Tensor> logits, layout, appearance;
  std::vector<std::size_t> rows(data.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  Rng unused(0);
  for (std::size_t start = 0; start < rows.size(); start += batch_size) {
    const std::size_t end = std::min(rows.size(), start + batch_size);
    const Batch batch = make_batch(data, std::span<const std::size_t>(rows.data() + start, end - start), model.config,
                                   SamplingMode::uniform, unused, features);
    const FusionOutput out = fusion_forward(model.weights, model.config, batch.inputs, {});
    logits.push_back(out.logits);
    if (out.layout_logits.defined()) layout.push_back(out.layout_logits);
    if (out.appearance_logits.defined()) appearance.push_back(out.appearance_logits);
  }
  r.logits = concat_rows(logits);
  if (!layout.empty()) r.layout_logits = concat_rows(layout);
  if (!appearance.empty()) r.appearance_logits = concat_rows(appearance);
  if (data.mode == TaskMode::multi_label) {
    r.multi_hot = data.multi_hot();
  } else {
    r.labels = data.labels();
  }
  return r;
}

EvalSummary summarize(const EvalResult& r) {
  EvalSummary s;
  if (r.mode == TaskMode::multi_label) {
    s.map = evaluate_map(r.logits, r.multi_hot).map;
    return s;
  }
  const std::size_t c = r.logits.cols();
  s.top1 = evaluate_topk(r.logits, r.labels, 1);
  if (c >= 5) s.top5 = evaluate_topk(r.logits, r.labels, 5);
  if (r.layout_logits.defined()) s.layout_top1 = evaluate_topk(r.layout_logits, r.labels, 1);
  if (r.appearance_logits.defined()) s.appearance_top1 = evaluate_topk(r.appearance_logits, r.labels, 1);
  return s;
}

void record_summary(MetricsReport& report, std::size_t epoch, const std::string& split, const EvalSummary& s) {
  auto put = [&](const char* name, double v) {
    if (!std::isnan(v)) report.add(epoch, split, name, v);
  };
  put("top1", s.top1);
  put("top5", s.top5);
  put("map", s.map);
  put("layout_top1", s.layout_top1);
  put("appearance_top1", s.appearance_top1);
}

TrainResult train(const TrainConfig& config, const DataBundle& data, const FeatureStore* features, std::ostream* log) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const Rng root(*config.seed);
  TrainResult result;
  result.model.config = config.model;
  Rng init_rng = root.split("init");
  result.model.weights = FusionWeights::init(config.model, init_rng);
  result.report.config_hash = text_hash(resolved_config(config));
  const NamedTensors params = result.model.weights.parameters();
  Adam optimizer(tensors(params), AdamSettings{config.learning_rate});

  std::vector<TensorEntry> best = snapshot(params);
  double best_metric = -INFINITY;
  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const EpochStats stats = run_epoch(result.model, data.train, config.batch_size, optimizer,
                                       root.split("epoch").split(epoch), epoch, features);
    result.epochs_run = epoch;
    result.report.add(epoch, "train", "loss", stats.loss);
    if (config.mode == TaskMode::single_label) result.report.add(epoch, "train", "top1", stats.top1);
    if (data.validation.size() == 0) {
      best = snapshot(params);
      result.best_epoch = epoch;
      if (log) *log << "epoch " << epoch << " loss " << stats.loss << " train_top1 " << stats.top1 << std::endl;
      continue;
    }
    const EvalSummary val = summarize(evaluate_model(result.model, data.validation, config.batch_size, features));
    record_summary(result.report, epoch, "validation", val);
    if (log) {
      *log << "epoch " << epoch << " loss " << stats.loss << " train_top1 " << stats.top1 << " validation "
           << val.primary() << std::endl;
    }
    if (val.primary() > best_metric) {
      best_metric = val.primary();
      best = snapshot(params);
      result.best_epoch = epoch;
      result.best_validation = val;
      stale = 0;
    } else if (++stale >= config.patience) {
      break;
    }
    if (val.primary() >= config.target_metric) break;
  }
  restore(params, best);
  result.report.wall_clock_seconds = seconds_since(start);
  return result;
}

FewShotResult fewshot_finetune(const TrainedModel& pretrained, const Dataset& finetune, const Dataset& test,
                               std::size_t novel_classes, const FewShotSettings& settings, std::uint64_t seed,
                               const FeatureStore* features, std::ostream* log) {
  if (finetune.size() == 0) throw DataError("the fine-tuning set is empty");
  std::set<std::size_t> seen;
  for (const auto& it : finetune.items) seen.insert(it.layout.label.classes.begin(), it.layout.label.classes.end());
  if (finetune.num_classes != novel_classes || seen.size() != novel_classes ||
      (!seen.empty() && *seen.rbegin() != novel_classes - 1)) {
    throw DataError("the fine-tuning set covers " + std::to_string(seen.size()) + " actions, expected " +
                    std::to_string(novel_classes));
  }
  if (settings.epochs == 0 || settings.batch_size == 0) throw ConfigError("few-shot settings must be positive");
  const auto start = std::chrono::steady_clock::now();
  const Rng root(seed);

  FewShotResult r;
  r.model.config = pretrained.config;
  r.model.config.layout.num_classes = novel_classes;
  r.model.config.appearance.num_classes = novel_classes;
  Rng init_rng = root.split("init");
  r.model.weights = FusionWeights::init(r.model.config, init_rng);
  restore(r.model.weights.backbone_parameters(), snapshot(pretrained.weights.backbone_parameters()));
  Rng head_rng = root.split("classifier");
  r.model.weights.reset_classifier(r.model.config, novel_classes, head_rng);
  r.backbone_hash_before = parameter_hash(pretrained.weights.backbone_parameters());

  const NamedTensors backbone = r.model.weights.backbone_parameters();
  Adam optimizer(tensors(r.model.weights.classifier_parameters()), AdamSettings{settings.learning_rate});
  for (std::size_t epoch = 1; epoch <= settings.epochs; ++epoch) {
    const EpochStats stats = run_epoch(r.model, finetune, settings.batch_size, optimizer,
                                       root.split("epoch").split(epoch), epoch, features);
    // Frozen parameters receive gradients that are never applied.
    for (const auto& [name, t] : backbone) {
      Tensor h = t;
      h.zero_grad();
    }
    r.report.add(epoch, "finetune", "loss", stats.loss);
    r.report.add(epoch, "finetune", "top1", stats.top1);
    if (log) *log << "fewshot epoch " << epoch << " loss " << stats.loss << " top1 " << stats.top1 << std::endl;
  }
  r.backbone_hash_after = parameter_hash(r.model.weights.backbone_parameters());
  if (r.backbone_hash_after != r.backbone_hash_before) throw NumericalError("few-shot fine-tuning moved a frozen parameter");
  if (test.size() > 0) {
    r.test = summarize(evaluate_model(r.model, test, settings.batch_size, features));
    record_summary(r.report, settings.epochs, "test", r.test);
  }
  r.report.wall_clock_seconds = seconds_since(start);
  return r;
}

}  // namespace stlt
