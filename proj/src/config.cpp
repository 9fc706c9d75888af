#include "stlt/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "stlt/errors.hpp"
#include "stlt/report.hpp"

namespace stlt {

namespace {

using Setter = std::function<void(TrainConfig&, const std::string&)>;
using Getter = std::function<std::string(const TrainConfig&)>;
using Applies = std::function<bool(const TrainConfig&)>;

struct Entry {
  ConfigKey key;
  Setter set;
  Getter get;
  Applies applies;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t to_u64(const std::string& v) {
  std::uint64_t out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError("expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::size_t to_size(const std::string& v) { return static_cast<std::size_t>(to_u64(v)); }

double to_real(const std::string& v) {
  try {
    return parse_double(v);
  } catch (const DataError&) {
    throw ConfigError("expected a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

std::vector<std::string> to_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (item.empty()) throw ConfigError("empty item in list '" + v + "'");
    out.push_back(item);
  }
  return out;
}

template <std::size_t N>
std::array<std::size_t, N> to_sizes(const std::string& v) {
  const auto items = to_list(v);
  if (items.size() != N) throw ConfigError("expected " + std::to_string(N) + " comma-separated integers");
  std::array<std::size_t, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = to_size(items[i]);
  return out;
}

template <std::size_t N>
std::string join(const std::array<std::size_t, N>& a) {
  std::string out;
  for (std::size_t i = 0; i < N; ++i) out += (i ? "," : "") + std::to_string(a[i]);
  return out;
}

std::string join(const std::vector<std::string>& a) {
  std::string out;
  for (std::size_t i = 0; i < a.size(); ++i) out += (i ? "," : "") + a[i];
  return out;
}

std::string str(bool b) { return b ? "true" : "false"; }
std::string str(std::size_t v) { return std::to_string(v); }
std::string str(double v) { return format_double(v); }

bool always(const TrainConfig&) { return true; }
bool synthetic_data(const TrainConfig& c) { return c.source == DataSource::synthetic; }
bool fewshot_data(const TrainConfig& c) {
  return c.source == DataSource::synthetic ? c.synthetic.kind == SplitKind::fewshot : !c.annotations.finetune.empty();
}
bool annotation_data(const TrainConfig& c) { return c.source == DataSource::annotations; }
bool layout_branch(const TrainConfig& c) {
  return uses_layout(c.model.fusion.scheme) && c.model.fusion.scheme != FusionScheme::vatf;
}
bool appearance_branch(const TrainConfig& c) { return uses_appearance(c.model.fusion.scheme); }
bool video_vector_scheme(const TrainConfig& c) {
  const auto s = c.model.fusion.scheme;
  return s == FusionScheme::appearance || s == FusionScheme::ef || s == FusionScheme::lcf;
}
bool caf_scheme(const TrainConfig& c) {
  return c.model.fusion.scheme == FusionScheme::caf || c.model.fusion.scheme == FusionScheme::cacnf;
}
bool cacnf_scheme(const TrainConfig& c) { return c.model.fusion.scheme == FusionScheme::cacnf; }
bool vatf_scheme(const TrainConfig& c) { return c.model.fusion.scheme == FusionScheme::vatf; }

#define STLT_SIZE(name, field, applies, help)                                            \
  Entry {                                                                                \
    {name, "int", help}, [](TrainConfig& c, const std::string& v) { c.field = to_size(v); }, \
        [](const TrainConfig& c) { return str(c.field); }, applies                       \
  }
#define STLT_REAL(name, field, applies, help)                                            \
  Entry {                                                                                \
    {name, "real", help}, [](TrainConfig& c, const std::string& v) { c.field = to_real(v); }, \
        [](const TrainConfig& c) { return str(c.field); }, applies                       \
  }
#define STLT_BOOL(name, field, applies, help)                                            \
  Entry {                                                                                \
    {name, "bool", help}, [](TrainConfig& c, const std::string& v) { c.field = to_bool(v); }, \
        [](const TrainConfig& c) { return str(c.field); }, applies                       \
  }
#define STLT_PATH(name, field, applies, help)                                            \
  Entry {                                                                                \
    {name, "path", help}, [](TrainConfig& c, const std::string& v) { c.field = v; },     \
        [](const TrainConfig& c) { return c.field.string(); }, applies                   \
  }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = [] {
    std::vector<Entry> t;
    t.push_back({{"seed", "int", "master seed (required)"},
                 [](TrainConfig& c, const std::string& v) { c.seed = to_u64(v); },
                 [](const TrainConfig& c) { return c.seed ? std::to_string(*c.seed) : std::string(); }, always});
    t.push_back({{"task", "enum", "single_label | multi_label"},
                 [](TrainConfig& c, const std::string& v) {
                   if (v == "single_label") c.mode = TaskMode::single_label;
                   else if (v == "multi_label") c.mode = TaskMode::multi_label;
                   else throw ConfigError("task must be single_label or multi_label");
                 },
                 [](const TrainConfig& c) {
                   return std::string(c.mode == TaskMode::single_label ? "single_label" : "multi_label");
                 },
                 always});
    t.push_back({{"data", "enum", "synthetic | annotations"},
                 [](TrainConfig& c, const std::string& v) {
                   if (v == "synthetic") c.source = DataSource::synthetic;
                   else if (v == "annotations") c.source = DataSource::annotations;
                   else throw ConfigError("data must be synthetic or annotations");
                 },
                 [](const TrainConfig& c) {
                   return std::string(c.source == DataSource::synthetic ? "synthetic" : "annotations");
                 },
                 always});
    t.push_back({{"fusion.scheme", "enum", "none | appearance | pff | pbf | ef | vatf | lcf | caf | cacnf"},
                 [](TrainConfig& c, const std::string& v) { c.model.fusion.scheme = parse_scheme(v); },
                 [](const TrainConfig& c) { return scheme_name(c.model.fusion.scheme); }, always});

    t.push_back({{"synthetic.split", "enum", "compositional | fewshot"},
                 [](TrainConfig& c, const std::string& v) {
                   if (v == "compositional") c.synthetic.kind = SplitKind::compositional;
                   else if (v == "fewshot") c.synthetic.kind = SplitKind::fewshot;
                   else throw ConfigError("synthetic.split must be compositional or fewshot");
                 },
                 [](const TrainConfig& c) {
                   return std::string(c.synthetic.kind == SplitKind::compositional ? "compositional" : "fewshot");
                 },
                 synthetic_data});
    t.push_back(STLT_SIZE("synthetic.actions", synthetic.num_actions, synthetic_data, "number of action classes"));
    t.push_back(STLT_SIZE("synthetic.train_videos", synthetic.train_videos, synthetic_data, "training videos"));
    t.push_back(STLT_SIZE("synthetic.test_videos", synthetic.test_videos, synthetic_data, "test videos"));
    t.push_back(STLT_SIZE("synthetic.train_styles", synthetic.train_styles, synthetic_data, "styles seen in training"));
    t.push_back(STLT_SIZE("synthetic.test_styles", synthetic.test_styles, synthetic_data, "held-out test styles"));
    t.push_back(STLT_REAL("synthetic.style_bias", synthetic.style_bias, synthetic_data,
                          "probability of an action's preferred style pair in training"));
    t.push_back(STLT_SIZE("synthetic.video_frames", synthetic.frames, synthetic_data, "frames per generated video"));
    t.push_back(STLT_SIZE("synthetic.novel_actions", synthetic.novel_actions, synthetic_data, "few-shot novel actions"));
    t.push_back(STLT_SIZE("synthetic.shots", synthetic.shots, synthetic_data, "few-shot examples per novel action"));
    t.push_back(STLT_REAL("synthetic.layout_corruption", synthetic.layout_corruption, synthetic_data,
                          "fraction of videos whose layout comes from another action"));
    t.push_back({{"synthetic.seed", "int", "data seed (defaults to seed)"},
                 [](TrainConfig& c, const std::string& v) {
                   c.synthetic.seed = to_u64(v);
                   c.synthetic_seed_set = true;
                 },
                 [](const TrainConfig& c) { return std::to_string(c.data_seed()); }, synthetic_data});

    t.push_back(STLT_PATH("annotations.train", annotations.train, annotation_data, "training annotation file"));
    t.push_back(STLT_PATH("annotations.test", annotations.test, annotation_data, "test annotation file"));
    t.push_back(STLT_PATH("annotations.finetune", annotations.finetune, annotation_data,
                          "few-shot fine-tuning annotation file (optional)"));
    t.push_back(STLT_PATH("annotations.rgb_dir", annotations.rgb_dir, annotation_data,
                          "directory of <id>.rgb frame archives"));
    t.push_back({{"annotations.categories", "list", "comma-separated object categories"},
                 [](TrainConfig& c, const std::string& v) { c.annotations.categories = to_list(v); },
                 [](const TrainConfig& c) { return join(c.annotations.categories); }, annotation_data});
    t.push_back({{"annotations.actions", "list", "comma-separated action names in label-index order (optional)"},
                 [](TrainConfig& c, const std::string& v) { c.annotations.actions = to_list(v); },
                 [](const TrainConfig& c) { return join(c.annotations.actions); }, annotation_data});
    t.push_back(STLT_BOOL("annotations.strict", annotations.strict, annotation_data,
                          "unknown categories are errors instead of 'object'"));
    t.push_back(STLT_BOOL("annotations.oracle", annotations.oracle, annotation_data,
                          "keep every box regardless of its score"));
    t.push_back(STLT_REAL("annotations.score_threshold", annotations.score_threshold, annotation_data,
                          "minimum detection score outside oracle mode"));

    t.push_back(STLT_PATH("appearance_features", appearance_features, video_vector_scheme,
                          "tensor container of precomputed video vectors keyed by id (optional)"));

    t.push_back({{"model.variant", "enum", "stlt | joint"},
                 [](TrainConfig& c, const std::string& v) { c.model.layout.variant = parse_variant(v); },
                 [](const TrainConfig& c) { return variant_name(c.model.layout.variant); }, layout_branch});
    t.push_back(STLT_SIZE("model.width", model.layout.width, layout_branch, "layout hidden size"));
    t.push_back(STLT_SIZE("model.spatial_layers", model.layout.spatial_layers, layout_branch, "spatial blocks"));
    t.push_back(STLT_SIZE("model.spatial_heads", model.layout.spatial_heads, layout_branch, "spatial heads"));
    t.push_back(STLT_SIZE("model.temporal_layers", model.layout.temporal_layers, layout_branch, "temporal blocks"));
    t.push_back(STLT_SIZE("model.temporal_heads", model.layout.temporal_heads, layout_branch, "temporal heads"));
    t.push_back(STLT_REAL("model.dropout", model.layout.dropout, layout_branch, "layout dropout rate"));
    t.push_back(STLT_SIZE("model.max_objects", model.layout.max_objects, layout_branch, "object slots per frame"));
    t.push_back(STLT_SIZE("model.ff_multiplier", model.layout.ff_multiplier, layout_branch,
                          "feed-forward width multiplier"));
    t.push_back(STLT_SIZE("frames", model.layout.frames, always, "layout frames sampled per video"));

    t.push_back(STLT_SIZE("appearance.resolution", model.appearance.resolution, appearance_branch,
                          "frame side in pixels"));
    t.push_back(STLT_SIZE("appearance.frames", model.appearance.frames, appearance_branch, "clip frames T'"));
    t.push_back({{"appearance.channels", "ints", "three convolution stage widths"},
                 [](TrainConfig& c, const std::string& v) { c.model.appearance.channels = to_sizes<3>(v); },
                 [](const TrainConfig& c) { return join(c.model.appearance.channels); }, appearance_branch});
    t.push_back(STLT_SIZE("appearance.width", model.appearance.width, appearance_branch, "appearance hidden size"));
    t.push_back({{"appearance.token_grid", "ints", "pooled token grid time,height,width"},
                 [](TrainConfig& c, const std::string& v) { c.model.appearance.token_grid = to_sizes<3>(v); },
                 [](const TrainConfig& c) { return join(c.model.appearance.token_grid); }, appearance_branch});
    t.push_back(STLT_SIZE("appearance.heads", model.appearance.heads, appearance_branch, "token encoder heads"));
    t.push_back(STLT_SIZE("appearance.encoder_layers", model.appearance.encoder_layers, appearance_branch,
                          "token encoder blocks"));
    t.push_back(STLT_REAL("appearance.dropout", model.appearance.dropout, appearance_branch,
                          "appearance dropout rate"));

    t.push_back(STLT_SIZE("fusion.caf_layers", model.fusion.caf_layers, caf_scheme, "cross-attention layers"));
    t.push_back(STLT_SIZE("fusion.caf_heads", model.fusion.caf_heads, caf_scheme, "cross-attention heads"));
    t.push_back(STLT_SIZE("fusion.vatf_heads", model.fusion.vatf_heads, vatf_scheme, "box-query attention heads"));
    t.push_back(STLT_REAL("fusion.lambda_layout", model.fusion.lambda_layout, cacnf_scheme, "layout branch loss weight"));
    t.push_back(STLT_REAL("fusion.lambda_appearance", model.fusion.lambda_appearance, cacnf_scheme,
                          "appearance branch loss weight"));

    t.push_back(STLT_SIZE("train.epochs", epochs, always, "maximum epochs"));
    t.push_back(STLT_SIZE("train.batch_size", batch_size, always, "videos per step"));
    t.push_back(STLT_REAL("train.learning_rate", learning_rate, always, "Adam step size"));
    t.push_back(STLT_SIZE("train.patience", patience, always, "epochs without validation gain before stopping"));
    t.push_back(STLT_REAL("train.target_metric", target_metric, always,
                          "stop once validation top-1 (mAP for multi-label) reaches this"));
    t.push_back(STLT_REAL("train.validation_fraction", validation_fraction, always,
                          "share of training videos held out for validation"));

    t.push_back(STLT_SIZE("fewshot.epochs", fewshot.epochs, fewshot_data, "classifier fine-tuning epochs"));
    t.push_back(STLT_SIZE("fewshot.batch_size", fewshot.batch_size, fewshot_data, "fine-tuning batch size"));
    t.push_back(STLT_REAL("fewshot.learning_rate", fewshot.learning_rate, fewshot_data, "fine-tuning step size"));
    return t;
  }();
  return table;
}

const Entry* find_entry(const std::string& name) {
  for (const auto& e : entries()) {
    if (e.key.name == name) return &e;
  }
  return nullptr;
}

// Selector keys decide which others apply, so they are set first, in this
// order.
const char* const kSelectors[] = {"task", "data", "fusion.scheme", "synthetic.split", "annotations.finetune"};

bool is_selector(const std::string& key) {
  return std::find(std::begin(kSelectors), std::end(kSelectors), key) != std::end(kSelectors);
}

void apply(TrainConfig& c, const std::string& key, const std::string& value, const std::string& where) {
  const Entry* e = find_entry(key);
  if (!e) throw ConfigError(where + ": unknown key '" + key + "'");
  if (!e->applies(c)) throw ConfigError(where + ": key '" + key + "' does not apply to this configuration");
  try {
    e->set(c, value);
  } catch (const ConfigError& err) {
    throw ConfigError(where + ": " + key + ": " + err.what());
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (!seed) throw ConfigError("config: seed is required");
  if (epochs == 0 || batch_size == 0) throw ConfigError("config: epochs and batch size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("config: learning rate must be positive");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("config: validation_fraction must lie in [0, 1)");
  }
  if (fewshot.epochs == 0 || fewshot.batch_size == 0 || !(fewshot.learning_rate > 0.0)) {
    throw ConfigError("config: few-shot settings must be positive");
  }
  if (source == DataSource::synthetic) {
    if (synthetic.num_actions == 0 || synthetic.train_videos == 0 || synthetic.test_videos == 0) {
      throw ConfigError("config: synthetic split sizes must be positive");
    }
    if (!(synthetic.style_bias >= 0.0 && synthetic.style_bias <= 1.0) ||
        !(synthetic.layout_corruption >= 0.0 && synthetic.layout_corruption <= 1.0)) {
      throw ConfigError("config: synthetic fractions must lie in [0, 1]");
    }
  } else {
    auto need = [](const std::filesystem::path& p, const char* key) {
      if (p.empty()) throw ConfigError(std::string("config: ") + key + " is required");
      if (!std::filesystem::exists(p)) throw ConfigError(std::string("config: ") + key + " does not exist: " + p.string());
    };
    need(annotations.train, "annotations.train");
    need(annotations.test, "annotations.test");
    if (!annotations.finetune.empty()) need(annotations.finetune, "annotations.finetune");
    const bool precomputed = !appearance_features.empty() && video_vector_scheme(*this);
    if (uses_appearance(model.fusion.scheme) && !precomputed) need(annotations.rgb_dir, "annotations.rgb_dir");
  }
  if (!appearance_features.empty() && !std::filesystem::exists(appearance_features)) {
    throw ConfigError("config: appearance_features does not exist: " + appearance_features.string());
  }
  if (mode == TaskMode::multi_label && fewshot_data(*this)) {
    throw ConfigError("config: the few-shot protocol is single-label");
  }
  model.validate();
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const auto& e : entries()) out.push_back(e.key);
    return out;
  }();
  return keys;
}

std::string config_help() {
  std::ostringstream os;
  os << "Config file keys (key = value, '#' comments):\n";
  for (const auto& k : config_keys()) {
    os << "  " << k.name << " <" << k.type << ">";
    os << std::string(k.name.size() + k.type.size() < 40 ? 40 - k.name.size() - k.type.size() : 1, ' ') << k.help
       << '\n';
  }
  return os.str();
}

TrainConfig parse_train_config(std::istream& is, const std::string& origin) {
  struct Pair {
    std::string key, value, where;
  };
  std::vector<Pair> pairs;
  std::map<std::string, std::string> seen;
  std::string line;
  std::size_t number = 0;
  while (std::getline(is, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + " line " + std::to_string(number);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    Pair p{trim(line.substr(0, eq)), trim(line.substr(eq + 1)), where};
    if (p.key.empty()) throw ConfigError(where + ": empty key");
    if (!seen.emplace(p.key, where).second) throw ConfigError(where + ": duplicate key '" + p.key + "'");
    pairs.push_back(std::move(p));
  }
  TrainConfig c;
  for (const char* selector : kSelectors) {
    for (const auto& p : pairs) {
      if (p.key == selector) apply(c, p.key, p.value, p.where);
    }
  }
  for (const auto& p : pairs) {
    if (!is_selector(p.key)) apply(c, p.key, p.value, p.where);
  }
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  return parse_train_config(is, path.string());
}

void apply_config_override(TrainConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "': expected key=value");
  apply(config, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)), "override");
}

std::string resolved_config(const TrainConfig& config) {
  std::ostringstream os;
  for (const auto& e : entries()) {
    if (!e.applies(config)) continue;
    const std::string v = e.get(config);
    if (v.empty()) continue;
    os << e.key.name << " = " << v << '\n';
  }
  return os.str();
}

}  // namespace stlt
