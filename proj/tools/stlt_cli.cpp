#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "stlt/annotations.hpp"
#include "stlt/config.hpp"
#include "stlt/dataset.hpp"
#include "stlt/errors.hpp"
#include "stlt/fusion.hpp"
#include "stlt/gradcheck.hpp"
#include "stlt/metrics.hpp"
#include "stlt/raster.hpp"
#include "stlt/report.hpp"
#include "stlt/trainer.hpp"

using namespace stlt;
namespace fs = std::filesystem;

namespace {

struct CommonOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  bool quiet = false;
};

TrainConfig load_config(const CommonOptions& o) {
  TrainConfig c = load_train_config(o.config);
  for (const auto& a : o.overrides) apply_config_override(c, a);
  return c;
}

void prepare_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os || !(os << text)) throw DataError("cannot write " + path.string());
}

nlohmann::json summary_json(const EvalSummary& s) {
  nlohmann::json j = nlohmann::json::object();
  auto put = [&](const char* k, double v) {
    if (!std::isnan(v)) j[k] = v;
  };
  put("top1", s.top1);
  put("top5", s.top5);
  put("map", s.map);
  put("layout_top1", s.layout_top1);
  put("appearance_top1", s.appearance_top1);
  return j;
}

std::unique_ptr<FeatureStore> maybe_features(const TrainConfig& c) {
  if (c.appearance_features.empty()) return nullptr;
  return std::make_unique<FeatureStore>(load_appearance_features(c.appearance_features));
}

// id, semicolon-separated label classes, then one column per class.
void write_scores(const fs::path& path, const EvalResult& r) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  const std::size_t c = r.logits.cols();
  os << "id,labels";
  for (std::size_t k = 0; k < c; ++k) os << ",s" << k;
  os << '\n';
  for (std::size_t i = 0; i < r.ids.size(); ++i) {
    os << r.ids[i] << ',';
    if (r.mode == TaskMode::single_label) {
      os << r.labels[i];
    } else {
      bool first = true;
      for (std::size_t k = 0; k < c; ++k) {
        if (r.multi_hot[i * c + k] == 1.0) os << (first ? "" : ";") << k, first = false;
      }
    }
    for (std::size_t k = 0; k < c; ++k) os << ',' << format_double(r.logits.at(i * c + k));
    os << '\n';
  }
}

EvalResult read_scores(const fs::path& path, TaskMode mode) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path.string());
  std::string line;
  if (!std::getline(is, line) || line.rfind("id,labels", 0) != 0) throw DataError(path.string() + ": bad header");
  const auto columns = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  if (columns < 2) throw DataError(path.string() + ": no score columns");
  const std::size_t c = columns - 1;
  EvalResult r;
  r.mode = mode;
  std::vector<double> scores;
  std::size_t number = 1;
  while (std::getline(is, line)) {
    ++number;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != c + 2) throw DataError(path.string() + " line " + std::to_string(number) + ": wrong width");
    r.ids.push_back(cells[0]);
    std::vector<std::size_t> classes;
    std::stringstream ls(cells[1]);
    for (std::string item; std::getline(ls, item, ';');) {
      const auto k = static_cast<std::size_t>(parse_double(item));
      if (k >= c) throw DataError(path.string() + " line " + std::to_string(number) + ": label out of range");
      classes.push_back(k);
    }
    if (mode == TaskMode::single_label) {
      if (classes.size() != 1) throw DataError(path.string() + " line " + std::to_string(number) + ": one label");
      r.labels.push_back(classes[0]);
    } else {
      std::vector<double> row(c, 0.0);
      for (auto k : classes) row[k] = 1.0;
      r.multi_hot.insert(r.multi_hot.end(), row.begin(), row.end());
    }
    for (std::size_t k = 0; k < c; ++k) scores.push_back(parse_double(cells[k + 2]));
  }
  if (r.ids.empty()) throw DataError(path.string() + ": no rows");
  r.logits = Tensor({r.ids.size(), c}, std::move(scores));
  return r;
}

int run_generate(const CommonOptions& o, bool render) {
  TrainConfig c = load_config(o);
  if (c.source != DataSource::synthetic) throw ConfigError("generate needs data = synthetic");
  c.validate();
  const fs::path out(o.out);
  prepare_dir(out);
  SplitSpec spec = c.synthetic;
  spec.seed = c.data_seed();
  const SyntheticSplit split = c.mode == TaskMode::multi_label ? make_multilabel_split(spec) : make_split(spec);
  auto dump = [&](const std::vector<SyntheticVideo>& videos, const std::string& name) {
    if (videos.empty()) return;
    std::vector<VideoLayout> layouts;
    for (const auto& v : videos) layouts.push_back(v.layout);
    std::ofstream os(out / (name + ".jsonl"), std::ios::binary);
    if (!os) throw DataError("cannot write " + (out / (name + ".jsonl")).string());
    write_annotations(os, layouts);
    if (!render) return;
    prepare_dir(out / "rgb");
    const std::size_t res = c.model.appearance.resolution;
    for (const auto& v : videos) {
      write_rgb_archive(out / "rgb" / (v.layout.id + ".rgb"),
                        {v.layout.id, v.scene.frames.size(), res, render_video_bytes(v, split.styles, res)});
    }
  };
  dump(split.train, "train");
  dump(split.test, "test");
  dump(split.finetune, "finetune");
  write_text(out / "config.txt", resolved_config(c));
  // Config lines that read the generated files back.
  std::ostringstream data;
  const fs::path abs = fs::absolute(out);
  data << "data = annotations\n"
       << "annotations.train = " << (abs / "train.jsonl").string() << "\n"
       << "annotations.test = " << (abs / "test.jsonl").string() << "\n";
  if (!split.finetune.empty()) data << "annotations.finetune = " << (abs / "finetune.jsonl").string() << "\n";
  if (render) data << "annotations.rgb_dir = " << (abs / "rgb").string() << "\n";
  std::string categories, actions;
  for (std::size_t i = 2; i < split.vocabulary.size(); ++i) categories += (i > 2 ? "," : "") + split.vocabulary.name(i);
  for (std::size_t i = 0; i < split.actions.size(); ++i) actions += (i ? "," : "") + split.actions.name(i);
  data << "annotations.categories = " << categories << "\n"
       << "annotations.actions = " << actions << "\n";
  write_text(out / "data.txt", data.str());
  if (!o.quiet) {
    std::cout << "wrote " << split.train.size() << " train, " << split.test.size() << " test, "
              << split.finetune.size() << " finetune videos to " << out.string() << '\n';
  }
  return 0;
}

int run_train(const CommonOptions& o) {
  TrainConfig c = load_config(o);
  c.validate();
  const fs::path out(o.out);
  prepare_dir(out);
  DataBundle data = load_data(c);
  const auto features = maybe_features(c);
  const std::string resolved = resolved_config(c);
  write_text(out / "config.txt", resolved);
  TrainResult r = train(c, data, features.get(), o.quiet ? nullptr : &std::cout);
  nlohmann::json summary{{"config_hash", r.report.config_hash},
                         {"scheme", scheme_name(c.model.fusion.scheme)},
                         {"epochs_run", r.epochs_run},
                         {"best_epoch", r.best_epoch},
                         {"validation", summary_json(r.best_validation)}};
  // Few-shot pretraining has no test set over its own classes.
  if (data.test.size() > 0 && data.novel_classes == 0) {
    const EvalSummary test = summarize(evaluate_model(r.model, data.test, c.batch_size, features.get()));
    record_summary(r.report, r.epochs_run, "test", test);
    summary["test"] = summary_json(test);
  }
  save_model(out / "model.ckpt", r.model, resolved);
  export_report(r.report, out / "report.csv");
  write_text(out / "summary.json", summary.dump(2) + "\n");
  write_text(out / "timing.json", nlohmann::json{{"wall_clock_seconds", r.report.wall_clock_seconds}}.dump() + "\n");
  if (!o.quiet) std::cout << summary.dump(2) << '\n';
  return 0;
}

int run_evaluate(const CommonOptions& o, const std::string& checkpoint, const std::string& split,
                 const std::string& scores) {
  TrainConfig c = load_config(o);
  c.validate();
  DataBundle data = load_data(c);
  const TrainedModel model = load_model(checkpoint);
  const Dataset* set = split == "test" ? &data.test : split == "validation" ? &data.validation : &data.train;
  if (set->num_classes != model.config.layout.num_classes) {
    throw DataError("the checkpoint has " + std::to_string(model.config.layout.num_classes) + " classes, the " +
                    split + " split " + std::to_string(set->num_classes));
  }
  const auto features = maybe_features(c);
  const EvalResult r = evaluate_model(model, *set, c.batch_size, features.get());
  if (!scores.empty()) {
    write_scores(scores, r);
    write_text(fs::path(scores).parent_path() / "config.txt", resolved_config(c));
  }
  std::cout << nlohmann::json{{"split", split}, {"videos", r.ids.size()}, {"metrics", summary_json(summarize(r))}}.dump(2)
            << '\n';
  return 0;
}

int run_finetune(const CommonOptions& o, const std::string& checkpoint) {
  TrainConfig c = load_config(o);
  c.validate();
  DataBundle data = load_data(c);
  if (data.novel_classes == 0) throw ConfigError("finetune-fewshot needs a few-shot split");
  const fs::path out(o.out);
  prepare_dir(out);
  const auto features = maybe_features(c);
  const TrainedModel base = load_model(checkpoint);
  const std::string resolved = resolved_config(c);
  write_text(out / "config.txt", resolved);
  FewShotResult r =
      fewshot_finetune(base, data.finetune, data.test, data.novel_classes, c.fewshot, *c.seed, features.get(),
                       o.quiet ? nullptr : &std::cout);
  r.report.config_hash = text_hash(resolved);
  save_model(out / "model.ckpt", r.model, resolved);
  export_report(r.report, out / "report.csv");
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(r.backbone_hash_after));
  const nlohmann::json summary{{"config_hash", r.report.config_hash},
                               {"novel_classes", data.novel_classes},
                               {"backbone_hash", hash},
                               {"backbone_unchanged", r.backbone_hash_before == r.backbone_hash_after},
                               {"test", summary_json(r.test)}};
  write_text(out / "summary.json", summary.dump(2) + "\n");
  if (!o.quiet) std::cout << summary.dump(2) << '\n';
  return 0;
}

int run_ensemble(const std::string& a, const std::string& b, const std::string& mode_name, const std::string& out) {
  TaskMode mode;
  if (mode_name == "single_label") mode = TaskMode::single_label;
  else if (mode_name == "multi_label") mode = TaskMode::multi_label;
  else throw ConfigError("mode must be single_label or multi_label");
  const EvalResult ra = read_scores(a, mode), rb = read_scores(b, mode);
  if (ra.ids != rb.ids) throw DataError("score files list different videos");
  if (ra.labels != rb.labels || ra.multi_hot != rb.multi_hot) throw DataError("score files disagree on labels");
  EvalResult e = ra;
  e.logits = ensemble(ra.logits, rb.logits, mode);
  if (!out.empty()) write_scores(out, e);
  std::cout << nlohmann::json{{"a", summary_json(summarize(ra))},
                              {"b", summary_json(summarize(rb))},
                              {"ensemble", summary_json(summarize(e))}}
                   .dump(2)
            << '\n';
  return 0;
}

int run_gradcheck(std::size_t instances, std::uint64_t seed, const std::string& suite) {
  std::vector<GradCheckCase> cases = tensor_engine_gradcheck_cases();
  if (suite == "all") {
    for (auto& c : model_gradcheck_cases()) cases.push_back(std::move(c));
    for (auto& c : fusion_gradcheck_cases()) cases.push_back(std::move(c));
  } else if (suite != "engine") {
    throw ConfigError("suite must be engine or all");
  }
  bool ok = true;
  for (const auto& c : cases) {
    const auto r = run_gradcheck_case(c, seed, instances);
    std::printf("%-28s %s  worst relative error %.3e over %zu instances\n", c.name.c_str(), r.passed ? "ok  " : "FAIL",
                r.worst_relative_error, r.instances);
    ok = ok && r.passed;
  }
  if (!ok) throw NumericalError("gradient check failed");
  return 0;
}

int run_export(const std::string& report, const std::string& out, const std::string& split,
               const std::string& metric) {
  MetricsReport r;
  for (const auto& row : read_report_csv(report)) {
    if ((split.empty() || row.split == split) && (metric.empty() || row.metric == metric)) {
      r.add(row.epoch, row.split, row.metric, row.value);
    }
  }
  export_report(r, out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatial-temporal layout transformer: training, evaluation and synthetic data"};
  app.require_subcommand(1);
  app.footer(config_help());

  auto add_common = [](CLI::App* cmd, CommonOptions& o, bool needs_out) {
    cmd->add_option("-c,--config", o.config, "config file (key = value)")->required()->check(CLI::ExistingFile);
    cmd->add_option("-s,--set", o.overrides, "override a config key, key=value (repeatable)");
    if (needs_out) cmd->add_option("-o,--out", o.out, "output directory")->required();
    cmd->add_flag("-q,--quiet", o.quiet, "no progress output");
  };

  CommonOptions gen_o, train_o, eval_o, ft_o;
  bool render = false;
  auto* gen = app.add_subcommand("generate", "write a synthetic split as annotation files (and frames)");
  add_common(gen, gen_o, true);
  gen->add_flag("--render", render, "also write <id>.rgb frame archives at appearance.resolution");

  auto* tr = app.add_subcommand("train", "train a model; writes model.ckpt, report.csv, summary.json, config.txt");
  add_common(tr, train_o, true);

  std::string checkpoint, split = "test", scores;
  auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint on a split of the configured data");
  add_common(ev, eval_o, false);
  ev->add_option("-m,--checkpoint", checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--split", split, "train | validation | test")->check(CLI::IsMember({"train", "validation", "test"}));
  ev->add_option("--scores", scores, "write per-video class scores to this CSV");

  std::string ft_checkpoint;
  auto* ft = app.add_subcommand("finetune-fewshot", "train a new classifier on novel actions with a frozen backbone");
  add_common(ft, ft_o, true);
  ft->add_option("-m,--checkpoint", ft_checkpoint, "pretrained checkpoint")->required()->check(CLI::ExistingFile);

  std::string ens_a, ens_b, ens_mode = "single_label", ens_out;
  auto* en = app.add_subcommand("ensemble", "average normalized scores of two score files");
  en->add_option("a", ens_a, "first score CSV")->required()->check(CLI::ExistingFile);
  en->add_option("b", ens_b, "second score CSV")->required()->check(CLI::ExistingFile);
  en->add_option("--mode", ens_mode, "single_label | multi_label");
  en->add_option("-o,--out", ens_out, "write the ensembled scores here");

  std::size_t instances = 50;
  std::uint64_t gc_seed = 1;
  std::string suite = "engine";
  auto* gc = app.add_subcommand("gradcheck", "central finite-difference check of every differentiable op");
  gc->add_option("-n,--instances", instances, "random instances per op");
  gc->add_option("--seed", gc_seed, "seed");
  gc->add_option("--suite", suite, "engine | all (adds model and fusion cases)");

  std::string ex_report, ex_out, ex_split, ex_metric;
  auto* ex = app.add_subcommand("export", "write a (filtered) metrics report as epoch,split,metric,value CSV");
  ex->add_option("report", ex_report, "report.csv of a run")->required()->check(CLI::ExistingFile);
  ex->add_option("-o,--out", ex_out, "output CSV")->required();
  ex->add_option("--split", ex_split, "keep only this split");
  ex->add_option("--metric", ex_metric, "keep only this metric");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return run_generate(gen_o, render);
    if (*tr) return run_train(train_o);
    if (*ev) return run_evaluate(eval_o, checkpoint, split, scores);
    if (*ft) return run_finetune(ft_o, ft_checkpoint);
    if (*en) return run_ensemble(ens_a, ens_b, ens_mode, ens_out);
    if (*gc) return run_gradcheck(instances, gc_seed, suite);
    if (*ex) return run_export(ex_report, ex_out, ex_split, ex_metric);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
