#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "stlt/config.hpp"
#include "stlt/dataset.hpp"
#include "stlt/errors.hpp"
#include "stlt/metrics.hpp"
#include "stlt/report.hpp"
#include "stlt/trainer.hpp"

using namespace stlt;

namespace {

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("stlt_harness_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

Tensor random_scores(Rng& rng, std::size_t n, std::size_t c, bool ties) {
  std::vector<double> v(n * c);
  for (auto& x : v) x = ties ? static_cast<double>(rng.below(4)) : rng.uniform(-3.0, 3.0);
  return Tensor({n, c}, v);
}

// Label rank by sorting the whole row.
bool topk_oracle(std::span<const double> row, std::size_t label, std::size_t k) {
  std::vector<std::size_t> order(row.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return row[a] != row[b] ? row[a] > row[b] : a < b;
  });
  return std::find(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), label) !=
         order.begin() + static_cast<std::ptrdiff_t>(k);
}

// AP by definition: each positive's rank counts the samples strictly ahead.
double ap_oracle(const std::vector<double>& s, const std::vector<int>& y) {
  auto rank = [&](std::size_t i) {
    std::size_t r = 1;
    for (std::size_t j = 0; j < s.size(); ++j) r += s[j] > s[i] || (s[j] == s[i] && j < i);
    return r;
  };
  double sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    ++pos;
    std::size_t better = 0;
    for (std::size_t j = 0; j < s.size(); ++j) better += y[j] && rank(j) <= rank(i);
    sum += static_cast<double>(better) / static_cast<double>(rank(i));
  }
  return sum / static_cast<double>(pos);
}

TrainConfig small_train_config(FusionScheme scheme = FusionScheme::none) {
  TrainConfig c;
  c.seed = 5;
  c.synthetic.num_actions = 4;
  c.synthetic.train_videos = 24;
  c.synthetic.test_videos = 8;
  c.synthetic.train_styles = 4;
  c.synthetic.test_styles = 4;
  c.synthetic.frames = 12;
  c.model.fusion.scheme = scheme;
  c.model.layout.width = 16;
  c.model.layout.spatial_layers = 1;
  c.model.layout.temporal_layers = 1;
  c.model.layout.spatial_heads = 2;
  c.model.layout.temporal_heads = 2;
  c.model.layout.frames = 6;
  c.model.layout.ff_multiplier = 2;
  c.model.appearance.resolution = 16;
  c.model.appearance.frames = 4;
  c.model.appearance.channels = {4, 4, 8};
  c.model.appearance.width = 8;
  c.model.appearance.token_grid = {2, 2, 2};
  c.model.appearance.heads = 2;
  c.model.fusion.caf_layers = 1;
  c.model.fusion.caf_heads = 2;
  c.model.fusion.vatf_heads = 2;
  c.epochs = 2;
  c.batch_size = 8;
  c.validation_fraction = 0.25;
  return c;
}

}  // namespace

TEST_CASE("top-k examples") {
  const Tensor perfect({3, 3}, {5, 1, 0, 0, 4, 1, 0, 0, 2});
  const std::vector<std::size_t> labels{0, 1, 2};
  CHECK(evaluate_topk(perfect, labels, 1) == 1.0);
  Rng rng(1);
  const Tensor any = random_scores(rng, 3, 3, false);
  CHECK(evaluate_topk(any, labels, 3) == 1.0);
  const Tensor half({4, 2}, {1, 0, 1, 0, 1, 0, 1, 0});
  const std::vector<std::size_t> l4{0, 0, 1, 1};
  CHECK(evaluate_topk(half, l4, 1) == 0.5);
  // Ties go to the lower class index.
  const Tensor tie({1, 3}, {2, 2, 2});
  CHECK(evaluate_topk(tie, std::vector<std::size_t>{0}, 1) == 1.0);
  CHECK(evaluate_topk(tie, std::vector<std::size_t>{1}, 1) == 0.0);
  CHECK(evaluate_topk(tie, std::vector<std::size_t>{2}, 2) == 0.0);
  CHECK_THROWS_AS(evaluate_topk(tie, std::vector<std::size_t>{3}, 1), DataError);
  CHECK_THROWS_AS(evaluate_topk(tie, std::vector<std::size_t>{0}, 0), ConfigError);
  CHECK_THROWS_AS(evaluate_topk(tie, std::vector<std::size_t>{0}, 4), ConfigError);
  CHECK_THROWS_AS(evaluate_topk(Tensor({1, 2}, {NAN, 0}), std::vector<std::size_t>{0}, 1), NumericalError);
}

TEST_CASE("top-k matches the sorting oracle on 1000 instances") {
  Rng rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(16), c = 1 + rng.below(8), k = 1 + rng.below(c);
    const Tensor s = random_scores(rng, n, c, trial % 2 == 0);
    std::vector<std::size_t> labels(n);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = rng.below(c);
      hits += topk_oracle(s.values().subspan(i * c, c), labels[i], k);
    }
    CHECK(evaluate_topk(s, labels, k) == static_cast<double>(hits) / static_cast<double>(n));
  }
}

TEST_CASE("mAP examples and oracle") {
  const Tensor perfect({3, 2}, {1, 0, 0, 1, 1, 1});
  const std::vector<double> pl{1, 0, 0, 1, 1, 1};
  CHECK(evaluate_map(perfect, pl).map == 1.0);
  const Tensor second({2, 1}, {0.9, 0.1});
  CHECK(evaluate_map(second, std::vector<double>{0, 1}).map == 0.5);
  const auto skipped = evaluate_map(Tensor({2, 2}, {1, 0, 0, 1}), std::vector<double>{1, 0, 0, 0});
  CHECK(skipped.skipped == std::vector<std::size_t>{1});
  CHECK(std::isnan(skipped.per_class[1]));
  CHECK_THROWS_AS(evaluate_map(second, std::vector<double>{0, 0}), DataError);
  CHECK_THROWS_AS(evaluate_map(second, std::vector<double>{0, 1, 1}), ShapeError);

  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(16), c = 1 + rng.below(8);
    const Tensor s = random_scores(rng, n, c, trial % 2 == 0);
    std::vector<double> y(n * c);
    for (auto& v : y) v = rng.bernoulli(0.3) ? 1.0 : 0.0;
    double total = 0.0;
    std::size_t included = 0;
    for (std::size_t k = 0; k < c; ++k) {
      std::vector<double> col(n);
      std::vector<int> yk(n);
      for (std::size_t i = 0; i < n; ++i) col[i] = s.at(i * c + k), yk[i] = y[i * c + k] == 1.0;
      if (std::count(yk.begin(), yk.end(), 1) == 0) continue;
      total += ap_oracle(col, yk);
      ++included;
    }
    if (included == 0) {
      CHECK_THROWS_AS(evaluate_map(s, y), DataError);
      continue;
    }
    CHECK(std::abs(evaluate_map(s, y).map - total / static_cast<double>(included)) <= 1e-12);
  }
}

TEST_CASE("ensemble") {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor a = random_scores(rng, 5, 4, false), b = random_scores(rng, 5, 4, false);
    for (auto mode : {TaskMode::single_label, TaskMode::multi_label}) {
      const Tensor e = ensemble(a, b, mode);
      for (std::size_t i = 0; i < 5; ++i) {
        double za = 0.0, zb = 0.0;
        for (std::size_t j = 0; j < 4; ++j) za += std::exp(a.at(i * 4 + j)), zb += std::exp(b.at(i * 4 + j));
        for (std::size_t j = 0; j < 4; ++j) {
          const double x = a.at(i * 4 + j), y = b.at(i * 4 + j);
          const double expect = mode == TaskMode::single_label
                                    ? 0.5 * (std::exp(x) / za + std::exp(y) / zb)
                                    : 0.5 * (1.0 / (1.0 + std::exp(-x)) + 1.0 / (1.0 + std::exp(-y)));
          CHECK(std::abs(e.at(i * 4 + j) - expect) <= 1e-12);
        }
      }
      // Self-ensembles keep the ranking.
      const Tensor self = ensemble(a, a, mode);
      for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 4; ++j) {
          for (std::size_t k = 0; k < 4; ++k) {
            CHECK((a.at(i * 4 + j) > a.at(i * 4 + k)) == (self.at(i * 4 + j) > self.at(i * 4 + k)));
          }
        }
      }
    }
  }
  const Tensor confident({1, 3}, {0, 30, 0});
  const Tensor uniform({1, 3}, {1, 1, 1});
  const Tensor e = ensemble(confident, uniform, TaskMode::single_label);
  CHECK(e.at(1) > e.at(0));
  CHECK(e.at(1) > e.at(2));
  CHECK_THROWS_AS(ensemble(confident, Tensor({1, 2}, {0, 0}), TaskMode::single_label), ShapeError);
}

TEST_CASE("report CSV") {
  const auto dir = scratch("report");
  MetricsReport r;
  Rng rng(6);
  for (std::size_t e = 1; e <= 20; ++e) {
    r.add(e, "train", "loss", rng.uniform(0.0, 3.0) / 7.0);
    r.add(e, "validation", "top1", rng.uniform());
  }
  r.add(20, "test", "tiny", 1e-300);
  CHECK_THROWS_AS(r.add(3, "train", "loss", 0.0), ConfigError);
  CHECK_THROWS_AS(r.add(21, "a,b", "loss", 0.0), ConfigError);
  export_report(r, dir / "r.csv");
  const auto rows = read_report_csv(dir / "r.csv");
  CHECK(rows == r.rows);
  CHECK(r.series("train", "loss").size() == 20);
  CHECK(r.series("validation", "top1").size() == 20);

  export_report(MetricsReport{}, dir / "empty.csv");
  CHECK(slurp(dir / "empty.csv") == "epoch,split,metric,value\n");
  CHECK(read_report_csv(dir / "empty.csv").empty());

  for (double v : {0.1, 1.0 / 3.0, -2.5e-17, 123456789.125}) CHECK(parse_double(format_double(v)) == v);
  CHECK(format_double(0.5) == "0.5");
  CHECK(text_hash("") == "cbf29ce484222325");
  std::ofstream(dir / "bad.csv") << "epoch,split,metric,value\n1,train,loss\n";
  CHECK_THROWS_AS(read_report_csv(dir / "bad.csv"), DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("config files") {
  std::istringstream text(
      "# comment\n"
      "train.epochs = 7   # trailing\n"
      "fusion.lambda_layout = 0.25\n"
      "fusion.scheme = cacnf\n"
      "seed = 11\n"
      "appearance.channels = 8, 16, 32\n");
  TrainConfig c = parse_train_config(text);
  CHECK(c.epochs == 7);
  CHECK(*c.seed == 11);
  CHECK(c.model.fusion.scheme == FusionScheme::cacnf);
  CHECK(c.model.fusion.lambda_layout == 0.25);
  CHECK(c.model.appearance.channels == std::array<std::size_t, 3>{8, 16, 32});
  CHECK(c.data_seed() == 11);

  // The resolved form parses back to the same resolved form.
  std::istringstream again(resolved_config(c));
  CHECK(resolved_config(parse_train_config(again)) == resolved_config(c));
  CHECK(resolved_config(c).find("fusion.vatf_heads") == std::string::npos);

  auto fails = [](const std::string& body, const std::string& fragment) {
    std::istringstream is(body);
    try {
      parse_train_config(is, "cfg");
      FAIL("accepted: " << body);
    } catch (const ConfigError& e) {
      CHECK_MESSAGE(std::string(e.what()).find(fragment) != std::string::npos, e.what());
    }
  };
  fails("seed = 1\nbogus = 2\n", "cfg line 2: unknown key");
  fails("seed = 1\nfusion.lambda_layout = 0.5\n", "does not apply");
  fails("fusion.scheme = none\nappearance.width = 4\n", "does not apply");
  fails("seed = x\n", "line 1");
  fails("seed = 1\nseed = 2\n", "duplicate");
  fails("just words\n", "expected key = value");
  fails("train.learning_rate = fast\n", "expected a number");
  fails("model.dropout = 0.1\nannotations.train = a.jsonl\n", "does not apply");

  TrainConfig missing;
  CHECK_THROWS_AS(missing.validate(), ConfigError);
  TrainConfig paths = small_train_config();
  paths.source = DataSource::annotations;
  paths.annotations.train = "/nonexistent/train.jsonl";
  paths.annotations.test = "/nonexistent/test.jsonl";
  CHECK_THROWS_AS(paths.validate(), ConfigError);

  apply_config_override(c, "train.batch_size=3");
  CHECK(c.batch_size == 3);
  CHECK_THROWS_AS(apply_config_override(c, "fusion.vatf_heads=2"), ConfigError);
  CHECK(config_help().find("fusion.caf_layers") != std::string::npos);
}

TEST_CASE("datasets and batches") {
  TrainConfig c = small_train_config();
  const DataBundle data = load_data(c);
  CHECK(data.classes == 4);
  CHECK(c.model.layout.num_classes == 4);
  CHECK(c.model.layout.vocabulary_size == data.vocabulary.size());
  CHECK(data.train.size() == 18);
  CHECK(data.validation.size() == 6);
  std::set<std::string> train_ids, val_ids;
  for (const auto& id : data.train.ids()) train_ids.insert(id);
  for (const auto& id : data.validation.ids()) CHECK(train_ids.count(id) == 0);

  for (auto scheme : {FusionScheme::none, FusionScheme::appearance, FusionScheme::pff, FusionScheme::pbf,
                      FusionScheme::ef, FusionScheme::vatf, FusionScheme::lcf, FusionScheme::caf,
                      FusionScheme::cacnf}) {
    FusionModelConfig m = c.model;
    m.fusion.scheme = scheme;
    const std::vector<std::size_t> rows{0, 3, 5};
    Rng a(9), b(9);
    const Batch x = make_batch(data.train, rows, m, SamplingMode::random, a);
    const Batch y = make_batch(data.train, rows, m, SamplingMode::random, b);
    CHECK(x.ids == y.ids);
    CHECK(x.inputs.layouts.size() == 3);
    CHECK(x.inputs.layouts[0].frames.size() == m.layout.frames);
    CHECK(x.targets.classes.size() == 3);
    CHECK(x.inputs.clip.defined() == (uses_appearance(scheme) && !uses_frame_images(scheme)));
    CHECK(x.inputs.frame_images.defined() == uses_frame_images(scheme));
    if (x.inputs.clip.defined()) {
      CHECK(x.inputs.clip.shape() == Shape{3, 3, 4, 16, 16});
      CHECK(std::equal(x.inputs.clip.values().begin(), x.inputs.clip.values().end(), y.inputs.clip.values().begin()));
      for (double v : x.inputs.clip.values()) REQUIRE((v >= 0.0 && v <= 1.0));
      CHECK(x.inputs.central_boxes.size() == 3);
    }
    if (x.inputs.frame_images.defined()) CHECK(x.inputs.frame_images.shape() == Shape{18, 3, 1, 16, 16});
  }

  // Uniform sampling ignores the random stream.
  Rng p(1), q(2);
  FusionModelConfig m = c.model;
  m.fusion.scheme = FusionScheme::caf;
  const std::vector<std::size_t> rows{1, 2};
  const Batch u = make_batch(data.train, rows, m, SamplingMode::uniform, p);
  const Batch v = make_batch(data.train, rows, m, SamplingMode::uniform, q);
  CHECK(std::equal(u.inputs.clip.values().begin(), u.inputs.clip.values().end(), v.inputs.clip.values().begin()));

  FeatureStore store;
  CHECK_THROWS_AS(make_batch(data.train, rows, [&] {
                    auto e = m;
                    e.fusion.scheme = FusionScheme::ef;
                    return e;
                  }(), SamplingMode::uniform, p, &store),
                  DataError);
}

TEST_CASE("few-shot data mapping") {
  TrainConfig c = small_train_config();
  c.synthetic.kind = SplitKind::fewshot;
  c.synthetic.num_actions = 6;
  c.synthetic.novel_actions = 2;
  c.synthetic.shots = 3;
  const DataBundle data = load_data(c);
  CHECK(data.classes == 4);
  CHECK(data.novel_classes == 2);
  CHECK(data.finetune.size() == 6);
  for (auto l : data.train.labels()) CHECK(l < 4);
  for (auto l : data.finetune.labels()) CHECK(l < 2);
  for (auto l : data.test.labels()) CHECK(l < 2);
}

TEST_CASE("STLT memorizes ten videos") {
  TrainConfig c;
  c.seed = 3;
  c.synthetic.num_actions = 5;
  c.synthetic.train_videos = 10;
  c.synthetic.test_videos = 5;
  c.synthetic.train_styles = 4;
  c.synthetic.test_styles = 4;
  c.validation_fraction = 0.0;
  c.epochs = 200;
  c.batch_size = 10;
  c.target_metric = 0.99;
  c.patience = 200;
  DataBundle data = load_data(c);
  // Validate on the training videos themselves.
  data.validation = data.train;
  const TrainResult r = train(c, data);
  const EvalSummary s = summarize(evaluate_model(r.model, data.train, 10));
  MESSAGE("overfit reached " << s.top1 << " after " << r.epochs_run << " epochs");
  CHECK(s.top1 >= 0.99);
  CHECK(r.epochs_run <= 200);
}

TEST_CASE("training is reproducible and checkpoints round-trip") {
  const auto dir = scratch("repro");
  for (auto scheme : {FusionScheme::none, FusionScheme::cacnf, FusionScheme::pbf}) {
    TrainConfig c = small_train_config(scheme);
    const DataBundle data = load_data(c);
    const TrainResult a = train(c, data);
    const TrainResult b = train(c, data);
    CHECK(a.report.rows == b.report.rows);
    CHECK(a.report.config_hash == b.report.config_hash);
    CHECK(a.report.config_hash == text_hash(resolved_config(c)));
    save_model(dir / "a.ckpt", a.model, resolved_config(c));
    save_model(dir / "b.ckpt", b.model, resolved_config(c));
    CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
    export_report(a.report, dir / "a.csv");
    export_report(b.report, dir / "b.csv");
    CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));

    const TrainedModel loaded = load_model(dir / "a.ckpt");
    const EvalResult before = evaluate_model(a.model, data.test, 4);
    const EvalResult after = evaluate_model(loaded, data.test, 4);
    CHECK(std::equal(before.logits.values().begin(), before.logits.values().end(), after.logits.values().begin()));
    if (scheme == FusionScheme::cacnf) {
      const auto s = summarize(before);
      CHECK_FALSE(std::isnan(s.layout_top1));
      CHECK_FALSE(std::isnan(s.appearance_top1));
      CHECK(a.report.series("validation", "layout_top1").size() == a.epochs_run);
    }
    // Batch size does not change evaluation beyond rounding.
    const EvalResult whole = evaluate_model(a.model, data.test, 100);
    for (std::size_t i = 0; i < whole.logits.size(); ++i) {
      CHECK(std::abs(whole.logits.at(i) - before.logits.at(i)) <= 1e-10);
    }
  }
  TrainConfig other = small_train_config();
  other.seed = 6;
  const DataBundle d1 = load_data(other);
  TrainConfig base = small_train_config();
  const DataBundle d0 = load_data(base);
  CHECK(train(other, d1).report.rows != train(base, d0).report.rows);
  std::filesystem::remove_all(dir);
}

TEST_CASE("non-finite loss aborts with diagnostics") {
  TrainConfig c = small_train_config();
  c.learning_rate = 1e300;
  c.epochs = 5;
  const DataBundle data = load_data(c);
  try {
    train(c, data);
    FAIL("training with a huge step did not abort");
  } catch (const NumericalError& e) {
    const std::string what = e.what();
    CHECK(what.find("non-finite loss") != std::string::npos);
    CHECK(what.find("step") != std::string::npos);
    CHECK(what.find("batch ids: ") != std::string::npos);
  }
}

TEST_CASE("few-shot fine-tuning freezes the backbone") {
  for (auto scheme : {FusionScheme::none, FusionScheme::cacnf, FusionScheme::lcf}) {
    TrainConfig c = small_train_config(scheme);
    c.synthetic.kind = SplitKind::fewshot;
    c.synthetic.num_actions = 6;
    c.synthetic.novel_actions = 2;
    c.synthetic.shots = 3;
    c.fewshot.epochs = 3;
    const DataBundle data = load_data(c);
    const TrainResult base = train(c, data);
    const auto before = parameter_hash(base.model.weights.backbone_parameters());
    const FewShotResult a = fewshot_finetune(base.model, data.finetune, data.test, 2, c.fewshot, 8);
    const FewShotResult b = fewshot_finetune(base.model, data.finetune, data.test, 2, c.fewshot, 8);
    CHECK(a.backbone_hash_before == before);
    CHECK(a.backbone_hash_after == before);
    CHECK(parameter_hash(a.model.weights.backbone_parameters()) == before);
    CHECK(parameter_hash(base.model.weights.backbone_parameters()) == before);
    CHECK(parameter_hash(a.model.weights.classifier_parameters()) ==
          parameter_hash(b.model.weights.classifier_parameters()));
    CHECK(a.model.config.layout.num_classes == 2);
    CHECK(a.report.series("finetune", "loss").size() == 3);
    CHECK_FALSE(std::isnan(a.test.top1));
    CHECK_THROWS_AS(fewshot_finetune(base.model, data.finetune, data.test, 3, c.fewshot, 8), DataError);
  }
}
