#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "stlt/errors.hpp"
#include "stlt/synthetic.hpp"

namespace stlt {

namespace {

// Balanced action sequence: each action appears floor or ceil of n/|actions|
// times, in shuffled order.
std::vector<std::size_t> balanced_actions(const std::vector<std::size_t>& actions, std::size_t n, Rng& rng) {
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = actions[i % actions.size()];
  for (std::size_t i = n; i > 1; --i) std::swap(out[i - 1], out[rng.below(i)]);
  return out;
}

std::vector<std::size_t> pick_styles(const std::vector<std::size_t>& pool, std::size_t count, Rng& rng) {
  std::vector<std::size_t> p = pool;
  for (std::size_t i = 0; i < count; ++i) std::swap(p[i], p[i + rng.below(p.size() - i)]);
  p.resize(count);
  return p;
}

// Ordered pair of distinct train styles preferred by an action; pairs are
// enumerated in a seeded order so actions get distinct pairs while they last.
std::vector<std::size_t> preferred_styles(const std::vector<std::size_t>& pool, std::size_t action,
                                          std::size_t count, std::uint64_t seed) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    for (std::size_t j = 0; j < pool.size(); ++j) {
      if (i != j) pairs.emplace_back(pool[i], pool[j]);
    }
  }
  Rng rng = Rng(seed).split("preferred");
  for (std::size_t i = pairs.size(); i > 1; --i) std::swap(pairs[i - 1], pairs[rng.below(i)]);
  const auto& pr = pairs[action % pairs.size()];
  std::vector<std::size_t> out{pr.first, pr.second};
  out.resize(count);
  return out;
}

std::vector<ObjectStyle> resolve(const std::vector<ObjectStyle>& pool, const std::vector<std::size_t>& ids) {
  std::vector<ObjectStyle> out;
  for (auto i : ids) out.push_back(pool[i]);
  return out;
}

struct SetPlan {
  std::string name;
  std::size_t count;
  std::vector<std::size_t> actions;
  std::vector<std::size_t> styles;
  double bias;
};

std::vector<SyntheticVideo> generate_set(const SplitSpec& spec, const SyntheticSplit& split, const SetPlan& plan,
                                         const std::vector<std::size_t>& bias_pool) {
  Rng rng = Rng(spec.seed).split(plan.name);
  Rng order_rng = rng.split("order");
  const auto actions = balanced_actions(plan.actions, plan.count, order_rng);
  std::vector<SyntheticVideo> out;
  out.reserve(plan.count);
  for (std::size_t i = 0; i < plan.count; ++i) {
    Rng vr = rng.split(i);
    const auto script = ActionScript::for_action(actions[i]);
    std::vector<std::size_t> ids;
    if (plan.bias > 0.0 && vr.bernoulli(plan.bias)) {
      ids = preferred_styles(bias_pool, script.action_id, script.object_count, spec.seed);
    } else {
      ids = pick_styles(plan.styles, script.object_count, vr);
    }
    auto video = generate_video(script, resolve(split.styles, ids), spec.frames, vr.next_u64(), split.vocabulary);
    video.layout.id = video.scene.id = plan.name + "-" + std::to_string(i);
    out.push_back(std::move(video));
  }
  return out;
}

void corrupt_layouts(std::vector<SyntheticVideo>& videos, double fraction, Rng rng) {
  if (fraction <= 0.0) return;
  if (fraction > 1.0) throw ConfigError("layout corruption fraction must lie in [0, 1]");
  const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(videos.size())));
  std::vector<std::size_t> idx(videos.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
  for (std::size_t c = 0; c < count; ++c) {
    auto& v = videos[idx[c]];
    for (std::size_t tries = 0; tries < 1000; ++tries) {
      const auto& donor = videos[rng.below(videos.size())];
      if (donor.scene.label == v.scene.label) continue;
      v.layout.frames = donor.scene.frames;
      v.corrupted = true;
      break;
    }
  }
}

SyntheticSplit prepare(const SplitSpec& spec) {
  if (spec.num_actions < 2) throw ConfigError("a split needs at least two actions");
  if (spec.frames < 8) throw ConfigError("synthetic videos need at least 8 frames");
  if (spec.style_bias < 0.0 || spec.style_bias > 1.0) throw ConfigError("style bias must lie in [0, 1]");
  if (spec.train_styles < 2 || spec.test_styles < 2) {
    throw ConfigError("each style set needs at least two styles");
  }
  SyntheticSplit split;
  split.vocabulary = Vocabulary({Vocabulary::kGenericObject});
  split.styles = make_style_pool(spec.train_styles + spec.test_styles, spec.seed);
  for (std::size_t a = 0; a < spec.num_actions; ++a) split.actions.add(ActionScript::for_action(a).name());
  return split;
}

}  // namespace

SyntheticSplit make_split(const SplitSpec& spec) {
  SyntheticSplit split = prepare(spec);
  std::vector<std::size_t> all(split.styles.size());
  std::iota(all.begin(), all.end(), 0);
  Rng rng = Rng(spec.seed).split("split");
  const auto shuffled = pick_styles(all, all.size(), rng);
  split.train_style_ids.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(spec.train_styles));
  split.test_style_ids.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(spec.train_styles), shuffled.end());
  std::sort(split.train_style_ids.begin(), split.train_style_ids.end());
  std::sort(split.test_style_ids.begin(), split.test_style_ids.end());

  if (spec.kind == SplitKind::compositional) {
    if (spec.train_videos < spec.num_actions || spec.test_videos < spec.num_actions) {
      throw ConfigError("compositional split needs at least one video per action in train and test");
    }
    split.base_actions.resize(spec.num_actions);
    std::iota(split.base_actions.begin(), split.base_actions.end(), 0);
    split.train = generate_set(
        spec, split, {"train", spec.train_videos, split.base_actions, split.train_style_ids, spec.style_bias},
        split.train_style_ids);
    split.test = generate_set(spec, split, {"test", spec.test_videos, split.base_actions, split.test_style_ids, 0.0},
                              split.test_style_ids);
  } else {
    if (spec.novel_actions == 0 || spec.novel_actions >= spec.num_actions) {
      throw ConfigError("few-shot split needs at least one base and one novel action");
    }
    if (spec.shots == 0) throw ConfigError("few-shot split needs at least one shot");
    const std::size_t base = spec.num_actions - spec.novel_actions;
    for (std::size_t a = 0; a < spec.num_actions; ++a) (a < base ? split.base_actions : split.novel_actions).push_back(a);
    split.train = generate_set(spec, split, {"train", spec.train_videos, split.base_actions, all, spec.style_bias},
                               split.train_style_ids);
    split.finetune = generate_set(
        spec, split, {"finetune", spec.shots * spec.novel_actions, split.novel_actions, all, 0.0}, all);
    split.test = generate_set(spec, split, {"test", spec.test_videos, split.novel_actions, all, 0.0}, all);
  }
  corrupt_layouts(split.train, spec.layout_corruption, rng.split("corrupt-train"));
  corrupt_layouts(split.test, spec.layout_corruption, rng.split("corrupt-test"));
  return split;
}

SyntheticSplit make_multilabel_split(const SplitSpec& spec) {
  SyntheticSplit split = prepare(spec);
  std::vector<std::size_t> all(split.styles.size());
  std::iota(all.begin(), all.end(), 0);
  split.train_style_ids = split.test_style_ids = all;
  split.base_actions = all;
  split.base_actions.resize(spec.num_actions);
  std::iota(split.base_actions.begin(), split.base_actions.end(), 0);

  auto make = [&](const std::string& name, std::size_t count) {
    Rng rng = Rng(spec.seed).split("multi-" + name);
    Rng order_rng = rng.split("order");
    const auto firsts = balanced_actions(split.base_actions, count, order_rng);
    std::vector<SyntheticVideo> out;
    for (std::size_t i = 0; i < count; ++i) {
      Rng vr = rng.split(i);
      const std::size_t a = firsts[i];
      const std::size_t b = (a + 1 + vr.below(spec.num_actions - 1)) % spec.num_actions;
      SyntheticVideo joined;
      joined.layout.frames.resize(spec.frames);
      for (std::size_t side = 0; side < 2; ++side) {
        const auto script = ActionScript::for_action(side == 0 ? a : b);
        const auto ids = pick_styles(all, script.object_count, vr);
        const auto part = generate_video(script, resolve(split.styles, ids), spec.frames, vr.next_u64(),
                                         split.vocabulary);
        // Isotropic half-scale keeps every predicate intact.
        const double ox = side == 0 ? 0.0 : 0.5;
        for (std::size_t f = 0; f < spec.frames; ++f) {
          for (auto o : part.layout.frames[f].objects) {
            o.box = {ox + 0.5 * o.box.x1, 0.25 + 0.5 * o.box.y1, ox + 0.5 * o.box.x2, 0.25 + 0.5 * o.box.y2};
            joined.layout.frames[f].objects.push_back(o);
          }
        }
        if (side == 0) joined.spec = part.spec;
        else joined.spec.styles.insert(joined.spec.styles.end(), part.spec.styles.begin(), part.spec.styles.end());
      }
      joined.layout.id = name + "-" + std::to_string(i);
      joined.layout.label = ActionLabel::multi({std::min(a, b), std::max(a, b)});
      joined.scene = joined.layout;
      out.push_back(std::move(joined));
    }
    return out;
  };
  split.train = make("train", spec.train_videos);
  split.test = make("test", spec.test_videos);
  return split;
}

}  // namespace stlt
