#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "stlt/layout.hpp"
#include "stlt/rng.hpp"

namespace stlt {

// The twelve scripted programs. Action ids beyond twelve reuse a program with
// a different speed profile and mirroring (the "variant").
enum class ActionProgram : std::uint8_t {
  approach,
  move_apart,
  drop_into,
  take_out_of,
  pick_up,
  put_down,
  pass_over,
  pass_under,
  circle_around,
  swap_positions,
  shrink_away,
  grow_toward,
};

inline constexpr std::size_t kProgramCount = 12;

std::string program_name(ActionProgram p);

struct ActionScript {
  std::size_t action_id = 0;
  ActionProgram program = ActionProgram::approach;
  std::size_t variant = 0;
  std::size_t object_count = 2;
  // Per-frame noise: box width/height and box center, uniform in +-value.
  double size_jitter = 0.02;
  double center_jitter = 0.002;
  // Minimum net displacement the program's predicate demands.
  double min_travel = 0.2;

  static ActionScript for_action(std::size_t action_id);
  std::string name() const;
};

enum class StyleShape : std::uint8_t { rectangle, ellipse, triangle, cross };

struct ObjectStyle {
  std::size_t style_id = 0;
  StyleShape shape = StyleShape::rectangle;
  std::array<std::uint8_t, 3> color{200, 40, 40};
  // Odd seeds draw a darker one-pixel outline; the seed also picks its shade.
  std::uint64_t texture_seed = 0;
  // Multiplies the script's nominal object size.
  double size_prior = 1.0;
};

// Distinct styles; shapes cycle and hues are spread around the color wheel.
std::vector<ObjectStyle> make_style_pool(std::size_t count, std::uint64_t seed);

struct SyntheticVideoSpec {
  std::size_t action_id = 0;
  std::vector<std::size_t> styles;  // one per object, in object order
  std::size_t frames = 0;
  std::uint64_t seed = 0;
  std::size_t attempts = 0;  // generation attempts until the predicate held
};

struct SyntheticVideo {
  // What the layout branch sees. Differs from `scene` only for corrupted
  // videos.
  VideoLayout layout;
  // Ground-truth scene; rendering always uses this.
  VideoLayout scene;
  SyntheticVideoSpec spec;
  bool corrupted = false;
};

// Layout for one scripted video. Objects keep their order across frames and
// carry the generic object category. Throws ConfigError on a style count
// mismatch or frames < 8, and DataError if no attempt within the retry cap
// satisfies the program's predicate.
SyntheticVideo generate_video(const ActionScript& script, const std::vector<ObjectStyle>& styles,
                              std::size_t frames, std::uint64_t seed, const Vocabulary& vocabulary);

// Checks the program's defining geometric predicate on a layout whose objects
// are in script order.
bool check_predicate(const ActionScript& script, const VideoLayout& video);

inline constexpr std::size_t kRetryCap = 100;

enum class SplitKind { compositional, fewshot };

struct SplitSpec {
  SplitKind kind = SplitKind::compositional;
  std::size_t num_actions = 12;
  std::size_t train_videos = 2000;
  std::size_t test_videos = 600;
  std::size_t train_styles = 8;
  std::size_t test_styles = 8;
  // Probability that a training video uses its action's preferred style pair.
  double style_bias = 0.8;
  std::size_t frames = 32;
  // Few-shot only: the last novel_actions action ids are novel.
  std::size_t novel_actions = 6;
  std::size_t shots = 5;
  // Fraction of training and test videos whose layout is replaced by the
  // layout of a video with a different action, while labels and frames stay.
  double layout_corruption = 0.0;
  std::uint64_t seed = 0;
};

struct SyntheticSplit {
  std::vector<ObjectStyle> styles;
  LabelSet actions;
  Vocabulary vocabulary;
  std::vector<std::size_t> train_style_ids, test_style_ids;
  std::vector<std::size_t> base_actions, novel_actions;
  std::vector<SyntheticVideo> train, test, finetune;
};

// Compositional: disjoint train/test style sets, every action in both sets.
// Few-shot: train holds base actions, finetune exactly `shots` videos per
// novel action, test novel actions only. Per-split action counts differ by
// at most one.
SyntheticSplit make_split(const SplitSpec& spec);

// Two scripted actions per video, one in each half of the frame, with a
// multi-hot label. Styles are drawn from the whole pool.
SyntheticSplit make_multilabel_split(const SplitSpec& spec);

}  // namespace stlt
