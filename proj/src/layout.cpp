#include "stlt/layout.hpp"

#include <algorithm>
#include <numeric>

#include "stlt/errors.hpp"

namespace stlt {

bool BoundingBox::valid() const {
  return 0.0 <= x1 && x1 <= x2 && x2 <= 1.0 && 0.0 <= y1 && y1 <= y2 && y2 <= 1.0;
}

BoundingBox BoundingBox::checked(double x1, double y1, double x2, double y2) {
  BoundingBox b{x1, y1, x2, y2};
  if (!b.valid()) {
    throw DataError("malformed box [" + std::to_string(x1) + ", " + std::to_string(y1) + ", " +
                    std::to_string(x2) + ", " + std::to_string(y2) + "]");
  }
  return b;
}

BoundingBox normalize_box(const PixelBox& box, double frame_width, double frame_height) {
  if (!(frame_width > 0.0) || !(frame_height > 0.0)) throw DataError("frame dimensions must be positive");
  constexpr double kTolerance = 1.0;
  for (double x : {box.x1, box.x2}) {
    if (!(x >= -kTolerance && x <= frame_width + kTolerance)) {
      throw DataError("box x-coordinate " + std::to_string(x) + " outside frame");
    }
  }
  for (double y : {box.y1, box.y2}) {
    if (!(y >= -kTolerance && y <= frame_height + kTolerance)) {
      throw DataError("box y-coordinate " + std::to_string(y) + " outside frame");
    }
  }
  auto clamp01 = [](double v) { return std::clamp(v, 0.0, 1.0); };
  const double x1 = clamp01(box.x1 / frame_width), x2 = clamp01(box.x2 / frame_width);
  const double y1 = clamp01(box.y1 / frame_height), y2 = clamp01(box.y2 / frame_height);
  if (x2 < x1 || y2 < y1) throw DataError("malformed box: inverted coordinates");
  return {x1, y1, x2, y2};
}

std::size_t ActionLabel::index() const {
  if (multi_label || classes.size() != 1) throw DataError("expected a single-label action");
  return classes.front();
}

std::vector<double> ActionLabel::multi_hot(std::size_t num_classes) const {
  std::vector<double> out(num_classes, 0.0);
  for (std::size_t c : classes) {
    if (c >= num_classes) throw DataError("action index out of range");
    out[c] = 1.0;
  }
  return out;
}

Vocabulary::Vocabulary(const std::vector<std::string>& categories) {
  add("[class]");
  add("[pad]");
  for (const auto& c : categories) add(c);
}

Vocabulary Vocabulary::hand_object() { return Vocabulary({"hand", kGenericObject}); }

std::optional<std::size_t> Vocabulary::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t Vocabulary::at(const std::string& name) const {
  if (auto i = find(name)) return *i;
  throw DataError("unknown category '" + name + "'");
}

const std::string& Vocabulary::name(std::size_t index) const {
  if (index >= names_.size()) throw DataError("category index out of range");
  return names_[index];
}

std::size_t Vocabulary::add(const std::string& name) {
  if (auto i = find(name)) return *i;
  names_.push_back(name);
  index_.emplace(name, names_.size() - 1);
  return names_.size() - 1;
}

LabelSet::LabelSet(const std::vector<std::string>& names) {
  for (const auto& n : names) add(n);
}

std::optional<std::size_t> LabelSet::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t LabelSet::add(const std::string& name) {
  if (auto i = find(name)) return *i;
  names_.push_back(name);
  index_.emplace(name, names_.size() - 1);
  return names_.size() - 1;
}

const std::string& LabelSet::name(std::size_t index) const {
  if (index >= names_.size()) throw DataError("action index out of range");
  return names_[index];
}

std::vector<std::size_t> sample_indices(std::size_t total, std::size_t n, SamplingMode mode, Rng& rng) {
  if (total == 0) throw DataError("cannot sample frames from an empty video");
  if (n == 0) throw ConfigError("frame count must be at least 1");
  std::vector<std::size_t> out;
  out.reserve(n);
  if (total < n) {
    for (std::size_t i = 0; i < total; ++i) out.push_back(i);
    while (out.size() < n) out.push_back(total - 1);
    return out;
  }
  if (mode == SamplingMode::uniform) {
    for (std::size_t i = 0; i < n; ++i) out.push_back(i * total / n);
    return out;
  }
  std::vector<std::size_t> pool(total);
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(total - i));
    std::swap(pool[i], pool[j]);
  }
  out.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n));
  std::sort(out.begin(), out.end());
  return out;
}

VideoLayout sample_frames(const VideoLayout& video, std::size_t n, SamplingMode mode, Rng& rng) {
  const auto idx = sample_indices(video.frames.size(), n, mode, rng);
  VideoLayout out{video.id, {}, video.label};
  out.frames.reserve(n);
  for (std::size_t i : idx) out.frames.push_back(video.frames[i]);
  return out;
}

PaddedFrame pad_objects(const FrameLayout& frame, std::size_t max_objects) {
  const auto& objs = frame.objects;
  std::vector<std::size_t> keep(objs.size());
  std::iota(keep.begin(), keep.end(), 0);
  if (objs.size() > max_objects) {
    std::stable_sort(keep.begin(), keep.end(), [&](std::size_t a, std::size_t b) {
      return objs[a].score.value_or(1.0) > objs[b].score.value_or(1.0);
    });
    keep.resize(max_objects);
    std::sort(keep.begin(), keep.end());
  }
  PaddedFrame out;
  for (std::size_t i : keep) {
    out.categories.push_back(objs[i].category);
    out.boxes.push_back(objs[i].box);
    out.valid.push_back(true);
    out.scores.push_back(objs[i].score);
  }
  while (out.categories.size() < max_objects) {
    out.categories.push_back(Vocabulary::kPaddingIndex);
    out.boxes.push_back({0.0, 0.0, 0.0, 0.0});
    out.valid.push_back(false);
    out.scores.push_back(std::nullopt);
  }
  return out;
}

FrameLayout unpad(const PaddedFrame& padded) {
  FrameLayout out;
  for (std::size_t i = 0; i < padded.valid.size(); ++i) {
    if (padded.valid[i]) out.objects.push_back({padded.categories[i], padded.boxes[i], padded.scores[i]});
  }
  return out;
}

}  // namespace stlt
