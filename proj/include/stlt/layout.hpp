#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "stlt/rng.hpp"

namespace stlt {

// Box in unit-normalized frame coordinates: 0 <= x1 <= x2 <= 1, same for y.
struct BoundingBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 1.0;
  double y2 = 1.0;

  static BoundingBox full_frame() { return {0.0, 0.0, 1.0, 1.0}; }
  // Throws DataError when the invariants do not hold.
  static BoundingBox checked(double x1, double y1, double x2, double y2);

  bool valid() const;
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }
  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool contains(double x, double y) const { return x >= x1 && x <= x2 && y >= y1 && y <= y2; }
  bool overlaps(const BoundingBox& o) const {
    return x1 < o.x2 && o.x1 < x2 && y1 < o.y2 && o.y1 < y2;
  }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct PixelBox {
  double x1, y1, x2, y2;
};

// Divides by the frame size and clamps to [0, 1]. Coordinates more than one
// pixel outside the frame, or an inverted box, raise DataError.
BoundingBox normalize_box(const PixelBox& box, double frame_width, double frame_height);

struct ObjectInstance {
  std::size_t category = 0;
  BoundingBox box;
  std::optional<double> score;
  friend bool operator==(const ObjectInstance&, const ObjectInstance&) = default;
};

struct FrameLayout {
  std::vector<ObjectInstance> objects;
  friend bool operator==(const FrameLayout&, const FrameLayout&) = default;
};

// Class indices of a video. Single-label videos hold exactly one index.
struct ActionLabel {
  std::vector<std::size_t> classes;
  bool multi_label = false;

  static ActionLabel single(std::size_t c) { return {{c}, false}; }
  static ActionLabel multi(std::vector<std::size_t> cs) { return {std::move(cs), true}; }
  std::size_t index() const;
  std::vector<double> multi_hot(std::size_t num_classes) const;
  friend bool operator==(const ActionLabel&, const ActionLabel&) = default;
};

struct VideoLayout {
  std::string id;
  std::vector<FrameLayout> frames;
  ActionLabel label;
  friend bool operator==(const VideoLayout&, const VideoLayout&) = default;
};

// Object category names. Index 0 is the special class category and index 1 is
// padding; real categories start at 2.
class Vocabulary {
 public:
  static constexpr std::size_t kClassIndex = 0;
  static constexpr std::size_t kPaddingIndex = 1;
  static constexpr const char* kGenericObject = "object";

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}
  explicit Vocabulary(const std::vector<std::string>& categories);
  // Two real categories, "hand" and "object".
  static Vocabulary hand_object();

  std::size_t size() const { return names_.size(); }
  std::optional<std::size_t> find(const std::string& name) const;
  std::size_t at(const std::string& name) const;
  const std::string& name(std::size_t index) const;
  std::size_t add(const std::string& name);
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Action class names, indexed from 0.
class LabelSet {
 public:
  LabelSet() = default;
  explicit LabelSet(const std::vector<std::string>& names);
  std::size_t size() const { return names_.size(); }
  std::optional<std::size_t> find(const std::string& name) const;
  std::size_t add(const std::string& name);
  const std::string& name(std::size_t index) const;
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> index_;
};

enum class SamplingMode { random, uniform };

// Frame indices for a video of `total` frames. When total >= n, uniform mode
// picks floor(i * total / n) and random mode n distinct sorted indices. When
// total < n, every frame is used once and the last index repeats.
std::vector<std::size_t> sample_indices(std::size_t total, std::size_t n, SamplingMode mode, Rng& rng);
VideoLayout sample_frames(const VideoLayout& video, std::size_t n, SamplingMode mode, Rng& rng);

// Fixed-size object slots for batching; `valid` marks real objects.
struct PaddedFrame {
  std::vector<std::size_t> categories;
  std::vector<BoundingBox> boxes;
  std::vector<bool> valid;
  std::vector<std::optional<double>> scores;
};

// Keeps the max_objects highest-scoring objects (missing scores rank as 1,
// ties by input order) in input order, then pads with the padding category
// and a zero box.
PaddedFrame pad_objects(const FrameLayout& frame, std::size_t max_objects);
FrameLayout unpad(const PaddedFrame& padded);

}  // namespace stlt
