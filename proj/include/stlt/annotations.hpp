#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <vector>

#include "stlt/layout.hpp"

namespace stlt {

enum class TaskMode { single_label, multi_label };

struct ParseOptions {
  TaskMode mode = TaskMode::single_label;
  // Strict: unknown categories are errors. Lenient: they map to the generic
  // "object" category and are tallied.
  bool strict = true;
  // Oracle layouts keep every box; otherwise boxes scoring below the
  // threshold are dropped.
  bool oracle = false;
  double score_threshold = 0.5;
  // Unknown action names are appended to the label set when true.
  bool extend_actions = true;
};

struct ParseStats {
  std::size_t videos = 0;
  std::size_t unknown_categories = 0;
  std::size_t filtered_by_score = 0;
};

struct ParsedAnnotations {
  std::vector<VideoLayout> videos;
  ParseStats stats;
};

// Reads JSON lines, one video per line:
//
//   {"id": str, "label": str | [str], "width": int, "height": int,
//    "frames": [{"objects": [{"category": str, "box": [x1,y1,x2,y2],
//                             "score": float?}]}]}
//
// Boxes are in pixels. The canonical form written by write_annotations has
// "normalized": true, unit boxes, and integer category/label indices instead
// of names; it is accepted as input too. Errors are DataError with the line
// number.
ParsedAnnotations parse_annotations(std::istream& is, const ParseOptions& options,
                                    Vocabulary& categories, LabelSet& actions);

// Canonical serialized form, one video per line.
void write_annotations(std::ostream& os, std::span<const VideoLayout> videos);

}  // namespace stlt
