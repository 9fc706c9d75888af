#include "stlt/annotations.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "json.hpp"
#include "stlt/errors.hpp"

namespace stlt {

namespace {

using nlohmann::json;

[[noreturn]] void fail(std::size_t line, const std::string& what) {
  throw DataError("annotations line " + std::to_string(line) + ": " + what);
}

const json& field(const json& obj, const char* name, std::size_t line) {
  if (!obj.is_object()) fail(line, std::string("expected an object holding '") + name + "'");
  auto it = obj.find(name);
  if (it == obj.end()) fail(line, std::string("missing field '") + name + "'");
  return *it;
}

double number(const json& v, const char* what, std::size_t line) {
  if (!v.is_number()) fail(line, std::string(what) + " must be a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) fail(line, std::string(what) + " must be finite");
  return d;
}

std::size_t index_value(const json& v, std::size_t limit, const char* what, std::size_t line) {
  if (!v.is_number_integer() && !v.is_number_unsigned()) fail(line, std::string(what) + " must be an index");
  const auto i = v.get<long long>();
  if (i < 0 || static_cast<std::size_t>(i) >= limit) fail(line, std::string(what) + " index out of range");
  return static_cast<std::size_t>(i);
}

std::size_t resolve_category(const json& v, const ParseOptions& opt, Vocabulary& vocab, ParseStats& stats,
                             std::size_t line) {
  if (v.is_string()) {
    const auto name = v.get<std::string>();
    if (auto i = vocab.find(name)) {
      if (*i == Vocabulary::kClassIndex || *i == Vocabulary::kPaddingIndex) {
        fail(line, "reserved category '" + name + "' in data");
      }
      return *i;
    }
    if (opt.strict) fail(line, "unknown category '" + name + "'");
    auto generic = vocab.find(Vocabulary::kGenericObject);
    if (!generic) fail(line, "lenient mode needs an 'object' category in the vocabulary");
    ++stats.unknown_categories;
    return *generic;
  }
  const std::size_t i = index_value(v, vocab.size(), "category", line);
  if (i == Vocabulary::kClassIndex || i == Vocabulary::kPaddingIndex) fail(line, "reserved category index");
  return i;
}

std::size_t resolve_action(const json& v, const ParseOptions& opt, LabelSet& actions, std::size_t line) {
  if (v.is_string()) {
    const auto name = v.get<std::string>();
    if (auto i = actions.find(name)) return *i;
    if (!opt.extend_actions) fail(line, "unknown action '" + name + "'");
    return actions.add(name);
  }
  return index_value(v, actions.size(), "label", line);
}

VideoLayout parse_record(const json& rec, const ParseOptions& opt, Vocabulary& vocab, LabelSet& actions,
                         ParseStats& stats, std::size_t line) {
  if (!rec.is_object()) fail(line, "record must be a JSON object");
  VideoLayout video;
  const json& id = field(rec, "id", line);
  if (!id.is_string()) fail(line, "'id' must be a string");
  video.id = id.get<std::string>();

  const json& label = field(rec, "label", line);
  if (label.is_array()) {
    if (opt.mode != TaskMode::multi_label) fail(line, "list label in single-label mode");
    std::vector<std::size_t> classes;
    for (const auto& l : label) classes.push_back(resolve_action(l, opt, actions, line));
    if (classes.empty()) fail(line, "empty label list");
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    video.label = ActionLabel::multi(std::move(classes));
  } else {
    if (opt.mode != TaskMode::single_label) fail(line, "scalar label in multi-label mode");
    video.label = ActionLabel::single(resolve_action(label, opt, actions, line));
  }

  const bool normalized = rec.contains("normalized") && rec["normalized"].is_boolean() &&
                          rec["normalized"].get<bool>();
  double width = 1.0, height = 1.0;
  if (!normalized) {
    width = number(field(rec, "width", line), "width", line);
    height = number(field(rec, "height", line), "height", line);
    if (!(width > 0.0) || !(height > 0.0)) fail(line, "frame size must be positive");
  }

  const json& frames = field(rec, "frames", line);
  if (!frames.is_array()) fail(line, "'frames' must be a list");
  if (frames.empty()) fail(line, "video has no frames");
  long long last_index = -1;
  for (const auto& fr : frames) {
    if (fr.contains("frame_index")) {
      const auto fi = index_value(fr["frame_index"], SIZE_MAX, "frame_index", line);
      if (static_cast<long long>(fi) <= last_index) fail(line, "frame indices must increase");
      last_index = static_cast<long long>(fi);
    }
    const json& objs = field(fr, "objects", line);
    if (!objs.is_array()) fail(line, "'objects' must be a list");
    FrameLayout frame;
    for (const auto& o : objs) {
      ObjectInstance obj;
      obj.category = resolve_category(field(o, "category", line), opt, vocab, stats, line);
      const json& box = field(o, "box", line);
      if (!box.is_array() || box.size() != 4) fail(line, "'box' must hold four numbers");
      const PixelBox px{number(box[0], "box", line), number(box[1], "box", line),
                        number(box[2], "box", line), number(box[3], "box", line)};
      try {
        obj.box = normalized ? BoundingBox::checked(px.x1, px.y1, px.x2, px.y2)
                             : normalize_box(px, width, height);
      } catch (const DataError& e) {
        fail(line, e.what());
      }
      if (auto it = o.find("score"); it != o.end() && !it->is_null()) {
        const double s = number(*it, "score", line);
        if (s < 0.0 || s > 1.0) fail(line, "score must lie in [0, 1]");
        obj.score = s;
      }
      if (!opt.oracle && obj.score && *obj.score < opt.score_threshold) {
        ++stats.filtered_by_score;
        continue;
      }
      frame.objects.push_back(obj);
    }
    video.frames.push_back(std::move(frame));
  }
  return video;
}

}  // namespace

ParsedAnnotations parse_annotations(std::istream& is, const ParseOptions& options, Vocabulary& categories,
                                    LabelSet& actions) {
  ParsedAnnotations out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(is, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(text);
    } catch (const json::exception& e) {
      fail(line, std::string("invalid JSON: ") + e.what());
    }
    try {
      out.videos.push_back(parse_record(rec, options, categories, actions, out.stats, line));
    } catch (const json::exception& e) {
      fail(line, e.what());
    }
  }
  out.stats.videos = out.videos.size();
  return out;
}

void write_annotations(std::ostream& os, std::span<const VideoLayout> videos) {
  for (const auto& v : videos) {
    json rec;
    rec["id"] = v.id;
    rec["normalized"] = true;
    if (v.label.multi_label) {
      rec["label"] = v.label.classes;
    } else {
      rec["label"] = v.label.index();
    }
    json frames = json::array();
    for (const auto& f : v.frames) {
      json objs = json::array();
      for (const auto& o : f.objects) {
        json jo;
        jo["category"] = o.category;
        jo["box"] = {o.box.x1, o.box.y1, o.box.x2, o.box.y2};
        if (o.score) jo["score"] = *o.score;
        objs.push_back(std::move(jo));
      }
      frames.push_back({{"objects", std::move(objs)}});
    }
    rec["frames"] = std::move(frames);
    os << rec.dump() << '\n';
  }
}

}  // namespace stlt
