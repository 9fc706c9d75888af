#include "stlt/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <cmath>
#include <map>
#include <numeric>

#include "stlt/errors.hpp"
#include "stlt/raster.hpp"

namespace stlt {

std::vector<std::string> Dataset::ids() const {
  std::vector<std::string> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(it.layout.id);
  return out;
}

std::vector<std::size_t> Dataset::labels() const {
  std::vector<std::size_t> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(it.layout.label.index());
  return out;
}

std::vector<double> Dataset::multi_hot() const {
  std::vector<double> out;
  out.reserve(items.size() * num_classes);
  for (const auto& it : items) {
    const auto row = it.layout.label.multi_hot(num_classes);
    out.insert(out.end(), row.begin(), row.end());
  }
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset d;
  d.styles = styles;
  d.rgb_dir = rgb_dir;
  d.num_classes = num_classes;
  d.mode = mode;
  for (auto r : rows) d.items.push_back(items.at(r));
  return d;
}

Dataset synthetic_dataset(const std::vector<SyntheticVideo>& videos, const std::vector<ObjectStyle>& styles,
                          std::size_t classes, TaskMode mode, const std::vector<std::size_t>& label_map) {
  Dataset d;
  d.styles = styles;
  d.num_classes = classes;
  d.mode = mode;
  for (const auto& v : videos) {
    DatasetItem it{v.layout, v.scene, v.spec.styles};
    std::vector<std::size_t> mapped;
    for (auto c : v.layout.label.classes) {
      if (c >= label_map.size() || label_map[c] >= classes) throw DataError("action outside the label map");
      mapped.push_back(label_map[c]);
    }
    std::sort(mapped.begin(), mapped.end());
    it.layout.label.classes = mapped;
    it.scene.label.classes = mapped;
    d.items.push_back(std::move(it));
  }
  return d;
}

namespace {

std::vector<VideoLayout> read_annotations(const std::filesystem::path& path, const AnnotationSource& src,
                                          TaskMode mode, Vocabulary& vocab, LabelSet& actions) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read annotations " + path.string());
  ParseOptions opts;
  opts.mode = mode;
  opts.strict = src.strict;
  opts.oracle = src.oracle;
  opts.score_threshold = src.score_threshold;
  return parse_annotations(is, opts, vocab, actions).videos;
}

Dataset annotation_dataset(std::vector<VideoLayout> videos, const TrainConfig& config, std::size_t classes,
                           const std::map<std::size_t, std::size_t>* remap) {
  Dataset d;
  d.rgb_dir = config.annotations.rgb_dir;
  d.num_classes = classes;
  d.mode = config.mode;
  for (auto& v : videos) {
    if (remap) {
      for (auto& c : v.label.classes) {
        auto it = remap->find(c);
        if (it == remap->end()) throw DataError("video '" + v.id + "' has an action outside the few-shot classes");
        c = it->second;
      }
    }
    for (auto c : v.label.classes) {
      if (c >= classes) throw DataError("video '" + v.id + "' has an action the training set never shows");
    }
    d.items.push_back({std::move(v), {}, {}});
  }
  return d;
}

void hold_out_validation(DataBundle& b, const TrainConfig& config) {
  const std::size_t n = b.train.size();
  const auto held = static_cast<std::size_t>(std::llround(config.validation_fraction * static_cast<double>(n)));
  if (held == 0) {
    b.validation = b.train.subset(std::vector<std::size_t>{});
    return;
  }
  if (held >= n) throw ConfigError("validation_fraction leaves no training videos");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng(config.data_seed()).split("validation");
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(held));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(held), order.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  b.validation = b.train.subset(val);
  b.train = b.train.subset(train);
}

}  // namespace

DataBundle load_data(TrainConfig& config) {
  DataBundle b;
  if (config.source == DataSource::synthetic) {
    SplitSpec spec = config.synthetic;
    spec.seed = config.data_seed();
    const bool multi = config.mode == TaskMode::multi_label;
    const SyntheticSplit split = multi ? make_multilabel_split(spec) : make_split(spec);
    b.vocabulary = split.vocabulary;
    b.actions = split.actions;
    if (spec.kind == SplitKind::fewshot && !multi) {
      std::vector<std::size_t> base_map(spec.num_actions, spec.num_actions), novel_map(spec.num_actions, spec.num_actions);
      for (std::size_t i = 0; i < split.base_actions.size(); ++i) base_map[split.base_actions[i]] = i;
      for (std::size_t i = 0; i < split.novel_actions.size(); ++i) novel_map[split.novel_actions[i]] = i;
      b.classes = split.base_actions.size();
      b.novel_classes = split.novel_actions.size();
      b.train = synthetic_dataset(split.train, split.styles, b.classes, config.mode, base_map);
      b.test = synthetic_dataset(split.test, split.styles, b.novel_classes, config.mode, novel_map);
      b.finetune = synthetic_dataset(split.finetune, split.styles, b.novel_classes, config.mode, novel_map);
    } else {
      std::vector<std::size_t> identity(spec.num_actions);
      std::iota(identity.begin(), identity.end(), std::size_t{0});
      b.classes = spec.num_actions;
      b.train = synthetic_dataset(split.train, split.styles, b.classes, config.mode, identity);
      b.test = synthetic_dataset(split.test, split.styles, b.classes, config.mode, identity);
    }
  } else {
    b.vocabulary = Vocabulary(config.annotations.categories);
    b.actions = LabelSet(config.annotations.actions);
    auto train = read_annotations(config.annotations.train, config.annotations, config.mode, b.vocabulary, b.actions);
    b.classes = b.actions.size();
    if (!config.annotations.finetune.empty()) {
      // Preloaded names may include the novel actions; pretraining covers
      // only the labels the training set uses.
      b.classes = 0;
      for (const auto& v : train) {
        for (auto c : v.label.classes) b.classes = std::max(b.classes, c + 1);
      }
    }
    if (config.annotations.finetune.empty()) {
      auto test = read_annotations(config.annotations.test, config.annotations, config.mode, b.vocabulary, b.actions);
      if (b.actions.size() != b.classes) throw DataError("the test set names actions the training set never shows");
      b.train = annotation_dataset(std::move(train), config, b.classes, nullptr);
      b.test = annotation_dataset(std::move(test), config, b.classes, nullptr);
    } else {
      auto finetune =
          read_annotations(config.annotations.finetune, config.annotations, config.mode, b.vocabulary, b.actions);
      std::map<std::size_t, std::size_t> remap;
      for (const auto& v : finetune) {
        for (auto c : v.label.classes) remap.emplace(c, 0);
      }
      std::size_t next = 0;
      for (auto& [c, i] : remap) i = next++;
      auto test = read_annotations(config.annotations.test, config.annotations, config.mode, b.vocabulary, b.actions);
      b.novel_classes = remap.size();
      b.train = annotation_dataset(std::move(train), config, b.classes, nullptr);
      b.finetune = annotation_dataset(std::move(finetune), config, b.novel_classes, &remap);
      b.test = annotation_dataset(std::move(test), config, b.novel_classes, &remap);
    }
  }
  if (b.train.size() == 0) throw DataError("the training set is empty");
  hold_out_validation(b, config);
  config.model.layout.num_classes = b.classes;
  config.model.appearance.num_classes = b.classes;
  config.model.layout.vocabulary_size = b.vocabulary.size();
  return b;
}

namespace {

// Frames of one video as bytes, either rendered or read from its archive.
class FrameSource {
 public:
  FrameSource(const Dataset& data, const DatasetItem& item, std::size_t resolution)
      : data_(data), item_(item), res_(resolution) {
    if (!item.scene.frames.empty()) {
      total_ = item.scene.frames.size();
      for (auto id : item.style_ids) {
        if (id >= data.styles.size()) throw DataError("video '" + item.layout.id + "' uses an unknown style");
        styles_.push_back(data.styles[id]);
      }
    } else {
      if (data.rgb_dir.empty()) throw DataError("no frames available for video '" + item.layout.id + "'");
      archive_ = read_rgb_archive(data.rgb_dir / (item.layout.id + ".rgb"));
      if (archive_.resolution != resolution) {
        throw DataError("frames of '" + item.layout.id + "' are " + std::to_string(archive_.resolution) +
                        " pixels, the model expects " + std::to_string(resolution));
      }
      if (archive_.frames == 0) throw DataError("frames of '" + item.layout.id + "' are empty");
      total_ = archive_.frames;
    }
  }

  std::size_t frames() const { return total_; }

  // Writes frame f as [3, res, res] values in [0, 1], with channel stride
  // `channel_stride`.
  void write(std::size_t f, double* dst, std::size_t channel_stride) const {
    const std::size_t plane = res_ * res_;
    const std::uint8_t* src;
    std::vector<std::uint8_t> rendered;
    if (!item_.scene.frames.empty()) {
      rendered = render_frame_bytes(item_.scene.frames[f], styles_, res_);
      src = rendered.data();
    } else {
      src = archive_.bytes.data() + f * 3 * plane;
    }
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t p = 0; p < plane; ++p) dst[c * channel_stride + p] = src[c * plane + p] / 255.0;
    }
  }

 private:
  const Dataset& data_;
  const DatasetItem& item_;
  std::size_t res_;
  std::size_t total_ = 0;
  std::vector<ObjectStyle> styles_;
  RgbArchive archive_;
};

// Index into a sequence of `to` frames matching position i of `from`.
std::size_t rescale(std::size_t i, std::size_t from, std::size_t to) { return from == to ? i : i * to / from; }

}  // namespace

Batch make_batch(const Dataset& data, std::span<const std::size_t> rows, const FusionModelConfig& model,
                 SamplingMode mode, Rng& rng, const FeatureStore* features) {
  if (rows.empty()) throw ConfigError("empty batch");
  const FusionScheme scheme = model.fusion.scheme;
  const bool video_vector =
      scheme == FusionScheme::appearance || scheme == FusionScheme::ef || scheme == FusionScheme::lcf;
  const bool precomputed = features && video_vector;
  const bool need_clip = uses_appearance(scheme) && !uses_frame_images(scheme) && !precomputed;
  const bool need_frames = uses_frame_images(scheme);
  const std::size_t n = model.layout.frames, tc = model.appearance.frames, res = model.appearance.resolution;
  const std::size_t plane = res * res, videos = rows.size();

  Batch batch;
  std::vector<double> clip, frame_images, vectors;
  if (need_clip) clip.assign(videos * 3 * tc * plane, 0.0);
  if (need_frames) frame_images.assign(videos * n * 3 * plane, 0.0);
  for (std::size_t b = 0; b < videos; ++b) {
    const DatasetItem& item = data.items.at(rows[b]);
    const VideoLayout& layout = item.layout;
    if (layout.frames.empty()) throw DataError("video '" + layout.id + "' has no frames");
    Rng vr = rng.split(b);
    batch.ids.push_back(layout.id);
    const auto idx = sample_indices(layout.frames.size(), n, mode, vr);
    LayoutInput in;
    for (auto i : idx) in.frames.push_back(pad_objects(layout.frames[i], model.layout.max_objects));
    batch.inputs.layouts.push_back(std::move(in));

    if (precomputed) {
      auto it = features->find(layout.id);
      if (it == features->end()) throw DataError("no precomputed appearance features for '" + layout.id + "'");
      if (it->second.size() != model.appearance.width) {
        throw DataError("precomputed features for '" + layout.id + "' have the wrong width");
      }
      vectors.insert(vectors.end(), it->second.begin(), it->second.end());
    }
    if (need_clip || need_frames) {
      const FrameSource source(data, item, res);
      if (need_clip) {
        const auto cidx = sample_indices(source.frames(), tc, mode, vr);
        for (std::size_t t = 0; t < tc; ++t) {
          source.write(cidx[t], clip.data() + b * 3 * tc * plane + t * plane, tc * plane);
        }
        const auto& central = layout.frames[std::min(rescale(cidx[tc / 2], source.frames(), layout.frames.size()),
                                                     layout.frames.size() - 1)];
        std::vector<BoundingBox> boxes;
        for (const auto& o : central.objects) boxes.push_back(o.box);
        batch.inputs.central_boxes.push_back(std::move(boxes));
      }
      if (need_frames) {
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t f =
              std::min(rescale(idx[i], layout.frames.size(), source.frames()), source.frames() - 1);
          source.write(f, frame_images.data() + (b * n + i) * 3 * plane, plane);
        }
      }
    }
    if (data.mode == TaskMode::multi_label) {
      const auto row = layout.label.multi_hot(data.num_classes);
      batch.targets.multi_hot.insert(batch.targets.multi_hot.end(), row.begin(), row.end());
    } else {
      batch.targets.classes.push_back(layout.label.index());
    }
  }
  batch.targets.multi_label = data.mode == TaskMode::multi_label;
  if (need_clip) batch.inputs.clip = Tensor({videos, 3, tc, res, res}, std::move(clip));
  if (need_frames) batch.inputs.frame_images = Tensor({videos * n, 3, 1, res, res}, std::move(frame_images));
  if (precomputed) batch.inputs.precomputed_video = Tensor({videos, model.appearance.width}, std::move(vectors));
  return batch;
}

}  // namespace stlt
