#include "stlt/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "stlt/errors.hpp"

namespace stlt {

namespace {

constexpr double kPi = std::numbers::pi;

struct Track {
  std::vector<double> cx, cy, w, h;
  explicit Track(std::size_t n) : cx(n), cy(n), w(n), h(n) {}
};

struct Point {
  double x, y;
};

double dist(Point a, Point b) { return std::hypot(a.x - b.x, a.y - b.y); }

// Monotone speed profile with slope bounded below so every frame moves.
double profile(double t, double exponent) { return 0.4 * t + 0.6 * std::pow(t, exponent); }

double variant_exponent(std::size_t variant) {
  return std::pow(2.0, (static_cast<double>(variant % 5) - 2.0) / 2.0);
}
bool variant_mirrored(std::size_t variant) { return (variant / 5) % 2 == 1; }
double variant_scale(std::size_t variant) { return 1.0 - 0.05 * static_cast<double>((variant / 10) % 4); }

struct ObjectSize {
  double w, h;
};

ObjectSize sample_size(Rng& rng, double lo, double hi, double prior) {
  const double s = rng.uniform(lo, hi) * prior;
  const double aspect = rng.uniform(0.8, 1.25);
  return {s * std::sqrt(aspect), s / std::sqrt(aspect)};
}

// Two points inside [lo, hi]^2 at a distance within [dmin, dmax].
std::pair<Point, Point> sample_pair(Rng& rng, double lo, double hi, double dmin, double dmax) {
  for (;;) {
    Point a{rng.uniform(lo, hi), rng.uniform(lo, hi)};
    Point b{rng.uniform(lo, hi), rng.uniform(lo, hi)};
    const double d = dist(a, b);
    if (d >= dmin && d <= dmax) return {a, b};
  }
}

void set_static(Track& tr, std::size_t i, Point c, ObjectSize s) {
  tr.cx[i] = c.x;
  tr.cy[i] = c.y;
  tr.w[i] = s.w;
  tr.h[i] = s.h;
}

bool inside(const BoundingBox& b, double x, double y) { return b.contains(x, y); }

bool is_reversed(ActionProgram p) {
  return p == ActionProgram::take_out_of || p == ActionProgram::put_down || p == ActionProgram::grow_toward;
}

// Noise-free tracks for one attempt. `times` are already reversed for the
// time-reversed programs.
std::vector<Track> build_tracks(const ActionScript& s, const std::vector<double>& times,
                                const std::vector<double>& priors, Rng& rng) {
  const std::size_t n = times.size();
  const double ex = variant_exponent(s.variant);
  const double scale = variant_scale(s.variant);
  auto u = [&](double t) { return profile(t, ex); };
  std::vector<Track> tracks(s.object_count, Track(n));
  auto prior = [&](std::size_t i) { return priors[i] * scale; };

  switch (s.program) {
    case ActionProgram::approach:
    case ActionProgram::move_apart: {
      const ObjectSize sa = sample_size(rng, 0.10, 0.16, prior(0));
      const ObjectSize sb = sample_size(rng, 0.10, 0.16, prior(1));
      auto [far, cb] = sample_pair(rng, 0.15, 0.85, 0.38, 0.6);
      const double near = rng.uniform(0.1, 0.14) / dist(far, cb);
      const Point closest{cb.x + (far.x - cb.x) * near, cb.y + (far.y - cb.y) * near};
      const bool apart = s.program == ActionProgram::move_apart;
      for (std::size_t i = 0; i < n; ++i) {
        const double k = apart ? u(times[i]) : 1.0 - u(times[i]);
        set_static(tracks[0], i, {closest.x + (far.x - closest.x) * k, closest.y + (far.y - closest.y) * k}, sa);
        set_static(tracks[1], i, cb, sb);
      }
      break;
    }
    case ActionProgram::drop_into:
    case ActionProgram::take_out_of: {
      const ObjectSize sa = sample_size(rng, 0.08, 0.12, prior(0));
      const ObjectSize sb = sample_size(rng, 0.28, 0.36, prior(1));
      const Point cb{rng.uniform(0.3, 0.7), rng.uniform(0.6, 0.72)};
      const Point start{cb.x + rng.uniform(-0.05, 0.05), cb.y - rng.uniform(0.4, std::max(0.4, cb.y - 0.08))};
      const Point end{cb.x + rng.uniform(-0.04, 0.04), cb.y + rng.uniform(0.0, 0.05)};
      for (std::size_t i = 0; i < n; ++i) {
        const double k = u(times[i]);
        set_static(tracks[0], i, {start.x + (end.x - start.x) * k, start.y + (end.y - start.y) * k}, sa);
        set_static(tracks[1], i, cb, sb);
      }
      break;
    }
    case ActionProgram::pick_up:
    case ActionProgram::put_down: {
      const ObjectSize sa = sample_size(rng, 0.10, 0.14, prior(0));
      const ObjectSize sb = sample_size(rng, 0.14, 0.20, prior(1));
      const Point cb{rng.uniform(0.3, 0.7), rng.uniform(0.62, 0.75)};
      const Point ca{cb.x + rng.uniform(-0.03, 0.03), cb.y - rng.uniform(0.04, 0.07)};
      const double top = ca.y - sa.h / 2.0;
      const double lift = rng.uniform(0.3, std::max(0.3, std::min(0.42, top - 0.03)));
      constexpr double kRest = 0.3;
      for (std::size_t i = 0; i < n; ++i) {
        const double phase = std::max(0.0, (times[i] - kRest) / (1.0 - kRest));
        const double dy = -lift * u(phase);
        set_static(tracks[0], i, {ca.x, ca.y + dy}, sa);
        set_static(tracks[1], i, {cb.x, cb.y + dy}, sb);
      }
      break;
    }
    case ActionProgram::pass_over:
    case ActionProgram::pass_under: {
      const ObjectSize sa = sample_size(rng, 0.10, 0.14, prior(0));
      const ObjectSize sb = sample_size(rng, 0.14, 0.20, prior(1));
      const bool over = s.program == ActionProgram::pass_over;
      const Point cb{0.5 + rng.uniform(-0.1, 0.1), over ? rng.uniform(0.55, 0.7) : rng.uniform(0.3, 0.45)};
      const double gap = (sa.h + sb.h) / 2.0 + rng.uniform(0.08, 0.15);
      const double ya = over ? cb.y - gap : cb.y + gap;
      const double x0 = cb.x - rng.uniform(0.3, 0.38), x1 = cb.x + rng.uniform(0.3, 0.38);
      for (std::size_t i = 0; i < n; ++i) {
        set_static(tracks[0], i, {x0 + (x1 - x0) * u(times[i]), ya}, sa);
        set_static(tracks[1], i, cb, sb);
      }
      break;
    }
    case ActionProgram::circle_around: {
      const ObjectSize sa = sample_size(rng, 0.08, 0.12, prior(0));
      const ObjectSize sb = sample_size(rng, 0.10, 0.16, prior(1));
      const Point cb{rng.uniform(0.4, 0.6), rng.uniform(0.4, 0.6)};
      const double r = rng.uniform(0.22, 0.28);
      const double phi0 = rng.uniform(0.0, 2.0 * kPi);
      const double sweep = rng.uniform(1.5 * kPi, 1.9 * kPi);
      for (std::size_t i = 0; i < n; ++i) {
        const double phi = phi0 + sweep * u(times[i]);
        set_static(tracks[0], i, {cb.x + r * std::cos(phi), cb.y + r * std::sin(phi)}, sa);
        set_static(tracks[1], i, cb, sb);
      }
      break;
    }
    case ActionProgram::swap_positions: {
      const ObjectSize sa = sample_size(rng, 0.10, 0.14, prior(0));
      const ObjectSize sb = sample_size(rng, 0.10, 0.14, prior(1));
      auto [p, q] = sample_pair(rng, 0.2, 0.8, 0.35, 0.55);
      const double bump = rng.uniform(0.1, 0.15);
      const double d = dist(p, q);
      const Point normal{-(q.y - p.y) / d, (q.x - p.x) / d};
      for (std::size_t i = 0; i < n; ++i) {
        const double k = u(times[i]);
        const double off = bump * std::sin(kPi * k);
        set_static(tracks[0], i, {p.x + (q.x - p.x) * k + normal.x * off, p.y + (q.y - p.y) * k + normal.y * off},
                   sa);
        set_static(tracks[1], i, {q.x + (p.x - q.x) * k - normal.x * off, q.y + (p.y - q.y) * k - normal.y * off},
                   sb);
      }
      break;
    }
    case ActionProgram::shrink_away:
    case ActionProgram::grow_toward: {
      const ObjectSize big = sample_size(rng, 0.35, 0.45, prior(0));
      const double ratio = rng.uniform(0.3, 0.4);
      const Point c{rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7)};
      for (std::size_t i = 0; i < n; ++i) {
        const double f = 1.0 - (1.0 - ratio) * u(times[i]);
        set_static(tracks[0], i, c, {big.w * f, big.h * f});
      }
      break;
    }
  }
  return tracks;
}

Point center(const BoundingBox& b) { return {b.center_x(), b.center_y()}; }

template <class F>
bool all_frames(const VideoLayout& v, F&& f) {
  for (std::size_t i = 0; i < v.frames.size(); ++i) {
    if (!f(v.frames[i])) return false;
  }
  return true;
}

bool strictly_monotone(const std::vector<double>& xs, bool increasing) {
  for (std::size_t i = 1; i < xs.size(); ++i) {
    if (increasing ? !(xs[i] > xs[i - 1]) : !(xs[i] < xs[i - 1])) return false;
  }
  return true;
}

}  // namespace

std::string program_name(ActionProgram p) {
  static const char* names[] = {"approach",      "move-apart",     "drop-into",   "take-out-of",
                                "pick-up",       "put-down",       "pass-over",   "pass-under",
                                "circle-around", "swap-positions", "shrink-away", "grow-toward"};
  return names[static_cast<std::size_t>(p)];
}

ActionScript ActionScript::for_action(std::size_t action_id) {
  ActionScript s;
  s.action_id = action_id;
  s.program = static_cast<ActionProgram>(action_id % kProgramCount);
  s.variant = action_id / kProgramCount;
  switch (s.program) {
    case ActionProgram::shrink_away:
    case ActionProgram::grow_toward:
      s.object_count = 1;
      s.size_jitter = 0.001;
      s.center_jitter = 0.002;
      break;
    case ActionProgram::approach:
    case ActionProgram::move_apart:
    case ActionProgram::circle_around:
      s.center_jitter = 0.0005;
      break;
    default:
      s.center_jitter = 0.003;
      break;
  }
  return s;
}

std::string ActionScript::name() const {
  std::string n = program_name(program);
  if (variant > 0) n += "-v" + std::to_string(variant);
  return n;
}

bool check_predicate(const ActionScript& s, const VideoLayout& v) {
  const std::size_t n = v.frames.size();
  if (n < 2) return false;
  if (!all_frames(v, [&](const FrameLayout& f) {
        if (f.objects.size() != s.object_count) return false;
        for (const auto& o : f.objects) {
          if (!o.box.valid() || o.box.width() <= 0.0 || o.box.height() <= 0.0) return false;
        }
        return true;
      })) {
    return false;
  }
  auto box = [&](std::size_t frame, std::size_t obj) { return v.frames[frame].objects[obj].box; };
  auto series = [&](auto&& f) {
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = f(i);
    return out;
  };
  const double travel = s.min_travel;

  switch (s.program) {
    case ActionProgram::approach:
    case ActionProgram::move_apart: {
      const auto d = series([&](std::size_t i) { return dist(center(box(i, 0)), center(box(i, 1))); });
      const bool apart = s.program == ActionProgram::move_apart;
      return strictly_monotone(d, apart) && (apart ? d.back() - d.front() : d.front() - d.back()) >= travel;
    }
    case ActionProgram::drop_into:
    case ActionProgram::take_out_of: {
      const bool drop = s.program == ActionProgram::drop_into;
      const std::size_t in = drop ? n - 1 : 0, out = drop ? 0 : n - 1;
      const Point pin = center(box(in, 0)), pout = center(box(out, 0));
      return inside(box(in, 1), pin.x, pin.y) && !inside(box(out, 1), pout.x, pout.y) &&
             pin.y - pout.y >= travel;
    }
    case ActionProgram::pick_up:
    case ActionProgram::put_down: {
      if (!all_frames(v, [](const FrameLayout& f) { return f.objects[0].box.overlaps(f.objects[1].box); })) {
        return false;
      }
      const double sign = s.program == ActionProgram::pick_up ? -1.0 : 1.0;
      for (std::size_t obj = 0; obj < 2; ++obj) {
        if (sign * (box(n - 1, obj).center_y() - box(0, obj).center_y()) < travel) return false;
      }
      const auto off_x = series([&](std::size_t i) { return box(i, 0).center_x() - box(i, 1).center_x(); });
      const auto off_y = series([&](std::size_t i) { return box(i, 0).center_y() - box(i, 1).center_y(); });
      auto spread = [](const std::vector<double>& xs) {
        auto [lo, hi] = std::minmax_element(xs.begin(), xs.end());
        return *hi - *lo;
      };
      return spread(off_x) <= 0.03 && spread(off_y) <= 0.03;
    }
    case ActionProgram::pass_over:
    case ActionProgram::pass_under: {
      const bool over = s.program == ActionProgram::pass_over;
      for (std::size_t i = 0; i < n; ++i) {
        const auto a = box(i, 0), b = box(i, 1);
        if (over ? !(a.y2 < b.y1) : !(a.y1 > b.y2)) return false;
      }
      const double x0 = box(0, 0).center_x(), x1 = box(n - 1, 0).center_x();
      const double bx0 = box(0, 1).center_x(), bx1 = box(n - 1, 1).center_x();
      const bool crosses = (x0 < bx0 && x1 > bx1) || (x0 > bx0 && x1 < bx1);
      return crosses && std::abs(x1 - x0) >= travel;
    }
    case ActionProgram::circle_around: {
      std::vector<double> angle(n);
      double prev = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const Point a = center(box(i, 0)), b = center(box(i, 1));
        double phi = std::atan2(a.y - b.y, a.x - b.x);
        if (i > 0) {
          while (phi - prev > kPi) phi -= 2.0 * kPi;
          while (phi - prev < -kPi) phi += 2.0 * kPi;
        }
        angle[i] = prev = phi;
      }
      const bool ccw = angle.back() > angle.front();
      return strictly_monotone(angle, ccw) && std::abs(angle.back() - angle.front()) >= kPi;
    }
    case ActionProgram::swap_positions: {
      const Point a0 = center(box(0, 0)), a1 = center(box(n - 1, 0));
      const Point b0 = center(box(0, 1)), b1 = center(box(n - 1, 1));
      return dist(a1, b0) < 0.05 && dist(b1, a0) < 0.05 && dist(a0, a1) >= travel && dist(b0, b1) >= travel;
    }
    case ActionProgram::shrink_away:
    case ActionProgram::grow_toward: {
      const auto area = series([&](std::size_t i) { return box(i, 0).area(); });
      const bool grow = s.program == ActionProgram::grow_toward;
      return strictly_monotone(area, grow) &&
             (grow ? area.back() >= 2.0 * area.front() : area.back() <= 0.5 * area.front());
    }
  }
  return false;
}

SyntheticVideo generate_video(const ActionScript& script, const std::vector<ObjectStyle>& styles,
                              std::size_t frames, std::uint64_t seed, const Vocabulary& vocabulary) {
  if (styles.size() != script.object_count) {
    throw ConfigError("action '" + script.name() + "' needs " + std::to_string(script.object_count) +
                      " styles, got " + std::to_string(styles.size()));
  }
  if (frames < 8) throw ConfigError("synthetic videos need at least 8 frames");
  const std::size_t category = vocabulary.at(Vocabulary::kGenericObject);

  std::vector<double> times(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(frames - 1);
    times[i] = is_reversed(script.program) ? 1.0 - t : t;
  }
  std::vector<double> priors;
  for (const auto& st : styles) priors.push_back(st.size_prior);

  const Rng root(seed);
  for (std::size_t attempt = 0; attempt < kRetryCap; ++attempt) {
    Rng rng = root.split(attempt);
    const auto tracks = build_tracks(script, times, priors, rng);
    Rng noise = rng.split("jitter");
    VideoLayout video;
    video.frames.resize(frames);
    for (std::size_t i = 0; i < frames; ++i) {
      for (const auto& tr : tracks) {
        const double w = std::max(0.01, tr.w[i] + noise.uniform(-script.size_jitter, script.size_jitter));
        const double h = std::max(0.01, tr.h[i] + noise.uniform(-script.size_jitter, script.size_jitter));
        double cx = tr.cx[i] + noise.uniform(-script.center_jitter, script.center_jitter);
        const double cy = tr.cy[i] + noise.uniform(-script.center_jitter, script.center_jitter);
        if (variant_mirrored(script.variant)) cx = 1.0 - cx;
        BoundingBox b{std::clamp(cx - w / 2, 0.0, 1.0), std::clamp(cy - h / 2, 0.0, 1.0),
                      std::clamp(cx + w / 2, 0.0, 1.0), std::clamp(cy + h / 2, 0.0, 1.0)};
        video.frames[i].objects.push_back({category, b, std::nullopt});
      }
    }
    if (!check_predicate(script, video)) continue;
    video.label = ActionLabel::single(script.action_id);
    SyntheticVideo out{video, std::move(video), {}, false};
    out.spec.action_id = script.action_id;
    for (const auto& st : styles) out.spec.styles.push_back(st.style_id);
    out.spec.frames = frames;
    out.spec.seed = seed;
    out.spec.attempts = attempt + 1;
    return out;
  }
  throw DataError("action '" + script.name() + "': no valid trajectory within " + std::to_string(kRetryCap) +
                  " attempts");
}

std::vector<ObjectStyle> make_style_pool(std::size_t count, std::uint64_t seed) {
  std::vector<ObjectStyle> pool;
  Rng rng = Rng(seed).split("styles");
  const double offset = rng.uniform();
  for (std::size_t i = 0; i < count; ++i) {
    ObjectStyle s;
    s.style_id = i;
    s.shape = static_cast<StyleShape>(i % 4);
    // Golden-ratio hue spacing; value alternates so neighbors differ twice.
    const double hue = std::fmod(offset + 0.6180339887498949 * static_cast<double>(i), 1.0);
    const double value = (i / 4) % 2 == 0 ? 0.9 : 0.6;
    const double sat = 0.85;
    const double h6 = hue * 6.0;
    const double c = value * sat;
    const double x = c * (1.0 - std::abs(std::fmod(h6, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    switch (static_cast<int>(h6) % 6) {
      case 0: r = c, g = x; break;
      case 1: r = x, g = c; break;
      case 2: g = c, b = x; break;
      case 3: g = x, b = c; break;
      case 4: r = x, b = c; break;
      default: r = c, b = x; break;
    }
    const double m = value - c;
    auto byte = [](double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
    s.color = {byte(r + m), byte(g + m), byte(b + m)};
    s.texture_seed = rng.next_u64();
    s.size_prior = rng.uniform(0.9, 1.1);
    pool.push_back(s);
  }
  return pool;
}

}  // namespace stlt
