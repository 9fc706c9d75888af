#include "stlt/raster.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "stlt/errors.hpp"

namespace stlt {

namespace {

bool in_shape(StyleShape shape, double u, double v) {
  switch (shape) {
    case StyleShape::rectangle: return true;
    case StyleShape::ellipse: return (2 * u - 1) * (2 * u - 1) + (2 * v - 1) * (2 * v - 1) <= 1.0;
    case StyleShape::triangle: return std::abs(u - 0.5) <= 0.5 * v;
    case StyleShape::cross: return std::abs(u - 0.5) <= 1.0 / 6.0 || std::abs(v - 0.5) <= 1.0 / 6.0;
  }
  return false;
}

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw DataError("truncated RGB archive");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

constexpr char kMagic[8] = {'S', 'T', 'L', 'T', 'R', 'G', 'B', '1'};

}  // namespace

std::vector<std::uint8_t> render_frame_bytes(const FrameLayout& frame, const std::vector<ObjectStyle>& styles,
                                             std::size_t res) {
  if (res == 0) throw ConfigError("resolution must be positive");
  if (styles.size() < frame.objects.size()) throw ConfigError("every object needs a style");
  const std::size_t plane = res * res;
  std::vector<std::uint8_t> img(3 * plane, kBackground);
  const double px = 1.0 / static_cast<double>(res);
  for (std::size_t k = 0; k < frame.objects.size(); ++k) {
    const BoundingBox& b = frame.objects[k].box;
    const ObjectStyle& st = styles[k];
    if (b.width() <= 0.0 || b.height() <= 0.0) continue;
    std::array<std::uint8_t, 3> outline = st.color;
    const bool outlined = st.texture_seed % 2 == 1;
    const double shade = 0.35 + 0.3 * static_cast<double>((st.texture_seed >> 1) % 8) / 7.0;
    for (auto& c : outline) c = static_cast<std::uint8_t>(std::lround(c * shade));
    const auto r0 = static_cast<std::size_t>(std::max(0.0, std::floor(b.y1 * res - 0.5)));
    const auto r1 = std::min(res, static_cast<std::size_t>(std::max(0.0, std::ceil(b.y2 * res + 0.5))));
    const auto c0 = static_cast<std::size_t>(std::max(0.0, std::floor(b.x1 * res - 0.5)));
    const auto c1 = std::min(res, static_cast<std::size_t>(std::max(0.0, std::ceil(b.x2 * res + 0.5))));
    for (std::size_t r = r0; r < r1; ++r) {
      const double y = (static_cast<double>(r) + 0.5) * px;
      if (y < b.y1 || y > b.y2) continue;
      for (std::size_t c = c0; c < c1; ++c) {
        const double x = (static_cast<double>(c) + 0.5) * px;
        if (x < b.x1 || x > b.x2) continue;
        const double u = (x - b.x1) / b.width(), v = (y - b.y1) / b.height();
        if (!in_shape(st.shape, u, v)) continue;
        const bool edge = outlined && (x - px < b.x1 || x + px > b.x2 || y - px < b.y1 || y + px > b.y2);
        const auto& col = edge ? outline : st.color;
        for (std::size_t ch = 0; ch < 3; ++ch) img[ch * plane + r * res + c] = col[ch];
      }
    }
  }
  return img;
}

Tensor rasterize_frame(const FrameLayout& frame, const std::vector<ObjectStyle>& styles, std::size_t res) {
  const auto bytes = render_frame_bytes(frame, styles, res);
  std::vector<double> v(bytes.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = bytes[i] / 255.0;
  return Tensor({3, res, res}, std::move(v));
}

std::vector<std::uint8_t> render_video_bytes(const SyntheticVideo& video, const std::vector<ObjectStyle>& pool,
                                             std::size_t res) {
  std::vector<ObjectStyle> styles;
  for (auto id : video.spec.styles) {
    if (id >= pool.size()) throw DataError("style id out of range");
    styles.push_back(pool[id]);
  }
  std::vector<std::uint8_t> out;
  out.reserve(video.scene.frames.size() * 3 * res * res);
  for (const auto& f : video.scene.frames) {
    const auto img = render_frame_bytes(f, styles, res);
    out.insert(out.end(), img.begin(), img.end());
  }
  return out;
}

void write_rgb_archive(const std::filesystem::path& path, const RgbArchive& a) {
  if (a.bytes.size() != a.frames * 3 * a.resolution * a.resolution) {
    throw DataError("RGB archive size does not match its header");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os.write(kMagic, 8);
  put_u32(os, static_cast<std::uint32_t>(a.id.size()));
  os.write(a.id.data(), static_cast<std::streamsize>(a.id.size()));
  put_u32(os, static_cast<std::uint32_t>(a.frames));
  put_u32(os, static_cast<std::uint32_t>(a.resolution));
  os.write(reinterpret_cast<const char*>(a.bytes.data()), static_cast<std::streamsize>(a.bytes.size()));
  if (!os) throw DataError("failed writing " + path.string());
}

RgbArchive read_rgb_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw DataError("not an RGB archive: " + path.string());
  RgbArchive a;
  a.id.resize(get_u32(is));
  if (!is.read(a.id.data(), static_cast<std::streamsize>(a.id.size()))) throw DataError("truncated RGB archive");
  a.frames = get_u32(is);
  a.resolution = get_u32(is);
  a.bytes.resize(a.frames * 3 * a.resolution * a.resolution);
  if (!is.read(reinterpret_cast<char*>(a.bytes.data()), static_cast<std::streamsize>(a.bytes.size()))) {
    throw DataError("truncated RGB archive");
  }
  return a;
}

}  // namespace stlt
