#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stlt/layout.hpp"
#include "stlt/synthetic.hpp"
#include "stlt/tensor.hpp"

namespace stlt {

inline constexpr std::uint8_t kBackground = 128;

// Channel-major RGB bytes [3 x res x res]. Objects are painted in list order
// over a constant gray background; a pixel is painted when its center lies in
// the object's box and inside the style's shape. `styles[i]` styles object i.
std::vector<std::uint8_t> render_frame_bytes(const FrameLayout& frame, const std::vector<ObjectStyle>& styles,
                                             std::size_t resolution);

// Same image as a [3, res, res] tensor scaled to [0, 1].
Tensor rasterize_frame(const FrameLayout& frame, const std::vector<ObjectStyle>& styles, std::size_t resolution);

// All frames of the video's scene, concatenated [T x 3 x res x res].
std::vector<std::uint8_t> render_video_bytes(const SyntheticVideo& video, const std::vector<ObjectStyle>& pool,
                                             std::size_t resolution);

struct RgbArchive {
  std::string id;
  std::size_t frames = 0;
  std::size_t resolution = 0;
  std::vector<std::uint8_t> bytes;  // [frames x 3 x res x res]
};

// Header: magic "STLTRGB1", u32 id length, id bytes, u32 frames, u32
// resolution; then the raw bytes. Little endian.
void write_rgb_archive(const std::filesystem::path& path, const RgbArchive& archive);
RgbArchive read_rgb_archive(const std::filesystem::path& path);

}  // namespace stlt
