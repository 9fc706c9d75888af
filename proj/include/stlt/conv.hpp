#pragma once

#include <array>
#include <cstddef>
#include <span>

#include "stlt/tensor.hpp"

namespace stlt {

using Triple = std::array<std::size_t, 3>;

// x [B, C_in, T, H, W], weight [C_out, C_in, kt, kh, kw], bias [C_out].
// Zero padding; output [B, C_out, T_o, H_o, W_o].
Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, Triple stride,
              Triple padding);

// Average pooling into an output grid; bin i of an axis of length L spans
// [floor(i*L/n), ceil((i+1)*L/n)).
Tensor adaptive_avg_pool3d(const Tensor& x, Triple output);

// Frame t of x [B, C, T, H, W] as [B, C, H, W].
Tensor time_slice(const Tensor& x, std::size_t t);

// [B, C, S...] -> [B * prod(S), C]: one row per spatial position.
Tensor channels_to_tokens(const Tensor& x);

// A normalized box on one image of a [B, C, H, W] feature batch.
struct RoiBox {
  std::size_t batch = 0;
  double x1 = 0.0, y1 = 0.0, x2 = 1.0, y2 = 1.0;
};

// Average of the bilinear interpolant of each channel over the box, with the
// integral evaluated exactly (the interpolant is piecewise bilinear). Sample
// positions outside the outermost cell centers clamp to the border. Returns
// [R, C]. Zero-area boxes throw DataError.
Tensor roi_align(const Tensor& features, std::span<const RoiBox> boxes);

}  // namespace stlt
