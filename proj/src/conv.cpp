#include "stlt/conv.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "stlt/errors.hpp"
#include "stlt/kernels.hpp"

namespace stlt {

namespace {

struct ConvGeometry {
  std::size_t batch, cin, t, h, w;
  std::size_t cout, kt, kh, kw;
  Triple stride, pad;
  std::size_t to, ho, wo;

  std::size_t patch() const { return cin * kt * kh * kw; }
  std::size_t positions() const { return to * ho * wo; }
  std::size_t input_volume() const { return cin * t * h * w; }
};

std::size_t out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < k) throw ShapeError("conv3d: kernel larger than padded input");
  return (in + 2 * pad - k) / stride + 1;
}

// cols[K x P] with K = (ci, a, b, c) and P = (ot, oh, ow).
void im2col(const ConvGeometry& g, const double* x, double* cols) {
  const std::size_t p_count = g.positions();
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t a = 0; a < g.kt; ++a)
      for (std::size_t b = 0; b < g.kh; ++b)
        for (std::size_t c = 0; c < g.kw; ++c, ++row) {
          double* dst = cols + row * p_count;
          std::size_t p = 0;
          for (std::size_t ot = 0; ot < g.to; ++ot) {
            const long it = static_cast<long>(ot * g.stride[0] + a) - static_cast<long>(g.pad[0]);
            for (std::size_t oh = 0; oh < g.ho; ++oh) {
              const long ih = static_cast<long>(oh * g.stride[1] + b) - static_cast<long>(g.pad[1]);
              for (std::size_t ow = 0; ow < g.wo; ++ow, ++p) {
                const long iw = static_cast<long>(ow * g.stride[2] + c) - static_cast<long>(g.pad[2]);
                const bool inside = it >= 0 && it < static_cast<long>(g.t) && ih >= 0 &&
                                    ih < static_cast<long>(g.h) && iw >= 0 &&
                                    iw < static_cast<long>(g.w);
                dst[p] = inside ? x[((ci * g.t + it) * g.h + ih) * g.w + iw] : 0.0;
              }
            }
          }
        }
}

void col2im(const ConvGeometry& g, const double* cols, double* gx) {
  const std::size_t p_count = g.positions();
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t a = 0; a < g.kt; ++a)
      for (std::size_t b = 0; b < g.kh; ++b)
        for (std::size_t c = 0; c < g.kw; ++c, ++row) {
          const double* src = cols + row * p_count;
          std::size_t p = 0;
          for (std::size_t ot = 0; ot < g.to; ++ot) {
            const long it = static_cast<long>(ot * g.stride[0] + a) - static_cast<long>(g.pad[0]);
            for (std::size_t oh = 0; oh < g.ho; ++oh) {
              const long ih = static_cast<long>(oh * g.stride[1] + b) - static_cast<long>(g.pad[1]);
              for (std::size_t ow = 0; ow < g.wo; ++ow, ++p) {
                const long iw = static_cast<long>(ow * g.stride[2] + c) - static_cast<long>(g.pad[2]);
                if (it >= 0 && it < static_cast<long>(g.t) && ih >= 0 && ih < static_cast<long>(g.h) &&
                    iw >= 0 && iw < static_cast<long>(g.w)) {
                  gx[((ci * g.t + it) * g.h + ih) * g.w + iw] += src[p];
                }
              }
            }
          }
        }
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, Triple stride,
              Triple padding) {
  if (x.rank() != 5 || weight.rank() != 5) throw ShapeError("conv3d: rank-5 input and weight expected");
  ConvGeometry g{};
  g.batch = x.dim(0);
  g.cin = x.dim(1);
  g.t = x.dim(2);
  g.h = x.dim(3);
  g.w = x.dim(4);
  g.cout = weight.dim(0);
  if (weight.dim(1) != g.cin) {
    throw ShapeError("conv3d: input has " + std::to_string(g.cin) + " channels, weight expects " +
                     std::to_string(weight.dim(1)));
  }
  g.kt = weight.dim(2);
  g.kh = weight.dim(3);
  g.kw = weight.dim(4);
  if (bias.size() != g.cout) throw ShapeError("conv3d: bias size mismatch");
  for (std::size_t s : stride)
    if (s == 0) throw ConfigError("conv3d: zero stride");
  g.stride = stride;
  g.pad = padding;
  g.to = out_extent(g.t, g.kt, stride[0], padding[0]);
  g.ho = out_extent(g.h, g.kh, stride[1], padding[1]);
  g.wo = out_extent(g.w, g.kw, stride[2], padding[2]);

  const std::size_t k = g.patch(), p = g.positions();
  std::vector<double> out(g.batch * g.cout * p);
  std::vector<double> cols(k * p);
  auto xv = x.values();
  auto wv = weight.values();
  auto bv = bias.values();
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(g, xv.data() + b * g.input_volume(), cols.data());
    double* o = out.data() + b * g.cout * p;
    for (std::size_t co = 0; co < g.cout; ++co) std::fill_n(o + co * p, p, bv[co]);
    kernels::gemm_acc(wv.data(), cols.data(), o, g.cout, k, p);
  }
  return Tensor::make_result(
      {g.batch, g.cout, g.to, g.ho, g.wo}, std::move(out), {x, weight, bias}, [g](detail::Node& self) {
        auto grad_of = [&](std::size_t i) -> double* {
          auto& n = *self.parents[i];
          return n.requires_grad ? n.grad_buffer().data() : nullptr;
        };
        double* gx = grad_of(0);
        double* gw = grad_of(1);
        double* gb = grad_of(2);
        const std::size_t k = g.patch(), p = g.positions();
        const double* xv = self.parents[0]->value.data();
        const double* wv = self.parents[1]->value.data();
        std::vector<double> cols(k * p);
        std::vector<double> dcols;
        if (gx) dcols.resize(k * p);
        for (std::size_t b = 0; b < g.batch; ++b) {
          const double* go = self.grad.data() + b * g.cout * p;
          if (gb) {
            for (std::size_t co = 0; co < g.cout; ++co)
              for (std::size_t q = 0; q < p; ++q) gb[co] += go[co * p + q];
          }
          if (gw) {
            im2col(g, xv + b * g.input_volume(), cols.data());
            kernels::gemm_nt_acc(go, cols.data(), gw, g.cout, p, k);
          }
          if (gx) {
            std::fill(dcols.begin(), dcols.end(), 0.0);
            kernels::gemm_tn_acc(wv, go, dcols.data(), k, g.cout, p);
            col2im(g, dcols.data(), gx + b * g.input_volume());
          }
        }
      });
}

Tensor adaptive_avg_pool3d(const Tensor& x, Triple output) {
  if (x.rank() != 5) throw ShapeError("adaptive_avg_pool3d: rank-5 input expected");
  const std::size_t planes = x.dim(0) * x.dim(1);
  const Triple in{x.dim(2), x.dim(3), x.dim(4)};
  for (std::size_t a = 0; a < 3; ++a) {
    if (output[a] == 0 || output[a] > in[a]) throw ShapeError("adaptive_avg_pool3d: bad output grid");
  }
  auto bin = [](std::size_t i, std::size_t len, std::size_t n) {
    const std::size_t lo = i * len / n;
    const std::size_t hi = ((i + 1) * len + n - 1) / n;
    return std::pair{lo, hi};
  };
  const std::size_t in_vol = in[0] * in[1] * in[2];
  const std::size_t out_vol = output[0] * output[1] * output[2];
  std::vector<double> out(planes * out_vol, 0.0);
  auto xv = x.values();
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const double* src = xv.data() + pl * in_vol;
    std::size_t o = pl * out_vol;
    for (std::size_t i = 0; i < output[0]; ++i) {
      auto [t0, t1] = bin(i, in[0], output[0]);
      for (std::size_t j = 0; j < output[1]; ++j) {
        auto [h0, h1] = bin(j, in[1], output[1]);
        for (std::size_t l = 0; l < output[2]; ++l, ++o) {
          auto [w0, w1] = bin(l, in[2], output[2]);
          double total = 0.0;
          for (std::size_t t = t0; t < t1; ++t)
            for (std::size_t h = h0; h < h1; ++h)
              for (std::size_t w = w0; w < w1; ++w) total += src[(t * in[1] + h) * in[2] + w];
          out[o] = total / static_cast<double>((t1 - t0) * (h1 - h0) * (w1 - w0));
        }
      }
    }
  }
  return Tensor::make_result(
      {x.dim(0), x.dim(1), output[0], output[1], output[2]}, std::move(out), {x},
      [planes, in, output, in_vol, out_vol, bin](detail::Node& self) {
        auto& parent = *self.parents[0];
        if (!parent.requires_grad) return;
        double* g = parent.grad_buffer().data();
        for (std::size_t pl = 0; pl < planes; ++pl) {
          double* dst = g + pl * in_vol;
          std::size_t o = pl * out_vol;
          for (std::size_t i = 0; i < output[0]; ++i) {
            auto [t0, t1] = bin(i, in[0], output[0]);
            for (std::size_t j = 0; j < output[1]; ++j) {
              auto [h0, h1] = bin(j, in[1], output[1]);
              for (std::size_t l = 0; l < output[2]; ++l, ++o) {
                auto [w0, w1] = bin(l, in[2], output[2]);
                const double share =
                    self.grad[o] / static_cast<double>((t1 - t0) * (h1 - h0) * (w1 - w0));
                for (std::size_t t = t0; t < t1; ++t)
                  for (std::size_t h = h0; h < h1; ++h)
                    for (std::size_t w = w0; w < w1; ++w) dst[(t * in[1] + h) * in[2] + w] += share;
              }
            }
          }
        }
      });
}

Tensor channels_to_tokens(const Tensor& x) {
  if (x.rank() < 3) throw ShapeError("channels_to_tokens: need [B, C, spatial...]");
  const std::size_t b = x.dim(0), c = x.dim(1);
  const std::size_t s = x.size() / (b * c);
  std::vector<double> out(x.size());
  auto xv = x.values();
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < s; ++p) out[(n * s + p) * c + ch] = xv[(n * c + ch) * s + p];
  return Tensor::make_result({b * s, c}, std::move(out), {x}, [b, c, s](detail::Node& self) {
    auto& parent = *self.parents[0];
    if (!parent.requires_grad) return;
    double* g = parent.grad_buffer().data();
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < s; ++p) g[(n * c + ch) * s + p] += self.grad[(n * s + p) * c + ch];
  });
}

namespace {

// Interpolation weights of the clamped linear interpolant at pixel coordinate
// x over `len` cells whose centers sit at i + 0.5.
struct Lerp {
  std::size_t lo, hi;
  double w_lo, w_hi;
};

Lerp lerp_at(double x, std::size_t len) {
  const double c = x - 0.5;
  if (c <= 0.0) return {0, 0, 1.0, 0.0};
  if (c >= static_cast<double>(len - 1)) return {len - 1, len - 1, 1.0, 0.0};
  const std::size_t lo = static_cast<std::size_t>(std::floor(c));
  const double f = c - static_cast<double>(lo);
  return {lo, lo + 1, 1.0 - f, f};
}

// Exact mean over [a, b] of each cell's basis function. Between consecutive
// breakpoints every basis function is linear, so the trapezoid rule is exact.
std::vector<double> axis_weights(double a, double b, std::size_t len) {
  std::vector<double> pts{a};
  for (std::size_t i = 0; i < len; ++i) {
    const double center = static_cast<double>(i) + 0.5;
    if (center > a && center < b) pts.push_back(center);
  }
  pts.push_back(b);
  std::vector<double> w(len, 0.0);
  for (std::size_t s = 0; s + 1 < pts.size(); ++s) {
    const double half = 0.5 * (pts[s + 1] - pts[s]);
    for (double x : {pts[s], pts[s + 1]}) {
      const Lerp l = lerp_at(x, len);
      w[l.lo] += half * l.w_lo;
      w[l.hi] += half * l.w_hi;
    }
  }
  for (double& v : w) v /= (b - a);
  return w;
}

}  // namespace

Tensor roi_align(const Tensor& features, std::span<const RoiBox> boxes) {
  if (features.rank() != 4) throw ShapeError("roi_align: features must be [B, C, H, W]");
  if (boxes.empty()) throw ShapeError("roi_align: no boxes");
  const std::size_t nb = features.dim(0), c = features.dim(1), h = features.dim(2),
                    w = features.dim(3);
  const std::size_t r = boxes.size();
  struct Weights {
    std::size_t batch;
    std::vector<double> wy, wx;
  };
  std::vector<Weights> weights;
  weights.reserve(r);
  for (const RoiBox& box : boxes) {
    if (box.batch >= nb) throw ShapeError("roi_align: batch index out of range");
    if (!(box.x2 > box.x1) || !(box.y2 > box.y1)) throw DataError("roi_align: degenerate box");
    weights.push_back({box.batch, axis_weights(box.y1 * static_cast<double>(h), box.y2 * static_cast<double>(h), h),
                       axis_weights(box.x1 * static_cast<double>(w), box.x2 * static_cast<double>(w), w)});
  }
  std::vector<double> out(r * c, 0.0);
  auto fv = features.values();
  for (std::size_t i = 0; i < r; ++i) {
    const Weights& wt = weights[i];
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* map = fv.data() + (wt.batch * c + ch) * h * w;
      double total = 0.0;
      for (std::size_t y = 0; y < h; ++y) {
        if (wt.wy[y] == 0.0) continue;
        double row = 0.0;
        for (std::size_t x = 0; x < w; ++x) row += wt.wx[x] * map[y * w + x];
        total += wt.wy[y] * row;
      }
      out[i * c + ch] = total;
    }
  }
  return Tensor::make_result({r, c}, std::move(out), {features},
                             [c, h, w, weights = std::move(weights)](detail::Node& self) {
                               auto& parent = *self.parents[0];
                               if (!parent.requires_grad) return;
                               double* g = parent.grad_buffer().data();
                               for (std::size_t i = 0; i < weights.size(); ++i) {
                                 const auto& wt = weights[i];
                                 for (std::size_t ch = 0; ch < c; ++ch) {
                                   const double go = self.grad[i * c + ch];
                                   double* map = g + (wt.batch * c + ch) * h * w;
                                   for (std::size_t y = 0; y < h; ++y) {
                                     if (wt.wy[y] == 0.0) continue;
                                     for (std::size_t x = 0; x < w; ++x)
                                       map[y * w + x] += go * wt.wy[y] * wt.wx[x];
                                   }
                                 }
                               }
                             });
}

Tensor time_slice(const Tensor& x, std::size_t t) {
  if (x.rank() != 5) throw ShapeError("time_slice: rank-5 input expected");
  if (t >= x.dim(2)) throw ShapeError("time_slice: frame index out of range");
  const std::size_t planes = x.dim(0) * x.dim(1), frames = x.dim(2), area = x.dim(3) * x.dim(4);
  std::vector<double> out(planes * area);
  auto xv = x.values();
  for (std::size_t p = 0; p < planes; ++p) {
    std::copy_n(xv.data() + (p * frames + t) * area, area, out.data() + p * area);
  }
  return Tensor::make_result({x.dim(0), x.dim(1), x.dim(3), x.dim(4)}, std::move(out), {x},
                             [planes, frames, area, t](detail::Node& self) {
                               auto& parent = *self.parents[0];
                               if (!parent.requires_grad) return;
                               double* g = parent.grad_buffer().data();
                               for (std::size_t p = 0; p < planes; ++p) {
                                 const double* src = self.grad.data() + p * area;
                                 double* dst = g + (p * frames + t) * area;
                                 for (std::size_t i = 0; i < area; ++i) dst[i] += src[i];
                               }
                             });
}

}  // namespace stlt
