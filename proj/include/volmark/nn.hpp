#pragma once

// Neural building blocks over channels-last volumes.
//
// A feature volume is a rank-4 tensor [H, W, D, C]. Convolution weights are
// stored [kh, kw, kd, Cin, Cout] (depthwise: [kh, kw, kd, C]) so the
// innermost loops run over contiguous memory. Convolutions compute
// cross-correlation with zero padding; output extents follow
// floor((in + 2*pad - k) / stride) + 1.

#include <array>
#include <cstddef>

#include "volmark/tensor.hpp"

namespace volmark {

using Dims3 = std::array<std::size_t, 3>;

inline Dims3 spatial_dims(const Shape& s) {
  detail::require(s.size() == 4, "volume: expected rank-4 [H,W,D,C], got " + shape_str(s));
  return {s[0], s[1], s[2]};
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Dims3 stride = {1, 1, 1}, Dims3 padding = {0, 0, 0}) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  detail::require(xs.size() == 4, "conv3d: input must be [H,W,D,C], got " + shape_str(xs));
  detail::require(ws.size() == 5,
                  "conv3d: weight must be [kh,kw,kd,Cin,Cout], got " + shape_str(ws));
  const std::size_t C_in = xs[3], C_out = ws[4];
  detail::require(ws[3] == C_in, "conv3d: input has " + std::to_string(C_in) +
                                     " channels but weight expects " + std::to_string(ws[3]));
  detail::require(bias.shape() == Shape{C_out},
                  "conv3d: bias shape " + shape_str(bias.shape()) + " does not match " +
                      std::to_string(C_out) + " output channels");
  Dims3 in{xs[0], xs[1], xs[2]};
  Dims3 k{ws[0], ws[1], ws[2]};
  Dims3 out{};
  for (int ax = 0; ax < 3; ++ax) {
    detail::require(stride[ax] >= 1, "conv3d: stride must be >= 1");
    detail::require(in[ax] + 2 * padding[ax] >= k[ax],
                    "conv3d: kernel extent " + std::to_string(k[ax]) +
                        " exceeds padded input " + std::to_string(in[ax] + 2 * padding[ax]));
    out[ax] = (in[ax] + 2 * padding[ax] - k[ax]) / stride[ax] + 1;
  }

  Shape out_shape{out[0], out[1], out[2], C_out};
  std::vector<T> y(numel(out_shape));
  const T* xp = x.values().data();
  const T* wp = weight.values().data();
  const T* bp = bias.values().data();
  const std::size_t in_sw = in[2] * C_in, in_sh = in[1] * in_sw;

  std::size_t oidx = 0;
  for (std::size_t oh = 0; oh < out[0]; ++oh)
    for (std::size_t ow = 0; ow < out[1]; ++ow)
      for (std::size_t od = 0; od < out[2]; ++od) {
        T* acc = y.data() + oidx;
        for (std::size_t c = 0; c < C_out; ++c) acc[c] = bp[c];
        const std::ptrdiff_t h0 = static_cast<std::ptrdiff_t>(oh * stride[0]) -
                                  static_cast<std::ptrdiff_t>(padding[0]);
        const std::ptrdiff_t w0 = static_cast<std::ptrdiff_t>(ow * stride[1]) -
                                  static_cast<std::ptrdiff_t>(padding[1]);
        const std::ptrdiff_t d0 = static_cast<std::ptrdiff_t>(od * stride[2]) -
                                  static_cast<std::ptrdiff_t>(padding[2]);
        for (std::size_t i = 0; i < k[0]; ++i) {
          const std::ptrdiff_t ih = h0 + static_cast<std::ptrdiff_t>(i);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(in[0])) continue;
          for (std::size_t j = 0; j < k[1]; ++j) {
            const std::ptrdiff_t iw = w0 + static_cast<std::ptrdiff_t>(j);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(in[1])) continue;
            for (std::size_t l = 0; l < k[2]; ++l) {
              const std::ptrdiff_t id = d0 + static_cast<std::ptrdiff_t>(l);
              if (id < 0 || id >= static_cast<std::ptrdiff_t>(in[2])) continue;
              const T* xin = xp + static_cast<std::size_t>(ih) * in_sh +
                             static_cast<std::size_t>(iw) * in_sw +
                             static_cast<std::size_t>(id) * C_in;
              const T* wtap = wp + (((i * k[1] + j) * k[2] + l) * C_in) * C_out;
              for (std::size_t ci = 0; ci < C_in; ++ci) {
                const T a = xin[ci];
                const T* wrow = wtap + ci * C_out;
                for (std::size_t co = 0; co < C_out; ++co) acc[co] += a * wrow[co];
              }
            }
          }
        }
        oidx += C_out;
      }

  auto backward = [x, weight, bias, in, k, out, stride, padding, C_in, C_out, in_sw,
                   in_sh](Tape<T>& tape, const std::vector<T>& g) {
    const bool need_dx = x.requires_grad();
    const bool need_dw = weight.requires_grad();
    T* dxp = need_dx ? tape.grad_at(x.node(), x.size()).data() : nullptr;
    T* dwp = need_dw ? tape.grad_at(weight.node(), weight.size()).data() : nullptr;
    const T* xp2 = x.values().data();
    const T* wp2 = weight.values().data();

    std::size_t oidx2 = 0;
    for (std::size_t oh = 0; oh < out[0]; ++oh)
      for (std::size_t ow = 0; ow < out[1]; ++ow)
        for (std::size_t od = 0; od < out[2]; ++od) {
          const T* gout = g.data() + oidx2;
          const std::ptrdiff_t h0 = static_cast<std::ptrdiff_t>(oh * stride[0]) -
                                    static_cast<std::ptrdiff_t>(padding[0]);
          const std::ptrdiff_t w0 = static_cast<std::ptrdiff_t>(ow * stride[1]) -
                                    static_cast<std::ptrdiff_t>(padding[1]);
          const std::ptrdiff_t d0 = static_cast<std::ptrdiff_t>(od * stride[2]) -
                                    static_cast<std::ptrdiff_t>(padding[2]);
          for (std::size_t i = 0; i < k[0]; ++i) {
            const std::ptrdiff_t ih = h0 + static_cast<std::ptrdiff_t>(i);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(in[0])) continue;
            for (std::size_t j = 0; j < k[1]; ++j) {
              const std::ptrdiff_t iw = w0 + static_cast<std::ptrdiff_t>(j);
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(in[1])) continue;
              for (std::size_t l = 0; l < k[2]; ++l) {
                const std::ptrdiff_t id = d0 + static_cast<std::ptrdiff_t>(l);
                if (id < 0 || id >= static_cast<std::ptrdiff_t>(in[2])) continue;
                const std::size_t xoff = static_cast<std::size_t>(ih) * in_sh +
                                         static_cast<std::size_t>(iw) * in_sw +
                                         static_cast<std::size_t>(id) * C_in;
                const std::size_t woff = (((i * k[1] + j) * k[2] + l) * C_in) * C_out;
                for (std::size_t ci = 0; ci < C_in; ++ci) {
                  const T* wrow = wp2 + woff + ci * C_out;
                  if (need_dw) {
                    const T a = xp2[xoff + ci];
                    T* dwrow = dwp + woff + ci * C_out;
                    T dsum = T(0);
                    for (std::size_t co = 0; co < C_out; ++co) {
                      dwrow[co] += a * gout[co];
                      dsum += gout[co] * wrow[co];
                    }
                    if (need_dx) dxp[xoff + ci] += dsum;
                  } else if (need_dx) {
                    T dsum = T(0);
                    for (std::size_t co = 0; co < C_out; ++co) dsum += gout[co] * wrow[co];
                    dxp[xoff + ci] += dsum;
                  }
                }
              }
            }
          }
          oidx2 += C_out;
        }
    if (bias.requires_grad()) {
      auto& db = tape.grad_at(bias.node(), bias.size());
      const std::size_t voxels = out[0] * out[1] * out[2];
      for (std::size_t v = 0; v < voxels; ++v)
        for (std::size_t co = 0; co < C_out; ++co) db[co] += g[v * C_out + co];
    }
  };
  return detail::make_op<T>("conv3d", std::move(out_shape), std::move(y),
                            {&x, &weight, &bias}, backward);
}

// Depthwise convolution, stride 1, "same" zero padding (kernel extents must
// be odd so the spatial dims are preserved).
template <typename T>
Tensor<T> dwconv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  detail::require(xs.size() == 4, "dwconv3d: input must be [H,W,D,C], got " + shape_str(xs));
  detail::require(ws.size() == 4,
                  "dwconv3d: weight must be [kh,kw,kd,C], got " + shape_str(ws));
  const std::size_t C = xs[3];
  detail::require(ws[3] == C, "dwconv3d: input has " + std::to_string(C) +
                                  " channels but weight has " + std::to_string(ws[3]));
  detail::require(bias.shape() == Shape{C}, "dwconv3d: bias shape mismatch");
  Dims3 in{xs[0], xs[1], xs[2]};
  Dims3 k{ws[0], ws[1], ws[2]};
  for (int ax = 0; ax < 3; ++ax)
    detail::require(k[ax] % 2 == 1, "dwconv3d: kernel extents must be odd for same padding");
  Dims3 pad{k[0] / 2, k[1] / 2, k[2] / 2};

  std::vector<T> y(x.size());
  const T* xp = x.values().data();
  const T* wp = weight.values().data();
  const T* bp = bias.values().data();
  const std::size_t sw = in[2] * C, sh = in[1] * sw;

  std::size_t oidx = 0;
  for (std::size_t oh = 0; oh < in[0]; ++oh)
    for (std::size_t ow = 0; ow < in[1]; ++ow)
      for (std::size_t od = 0; od < in[2]; ++od) {
        T* acc = y.data() + oidx;
        for (std::size_t c = 0; c < C; ++c) acc[c] = bp[c];
        for (std::size_t i = 0; i < k[0]; ++i) {
          const std::ptrdiff_t ih =
              static_cast<std::ptrdiff_t>(oh + i) - static_cast<std::ptrdiff_t>(pad[0]);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(in[0])) continue;
          for (std::size_t j = 0; j < k[1]; ++j) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow + j) - static_cast<std::ptrdiff_t>(pad[1]);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(in[1])) continue;
            for (std::size_t l = 0; l < k[2]; ++l) {
              const std::ptrdiff_t id =
                  static_cast<std::ptrdiff_t>(od + l) - static_cast<std::ptrdiff_t>(pad[2]);
              if (id < 0 || id >= static_cast<std::ptrdiff_t>(in[2])) continue;
              const T* xin = xp + static_cast<std::size_t>(ih) * sh +
                             static_cast<std::size_t>(iw) * sw +
                             static_cast<std::size_t>(id) * C;
              const T* wtap = wp + ((i * k[1] + j) * k[2] + l) * C;
              for (std::size_t c = 0; c < C; ++c) acc[c] += xin[c] * wtap[c];
            }
          }
        }
        oidx += C;
      }

  auto backward = [x, weight, bias, in, k, pad, C, sw, sh](Tape<T>& tape,
                                                           const std::vector<T>& g) {
    const bool need_dx = x.requires_grad();
    const bool need_dw = weight.requires_grad();
    T* dxp = need_dx ? tape.grad_at(x.node(), x.size()).data() : nullptr;
    T* dwp = need_dw ? tape.grad_at(weight.node(), weight.size()).data() : nullptr;
    const T* xp2 = x.values().data();
    const T* wp2 = weight.values().data();
    std::size_t oidx2 = 0;
    for (std::size_t oh = 0; oh < in[0]; ++oh)
      for (std::size_t ow = 0; ow < in[1]; ++ow)
        for (std::size_t od = 0; od < in[2]; ++od) {
          const T* gout = g.data() + oidx2;
          for (std::size_t i = 0; i < k[0]; ++i) {
            const std::ptrdiff_t ih =
                static_cast<std::ptrdiff_t>(oh + i) - static_cast<std::ptrdiff_t>(pad[0]);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(in[0])) continue;
            for (std::size_t j = 0; j < k[1]; ++j) {
              const std::ptrdiff_t iw =
                  static_cast<std::ptrdiff_t>(ow + j) - static_cast<std::ptrdiff_t>(pad[1]);
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(in[1])) continue;
              for (std::size_t l = 0; l < k[2]; ++l) {
                const std::ptrdiff_t id =
                    static_cast<std::ptrdiff_t>(od + l) - static_cast<std::ptrdiff_t>(pad[2]);
                if (id < 0 || id >= static_cast<std::ptrdiff_t>(in[2])) continue;
                const std::size_t xoff = static_cast<std::size_t>(ih) * sh +
                                         static_cast<std::size_t>(iw) * sw +
                                         static_cast<std::size_t>(id) * C;
                const std::size_t woff = ((i * k[1] + j) * k[2] + l) * C;
                for (std::size_t c = 0; c < C; ++c) {
                  if (need_dx) dxp[xoff + c] += gout[c] * wp2[woff + c];
                  if (need_dw) dwp[woff + c] += gout[c] * xp2[xoff + c];
                }
              }
            }
          }
          oidx2 += C;
        }
    if (bias.requires_grad()) {
      auto& db = tape.grad_at(bias.node(), bias.size());
      for (std::size_t v = 0; v < g.size() / C; ++v)
        for (std::size_t c = 0; c < C; ++c) db[c] += g[v * C + c];
    }
  };
  return detail::make_op<T>("dwconv3d", x.shape(), std::move(y), {&x, &weight, &bias},
                            backward);
}

// Layer normalization over the channel (last) axis with affine scale/shift.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  detail::require(x.rank() >= 1, "layer_norm: scalar input");
  const std::size_t C = x.shape().back();
  detail::require(gamma.shape() == Shape{C} && beta.shape() == Shape{C},
                  "layer_norm: affine params must be [" + std::to_string(C) + "]");
  detail::require(eps > T(0), "layer_norm: epsilon must be positive");
  const std::size_t rows = x.size() / C;
  const auto& xv = x.values();
  std::vector<T> y(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * C;
    T mean = T(0);
    for (std::size_t c = 0; c < C; ++c) mean += xr[c];
    mean /= static_cast<T>(C);
    T var = T(0);
    for (std::size_t c = 0; c < C; ++c) {
      const T d = xr[c] - mean;
      var += d * d;
    }
    var /= static_cast<T>(C);
    const T istd = T(1) / std::sqrt(var + eps);
    inv_std[r] = istd;
    for (std::size_t c = 0; c < C; ++c) {
      const T h = (xr[c] - mean) * istd;
      xhat[r * C + c] = h;
      y[r * C + c] = gamma.values()[c] * h + beta.values()[c];
    }
  }
  auto xhat_s = std::make_shared<std::vector<T>>(std::move(xhat));
  auto istd_s = std::make_shared<std::vector<T>>(std::move(inv_std));
  auto backward = [x, gamma, beta, C, rows, xhat_s, istd_s](Tape<T>& tape,
                                                            const std::vector<T>& g) {
    if (x.requires_grad()) {
      auto& dx = tape.grad_at(x.node(), x.size());
      for (std::size_t r = 0; r < rows; ++r) {
        const T* gr = g.data() + r * C;
        const T* hr = xhat_s->data() + r * C;
        T sum_dh = T(0), sum_dh_h = T(0);
        for (std::size_t c = 0; c < C; ++c) {
          const T dh = gr[c] * gamma.values()[c];
          sum_dh += dh;
          sum_dh_h += dh * hr[c];
        }
        const T inv_c = T(1) / static_cast<T>(C);
        for (std::size_t c = 0; c < C; ++c) {
          const T dh = gr[c] * gamma.values()[c];
          dx[r * C + c] += (*istd_s)[r] * (dh - inv_c * sum_dh - hr[c] * inv_c * sum_dh_h);
        }
      }
    }
    if (gamma.requires_grad()) {
      auto& dg = tape.grad_at(gamma.node(), gamma.size());
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < C; ++c)
          dg[c] += g[r * C + c] * (*xhat_s)[r * C + c];
    }
    if (beta.requires_grad()) {
      auto& db = tape.grad_at(beta.node(), beta.size());
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < C; ++c) db[c] += g[r * C + c];
    }
  };
  return detail::make_op<T>("layer_norm", x.shape(), std::move(y), {&x, &gamma, &beta},
                            backward);
}

// Adds a per-channel bias along the last axis.
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t C = x.shape().back();
  detail::require(bias.shape() == Shape{C},
                  "add_channel_bias: bias " + shape_str(bias.shape()) + " vs channels " +
                      std::to_string(C));
  std::vector<T> y(x.size());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] + bias.values()[i % C];
  auto backward = [x, bias, C](Tape<T>& tape, const std::vector<T>& g) {
    detail::accumulate(tape, x, g);
    if (bias.requires_grad()) {
      auto& db = tape.grad_at(bias.node(), bias.size());
      for (std::size_t i = 0; i < g.size(); ++i) db[i % C] += g[i];
    }
  };
  return detail::make_op<T>("add_channel_bias", x.shape(), std::move(y), {&x, &bias},
                            backward);
}

// x [N, Cin] * w [Cin, Cout] + b.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_channel_bias(matmul(x, w), b);
}

template <typename T>
struct MlpParams {
  Tensor<T> w1, b1, w2, b2;
};

// Two pointwise linear layers with GELU between, applied per spatial position.
template <typename T>
Tensor<T> mlp_block(const Tensor<T>& x, const MlpParams<T>& p) {
  const Shape orig = x.shape();
  const std::size_t C = orig.back();
  detail::require(p.w1.rank() == 2 && p.w1.shape()[0] == C,
                  "mlp_block: w1 " + shape_str(p.w1.shape()) + " does not accept " +
                      std::to_string(C) + " channels");
  Tensor<T> flat = reshape(x, {x.size() / C, C});
  Tensor<T> h = gelu(linear(flat, p.w1, p.b1));
  Tensor<T> out = linear(h, p.w2, p.b2);
  return reshape(out, orig);
}

// Trilinear interpolation with align-corners: output index o on an axis of
// input extent n and output extent m samples input coordinate o*(n-1)/(m-1)
// (0 when m == 1).
template <typename T>
Tensor<T> trilinear_upsample(const Tensor<T>& x, Dims3 factor) {
  const Shape& xs = x.shape();
  detail::require(xs.size() == 4, "trilinear_upsample: input must be [H,W,D,C]");
  for (int ax = 0; ax < 3; ++ax)
    detail::require(factor[ax] >= 1, "trilinear_upsample: factor must be >= 1");
  Dims3 in{xs[0], xs[1], xs[2]};
  Dims3 out{in[0] * factor[0], in[1] * factor[1], in[2] * factor[2]};
  const std::size_t C = xs[3];

  struct AxisTap {
    std::size_t lo, hi;
    T w_hi;
  };
  std::array<std::vector<AxisTap>, 3> taps;
  for (int ax = 0; ax < 3; ++ax) {
    taps[ax].resize(out[ax]);
    for (std::size_t o = 0; o < out[ax]; ++o) {
      double src = 0.0;
      if (out[ax] > 1 && in[ax] > 1)
        src = static_cast<double>(o) * static_cast<double>(in[ax] - 1) /
              static_cast<double>(out[ax] - 1);
      const std::size_t lo = static_cast<std::size_t>(src);
      const std::size_t hi = std::min(lo + 1, in[ax] - 1);
      taps[ax][o] = {lo, hi, static_cast<T>(src - static_cast<double>(lo))};
    }
  }

  Shape out_shape{out[0], out[1], out[2], C};
  std::vector<T> y(numel(out_shape));
  const auto& xv = x.values();
  const std::size_t sw = in[2] * C, sh = in[1] * sw;
  std::size_t oidx = 0;
  for (std::size_t oh = 0; oh < out[0]; ++oh) {
    const auto& th = taps[0][oh];
    for (std::size_t ow = 0; ow < out[1]; ++ow) {
      const auto& tw = taps[1][ow];
      for (std::size_t od = 0; od < out[2]; ++od) {
        const auto& td = taps[2][od];
        T* dst = y.data() + oidx;
        for (std::size_t c = 0; c < C; ++c) dst[c] = T(0);
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b)
            for (int d = 0; d < 2; ++d) {
              const T w = (a ? th.w_hi : T(1) - th.w_hi) * (b ? tw.w_hi : T(1) - tw.w_hi) *
                          (d ? td.w_hi : T(1) - td.w_hi);
              if (w == T(0)) continue;
              const T* src = xv.data() + (a ? th.hi : th.lo) * sh + (b ? tw.hi : tw.lo) * sw +
                             (d ? td.hi : td.lo) * C;
              for (std::size_t c = 0; c < C; ++c) dst[c] += w * src[c];
            }
        oidx += C;
      }
    }
  }
  auto taps_s = std::make_shared<std::array<std::vector<AxisTap>, 3>>(std::move(taps));
  auto backward = [x, taps_s, out, C, sw, sh](Tape<T>& tape, const std::vector<T>& g) {
    if (!x.requires_grad()) return;
    auto& dx = tape.grad_at(x.node(), x.size());
    std::size_t oidx2 = 0;
    for (std::size_t oh = 0; oh < out[0]; ++oh) {
      const auto& th = (*taps_s)[0][oh];
      for (std::size_t ow = 0; ow < out[1]; ++ow) {
        const auto& tw = (*taps_s)[1][ow];
        for (std::size_t od = 0; od < out[2]; ++od) {
          const auto& td = (*taps_s)[2][od];
          const T* gout = g.data() + oidx2;
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              for (int d = 0; d < 2; ++d) {
                const T w = (a ? th.w_hi : T(1) - th.w_hi) *
                            (b ? tw.w_hi : T(1) - tw.w_hi) * (d ? td.w_hi : T(1) - td.w_hi);
                if (w == T(0)) continue;
                T* dst = dx.data() + (a ? th.hi : th.lo) * sh + (b ? tw.hi : tw.lo) * sw +
                         (d ? td.hi : td.lo) * C;
                for (std::size_t c = 0; c < C; ++c) dst[c] += w * gout[c];
              }
          oidx2 += C;
        }
      }
    }
  };
  return detail::make_op<T>("trilinear_upsample", std::move(out_shape), std::move(y), {&x},
                            backward);
}

}  // namespace volmark
