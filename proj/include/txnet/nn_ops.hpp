#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "txnet/tensor.hpp"

namespace txnet {

/// Weight is [out, in/groups, kh, kw]; bias, when defined, is [out].
template <Real T>
struct Conv2dParams {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
  Tensor<T> weight;
  Tensor<T> bias;

  bool depthwise() const { return groups == in_channels && groups == out_channels; }
};

/// Inference-mode batch norm: stored statistics, learnable affine terms.
template <Real T>
struct NormParams {
  std::size_t num_channels = 0;
  Tensor<T> scale;
  Tensor<T> shift;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T epsilon = T(1e-5);
};

namespace detail {

/// Half-open range of output positions o for which o*stride + k - pad lands
/// inside [0, in).
inline std::pair<std::size_t, std::size_t> valid_outputs(std::size_t k, std::size_t in, std::size_t out,
                                                         std::size_t stride, std::size_t pad) {
  if (in + pad < k + 1) return {0, 0};
  const std::size_t lo = pad > k ? (pad - k + stride - 1) / stride : 0;
  const std::size_t hi = std::min(out, (in - 1 + pad - k) / stride + 1);
  return {lo, std::max(lo, hi)};
}

struct PlaneGeom {
  std::size_t h, w, kh, kw, stride, pad, ho, wo;
};

template <Real T>
void corr_plane(const T* in, const T* kernel, T* out, const PlaneGeom& g) {
  for (std::size_t ky = 0; ky < g.kh; ++ky) {
    auto [y0, y1] = valid_outputs(ky, g.h, g.ho, g.stride, g.pad);
    for (std::size_t kx = 0; kx < g.kw; ++kx) {
      auto [x0, x1] = valid_outputs(kx, g.w, g.wo, g.stride, g.pad);
      const T wv = kernel[ky * g.kw + kx];
      for (std::size_t oy = y0; oy < y1; ++oy) {
        const T* in_row = in + (oy * g.stride + ky - g.pad) * g.w;
        T* out_row = out + oy * g.wo;
        if (g.stride == 1) {
          const T* src = in_row + (x0 + kx - g.pad);
          for (std::size_t ox = x0; ox < x1; ++ox) out_row[ox] += wv * src[ox - x0];
        } else {
          for (std::size_t ox = x0; ox < x1; ++ox) out_row[ox] += wv * in_row[ox * g.stride + kx - g.pad];
        }
      }
    }
  }
}

template <Real T>
void corr_plane_grad_input(const T* gout, const T* kernel, T* gin, const PlaneGeom& g) {
  for (std::size_t ky = 0; ky < g.kh; ++ky) {
    auto [y0, y1] = valid_outputs(ky, g.h, g.ho, g.stride, g.pad);
    for (std::size_t kx = 0; kx < g.kw; ++kx) {
      auto [x0, x1] = valid_outputs(kx, g.w, g.wo, g.stride, g.pad);
      const T wv = kernel[ky * g.kw + kx];
      for (std::size_t oy = y0; oy < y1; ++oy) {
        T* in_row = gin + (oy * g.stride + ky - g.pad) * g.w;
        const T* out_row = gout + oy * g.wo;
        for (std::size_t ox = x0; ox < x1; ++ox) in_row[ox * g.stride + kx - g.pad] += wv * out_row[ox];
      }
    }
  }
}

template <Real T>
void corr_plane_grad_kernel(const T* gout, const T* in, T* gkernel, const PlaneGeom& g) {
  for (std::size_t ky = 0; ky < g.kh; ++ky) {
    auto [y0, y1] = valid_outputs(ky, g.h, g.ho, g.stride, g.pad);
    for (std::size_t kx = 0; kx < g.kw; ++kx) {
      auto [x0, x1] = valid_outputs(kx, g.w, g.wo, g.stride, g.pad);
      T acc = 0;
      for (std::size_t oy = y0; oy < y1; ++oy) {
        const T* in_row = in + (oy * g.stride + ky - g.pad) * g.w;
        const T* out_row = gout + oy * g.wo;
        for (std::size_t ox = x0; ox < x1; ++ox) acc += out_row[ox] * in_row[ox * g.stride + kx - g.pad];
      }
      gkernel[ky * g.kw + kx] += acc;
    }
  }
}

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                                   const char* what) {
  if (stride == 0) throw ShapeError(std::string(what) + ": stride must be positive");
  if (in + 2 * pad < k) {
    throw ShapeError(std::string(what) + ": kernel " + std::to_string(k) + " larger than padded input " +
                     std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

// ---------------------------------------------------------------------------

/// Grouped 2-D cross-correlation plus bias.
template <Real T>
Tensor<T> conv2d(const Tensor<T>& x, const Conv2dParams<T>& p) {
  if (x.rank() != 4) throw ShapeError("conv2d: input must be rank 4, got " + x.shape().str());
  if (p.groups == 0 || p.in_channels % p.groups != 0 || p.out_channels % p.groups != 0) {
    throw ShapeError("conv2d: channels not divisible by groups");
  }
  if (x.dim(1) != p.in_channels) {
    throw ShapeError("conv2d: input has " + std::to_string(x.dim(1)) + " channels, expected " +
                     std::to_string(p.in_channels));
  }
  const Shape wshape{p.out_channels, p.in_channels / p.groups, p.kernel_h, p.kernel_w};
  if (!(p.weight.shape() == wshape)) {
    throw ShapeError("conv2d: weight shape " + p.weight.shape().str() + ", expected " + wshape.str());
  }
  if (p.bias.defined() && !(p.bias.shape() == Shape{p.out_channels})) {
    throw ShapeError("conv2d: bias shape " + p.bias.shape().str());
  }
  const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
  detail::PlaneGeom g{h,
                      w,
                      p.kernel_h,
                      p.kernel_w,
                      p.stride,
                      p.padding,
                      detail::conv_out_extent(h, p.kernel_h, p.stride, p.padding, "conv2d"),
                      detail::conv_out_extent(w, p.kernel_w, p.stride, p.padding, "conv2d")};
  const std::size_t cin_g = p.in_channels / p.groups, cout_g = p.out_channels / p.groups;
  const std::size_t ksz = p.kernel_h * p.kernel_w, in_plane = h * w, out_plane = g.ho * g.wo;

  std::vector<T> out(n * p.out_channels * out_plane, T(0));
  auto xd = x.data();
  auto wd = p.weight.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oc = 0; oc < p.out_channels; ++oc) {
      T* op = out.data() + (b * p.out_channels + oc) * out_plane;
      if (p.bias.defined()) std::fill(op, op + out_plane, p.bias[oc]);
      const std::size_t grp = oc / cout_g;
      for (std::size_t ic = 0; ic < cin_g; ++ic) {
        const T* ip = xd.data() + (b * p.in_channels + grp * cin_g + ic) * in_plane;
        detail::corr_plane(ip, wd.data() + (oc * cin_g + ic) * ksz, op, g);
      }
    }
  }
  detail::count_flops(std::uint64_t(n) * out_plane * p.out_channels * cin_g * ksz);

  auto xn = x.node(), wn = p.weight.node();
  auto bn = p.bias.defined() ? p.bias.node() : nullptr;
  const std::size_t cin = p.in_channels, cout = p.out_channels;
  return detail::finish<T>(
      "conv2d", Tensor<T>(Shape{n, cout, g.ho, g.wo}, std::move(out)), {x, p.weight, p.bias},
      [=](std::span<const T> gy) {
        auto gx = detail::grad_of(xn);
        auto gw = detail::grad_of(wn);
        std::span<T> gb = bn ? detail::grad_of(bn) : std::span<T>{};
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t oc = 0; oc < cout; ++oc) {
            const T* go = gy.data() + (b * cout + oc) * out_plane;
            if (!gb.empty()) {
              T acc = 0;
              for (std::size_t k = 0; k < out_plane; ++k) acc += go[k];
              gb[oc] += acc;
            }
            const std::size_t grp = oc / cout_g;
            for (std::size_t ic = 0; ic < cin_g; ++ic) {
              const std::size_t plane = (b * cin + grp * cin_g + ic) * in_plane;
              const std::size_t kofs = (oc * cin_g + ic) * ksz;
              if (!gx.empty()) detail::corr_plane_grad_input(go, wn->data.data() + kofs, gx.data() + plane, g);
              if (!gw.empty()) detail::corr_plane_grad_kernel(go, xn->data.data() + plane, gw.data() + kofs, g);
            }
          }
        }
      });
}

/// Depthwise stride-1 "same" convolution where every sample has its own
/// kernels: out[n,c] = x[n,c] (*) kernels[n,c].
template <Real T>
Tensor<T> depthwise_conv_per_sample(const Tensor<T>& x, const Tensor<T>& kernels, std::size_t padding) {
  if (x.rank() != 4 || kernels.rank() != 4) throw ShapeError("depthwise_conv_per_sample: rank-4 tensors required");
  const std::size_t k = kernels.dim(2);
  if (kernels.dim(3) != k) throw ShapeError("depthwise_conv_per_sample: kernels must be square");
  if (k % 2 == 0) throw ContractError("depthwise_conv_per_sample: even kernel size " + std::to_string(k));
  if (padding != (k - 1) / 2) throw ContractError("depthwise_conv_per_sample: padding must be (K-1)/2");
  if (kernels.dim(0) != x.dim(0) || kernels.dim(1) != x.dim(1)) {
    throw ShapeError("depthwise_conv_per_sample: kernels " + kernels.shape().str() + " do not match input " +
                     x.shape().str());
  }
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), plane = h * w, ksz = k * k;
  detail::PlaneGeom g{h, w, k, k, 1, padding, h, w};
  std::vector<T> out(x.numel(), T(0));
  auto xd = x.data();
  auto kd = kernels.data();
  for (std::size_t i = 0; i < n * c; ++i) detail::corr_plane(xd.data() + i * plane, kd.data() + i * ksz, out.data() + i * plane, g);
  detail::count_flops(std::uint64_t(n) * c * plane * ksz);

  auto xn = x.node(), kn = kernels.node();
  return detail::finish<T>("depthwise_conv_per_sample", Tensor<T>(x.shape(), std::move(out)), {x, kernels},
                           [=](std::span<const T> gy) {
                             auto gx = detail::grad_of(xn);
                             auto gk = detail::grad_of(kn);
                             for (std::size_t i = 0; i < n * c; ++i) {
                               const T* go = gy.data() + i * plane;
                               if (!gx.empty())
                                 detail::corr_plane_grad_input(go, kn->data.data() + i * ksz, gx.data() + i * plane, g);
                               if (!gk.empty())
                                 detail::corr_plane_grad_kernel(go, xn->data.data() + i * plane, gk.data() + i * ksz, g);
                             }
                           });
}

/// Window i spans [floor(i*H/out), ceil((i+1)*H/out)) along each axis.
template <Real T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 4) throw ShapeError("adaptive_avg_pool: rank-4 input required");
  if (out_h < 1 || out_w < 1) throw ContractError("adaptive_avg_pool: output extent must be >= 1");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h > h || out_w > w) {
    throw ContractError("adaptive_avg_pool: output " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                        " larger than input " + std::to_string(h) + "x" + std::to_string(w));
  }
  auto start = [](std::size_t i, std::size_t in, std::size_t out) { return (i * in) / out; };
  auto stop = [](std::size_t i, std::size_t in, std::size_t out) { return ((i + 1) * in + out - 1) / out; };
  std::vector<T> out(n * c * out_h * out_w);
  auto xd = x.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* ip = xd.data() + p * h * w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const std::size_t y0 = start(i, h, out_h), y1 = stop(i, h, out_h);
      for (std::size_t j = 0; j < out_w; ++j) {
        const std::size_t x0 = start(j, w, out_w), x1 = stop(j, w, out_w);
        T acc = 0;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t xx = x0; xx < x1; ++xx) acc += ip[y * w + xx];
        out[(p * out_h + i) * out_w + j] = acc / T((y1 - y0) * (x1 - x0));
      }
    }
  }
  detail::count_flops(x.numel());
  auto xn = x.node();
  return detail::finish<T>("adaptive_avg_pool", Tensor<T>(Shape{n, c, out_h, out_w}, std::move(out)), {x},
                           [=](std::span<const T> gy) {
                             auto gx = detail::grad_of(xn);
                             if (gx.empty()) return;
                             for (std::size_t p = 0; p < n * c; ++p) {
                               T* gp = gx.data() + p * h * w;
                               for (std::size_t i = 0; i < out_h; ++i) {
                                 const std::size_t y0 = start(i, h, out_h), y1 = stop(i, h, out_h);
                                 for (std::size_t j = 0; j < out_w; ++j) {
                                   const std::size_t x0 = start(j, w, out_w), x1 = stop(j, w, out_w);
                                   const T v = gy[(p * out_h + i) * out_w + j] / T((y1 - y0) * (x1 - x0));
                                   for (std::size_t y = y0; y < y1; ++y)
                                     for (std::size_t xx = x0; xx < x1; ++xx) gp[y * w + xx] += v;
                                 }
                               }
                             }
                           });
}

/// Max-subtracted softmax along `axis`.
template <Real T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range");
  std::size_t outer = 1, inner = 1;
  const std::size_t len = x.dim(axis);
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = xd[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, xd[base + k * inner]);
      T total = 0;
      for (std::size_t k = 0; k < len; ++k) {
        const T e = std::exp(xd[base + k * inner] - mx);
        out[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= total;
    }
  }
  detail::count_flops(x.numel());
  Tensor<T> y(x.shape(), std::move(out));
  auto xn = x.node();
  auto yn = y.node();
  return detail::finish<T>("softmax", y, {x}, [xn, yn, outer, inner, len](std::span<const T> gy) {
    auto gx = detail::grad_of(xn);
    if (gx.empty()) return;
    const auto& yd = yn->data;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot = 0;
        for (std::size_t k = 0; k < len; ++k) dot += gy[base + k * inner] * yd[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t i = base + k * inner;
          gx[i] += yd[i] * (gy[i] - dot);
        }
      }
    }
  });
}

template <Real T>
Tensor<T> batch_norm_inference(const Tensor<T>& x, const NormParams<T>& p) {
  if (x.rank() != 4 || x.dim(1) != p.num_channels) {
    throw ShapeError("batch_norm_inference: input " + x.shape().str() + " does not have " +
                     std::to_string(p.num_channels) + " channels");
  }
  const Shape cshape{p.num_channels};
  for (const auto* t : {&p.scale, &p.shift, &p.running_mean, &p.running_var}) {
    if (!(t->shape() == cshape)) throw ShapeError("batch_norm_inference: statistic shape " + t->shape().str());
  }
  if (!(p.epsilon > T(0))) throw ContractError("batch_norm_inference: epsilon must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> inv_std(c);
  for (std::size_t j = 0; j < c; ++j) inv_std[j] = T(1) / std::sqrt(p.running_var[j] + p.epsilon);
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t base = (i * c + j) * hw;
      const T mean = p.running_mean[j], denom = std::sqrt(p.running_var[j] + p.epsilon);
      const T s = p.scale[j], b = p.shift[j];
      for (std::size_t k = 0; k < hw; ++k) out[base + k] = (xd[base + k] - mean) / denom * s + b;
    }
  detail::count_flops(x.numel());
  auto xn = x.node(), sn = p.scale.node(), bn = p.shift.node(), mn = p.running_mean.node();
  return detail::finish<T>("batch_norm_inference", Tensor<T>(x.shape(), std::move(out)), {x, p.scale, p.shift},
                           [=](std::span<const T> gy) {
                             auto gx = detail::grad_of(xn);
                             auto gs = detail::grad_of(sn);
                             auto gb = detail::grad_of(bn);
                             for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < c; ++j) {
                                 const std::size_t base = (i * c + j) * hw;
                                 const T s = sn->data[j], mean = mn->data[j];
                                 T acc_s = 0, acc_b = 0;
                                 for (std::size_t k = 0; k < hw; ++k) {
                                   const T g = gy[base + k];
                                   if (!gx.empty()) gx[base + k] += g * s * inv_std[j];
                                   acc_s += g * (xn->data[base + k] - mean) * inv_std[j];
                                   acc_b += g;
                                 }
                                 if (!gs.empty()) gs[j] += acc_s;
                                 if (!gb.empty()) gb[j] += acc_b;
                               }
                           });
}

/// Token-wise affine map: x [N,L,Cin], weight [Cout,Cin], bias [Cout] (optional).
template <Real T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 3 || weight.rank() != 2 || weight.dim(1) != x.dim(2)) {
    throw ShapeError("linear: input " + x.shape().str() + " incompatible with weight " +
                     (weight.defined() ? weight.shape().str() : std::string("<none>")));
  }
  const std::size_t rows = x.dim(0) * x.dim(1), cin = x.dim(2), cout = weight.dim(0);
  if (bias.defined() && !(bias.shape() == Shape{cout})) throw ShapeError("linear: bias shape " + bias.shape().str());
  std::vector<T> out(rows * cout);
  auto xd = x.data();
  auto wd = weight.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xd.data() + r * cin;
    for (std::size_t o = 0; o < cout; ++o) {
      const T* wr = wd.data() + o * cin;
      T acc = bias.defined() ? bias[o] : T(0);
      for (std::size_t i = 0; i < cin; ++i) acc += xr[i] * wr[i];
      out[r * cout + o] = acc;
    }
  }
  detail::count_flops(std::uint64_t(rows) * cin * cout);
  auto xn = x.node(), wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  return detail::finish<T>("linear", Tensor<T>(Shape{x.dim(0), x.dim(1), cout}, std::move(out)), {x, weight, bias},
                           [=](std::span<const T> gy) {
                             auto gx = detail::grad_of(xn);
                             auto gw = detail::grad_of(wn);
                             std::span<T> gb = bn ? detail::grad_of(bn) : std::span<T>{};
                             for (std::size_t r = 0; r < rows; ++r) {
                               const T* gr = gy.data() + r * cout;
                               const T* xr = xn->data.data() + r * cin;
                               for (std::size_t o = 0; o < cout; ++o) {
                                 const T g = gr[o];
                                 if (!gb.empty()) gb[o] += g;
                                 const T* wr = wn->data.data() + o * cin;
                                 if (!gx.empty())
                                   for (std::size_t i = 0; i < cin; ++i) gx[r * cin + i] += g * wr[i];
                                 if (!gw.empty())
                                   for (std::size_t i = 0; i < cin; ++i) gw[o * cin + i] += g * xr[i];
                               }
                             }
                           });
}

/// Tanh-approximated GELU.
template <Real T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kAlpha = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kBeta = T(0.044715);
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = xd[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(kAlpha * (v + kBeta * v * v * v)));
  }
  auto xn = x.node();
  return detail::finish<T>("gelu", Tensor<T>(x.shape(), std::move(out)), {x}, [xn](std::span<const T> gy) {
    auto gx = detail::grad_of(xn);
    if (gx.empty()) return;
    for (std::size_t i = 0; i < gy.size(); ++i) {
      const T v = xn->data[i];
      const T t = std::tanh(kAlpha * (v + kBeta * v * v * v));
      const T dt = (T(1) - t * t) * kAlpha * (T(1) + T(3) * kBeta * v * v);
      gx[i] += gy[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * dt);
    }
  });
}

// ---------------------------------------------------------------------------
// Token and attention layout helpers

/// [N,C,H,W] -> [N,H*W,C]
template <Real T>
Tensor<T> to_tokens(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("to_tokens: rank-4 input required");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t p = 0; p < hw; ++p) out[(b * hw + p) * c + j] = xd[(b * c + j) * hw + p];
  auto xn = x.node();
  return detail::finish<T>("to_tokens", Tensor<T>(Shape{n, hw, c}, std::move(out)), {x}, [=](std::span<const T> gy) {
    auto gx = detail::grad_of(xn);
    if (gx.empty()) return;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t j = 0; j < c; ++j)
        for (std::size_t p = 0; p < hw; ++p) gx[(b * c + j) * hw + p] += gy[(b * hw + p) * c + j];
  });
}

/// [N,H*W,C] -> [N,C,H,W]
template <Real T>
Tensor<T> from_tokens(const Tensor<T>& t, std::size_t h, std::size_t w) {
  if (t.rank() != 3 || t.dim(1) != h * w) {
    throw ShapeError("from_tokens: " + t.shape().str() + " is not " + std::to_string(h * w) + " tokens");
  }
  const std::size_t n = t.dim(0), c = t.dim(2), hw = h * w;
  std::vector<T> out(t.numel());
  auto td = t.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t p = 0; p < hw; ++p) out[(b * c + j) * hw + p] = td[(b * hw + p) * c + j];
  auto tn = t.node();
  return detail::finish<T>("from_tokens", Tensor<T>(Shape{n, c, h, w}, std::move(out)), {t},
                           [=](std::span<const T> gy) {
                             auto gt = detail::grad_of(tn);
                             if (gt.empty()) return;
                             for (std::size_t b = 0; b < n; ++b)
                               for (std::size_t j = 0; j < c; ++j)
                                 for (std::size_t p = 0; p < hw; ++p)
                                   gt[(b * hw + p) * c + j] += gy[(b * c + j) * hw + p];
                           });
}

/// [N,L,heads*d] -> [N,heads,L,d]
template <Real T>
Tensor<T> split_heads(const Tensor<T>& t, std::size_t heads) {
  if (t.rank() != 3 || heads == 0 || t.dim(2) % heads != 0) {
    throw ShapeError("split_heads: " + t.shape().str() + " not divisible into " + std::to_string(heads) + " heads");
  }
  const std::size_t n = t.dim(0), l = t.dim(1), c = t.dim(2), d = c / heads;
  std::vector<T> out(t.numel());
  auto td = t.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t hh = 0; hh < heads; ++hh)
      for (std::size_t i = 0; i < l; ++i)
        for (std::size_t k = 0; k < d; ++k) out[((b * heads + hh) * l + i) * d + k] = td[(b * l + i) * c + hh * d + k];
  auto tn = t.node();
  return detail::finish<T>("split_heads", Tensor<T>(Shape{n, heads, l, d}, std::move(out)), {t},
                           [=](std::span<const T> gy) {
                             auto gt = detail::grad_of(tn);
                             if (gt.empty()) return;
                             for (std::size_t b = 0; b < n; ++b)
                               for (std::size_t hh = 0; hh < heads; ++hh)
                                 for (std::size_t i = 0; i < l; ++i)
                                   for (std::size_t k = 0; k < d; ++k)
                                     gt[(b * l + i) * c + hh * d + k] += gy[((b * heads + hh) * l + i) * d + k];
                           });
}

/// [N,heads,L,d] -> [N,L,heads*d]
template <Real T>
Tensor<T> merge_heads(const Tensor<T>& t) {
  if (t.rank() != 4) throw ShapeError("merge_heads: rank-4 input required");
  const std::size_t n = t.dim(0), heads = t.dim(1), l = t.dim(2), d = t.dim(3), c = heads * d;
  std::vector<T> out(t.numel());
  auto td = t.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t hh = 0; hh < heads; ++hh)
      for (std::size_t i = 0; i < l; ++i)
        for (std::size_t k = 0; k < d; ++k) out[(b * l + i) * c + hh * d + k] = td[((b * heads + hh) * l + i) * d + k];
  auto tn = t.node();
  return detail::finish<T>("merge_heads", Tensor<T>(Shape{n, l, c}, std::move(out)), {t}, [=](std::span<const T> gy) {
    auto gt = detail::grad_of(tn);
    if (gt.empty()) return;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t hh = 0; hh < heads; ++hh)
        for (std::size_t i = 0; i < l; ++i)
          for (std::size_t k = 0; k < d; ++k)
            gt[((b * heads + hh) * l + i) * d + k] += gy[(b * l + i) * c + hh * d + k];
  });
}

/// Batched a * b^T: [N,H,L,d] x [N,H,M,d] -> [N,H,L,M]
template <Real T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1) || a.dim(3) != b.dim(3)) {
    throw ShapeError("matmul_nt: " + a.shape().str() + " x " + b.shape().str() + "^T");
  }
  const std::size_t batch = a.dim(0) * a.dim(1), l = a.dim(2), m = b.dim(2), d = a.dim(3);
  std::vector<T> out(batch * l * m);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t z = 0; z < batch; ++z)
    for (std::size_t i = 0; i < l; ++i) {
      const T* ar = ad.data() + (z * l + i) * d;
      for (std::size_t j = 0; j < m; ++j) {
        const T* br = bd.data() + (z * m + j) * d;
        T acc = 0;
        for (std::size_t k = 0; k < d; ++k) acc += ar[k] * br[k];
        out[(z * l + i) * m + j] = acc;
      }
    }
  detail::count_flops(std::uint64_t(batch) * l * m * d);
  auto an = a.node(), bn = b.node();
  return detail::finish<T>("matmul_nt", Tensor<T>(Shape{a.dim(0), a.dim(1), l, m}, std::move(out)), {a, b},
                           [=](std::span<const T> gy) {
                             auto ga = detail::grad_of(an);
                             auto gb = detail::grad_of(bn);
                             for (std::size_t z = 0; z < batch; ++z)
                               for (std::size_t i = 0; i < l; ++i)
                                 for (std::size_t j = 0; j < m; ++j) {
                                   const T g = gy[(z * l + i) * m + j];
                                   if (!ga.empty())
                                     for (std::size_t k = 0; k < d; ++k)
                                       ga[(z * l + i) * d + k] += g * bn->data[(z * m + j) * d + k];
                                   if (!gb.empty())
                                     for (std::size_t k = 0; k < d; ++k)
                                       gb[(z * m + j) * d + k] += g * an->data[(z * l + i) * d + k];
                                 }
                           });
}

/// Batched p * v: [N,H,L,M] x [N,H,M,d] -> [N,H,L,d]
template <Real T>
Tensor<T> matmul_nn(const Tensor<T>& p, const Tensor<T>& v) {
  if (p.rank() != 4 || v.rank() != 4 || p.dim(0) != v.dim(0) || p.dim(1) != v.dim(1) || p.dim(3) != v.dim(2)) {
    throw ShapeError("matmul_nn: " + p.shape().str() + " x " + v.shape().str());
  }
  const std::size_t batch = p.dim(0) * p.dim(1), l = p.dim(2), m = p.dim(3), d = v.dim(3);
  std::vector<T> out(batch * l * d, T(0));
  auto pd = p.data();
  auto vd = v.data();
  for (std::size_t z = 0; z < batch; ++z)
    for (std::size_t i = 0; i < l; ++i) {
      T* orow = out.data() + (z * l + i) * d;
      for (std::size_t j = 0; j < m; ++j) {
        const T pv = pd[(z * l + i) * m + j];
        const T* vr = vd.data() + (z * m + j) * d;
        for (std::size_t k = 0; k < d; ++k) orow[k] += pv * vr[k];
      }
    }
  detail::count_flops(std::uint64_t(batch) * l * m * d);
  auto pn = p.node(), vn = v.node();
  return detail::finish<T>("matmul_nn", Tensor<T>(Shape{p.dim(0), p.dim(1), l, d}, std::move(out)), {p, v},
                           [=](std::span<const T> gy) {
                             auto gp = detail::grad_of(pn);
                             auto gv = detail::grad_of(vn);
                             for (std::size_t z = 0; z < batch; ++z)
                               for (std::size_t i = 0; i < l; ++i) {
                                 const T* grow = gy.data() + (z * l + i) * d;
                                 for (std::size_t j = 0; j < m; ++j) {
                                   const T* vr = vn->data.data() + (z * m + j) * d;
                                   if (!gp.empty()) {
                                     T acc = 0;
                                     for (std::size_t k = 0; k < d; ++k) acc += grow[k] * vr[k];
                                     gp[(z * l + i) * m + j] += acc;
                                   }
                                   if (!gv.empty()) {
                                     const T pv = pn->data[(z * l + i) * m + j];
                                     for (std::size_t k = 0; k < d; ++k) gv[(z * m + j) * d + k] += pv * grow[k];
                                   }
                                 }
                               }
                           });
}

/// x [N,H,L,M] + bias [H,L,M], broadcast over N.
template <Real T>
Tensor<T> add_shared_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() != 4 || bias.rank() != 3 || bias.dim(0) != x.dim(1) || bias.dim(1) != x.dim(2) ||
      bias.dim(2) != x.dim(3)) {
    throw ShapeError("add_shared_bias: bias " + bias.shape().str() + " does not match " + x.shape().str());
  }
  const std::size_t n = x.dim(0), per = bias.numel();
  std::vector<T> out(x.data().begin(), x.data().end());
  auto bd = bias.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < per; ++i) out[b * per + i] += bd[i];
  auto xn = x.node(), bn = bias.node();
  return detail::finish<T>("add_shared_bias", Tensor<T>(x.shape(), std::move(out)), {x, bias},
                           [=](std::span<const T> gy) {
                             auto gx = detail::grad_of(xn);
                             auto gb = detail::grad_of(bn);
                             for (std::size_t b = 0; b < n; ++b)
                               for (std::size_t i = 0; i < per; ++i) {
                                 if (!gx.empty()) gx[b * per + i] += gy[b * per + i];
                                 if (!gb.empty()) gb[i] += gy[b * per + i];
                               }
                           });
}

/// out[n,c,k] = sum_g bank[g,c,k] * attn[n,g,c,k]; attn is [N,G,C,K*K], bank [G,C,K,K].
template <Real T>
Tensor<T> blend_kernels(const Tensor<T>& attn, const Tensor<T>& bank) {
  if (attn.rank() != 4 || bank.rank() != 4 || attn.dim(1) != bank.dim(0) || attn.dim(2) != bank.dim(1) ||
      attn.dim(3) != bank.dim(2) * bank.dim(3)) {
    throw ShapeError("blend_kernels: attention " + attn.shape().str() + " does not match bank " + bank.shape().str());
  }
  const std::size_t n = attn.dim(0), groups = attn.dim(1), per = attn.dim(2) * attn.dim(3);
  std::vector<T> out(n * per, T(0));
  auto ad = attn.data();
  auto pd = bank.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t g = 0; g < groups; ++g) {
      const T* a = ad.data() + (b * groups + g) * per;
      const T* p = pd.data() + g * per;
      T* o = out.data() + b * per;
      for (std::size_t i = 0; i < per; ++i) o[i] += p[i] * a[i];
    }
  detail::count_flops(std::uint64_t(n) * groups * per);
  auto an = attn.node(), pn = bank.node();
  return detail::finish<T>(
      "blend_kernels", Tensor<T>(Shape{n, bank.dim(1), bank.dim(2), bank.dim(3)}, std::move(out)), {attn, bank},
      [=](std::span<const T> gy) {
        auto ga = detail::grad_of(an);
        auto gp = detail::grad_of(pn);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t g = 0; g < groups; ++g)
            for (std::size_t i = 0; i < per; ++i) {
              const T go = gy[b * per + i];
              if (!ga.empty()) ga[(b * groups + g) * per + i] += go * pn->data[g * per + i];
              if (!gp.empty()) gp[g * per + i] += go * an->data[(b * groups + g) * per + i];
            }
      });
}

/// Selects one spatial position: [N,C,H,W] -> [N,C,1,1].
template <Real T>
Tensor<T> pick_position(const Tensor<T>& x, std::size_t h, std::size_t w) {
  if (x.rank() != 4 || h >= x.dim(2) || w >= x.dim(3)) throw ShapeError("pick_position: index out of range");
  const std::size_t n = x.dim(0), c = x.dim(1), hh = x.dim(2), ww = x.dim(3);
  std::vector<T> out(n * c);
  for (std::size_t i = 0; i < n * c; ++i) out[i] = x.data()[(i * hh + h) * ww + w];
  auto xn = x.node();
  return detail::finish<T>("pick_position", Tensor<T>(Shape{n, c, 1, 1}, std::move(out)), {x},
                           [=](std::span<const T> gy) {
                             auto gx = detail::grad_of(xn);
                             if (gx.empty()) return;
                             for (std::size_t i = 0; i < n * c; ++i) gx[(i * hh + h) * ww + w] += gy[i];
                           });
}

}  // namespace txnet
