#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "dpgd/autograd.hpp"

namespace dpgd::ops {

namespace detail {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;
// Aligned scratch so Eigen's vectorized kernels see the same layout every call.
template <class T>
using Scratch = std::vector<T, Eigen::aligned_allocator<T>>;

template <class T>
bool wants(const Node<T>& self, std::size_t i) {
  return self.parents[i]->requires_grad;
}

template <class T>
Tensor<T>& gbuf(Node<T>& self, std::size_t i) {
  return self.parents[i]->grad_buffer();
}

inline void require_rank(const Shape& s, std::size_t r, const char* what) {
  if (s.size() != r) throw ShapeError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " + shape_str(s));
}

// Output columns [lo, hi) whose input column ow*stride + j - pad lies in [0, W).
inline void valid_cols(std::size_t j, std::size_t stride, std::size_t pad, std::size_t W, std::size_t Wo,
                       std::size_t& lo, std::size_t& hi) {
  lo = j >= pad ? 0 : (pad - j + stride - 1) / stride;
  const long last = long(W) - 1 + long(pad) - long(j);
  hi = last < 0 ? 0 : std::min(Wo, std::size_t(last) / stride + 1);
  if (hi < lo) hi = lo;
}

// Unfolds one sample into a (C*k*k, Ho*Wo) block whose rows are `ld` apart.
template <class T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t k, std::size_t stride,
            std::size_t pad, std::size_t Ho, std::size_t Wo, T* col, std::size_t ld) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        T* row = col + ((c * k + i) * k + j) * ld;
        std::size_t lo, hi;
        valid_cols(j, stride, pad, W, Wo, lo, hi);
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const long ih = long(oh * stride + i) - long(pad);
          T* dst = row + oh * Wo;
          if (ih < 0 || ih >= long(H)) {
            std::fill_n(dst, Wo, T(0));
            continue;
          }
          const T* src = x + (c * H + std::size_t(ih)) * W;
          std::fill_n(dst, lo, T(0));
          if (stride == 1)
            std::copy(src + lo + j - pad, src + hi + j - pad, dst + lo);
          else
            for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] = src[ow * stride + j - pad];
          std::fill(dst + hi, dst + Wo, T(0));
        }
      }
}

template <class T>
void col2im(const T* col, std::size_t C, std::size_t H, std::size_t W, std::size_t k, std::size_t stride,
            std::size_t pad, std::size_t Ho, std::size_t Wo, T* x, std::size_t ld) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        const T* row = col + ((c * k + i) * k + j) * ld;
        std::size_t lo, hi;
        valid_cols(j, stride, pad, W, Wo, lo, hi);
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const long ih = long(oh * stride + i) - long(pad);
          if (ih < 0 || ih >= long(H)) continue;
          T* dst = x + (c * H + std::size_t(ih)) * W;
          const T* src = row + oh * Wo;
          if (stride == 1) {
            T* d = dst + j - pad;
            for (std::size_t ow = lo; ow < hi; ++ow) d[ow] += src[ow];
          } else {
            for (std::size_t ow = lo; ow < hi; ++ow) dst[ow * stride + j - pad] += src[ow];
          }
        }
      }
}

// Samples per GEMM so the unfolded block stays cache-sized.
inline std::size_t conv_chunk(std::size_t N, std::size_t CKK, std::size_t HWo) {
  return std::clamp<std::size_t>((std::size_t{1} << 18) / std::max<std::size_t>(1, CKK * HWo), 1, N);
}

template <class T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!detail::wants(self, p)) continue;
      auto& g = detail::gbuf(self, p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (detail::wants(self, 0)) {
      auto& g = detail::gbuf(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = detail::gbuf(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (detail::wants(self, 0)) {
      auto& g = detail::gbuf(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = detail::gbuf(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

/// a * scale + shift
template <class T>
Var<T> affine(const Var<T>& a, T scale, T shift = T(0)) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = v * scale + shift;
  return make_result<T>(std::move(out), {a}, [scale](Node<T>& self) {
    auto& g = detail::gbuf(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * scale;
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  return affine(a, s, T(0));
}

template <class T>
Var<T> square(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = v * v;
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    auto& g = detail::gbuf(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += T(2) * av[i] * self.grad[i];
  });
}

template <class T>
Var<T> silu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = v * detail::sigmoid(v);
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    auto& g = detail::gbuf(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = detail::sigmoid(av[i]);
      g[i] += self.grad[i] * s * (T(1) + av[i] * (T(1) - s));
    }
  });
}

/// Clamp with a pass-through subgradient on the closed interval [lo, hi]
/// and zero outside it.
template <class T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = std::clamp(v, lo, hi);
  return make_result<T>(std::move(out), {a}, [lo, hi](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    auto& g = detail::gbuf(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (av[i] >= lo && av[i] <= hi) g[i] += self.grad[i];
  });
}

/// Per-pixel select: mask(h, w) != 0 takes `a`, otherwise `b`. The mask is an
/// (H, W) plane broadcast over batch and channels.
template <class T>
Var<T> where_mask(const Tensor<T>& mask, const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "where_mask");
  detail::require_rank(a.shape(), 4, "where_mask");
  const auto& s = a.shape();
  const std::size_t plane = s[2] * s[3];
  if (mask.size() != plane) throw ShapeError("where_mask: mask " + shape_str(mask.shape()) + " vs image " + shape_str(s));
  Tensor<T> out = b.value();
  const auto& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i % plane] != T(0)) out[i] = av[i];
  return make_result<T>(std::move(out), {a, b}, [mask, plane](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!detail::wants(self, p)) continue;
      auto& g = detail::gbuf(self, p);
      const bool take_on = p == 0;
      for (std::size_t i = 0; i < g.size(); ++i)
        if ((mask[i % plane] != T(0)) == take_on) g[i] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------- reductions

template <class T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T v : a.value().values()) s += v;
  return make_result<T>(Tensor<T>({1}, {s}), {a}, [](Node<T>& self) {
    auto& g = detail::gbuf(self, 0);
    for (auto& v : g.values()) v += self.grad[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / T(a.size()));
}

/// Σ (a - b)² with `b` as a constant target.
template <class T>
Var<T> sum_squared_error(const Var<T>& a, const Tensor<T>& target) {
  require_same_shape(a.shape(), target.shape(), "sum_squared_error");
  T s = 0;
  const auto& av = a.value();
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T d = av[i] - target[i];
    s += d * d;
  }
  return make_result<T>(Tensor<T>({1}, {s}), {a}, [target](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    auto& g = detail::gbuf(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += T(2) * (av[i] - target[i]) * self.grad[0];
  });
}

template <class T>
Var<T> mse(const Var<T>& a, const Tensor<T>& target) {
  return scale(sum_squared_error(a, target), T(1) / T(a.size()));
}

/// Mean cross-entropy of (N, K) logits against integer labels.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  detail::require_rank(logits.shape(), 2, "cross_entropy");
  const std::size_t N = logits.shape()[0], K = logits.shape()[1];
  if (labels.size() != N) throw ShapeError("cross_entropy: label count mismatch");
  std::vector<int> lab(labels.begin(), labels.end());
  for (int y : lab)
    if (y < 0 || std::size_t(y) >= K) throw std::out_of_range("cross_entropy: label out of range");
  const auto& z = logits.value();
  Tensor<T> probs({N, K});
  T total = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = z.data() + n * K;
    const T m = *std::max_element(row, row + K);
    T se = 0;
    for (std::size_t k = 0; k < K; ++k) se += std::exp(row[k] - m);
    const T lse = m + std::log(se);
    total += lse - row[lab[n]];
    for (std::size_t k = 0; k < K; ++k) probs[n * K + k] = std::exp(row[k] - lse);
  }
  return make_result<T>(Tensor<T>({1}, {total / T(N)}), {logits},
                        [probs = std::move(probs), lab = std::move(lab), N, K](Node<T>& self) {
                          auto& g = detail::gbuf(self, 0);
                          const T s = self.grad[0] / T(N);
                          for (std::size_t n = 0; n < N; ++n)
                            for (std::size_t k = 0; k < K; ++k)
                              g[n * K + k] += s * (probs[n * K + k] - T(int(k) == lab[n]));
                        });
}

// ---------------------------------------------------------------- shape ops

template <class T>
Var<T> reshape(const Var<T>& a, Shape s) {
  Tensor<T> out = a.value().reshaped(std::move(s));
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& g = detail::gbuf(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// Concatenate along the channel axis of two NCHW tensors.
template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const auto &sa = a.shape(), &sb = b.shape();
  detail::require_rank(sa, 4, "concat_channels");
  if (sb.size() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
    throw ShapeError("concat_channels: " + shape_str(sa) + " vs " + shape_str(sb));
  const std::size_t N = sa[0], Ca = sa[1], Cb = sb[1], HW = sa[2] * sa[3];
  Tensor<T> out({N, Ca + Cb, sa[2], sa[3]});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(a.value().data() + n * Ca * HW, Ca * HW, out.data() + n * (Ca + Cb) * HW);
    std::copy_n(b.value().data() + n * Cb * HW, Cb * HW, out.data() + n * (Ca + Cb) * HW + Ca * HW);
  }
  return make_result<T>(std::move(out), {a, b}, [N, Ca, Cb, HW](Node<T>& self) {
    for (std::size_t n = 0; n < N; ++n) {
      const T* src = self.grad.data() + n * (Ca + Cb) * HW;
      if (detail::wants(self, 0)) {
        T* g = detail::gbuf(self, 0).data() + n * Ca * HW;
        for (std::size_t i = 0; i < Ca * HW; ++i) g[i] += src[i];
      }
      if (detail::wants(self, 1)) {
        T* g = detail::gbuf(self, 1).data() + n * Cb * HW;
        for (std::size_t i = 0; i < Cb * HW; ++i) g[i] += src[Ca * HW + i];
      }
    }
  });
}

/// Stack several (n_i, ...) tensors along the batch axis.
template <class T>
Var<T> concat_batch(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_batch: no inputs");
  std::vector<Tensor<T>> vals;
  vals.reserve(parts.size());
  for (const auto& p : parts) vals.push_back(p.value());
  Tensor<T> out = stack_samples<T>(vals);
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) sizes.push_back(p.size());
  return make_result<T>(std::move(out), parts, [sizes = std::move(sizes)](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < sizes.size(); ++p) {
      if (detail::wants(self, p)) {
        auto& g = detail::gbuf(self, p);
        for (std::size_t i = 0; i < sizes[p]; ++i) g[i] += self.grad[off + i];
      }
      off += sizes[p];
    }
  });
}

// ---------------------------------------------------------------- spatial

template <class T>
Var<T> avg_pool2(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "avg_pool2");
  const auto& s = x.shape();
  const std::size_t NC = s[0] * s[1], H = s[2], W = s[3], Ho = H / 2, Wo = W / 2;
  if (H % 2 || W % 2) throw ShapeError("avg_pool2: odd spatial size " + shape_str(s));
  Tensor<T> out({s[0], s[1], Ho, Wo});
  const T* xv = x.value().data();
  for (std::size_t c = 0; c < NC; ++c)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        const T* p = xv + (c * H + 2 * i) * W + 2 * j;
        out[(c * Ho + i) * Wo + j] = T(0.25) * (p[0] + p[1] + p[W] + p[W + 1]);
      }
  return make_result<T>(std::move(out), {x}, [NC, H, W, Ho, Wo](Node<T>& self) {
    T* g = detail::gbuf(self, 0).data();
    for (std::size_t c = 0; c < NC; ++c)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          const T d = T(0.25) * self.grad[(c * Ho + i) * Wo + j];
          T* p = g + (c * H + 2 * i) * W + 2 * j;
          p[0] += d;
          p[1] += d;
          p[W] += d;
          p[W + 1] += d;
        }
  });
}

template <class T>
Var<T> upsample_nearest2(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "upsample_nearest2");
  const auto& s = x.shape();
  const std::size_t NC = s[0] * s[1], H = s[2], W = s[3], Ho = 2 * H, Wo = 2 * W;
  Tensor<T> out({s[0], s[1], Ho, Wo});
  const T* xv = x.value().data();
  for (std::size_t c = 0; c < NC; ++c)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) out[(c * Ho + i) * Wo + j] = xv[(c * H + i / 2) * W + j / 2];
  return make_result<T>(std::move(out), {x}, [NC, H, W, Ho, Wo](Node<T>& self) {
    T* g = detail::gbuf(self, 0).data();
    for (std::size_t c = 0; c < NC; ++c)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) g[(c * H + i / 2) * W + j / 2] += self.grad[(c * Ho + i) * Wo + j];
  });
}

template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "global_avg_pool");
  const auto& s = x.shape();
  const std::size_t NC = s[0] * s[1], HW = s[2] * s[3];
  Tensor<T> out({s[0], s[1]});
  for (std::size_t c = 0; c < NC; ++c) {
    T acc = 0;
    const T* p = x.value().data() + c * HW;
    for (std::size_t i = 0; i < HW; ++i) acc += p[i];
    out[c] = acc / T(HW);
  }
  return make_result<T>(std::move(out), {x}, [NC, HW](Node<T>& self) {
    T* g = detail::gbuf(self, 0).data();
    for (std::size_t c = 0; c < NC; ++c) {
      const T d = self.grad[c] / T(HW);
      for (std::size_t i = 0; i < HW; ++i) g[c * HW + i] += d;
    }
  });
}

/// Broadcast-add a (N, C) tensor over the spatial axes of an NCHW tensor.
template <class T>
Var<T> add_channel(const Var<T>& x, const Var<T>& v) {
  detail::require_rank(x.shape(), 4, "add_channel");
  const auto& s = x.shape();
  if (v.shape() != Shape{s[0], s[1]}) throw ShapeError("add_channel: " + shape_str(v.shape()) + " vs " + shape_str(s));
  const std::size_t NC = s[0] * s[1], HW = s[2] * s[3];
  Tensor<T> out = x.value();
  for (std::size_t c = 0; c < NC; ++c)
    for (std::size_t i = 0; i < HW; ++i) out[c * HW + i] += v.value()[c];
  return make_result<T>(std::move(out), {x, v}, [NC, HW](Node<T>& self) {
    if (detail::wants(self, 0)) {
      auto& g = detail::gbuf(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = detail::gbuf(self, 1);
      for (std::size_t c = 0; c < NC; ++c) {
        T acc = 0;
        for (std::size_t i = 0; i < HW; ++i) acc += self.grad[c * HW + i];
        g[c] += acc;
      }
    }
  });
}

/// 2-D cross-correlation. x: (N, Ci, H, W), w: (Co, Ci, k, k), bias: (Co) or undefined.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, std::size_t stride = 1, std::size_t pad = 0) {
  using namespace detail;
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(w.shape(), 4, "conv2d weight");
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  const std::size_t N = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
  const std::size_t Co = ws[0], k = ws[2];
  if (ws[1] != Ci || ws[3] != k) throw ShapeError("conv2d: weight " + shape_str(ws) + " vs input " + shape_str(xs));
  if (H + 2 * pad < k || W + 2 * pad < k) throw ShapeError("conv2d: kernel larger than padded input");
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  const std::size_t CKK = Ci * k * k, HWo = Ho * Wo, HWi = H * W;
  const std::size_t chunk = conv_chunk(N, CKK, HWo);
  const bool has_bias = bias.defined();

  // Samples are processed `chunk` at a time as one (Co, CKK) x (CKK, nb*HWo) product.
  Tensor<T> out({N, Co, Ho, Wo});
  Scratch<T> col(CKK * chunk * HWo), res(Co * chunk * HWo);
  CMapR<T> Wm(w.value().data(), Co, CKK);
  for (std::size_t n0 = 0; n0 < N; n0 += chunk) {
    const std::size_t nb = std::min(chunk, N - n0), ld = nb * HWo;
    for (std::size_t b = 0; b < nb; ++b)
      im2col(x.value().data() + (n0 + b) * Ci * HWi, Ci, H, W, k, stride, pad, Ho, Wo, col.data() + b * HWo, ld);
    MapR<T> R(res.data(), Co, ld);
    R.noalias() = Wm * CMapR<T>(col.data(), CKK, ld);
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t o = 0; o < Co; ++o) {
        T* dst = out.data() + ((n0 + b) * Co + o) * HWo;
        const T* src = res.data() + o * ld + b * HWo;
        const T bo = has_bias ? bias.value()[o] : T(0);
        for (std::size_t i = 0; i < HWo; ++i) dst[i] = src[i] + bo;
      }
  }

  std::vector<Var<T>> parents{x, w};
  if (has_bias) parents.push_back(bias);
  return make_result<T>(std::move(out), parents, [=](Node<T>& self) {
    const T* xv = self.parents[0]->value.data();
    const bool gx = wants(self, 0), gw = wants(self, 1);
    const bool gb = has_bias && wants(self, 2);
    Scratch<T> colb(gw ? CKK * chunk * HWo : 0), dcol(gx ? CKK * chunk * HWo : 0), dO(Co * chunk * HWo);
    CMapR<T> Wm(self.parents[1]->value.data(), Co, CKK);
    for (std::size_t n0 = 0; n0 < N; n0 += chunk) {
      const std::size_t nb = std::min(chunk, N - n0), ld = nb * HWo;
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t o = 0; o < Co; ++o)
          std::copy_n(self.grad.data() + ((n0 + b) * Co + o) * HWo, HWo, dO.data() + o * ld + b * HWo);
      CMapR<T> dOm(dO.data(), Co, ld);
      if (gb) {
        T* db = gbuf(self, 2).data();
        for (std::size_t o = 0; o < Co; ++o) db[o] += dOm.row(o).sum();
      }
      if (gw) {
        for (std::size_t b = 0; b < nb; ++b)
          im2col(xv + (n0 + b) * Ci * HWi, Ci, H, W, k, stride, pad, Ho, Wo, colb.data() + b * HWo, ld);
        MapR<T>(gbuf(self, 1).data(), Co, CKK).noalias() += dOm * CMapR<T>(colb.data(), CKK, ld).transpose();
      }
      if (gx) {
        MapR<T> dC(dcol.data(), CKK, ld);
        dC.noalias() = Wm.transpose() * dOm;
        T* dx = gbuf(self, 0).data();
        for (std::size_t b = 0; b < nb; ++b)
          col2im(dcol.data() + b * HWo, Ci, H, W, k, stride, pad, Ho, Wo, dx + (n0 + b) * Ci * HWi, ld);
      }
    }
  });
}

/// x: (N, F), w: (O, F), bias: (O) or undefined -> (N, O)
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  using namespace detail;
  require_rank(x.shape(), 2, "linear input");
  require_rank(w.shape(), 2, "linear weight");
  const std::size_t N = x.shape()[0], F = x.shape()[1], O = w.shape()[0];
  if (w.shape()[1] != F) throw ShapeError("linear: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  const bool has_bias = bias.defined();
  Tensor<T> out({N, O});
  MapR<T> Om(out.data(), N, O);
  Om.noalias() = CMapR<T>(x.value().data(), N, F) * CMapR<T>(w.value().data(), O, F).transpose();
  if (has_bias)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o) out[n * O + o] += bias.value()[o];
  std::vector<Var<T>> parents{x, w};
  if (has_bias) parents.push_back(bias);
  return make_result<T>(std::move(out), parents, [=](Node<T>& self) {
    CMapR<T> dO(self.grad.data(), N, O);
    if (wants(self, 0)) MapR<T>(gbuf(self, 0).data(), N, F).noalias() += dO * CMapR<T>(self.parents[1]->value.data(), O, F);
    if (wants(self, 1))
      MapR<T>(gbuf(self, 1).data(), O, F).noalias() += dO.transpose() * CMapR<T>(self.parents[0]->value.data(), N, F);
    if (has_bias && wants(self, 2)) {
      T* db = gbuf(self, 2).data();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o) db[o] += self.grad[n * O + o];
    }
  });
}

/// Group normalization over (C/G, H, W) per sample, with per-channel affine.
template <class T>
Var<T> group_norm(const Var<T>& x, std::size_t groups, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  using namespace detail;
  require_rank(x.shape(), 4, "group_norm");
  const auto& s = x.shape();
  const std::size_t N = s[0], C = s[1], HW = s[2] * s[3];
  if (groups == 0 || C % groups) throw ShapeError("group_norm: channels not divisible by groups");
  const std::size_t Cg = C / groups, M = Cg * HW;
  Scratch<T> mu(N * groups), rstd(N * groups);
  Tensor<T> out(s);
  const T* xv = x.value().data();
  const T* gm = gamma.value().data();
  const T* bt = beta.value().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t g = 0; g < groups; ++g) {
      const T* p = xv + (n * C + g * Cg) * HW;
      T m = 0;
      for (std::size_t i = 0; i < M; ++i) m += p[i];
      m /= T(M);
      T v = 0;
      for (std::size_t i = 0; i < M; ++i) v += (p[i] - m) * (p[i] - m);
      v /= T(M);
      const T r = T(1) / std::sqrt(v + eps);
      mu[n * groups + g] = m;
      rstd[n * groups + g] = r;
      for (std::size_t c = 0; c < Cg; ++c) {
        const std::size_t ch = g * Cg + c;
        const T* pc = p + c * HW;
        T* oc = out.data() + (n * C + ch) * HW;
        for (std::size_t i = 0; i < HW; ++i) oc[i] = (pc[i] - m) * r * gm[ch] + bt[ch];
      }
    }
  return make_result<T>(
      std::move(out), {x, gamma, beta},
      [N, C, HW, groups, Cg, M, mu = std::move(mu), rstd = std::move(rstd)](Node<T>& self) {
        const T* xv = self.parents[0]->value.data();
        const T* gm = self.parents[1]->value.data();
        const T* dy = self.grad.data();
        const bool gx = wants(self, 0), gg = wants(self, 1), gb = wants(self, 2);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t g = 0; g < groups; ++g) {
            const T m = mu[n * groups + g], r = rstd[n * groups + g];
            T sum_dxh = 0, sum_dxh_xh = 0;
            for (std::size_t c = 0; c < Cg; ++c) {
              const std::size_t ch = g * Cg + c;
              const std::size_t base = (n * C + ch) * HW;
              T dgam = 0, dbet = 0;
              for (std::size_t i = 0; i < HW; ++i) {
                const T xh = (xv[base + i] - m) * r;
                const T d = dy[base + i];
                dgam += d * xh;
                dbet += d;
                sum_dxh += d * gm[ch];
                sum_dxh_xh += d * gm[ch] * xh;
              }
              if (gg) gbuf(self, 1)[ch] += dgam;
              if (gb) gbuf(self, 2)[ch] += dbet;
            }
            if (!gx) continue;
            T* dx = gbuf(self, 0).data();
            const T a = sum_dxh / T(M), b = sum_dxh_xh / T(M);
            for (std::size_t c = 0; c < Cg; ++c) {
              const std::size_t ch = g * Cg + c;
              const std::size_t base = (n * C + ch) * HW;
              for (std::size_t i = 0; i < HW; ++i) {
                const T xh = (xv[base + i] - m) * r;
                dx[base + i] += r * (dy[base + i] * gm[ch] - a - xh * b);
              }
            }
          }
      });
}

/// Per-sample Gram matrix of an NCHW feature map: F·Fᵀ / (C·S), shape (N, C, C).
template <class T>
Var<T> gram(const Var<T>& f) {
  using namespace detail;
  require_rank(f.shape(), 4, "gram");
  const auto& s = f.shape();
  const std::size_t N = s[0], C = s[1], S = s[2] * s[3];
  if (N == 0 || C == 0 || S == 0) throw ShapeError("gram: empty feature map");
  const T norm = T(1) / T(C * S);
  Tensor<T> out({N, C, C});
  for (std::size_t n = 0; n < N; ++n) {
    CMapR<T> F(f.value().data() + n * C * S, C, S);
    MapR<T>(out.data() + n * C * C, C, C).noalias() = norm * (F * F.transpose());
  }
  return make_result<T>(std::move(out), {f}, [N, C, S, norm](Node<T>& self) {
    for (std::size_t n = 0; n < N; ++n) {
      CMapR<T> F(self.parents[0]->value.data() + n * C * S, C, S);
      CMapR<T> dG(self.grad.data() + n * C * C, C, C);
      MapR<T>(gbuf(self, 0).data() + n * C * S, C, S).noalias() += norm * ((dG + dG.transpose()) * F);
    }
  });
}

/// Bilinear resampling of an NCHW tensor to (Ho, Wo), half-pixel centers.
template <class T>
Var<T> resize_bilinear(const Var<T>& x, std::size_t Ho, std::size_t Wo) {
  detail::require_rank(x.shape(), 4, "resize_bilinear");
  const auto& s = x.shape();
  const std::size_t NC = s[0] * s[1], H = s[2], W = s[3];
  if (Ho == 0 || Wo == 0) throw ShapeError("resize_bilinear: empty target");
  struct Tap {
    std::size_t i0, i1;
    T w1;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double r = double(in) / double(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = (double(o) + 0.5) * r - 0.5;
      src = std::clamp(src, 0.0, double(in - 1));
      const std::size_t i0 = std::size_t(std::floor(src));
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      t[o] = {i0, i1, T(src - double(i0))};
    }
    return t;
  };
  auto ty = taps(H, Ho), tx = taps(W, Wo);
  Tensor<T> out({s[0], s[1], Ho, Wo});
  const T* xv = x.value().data();
  for (std::size_t c = 0; c < NC; ++c)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        const auto& a = ty[i];
        const auto& b = tx[j];
        const T* p = xv + c * H * W;
        const T top = p[a.i0 * W + b.i0] * (T(1) - b.w1) + p[a.i0 * W + b.i1] * b.w1;
        const T bot = p[a.i1 * W + b.i0] * (T(1) - b.w1) + p[a.i1 * W + b.i1] * b.w1;
        out[(c * Ho + i) * Wo + j] = top * (T(1) - a.w1) + bot * a.w1;
      }
  return make_result<T>(std::move(out), {x}, [NC, H, W, Ho, Wo, ty, tx](Node<T>& self) {
    T* g = detail::gbuf(self, 0).data();
    for (std::size_t c = 0; c < NC; ++c)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          const auto& a = ty[i];
          const auto& b = tx[j];
          const T d = self.grad[(c * Ho + i) * Wo + j];
          T* p = g + c * H * W;
          p[a.i0 * W + b.i0] += d * (T(1) - a.w1) * (T(1) - b.w1);
          p[a.i0 * W + b.i1] += d * (T(1) - a.w1) * b.w1;
          p[a.i1 * W + b.i0] += d * a.w1 * (T(1) - b.w1);
          p[a.i1 * W + b.i1] += d * a.w1 * b.w1;
        }
  });
}

/// Overwrite the (h, w) window of a constant background at (top, left) with `patch`.
template <class T>
Var<T> paste(const Tensor<T>& background, const Var<T>& patch, std::size_t top, std::size_t left) {
  detail::require_rank(background.shape(), 4, "paste background");
  detail::require_rank(patch.shape(), 4, "paste patch");
  const auto &bs = background.shape(), &ps = patch.shape();
  if (bs[0] != ps[0] || bs[1] != ps[1] || top + ps[2] > bs[2] || left + ps[3] > bs[3])
    throw ShapeError("paste: patch " + shape_str(ps) + " does not fit background " + shape_str(bs));
  const std::size_t NC = bs[0] * bs[1], H = bs[2], W = bs[3], h = ps[2], w = ps[3];
  Tensor<T> out = background;
  for (std::size_t c = 0; c < NC; ++c)
    for (std::size_t i = 0; i < h; ++i)
      std::copy_n(patch.value().data() + (c * h + i) * w, w, out.data() + (c * H + top + i) * W + left);
  return make_result<T>(std::move(out), {patch}, [NC, H, W, h, w, top, left](Node<T>& self) {
    T* g = detail::gbuf(self, 0).data();
    for (std::size_t c = 0; c < NC; ++c)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) g[(c * h + i) * w + j] += self.grad[(c * H + top + i) * W + left + j];
  });
}

}  // namespace dpgd::ops
