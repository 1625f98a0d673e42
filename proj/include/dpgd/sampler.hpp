#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "dpgd/denoiser.hpp"

namespace dpgd {

struct SdeditConfig {
  std::size_t K = 3;        // reverse steps on the respaced schedule
  bool stochastic = false;  // DDPM-style posterior noise instead of DDIM
  std::uint64_t seed = 0;
};

/// Mask plane (H, W) in {0, 1} plus the [0,1] image that fills its complement.
struct RepaintContext {
  Mask mask;
  Image anchor;
};

/// Posterior standard deviation of the stochastic step from ᾱ_from to ᾱ_to.
inline double posterior_sigma(double ab_from, double ab_to) {
  if (ab_to >= 1.0) return 0.0;
  return std::sqrt((1.0 - ab_to) / (1.0 - ab_from)) * std::sqrt(std::max(0.0, 1.0 - ab_from / ab_to));
}

/// One reverse update between respaced indices from > to >= 0, in the working range.
/// `posterior` supplies z for the stochastic mode and may be null otherwise.
/// With `clip_x0` the predicted x̂₀ is clamped to [-1, 1] and ε̂ re-derived from it.
template <class T>
Var<T> reverse_step(const NoisePredictor<T>& model, const Var<T>& x_t, std::size_t from, std::size_t to,
                    const RespacedSchedule& sched, bool stochastic = false, rng::Engine* posterior = nullptr,
                    bool clip_x0 = false) {
  if (!(from > to)) throw std::invalid_argument("reverse_step: need from > to (got " + std::to_string(from) + " -> " +
                                                std::to_string(to) + ")");
  if (from > sched.steps()) throw std::out_of_range("reverse_step: index beyond respaced schedule");
  const double af = sched.alpha_bar(from), at = sched.alpha_bar(to);
  Var<T> eps = predict_noise(model, x_t, sched.absolute_step(from));
  // x_to = √ᾱ_to·x̂₀ + c·ε̂ with x̂₀ = (x_t − √(1−ᾱ_from)·ε̂)/√ᾱ_from.
  const double sigma = stochastic ? posterior_sigma(af, at) : 0.0;
  const double c = std::sqrt(std::max(0.0, 1.0 - at - sigma * sigma));
  Var<T> out;
  if (clip_x0) {
    const double ra = std::sqrt(af), rb = std::sqrt(1.0 - af);
    Var<T> x0 = ops::clamp(ops::scale(ops::sub(x_t, ops::scale(eps, T(rb))), T(1.0 / ra)), T(-1), T(1));
    eps = ops::scale(ops::sub(x_t, ops::scale(x0, T(ra))), T(1.0 / rb));
    out = ops::add(ops::scale(x0, T(std::sqrt(at))), ops::scale(eps, T(c)));
  } else {
    const double a = std::sqrt(at) / std::sqrt(af);
    const double b = c - std::sqrt(at) * std::sqrt(1.0 - af) / std::sqrt(af);
    out = ops::add(ops::scale(x_t, T(a)), ops::scale(eps, T(b)));
  }
  if (sigma > 0.0) {
    if (!posterior) throw std::invalid_argument("reverse_step: stochastic mode needs a noise stream");
    Tensor<T> z = rng::normal<T>(x_t.shape(), *posterior);
    for (auto& v : z.values()) v *= T(sigma);
    out = ops::add(out, Var<T>::constant(std::move(z)));
  }
  return out;
}

namespace detail {

inline void check_sdedit(const SdeditConfig& cfg, const RespacedSchedule& sched) {
  if (cfg.K > sched.steps())
    throw std::invalid_argument("sdedit: K=" + std::to_string(cfg.K) + " exceeds T_s=" + std::to_string(sched.steps()));
}

// x_K ~ q(x_K | x) in the working range, differentiable in x ([0,1] input).
template <class T>
Var<T> forward_to_K(const Var<T>& x01, const RespacedSchedule& sched, const SdeditConfig& cfg,
                    std::uint64_t stream_index) {
  auto eng = rng::stream(cfg.seed, stream_index, rng::Purpose::forward_noise);
  const Tensor<T> noise = rng::normal<T>(x01.shape(), eng);
  const double ab = sched.alpha_bar(cfg.K);
  const T a = T(std::sqrt(ab)), b = T(std::sqrt(1.0 - ab));
  // √ᾱ·(2x − 1) + √(1−ᾱ)·n as one affine map plus a constant.
  Var<T> xk = ops::affine(x01, T(2) * a, -a);
  Tensor<T> bn = noise;
  for (auto& v : bn.values()) v *= b;
  return ops::add(xk, Var<T>::constant(std::move(bn)));
}

}  // namespace detail

/// SDEdit on [0,1] images: diffuse to respaced index K, then K reverse steps
/// down to 0. `stream_index` selects the noise realization (e.g. the attack
/// iteration). The output is not clamped.
template <class T>
Var<T> sdedit(const NoisePredictor<T>& model, const Var<T>& x, const RespacedSchedule& sched, const SdeditConfig& cfg,
              std::uint64_t stream_index = 0) {
  detail::check_sdedit(cfg, sched);
  if (cfg.K == 0) return x;
  Var<T> h = detail::forward_to_K(x, sched, cfg, stream_index);
  auto post = rng::stream(cfg.seed, stream_index, rng::Purpose::posterior);
  for (std::size_t i = cfg.K; i >= 1; --i) h = reverse_step(model, h, i, i - 1, sched, cfg.stochastic, &post);
  return ops::affine(h, T(0.5), T(0.5));
}

/// Mask-aware SDEdit: after every reverse step the complement of the mask is
/// reset to a forward sample of the anchor at that index. The last step
/// writes the anchor itself, so the output equals the anchor off the mask.
template <class T>
Var<T> rsdedit(const NoisePredictor<T>& model, const RepaintContext& ctx, const Var<T>& x,
               const RespacedSchedule& sched, const SdeditConfig& cfg, std::uint64_t stream_index = 0) {
  detail::check_sdedit(cfg, sched);
  const auto& s = x.shape();
  if (ctx.mask.rank() != 2 || ctx.mask.dim(0) != s.at(2) || ctx.mask.dim(1) != s.at(3))
    throw ShapeError("rsdedit: mask " + shape_str(ctx.mask.shape()) + " vs image " + shape_str(s));
  require_same_shape(ctx.anchor.shape(), s, "rsdedit anchor");
  const Tensor<T> mask = ctx.mask.template cast<T>();
  const Tensor<T> anchor = ctx.anchor.template cast<T>();
  if (cfg.K == 0) return ops::where_mask(mask, x, Var<T>::constant(anchor));

  Var<T> h = detail::forward_to_K(x, sched, cfg, stream_index);
  auto post = rng::stream(cfg.seed, stream_index, rng::Purpose::posterior);
  auto repl = rng::stream(cfg.seed, stream_index, rng::Purpose::replacement);
  // Fixed replacement table, one draw per intermediate index K-1 .. 1.
  std::vector<Tensor<T>> table;
  for (std::size_t i = cfg.K - 1; i >= 1; --i) table.push_back(rng::normal<T>(s, repl));

  for (std::size_t i = cfg.K; i >= 1; --i) {
    h = reverse_step(model, h, i, i - 1, sched, cfg.stochastic, &post);
    if (i - 1 == 0) break;
    const double ab = sched.alpha_bar(i - 1);
    const T a = T(std::sqrt(ab)), b = T(std::sqrt(1.0 - ab));
    Tensor<T> q(s);
    const Tensor<T>& z = table[cfg.K - i];
    for (std::size_t p = 0; p < q.size(); ++p) q[p] = a * (T(2) * anchor[p] - T(1)) + b * z[p];
    h = ops::where_mask(mask, h, Var<T>::constant(std::move(q)));
  }
  return ops::where_mask(mask, ops::affine(h, T(0.5), T(0.5)), Var<T>::constant(anchor));
}

/// Unconditional generation: pure noise at index T_s, then T_s reverse steps
/// (x̂₀ clipped at every step unless `clip_x0` is off).
template <class T>
Tensor<T> generate(const NoisePredictor<T>& model, const RespacedSchedule& sched, Shape shape, std::uint64_t seed,
                   bool stochastic = false, bool clip_x0 = true) {
  NoGradGuard ng;
  auto eng = rng::stream(seed, 0, rng::Purpose::forward_noise);
  auto post = rng::stream(seed, 0, rng::Purpose::posterior);
  Var<T> h = Var<T>::constant(rng::normal<T>(std::move(shape), eng));
  for (std::size_t i = sched.steps(); i >= 1; --i)
    h = reverse_step(model, h, i, i - 1, sched, stochastic, &post, clip_x0);
  Tensor<T> out = from_working(h.value());
  for (auto& v : out.values()) v = std::clamp(v, T(0), T(1));
  return out;
}

}  // namespace dpgd
