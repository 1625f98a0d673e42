#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpgd/tensor.hpp"

namespace dpgd {

/// Coefficient tables of a discrete forward diffusion. Steps are 1-based:
/// index t in [1, T] addresses betas()[t - 1].
class NoiseSchedule {
 public:
  NoiseSchedule(std::size_t steps, double beta_start, double beta_end) {
    if (steps < 1) throw std::invalid_argument("schedule: step count must be positive");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
      throw std::invalid_argument("schedule: require 0 < beta_start <= beta_end < 1");
    beta_start_ = beta_start;
    beta_end_ = beta_end;
    betas_.resize(steps);
    for (std::size_t i = 0; i < steps; ++i)
      betas_[i] = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * double(i) / double(steps - 1);
    build();
  }

  /// Rebuild from an explicit coefficient list, e.g. one replayed from a manifest.
  static NoiseSchedule from_betas(std::vector<double> betas) {
    if (betas.empty()) throw std::invalid_argument("schedule: empty beta list");
    for (std::size_t i = 0; i < betas.size(); ++i) {
      if (!(betas[i] > 0.0 && betas[i] < 1.0)) throw std::invalid_argument("schedule: beta outside (0,1)");
      if (i && betas[i] < betas[i - 1]) throw std::invalid_argument("schedule: betas must be non-decreasing");
    }
    NoiseSchedule s;
    s.beta_start_ = betas.front();
    s.beta_end_ = betas.back();
    s.betas_ = std::move(betas);
    s.build();
    return s;
  }

  std::size_t steps() const noexcept { return betas_.size(); }
  double beta_start() const noexcept { return beta_start_; }
  double beta_end() const noexcept { return beta_end_; }
  const std::vector<double>& betas() const noexcept { return betas_; }
  const std::vector<double>& alphas() const noexcept { return alphas_; }
  const std::vector<double>& alpha_bars() const noexcept { return alpha_bars_; }

  /// ᾱ at 1-based step t; t = 0 denotes the clean sample (ᾱ = 1).
  double alpha_bar(std::size_t t) const {
    if (t > steps()) throw std::out_of_range("schedule: step " + std::to_string(t) + " beyond T");
    return t == 0 ? 1.0 : alpha_bars_[t - 1];
  }

 private:
  NoiseSchedule() = default;
  void build() {
    alphas_.resize(betas_.size());
    alpha_bars_.resize(betas_.size());
    double prod = 1.0;
    for (std::size_t i = 0; i < betas_.size(); ++i) {
      alphas_[i] = 1.0 - betas_[i];
      prod *= alphas_[i];
      alpha_bars_[i] = prod;
    }
  }

  double beta_start_ = 0, beta_end_ = 0;
  std::vector<double> betas_, alphas_, alpha_bars_;
};

/// Uniform-stride subsequence of a parent schedule (DDIM respacing).
///
/// Respaced index i in [1, T_s] maps to absolute step indices()[i - 1];
/// respaced index 0 is the clean sample.
class RespacedSchedule {
 public:
  RespacedSchedule(NoiseSchedule parent, std::size_t respaced_steps) : parent_(std::move(parent)) {
    const std::size_t T = parent_.steps();
    if (respaced_steps < 1 || respaced_steps > T)
      throw std::invalid_argument("respace: need 1 <= T_s <= T (T_s=" + std::to_string(respaced_steps) +
                                  ", T=" + std::to_string(T) + ")");
    indices_.resize(respaced_steps);
    for (std::size_t k = 1; k <= respaced_steps; ++k) indices_[k - 1] = (k * T) / respaced_steps;
  }

  const NoiseSchedule& parent() const noexcept { return parent_; }
  std::size_t steps() const noexcept { return indices_.size(); }
  const std::vector<std::size_t>& indices() const noexcept { return indices_; }

  std::size_t absolute_step(std::size_t i) const {
    if (i > steps()) throw std::out_of_range("respaced index " + std::to_string(i) + " beyond T_s");
    return i == 0 ? 0 : indices_[i - 1];
  }
  double alpha_bar(std::size_t i) const { return parent_.alpha_bar(absolute_step(i)); }

 private:
  NoiseSchedule parent_;
  std::vector<std::size_t> indices_;
};

inline NoiseSchedule make_schedule(std::size_t steps, double beta_start, double beta_end) {
  return NoiseSchedule(steps, beta_start, beta_end);
}

inline RespacedSchedule respace(const NoiseSchedule& s, std::size_t respaced_steps) {
  return RespacedSchedule(s, respaced_steps);
}

/// Closed-form q(x_t | x_0) on working-range tensors:
/// √ᾱ_t · x0 + √(1 − ᾱ_t) · noise.
template <class T>
Tensor<T> diffuse(const Tensor<T>& x0, std::size_t t, const NoiseSchedule& s, const Tensor<T>& noise) {
  if (t < 1 || t > s.steps()) throw std::out_of_range("diffuse: step " + std::to_string(t) + " outside [1, T]");
  require_same_shape(x0.shape(), noise.shape(), "diffuse");
  const double ab = s.alpha_bar(t);
  const T a = T(std::sqrt(ab)), b = T(std::sqrt(1.0 - ab));
  Tensor<T> out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * noise[i];
  return out;
}

/// Map [0,1] pixel values to the [-1,1] working range and back.
template <class T>
Tensor<T> to_working(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (auto& v : out.values()) v = T(2) * v - T(1);
  return out;
}
template <class T>
Tensor<T> from_working(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (auto& v : out.values()) v = (v + T(1)) * T(0.5);
  return out;
}

}  // namespace dpgd
