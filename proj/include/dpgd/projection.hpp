#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "dpgd/tensor.hpp"

namespace dpgd {

enum class Norm { linf, l2 };

inline const char* norm_name(Norm n) { return n == Norm::linf ? "linf" : "l2"; }
inline Norm parse_norm(const std::string& s) {
  if (s == "linf" || s == "inf" || s == "Linf") return Norm::linf;
  if (s == "l2" || s == "L2" || s == "2") return Norm::l2;
  throw std::invalid_argument("unknown norm '" + s + "' (expected linf or l2)");
}

/// Pulls `candidate` into the ε-ball around `anchor` without the [0,1] clamp.
/// Batches are projected per sample along axis 0.
template <class T>
Tensor<T> project_ball(const Tensor<T>& candidate, const Tensor<T>& anchor, double eps, Norm norm) {
  require_same_shape(candidate.shape(), anchor.shape(), "project");
  Tensor<T> out = candidate;
  if (norm == Norm::linf) {
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = std::clamp(out[i], T(anchor[i] - T(eps)), T(anchor[i] + T(eps)));
    return out;
  }
  const std::size_t N = out.rank() ? out.dim(0) : 1, per = N ? out.size() / N : 0;
  for (std::size_t n = 0; n < N; ++n) {
    double s = 0;
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) {
      const double d = double(out[i]) - double(anchor[i]);
      s += d * d;
    }
    const double nrm = std::sqrt(s);
    if (nrm <= eps) continue;
    const double f = eps / nrm;
    for (std::size_t i = n * per; i < (n + 1) * per; ++i)
      out[i] = T(double(anchor[i]) + (double(out[i]) - double(anchor[i])) * f);
  }
  return out;
}

/// Ball projection followed by the [0,1] pixel clamp.
template <class T>
Tensor<T> project(const Tensor<T>& candidate, const Tensor<T>& anchor, double eps, Norm norm) {
  Tensor<T> out = project_ball(candidate, anchor, eps, norm);
  for (auto& v : out.values()) v = std::clamp(v, T(0), T(1));
  return out;
}

template <class T>
T sign0(T v) {
  return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
}

}  // namespace dpgd
