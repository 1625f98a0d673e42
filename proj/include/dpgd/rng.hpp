#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

#include "dpgd/tensor.hpp"

namespace dpgd::rng {

using Engine = std::mt19937_64;

/// Purpose tags that keep independent draws of one iteration apart.
enum class Purpose : std::uint64_t {
  forward_noise = 1,
  replacement = 2,
  posterior = 3,
  transform = 4,
  init = 5,
  batch = 6,
  purifier = 7,
  data = 8,
};

/// Independent engine for the stream addressed by (seed, path...).
inline Engine stream(std::uint64_t seed, std::initializer_list<std::uint64_t> path = {}) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                                   static_cast<std::uint32_t>(path.size())};
  for (std::uint64_t p : path) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Engine(seq);
}

inline Engine stream(std::uint64_t seed, std::uint64_t index, Purpose purpose) {
  return stream(seed, {index, static_cast<std::uint64_t>(purpose)});
}

/// Standard-normal tensor. Draws are made in double so float and double
/// instantiations see the same realization.
template <class T>
Tensor<T> normal(Shape shape, Engine& eng, double stddev = 1.0) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> d(0.0, stddev);
  for (auto& v : t.values()) v = static_cast<T>(d(eng));
  return t;
}

inline double uniform(Engine& eng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(eng);
}

inline std::size_t index(Engine& eng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(eng);
}

}  // namespace dpgd::rng
