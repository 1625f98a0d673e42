#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dpgd {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Image size or channel count differs from what a model was built for.
class ResolutionError : public ShapeError {
 public:
  using ShapeError::ShapeError;
};

/// Loss or gradient became NaN/Inf.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace memory {

// Live bytes held by Tensor storage across the process, plus a resettable
// high-water mark. Used to compare the autograd footprint of attack variants.
inline std::atomic<std::int64_t>& live_bytes() {
  static std::atomic<std::int64_t> v{0};
  return v;
}
inline std::atomic<std::int64_t>& peak_bytes_slot() {
  static std::atomic<std::int64_t> v{0};
  return v;
}
inline void note_alloc(std::int64_t n) {
  const std::int64_t now = live_bytes().fetch_add(n) + n;
  std::int64_t prev = peak_bytes_slot().load();
  while (now > prev && !peak_bytes_slot().compare_exchange_weak(prev, now)) {
  }
}
inline void note_free(std::int64_t n) { live_bytes().fetch_sub(n); }
inline std::int64_t current() { return live_bytes().load(); }
inline std::int64_t peak() { return peak_bytes_slot().load(); }
inline void reset_peak() { peak_bytes_slot().store(live_bytes().load()); }

template <class T>
struct TrackingAllocator {
  using value_type = T;
  // Fixed alignment keeps vectorized reductions bitwise reproducible.
  static constexpr std::size_t kAlign = 64;
  TrackingAllocator() noexcept = default;
  template <class U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) {
    note_alloc(static_cast<std::int64_t>(n * sizeof(T)));
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kAlign}));
  }
  void deallocate(T* p, std::size_t n) noexcept {
    note_free(static_cast<std::int64_t>(n * sizeof(T)));
    ::operator delete(p, std::align_val_t{kAlign});
  }
  template <class U>
  bool operator==(const TrackingAllocator<U>&) const noexcept { return true; }
};

}  // namespace memory

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense, contiguous, row-major array with value semantics.
///
/// Image batches use NCHW layout. Storage is counted by the memory tracker.
template <class T>
class Tensor {
 public:
  using value_type = T;
  using Storage = std::vector<T, memory::TrackingAllocator<T>>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::span<const T> values) : shape_(std::move(shape)) {
    if (values.size() != shape_numel(shape_))
      throw ShapeError("tensor: value count does not match shape " + shape_str(shape_));
    data_.assign(values.begin(), values.end());
  }
  Tensor(Shape shape, std::initializer_list<T> values)
      : Tensor(std::move(shape), std::span<const T>(values.begin(), values.size())) {}

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return {data_.data(), data_.size()}; }
  std::span<const T> values() const noexcept { return {data_.data(), data_.size()}; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  Tensor reshaped(Shape s) const& {
    Tensor out = *this;
    out.reshape(std::move(s));
    return out;
  }
  Tensor reshaped(Shape s) && {
    reshape(std::move(s));
    return std::move(*this);
  }
  void reshape(Shape s) {
    if (shape_numel(s) != data_.size())
      throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(s));
    shape_ = std::move(s);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  /// Sample `n` of a batch as a (1, C, H, W) tensor.
  Tensor sample(std::size_t n) const {
    Shape s = shape_;
    s.at(0) = 1;
    const std::size_t per = shape_numel(s);
    Tensor out(s);
    std::copy_n(data_.begin() + n * per, per, out.data());
    return out;
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  Shape shape_;
  Storage data_;
};

using Image = Tensor<float>;  // (1, C, H, W), values in [0, 1]
using Mask = Tensor<float>;   // (H, W), values in {0, 1}

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": shape " + shape_str(a) + " vs " + shape_str(b));
}

template <class T>
Tensor<T> stack_samples(std::span<const Tensor<T>> items) {
  if (items.empty()) throw ShapeError("stack_samples: empty input");
  Shape s = items[0].shape();
  s.at(0) = 0;
  for (const auto& it : items) {
    require_same_shape(Shape(it.shape().begin() + 1, it.shape().end()),
                       Shape(items[0].shape().begin() + 1, items[0].shape().end()), "stack_samples");
    s[0] += it.dim(0);
  }
  Tensor<T> out(s);
  std::size_t off = 0;
  for (const auto& it : items) {
    std::copy_n(it.data(), it.size(), out.data() + off);
    off += it.size();
  }
  return out;
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <class T>
double l2_norm(const Tensor<T>& a) {
  double s = 0;
  for (T v : a.values()) s += double(v) * double(v);
  return std::sqrt(s);
}

template <class T>
bool all_finite(const Tensor<T>& a) {
  return std::all_of(a.values().begin(), a.values().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace dpgd
