#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dpgd/ops.hpp"
#include "dpgd/rng.hpp"

namespace dpgd::nn {

/// Named, ordered collection of trainable tensors owned by one model.
template <class T>
class ParameterList {
 public:
  Var<T> add(std::string name, Tensor<T> init) {
    for (const auto& [n, _] : items_)
      if (n == name) throw std::logic_error("duplicate parameter name " + name);
    Var<T> v(std::move(init), trainable_);
    items_.emplace_back(std::move(name), v);
    return v;
  }

  const std::vector<std::pair<std::string, Var<T>>>& items() const { return items_; }

  void set_trainable(bool on) {
    trainable_ = on;
    for (auto& [_, v] : items_) {
      v.set_requires_grad(on);
      v.zero_grad();
    }
  }
  bool trainable() const { return trainable_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : items_) n += v.size();
    return n;
  }

  std::map<std::string, Tensor<float>> export_float() const {
    std::map<std::string, Tensor<float>> out;
    for (const auto& [n, v] : items_) out.emplace(n, v.value().template cast<float>());
    return out;
  }

  void import_float(const std::map<std::string, Tensor<float>>& src) {
    for (auto& [n, v] : items_) {
      auto it = src.find(n);
      if (it == src.end()) throw std::runtime_error("checkpoint is missing parameter " + n);
      require_same_shape(it->second.shape(), v.shape(), n.c_str());
      v.mutable_value() = it->second.template cast<T>();
    }
    if (src.size() != items_.size()) throw std::runtime_error("checkpoint has unexpected extra parameters");
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> items_;
  bool trainable_ = false;
};

/// Scoped toggle of a model's trainable flag.
template <class T>
class TrainableScope {
 public:
  TrainableScope(ParameterList<T>& p, bool on) : p_(p), prev_(p.trainable()) { p_.set_trainable(on); }
  ~TrainableScope() { p_.set_trainable(prev_); }
  TrainableScope(const TrainableScope&) = delete;
  TrainableScope& operator=(const TrainableScope&) = delete;

 private:
  ParameterList<T>& p_;
  bool prev_;
};

template <class T>
struct Conv2d {
  Var<T> weight, bias;
  std::size_t stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(ParameterList<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
         rng::Engine& eng, std::size_t stride_ = 1, double gain = 1.0)
      : stride(stride_), pad(k / 2) {
    const double std = gain * std::sqrt(2.0 / double(in * k * k));
    weight = ps.add(name + ".weight", rng::normal<T>({out, in, k, k}, eng, std));
    bias = ps.add(name + ".bias", Tensor<T>({out}));
  }
  Var<T> operator()(const Var<T>& x) const { return ops::conv2d(x, weight, bias, stride, pad); }
  std::size_t out_channels() const { return weight.shape()[0]; }
};

template <class T>
struct Linear {
  Var<T> weight, bias;

  Linear() = default;
  Linear(ParameterList<T>& ps, const std::string& name, std::size_t in, std::size_t out, rng::Engine& eng,
         double gain = 1.0) {
    const double std = gain * std::sqrt(1.0 / double(in));
    weight = ps.add(name + ".weight", rng::normal<T>({out, in}, eng, std));
    bias = ps.add(name + ".bias", Tensor<T>({out}));
  }
  Var<T> operator()(const Var<T>& x) const { return ops::linear(x, weight, bias); }
};

template <class T>
struct GroupNorm {
  Var<T> gamma, beta;
  std::size_t groups = 1;

  GroupNorm() = default;
  GroupNorm(ParameterList<T>& ps, const std::string& name, std::size_t channels, std::size_t max_groups) {
    groups = std::min(max_groups, channels);
    while (channels % groups) --groups;
    gamma = ps.add(name + ".gamma", Tensor<T>({channels}, T(1)));
    beta = ps.add(name + ".beta", Tensor<T>({channels}));
  }
  Var<T> operator()(const Var<T>& x) const { return ops::group_norm(x, groups, gamma, beta); }
};

/// Adaptive-moment optimizer over a ParameterList.
template <class T>
class Adam {
 public:
  struct Options {
    double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  };

  Adam() = default;
  explicit Adam(Options o) : opt_(o) {}

  void step(ParameterList<T>& ps) {
    if (m_.empty()) {
      for (const auto& [_, v] : ps.items()) {
        m_.emplace_back(v.shape());
        v_.emplace_back(v.shape());
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, double(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, double(t_));
    auto items = ps.items();
    for (std::size_t p = 0; p < items.size(); ++p) {
      Var<T> var = items[p].second;
      const Tensor<T>& g = var.grad();
      if (g.empty()) continue;
      Tensor<T>& w = var.mutable_value();
      auto& m = m_[p];
      auto& v = v_[p];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = T(opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g[i]);
        v[i] = T(opt_.beta2 * v[i] + (1.0 - opt_.beta2) * double(g[i]) * g[i]);
        const double mh = m[i] / c1, vh = v[i] / c2;
        w[i] = T(w[i] - opt_.lr * mh / (std::sqrt(vh) + opt_.eps));
      }
      var.zero_grad();
    }
  }

  /// Single-tensor variant used for input-space optimization.
  void step(Tensor<T>& w, const Tensor<T>& g) {
    if (m_.empty()) {
      m_.emplace_back(w.shape());
      v_.emplace_back(w.shape());
    }
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, double(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, double(t_));
    auto& m = m_[0];
    auto& v = v_[0];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = T(opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g[i]);
      v[i] = T(opt_.beta2 * v[i] + (1.0 - opt_.beta2) * double(g[i]) * g[i]);
      const double mh = m[i] / c1, vh = v[i] / c2;
      w[i] = T(w[i] - opt_.lr * mh / (std::sqrt(vh) + opt_.eps));
    }
  }

  std::uint64_t steps() const { return t_; }
  const Options& options() const { return opt_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }
  void restore(std::uint64_t t, std::vector<Tensor<T>> m, std::vector<Tensor<T>> v) {
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  Options opt_{};
  std::uint64_t t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

}  // namespace dpgd::nn
