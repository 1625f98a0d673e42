#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpgd/nn.hpp"
#include "dpgd/projection.hpp"

namespace dpgd {

struct ClassifierConfig {
  std::size_t channels = 3;
  std::size_t resolution = 32;
  std::size_t classes = 4;
  std::size_t widths[3] = {16, 32, 64};
};

/// Three-stage residual convnet. Convolutions are numbered conv1..conv9 in
/// forward order; their raw outputs are the feature handles.
template <class T>
class Classifier {
 public:
  static constexpr std::size_t kConvs = 9;

  Classifier(ClassifierConfig cfg, std::uint64_t seed, std::string recipe = "standard")
      : cfg_(cfg), recipe_(std::move(recipe)) {
    if (cfg_.resolution % 4) throw std::invalid_argument("classifier: resolution must be divisible by 4");
    if (cfg_.classes < 2) throw std::invalid_argument("classifier: need at least two classes");
    auto eng = rng::stream(seed, 0, rng::Purpose::init);
    const auto* w = cfg_.widths;
    auto conv = [&](std::size_t idx, std::size_t in, std::size_t out, std::size_t stride, double gain) {
      convs_[idx - 1] = nn::Conv2d<T>(params_, "conv" + std::to_string(idx), in, out, 3, eng, stride, gain);
    };
    conv(1, cfg_.channels, w[0], 1, 1.0);
    conv(2, w[0], w[0], 1, 1.0);
    conv(3, w[0], w[0], 1, 0.5);
    conv(4, w[0], w[1], 2, 1.0);
    conv(5, w[1], w[1], 1, 1.0);
    conv(6, w[1], w[1], 1, 0.5);
    conv(7, w[1], w[2], 2, 1.0);
    conv(8, w[2], w[2], 1, 1.0);
    conv(9, w[2], w[2], 1, 0.5);
    head_ = nn::Linear<T>(params_, "head", w[2], cfg_.classes, eng);
  }

  /// x: (N, C, H, W) in [0, 1] -> (N, classes). When `taps` is non-null the
  /// raw output of every convolution is stored there (index = conv number - 1).
  Var<T> logits(const Var<T>& x, std::vector<Var<T>>* taps = nullptr) const {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != cfg_.channels || s[2] != cfg_.resolution || s[3] != cfg_.resolution)
      throw ResolutionError("classifier expects (N," + std::to_string(cfg_.channels) + "," +
                            std::to_string(cfg_.resolution) + "," + std::to_string(cfg_.resolution) + "), got " +
                            shape_str(s));
    if (taps) taps->assign(kConvs, Var<T>());
    auto run = [&](std::size_t idx, const Var<T>& in) {
      Var<T> o = convs_[idx - 1](in);
      if (taps) (*taps)[idx - 1] = o;
      return o;
    };
    auto block = [&](std::size_t first, const Var<T>& h) {
      Var<T> r = run(first + 1, ops::silu(run(first, h)));
      return ops::silu(ops::add(h, r));
    };
    Var<T> h = ops::silu(run(1, ops::affine(x, T(2), T(-1))));
    h = block(2, h);
    h = ops::silu(run(4, h));
    h = block(5, h);
    h = ops::silu(run(7, h));
    h = block(8, h);
    return head_(ops::global_avg_pool(h));
  }

  std::vector<int> predict(const Tensor<T>& x) const {
    NoGradGuard ng;
    const Var<T> z = logits(Var<T>::constant(x));
    const std::size_t N = z.shape()[0], K = z.shape()[1];
    std::vector<int> out(N);
    for (std::size_t n = 0; n < N; ++n) {
      const T* row = z.value().data() + n * K;
      out[n] = int(std::max_element(row, row + K) - row);
    }
    return out;
  }
  int predict_one(const Tensor<T>& x) const { return predict(x).at(0); }

  const ClassifierConfig& config() const { return cfg_; }
  std::size_t num_classes() const { return cfg_.classes; }
  const std::string& recipe() const { return recipe_; }
  void set_recipe(std::string r) { recipe_ = std::move(r); }
  std::size_t conv_channels(std::size_t idx) const { return convs_.at(idx - 1).out_channels(); }
  nn::ParameterList<T>& params() { return params_; }
  const nn::ParameterList<T>& params() const { return params_; }

 private:
  ClassifierConfig cfg_;
  std::string recipe_;
  nn::ParameterList<T> params_;
  std::array<nn::Conv2d<T>, kConvs> convs_;
  nn::Linear<T> head_;
};

template <class T>
Tensor<T> softmax(const Tensor<T>& logits) {
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  Tensor<T> p(logits.shape());
  for (std::size_t n = 0; n < N; ++n) {
    const T* z = logits.data() + n * K;
    const T m = *std::max_element(z, z + K);
    double s = 0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(double(z[k] - m));
    for (std::size_t k = 0; k < K; ++k) p[n * K + k] = T(std::exp(double(z[k] - m)) / s);
  }
  return p;
}

/// Layered view of a trained classifier's convolutional trunk.
template <class T>
struct FeatureExtractor {
  const Classifier<T>* backbone = nullptr;
  std::vector<std::string> style_handles{"conv1", "conv2", "conv3", "conv4", "conv5"};
  std::vector<std::string> content_handles{"conv4"};

  explicit FeatureExtractor(const Classifier<T>& c) : backbone(&c) {}

  std::size_t channels(const std::string& handle) const { return backbone->conv_channels(handle_index(handle)); }

  static std::size_t handle_index(const std::string& h) {
    if (h.size() == 5 && h.rfind("conv", 0) == 0 && h[4] >= '1' && h[4] <= '9') return std::size_t(h[4] - '0');
    throw std::invalid_argument("unknown feature handle '" + h + "' (expected conv1..conv9)");
  }
};

/// Feature maps at `handles`, in handle order, differentiable in x.
template <class T>
std::vector<Var<T>> extract_features(const FeatureExtractor<T>& fx, const Var<T>& x,
                                     const std::vector<std::string>& handles) {
  std::vector<std::size_t> idx;
  for (const auto& h : handles) idx.push_back(FeatureExtractor<T>::handle_index(h));
  std::vector<Var<T>> taps;
  fx.backbone->logits(x, &taps);
  std::vector<Var<T>> out;
  for (std::size_t i : idx) out.push_back(taps[i - 1]);
  return out;
}

struct ClassifierTrainConfig {
  std::size_t epochs = 10;
  std::size_t batch = 64;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  bool augment = true;  // brightness jitter and horizontal flips
  bool adversarial = false;
  double adv_eps = 8.0 / 255.0, adv_eta = 2.0 / 255.0;
  std::size_t adv_steps = 5;
};

struct ClassifierTrainLog {
  std::vector<double> loss;     // per step
  std::vector<double> accuracy; // per epoch, on the (possibly perturbed) training batches
};

/// ℓ∞ sign-gradient ascent on the batch loss, used inside adversarial training.
template <class T>
Tensor<T> linf_pgd_batch(const Classifier<T>& model, const Tensor<T>& x, std::span<const int> y, double eps,
                         double eta, std::size_t steps) {
  Tensor<T> xa = x;
  for (std::size_t s = 0; s < steps; ++s) {
    Var<T> xv = Var<T>::leaf(xa);
    Var<T> loss = ops::cross_entropy(model.logits(xv), y);
    loss.backward();
    const Tensor<T>& g = xv.grad();
    if (g.empty()) break;
    for (std::size_t i = 0; i < xa.size(); ++i) xa[i] += T(eta) * sign0(g[i]);
    xa = project(xa, x, eps, Norm::linf);
  }
  return xa;
}

template <class T>
ClassifierTrainLog train_classifier(Classifier<T>& model, const Tensor<T>& images, const std::vector<int>& labels,
                                    const ClassifierTrainConfig& cfg) {
  const std::size_t N = labels.size();
  if (N == 0 || images.rank() != 4 || images.dim(0) != N)
    throw std::invalid_argument("train_classifier: empty dataset or image/label count mismatch");
  for (int y : labels)
    if (y < 0 || std::size_t(y) >= model.num_classes()) throw std::invalid_argument("train_classifier: label out of range");
  const auto& mc = model.config();
  if (images.dim(1) != mc.channels || images.dim(2) != mc.resolution || images.dim(3) != mc.resolution)
    throw ResolutionError("train_classifier: images " + shape_str(images.shape()) + " do not match model");
  model.set_recipe(cfg.adversarial ? "adversarial" : "standard");

  nn::Adam<T> opt({cfg.lr});
  ClassifierTrainLog log;
  const std::size_t per = images.size() / N, H = images.dim(2), W = images.dim(3);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto eng = rng::stream(cfg.seed, epoch, rng::Purpose::batch);
    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), eng);
    std::size_t correct = 0;
    for (std::size_t b0 = 0; b0 < N; b0 += cfg.batch) {
      const std::size_t nb = std::min(cfg.batch, N - b0);
      Shape s = images.shape();
      s[0] = nb;
      Tensor<T> xb(s);
      std::vector<int> yb(nb);
      for (std::size_t j = 0; j < nb; ++j) {
        const std::size_t src = order[b0 + j];
        yb[j] = labels[src];
        const T* in = images.data() + src * per;
        T* out = xb.data() + j * per;
        if (!cfg.augment) {
          std::copy_n(in, per, out);
          continue;
        }
        const bool flip = rng::uniform(eng, 0, 1) < 0.5;
        const T gain = rng::uniform(eng, 0, 1) < 0.5 ? T(rng::uniform(eng, 0.6, 1.4)) : T(1);
        for (std::size_t c = 0; c < per / (H * W); ++c)
          for (std::size_t i = 0; i < H; ++i)
            for (std::size_t k = 0; k < W; ++k) {
              const T v = in[(c * H + i) * W + (flip ? W - 1 - k : k)];
              out[(c * H + i) * W + k] = std::clamp(v * gain, T(0), T(1));
            }
      }
      if (cfg.adversarial) xb = linf_pgd_batch(model, xb, yb, cfg.adv_eps, cfg.adv_eta, cfg.adv_steps);

      nn::TrainableScope<T> scope(model.params(), true);
      Var<T> z = model.logits(Var<T>::constant(xb));
      Var<T> loss = ops::cross_entropy(z, yb);
      const double l = double(loss.value()[0]);
      if (!std::isfinite(l)) throw NonFiniteError("train_classifier: non-finite loss at step " + std::to_string(step));
      const std::size_t K = model.num_classes();
      for (std::size_t j = 0; j < nb; ++j) {
        const T* row = z.value().data() + j * K;
        correct += std::size_t(std::max_element(row, row + K) - row) == std::size_t(yb[j]);
      }
      loss.backward();
      opt.step(model.params());
      log.loss.push_back(l);
      ++step;
    }
    log.accuracy.push_back(double(correct) / double(N));
  }
  return log;
}

}  // namespace dpgd
