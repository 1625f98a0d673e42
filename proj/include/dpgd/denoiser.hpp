#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dpgd/nn.hpp"
#include "dpgd/schedule.hpp"

namespace dpgd {

/// ε̂(x_t, t). Implementations must be deterministic and differentiable in x_t.
template <class T>
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  /// x_t: (N, C, H, W) in the working range; one absolute step per sample.
  virtual Var<T> forward(const Var<T>& x_t, std::span<const std::size_t> steps) const = 0;
};

template <class T>
Var<T> predict_noise(const NoisePredictor<T>& model, const Var<T>& x_t, std::size_t t) {
  std::vector<std::size_t> steps(x_t.shape().at(0), t);
  return model.forward(x_t, steps);
}

struct UNetConfig {
  std::size_t channels = 3;
  std::size_t resolution = 32;
  std::vector<std::size_t> widths{32, 64, 64};
  std::size_t temb_dim = 64;
  std::size_t max_groups = 8;
};

namespace detail {

template <class T>
Tensor<T> timestep_embedding(std::span<const std::size_t> steps, std::size_t dim) {
  const std::size_t half = dim / 2;
  Tensor<T> out({steps.size(), dim});
  for (std::size_t n = 0; n < steps.size(); ++n)
    for (std::size_t i = 0; i < half; ++i) {
      const double f = std::exp(-std::log(10000.0) * double(i) / double(half));
      const double a = double(steps[n]) * f;
      out[n * dim + i] = T(std::sin(a));
      out[n * dim + half + i] = T(std::cos(a));
    }
  return out;
}

template <class T>
struct ResBlock {
  nn::GroupNorm<T> gn1, gn2;
  nn::Conv2d<T> conv1, conv2, skip;
  nn::Linear<T> temb;
  bool has_skip = false;

  ResBlock() = default;
  ResBlock(nn::ParameterList<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t emb,
           std::size_t groups, rng::Engine& eng)
      : gn1(ps, name + ".gn1", in, groups),
        gn2(ps, name + ".gn2", out, groups),
        conv1(ps, name + ".conv1", in, out, 3, eng),
        conv2(ps, name + ".conv2", out, out, 3, eng, 1, 0.5),
        temb(ps, name + ".temb", emb, out, eng),
        has_skip(in != out) {
    if (has_skip) skip = nn::Conv2d<T>(ps, name + ".skip", in, out, 1, eng);
  }

  Var<T> operator()(const Var<T>& x, const Var<T>& e) const {
    Var<T> h = conv1(ops::silu(gn1(x)));
    h = ops::add_channel(h, temb(e));
    h = conv2(ops::silu(gn2(h)));
    return ops::add(has_skip ? skip(x) : x, h);
  }
};

}  // namespace detail

/// Convolutional encoder-decoder with skip connections and a sinusoidal
/// timestep embedding. One residual block per resolution level.
template <class T>
class UNet final : public NoisePredictor<T> {
 public:
  UNet(UNetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    const std::size_t L = cfg_.widths.size();
    if (L < 1) throw std::invalid_argument("unet: need at least one level");
    if (cfg_.resolution % (std::size_t{1} << (L - 1)))
      throw std::invalid_argument("unet: resolution not divisible by 2^(levels-1)");
    if (cfg_.temb_dim < 2 || cfg_.temb_dim % 2) throw std::invalid_argument("unet: temb_dim must be even");
    auto eng = rng::stream(seed, 0, rng::Purpose::init);
    const std::size_t E = cfg_.temb_dim, G = cfg_.max_groups;
    emb1_ = nn::Linear<T>(params_, "temb.0", E, E, eng);
    emb2_ = nn::Linear<T>(params_, "temb.1", E, E, eng);
    in_ = nn::Conv2d<T>(params_, "in", cfg_.channels, cfg_.widths[0], 3, eng);
    std::size_t ch = cfg_.widths[0];
    for (std::size_t l = 0; l < L; ++l) {
      down_.emplace_back(params_, "down" + std::to_string(l), ch, cfg_.widths[l], E, G, eng);
      ch = cfg_.widths[l];
    }
    mid_ = detail::ResBlock<T>(params_, "mid", ch, ch, E, G, eng);
    for (std::size_t i = 0; i < L; ++i) {
      const std::size_t l = L - 1 - i;
      up_.emplace_back(params_, "up" + std::to_string(l), ch + cfg_.widths[l], cfg_.widths[l], E, G, eng);
      ch = cfg_.widths[l];
    }
    out_norm_ = nn::GroupNorm<T>(params_, "out.gn", ch, G);
    out_ = nn::Conv2d<T>(params_, "out", ch, cfg_.channels, 3, eng, 1, 0.25);
  }

  Var<T> forward(const Var<T>& x, std::span<const std::size_t> steps) const override {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != cfg_.channels || s[2] != cfg_.resolution || s[3] != cfg_.resolution)
      throw ResolutionError("denoiser expects (N," + std::to_string(cfg_.channels) + "," +
                            std::to_string(cfg_.resolution) + "," + std::to_string(cfg_.resolution) + "), got " +
                            shape_str(s));
    if (steps.size() != s[0]) throw ShapeError("denoiser: one step index per sample required");
    Var<T> e = Var<T>::constant(detail::timestep_embedding<T>(steps, cfg_.temb_dim));
    e = ops::silu(emb2_(ops::silu(emb1_(e))));

    const std::size_t L = cfg_.widths.size();
    std::vector<Var<T>> skips;
    Var<T> h = in_(x);
    for (std::size_t l = 0; l < L; ++l) {
      h = down_[l](h, e);
      skips.push_back(h);
      if (l + 1 < L) h = ops::avg_pool2(h);
    }
    h = mid_(h, e);
    for (std::size_t i = 0; i < L; ++i) {
      const std::size_t l = L - 1 - i;
      if (i > 0) h = ops::upsample_nearest2(h);
      h = up_[i](ops::concat_channels(h, skips[l]), e);
    }
    return out_(ops::silu(out_norm_(h)));
  }

  const UNetConfig& config() const { return cfg_; }
  nn::ParameterList<T>& params() { return params_; }
  const nn::ParameterList<T>& params() const { return params_; }

 private:
  UNetConfig cfg_;
  nn::ParameterList<T> params_;
  nn::Linear<T> emb1_, emb2_;
  nn::Conv2d<T> in_, out_;
  nn::GroupNorm<T> out_norm_;
  std::vector<detail::ResBlock<T>> down_, up_;
  detail::ResBlock<T> mid_;
};

struct DenoiserTrainConfig {
  std::size_t steps = 1000;
  std::size_t batch = 32;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0 disables
  std::size_t loss_window = 50;
};

/// Everything needed to continue a training run bit-exactly.
struct TrainState {
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  std::uint64_t adam_steps = 0;
  std::vector<Tensor<float>> adam_m, adam_v;
  std::deque<double> loss_window;
  std::vector<double> loss_history;  // loss at every step

  double running_loss() const {
    if (loss_window.empty()) return 0.0;
    return std::accumulate(loss_window.begin(), loss_window.end(), 0.0) / double(loss_window.size());
  }
};

/// The ε-regression loss on one batch with per-sample steps and noise.
template <class T>
Var<T> denoising_loss(const NoisePredictor<T>& model, const NoiseSchedule& sched, const Tensor<T>& x0_working,
                      std::span<const std::size_t> steps, const Tensor<T>& noise) {
  const auto& s = x0_working.shape();
  const std::size_t per = shape_numel(s) / s[0];
  Tensor<T> xt(s);
  for (std::size_t n = 0; n < s[0]; ++n) {
    const double ab = sched.alpha_bar(steps[n]);
    const T a = T(std::sqrt(ab)), b = T(std::sqrt(1.0 - ab));
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) xt[i] = a * x0_working[i] + b * noise[i];
  }
  return ops::mse(model.forward(Var<T>::constant(std::move(xt)), steps), noise);
}

/// Draws the step-`k` minibatch: indices, steps, and noise come from a
/// stream addressed by the step counter so resumed runs continue exactly.
template <class T>
void draw_denoiser_batch(const Tensor<T>& data, const NoiseSchedule& sched, std::uint64_t seed, std::uint64_t k,
                         std::size_t batch, Tensor<T>& x0_working, std::vector<std::size_t>& steps, Tensor<T>& noise) {
  auto eng = rng::stream(seed, k, rng::Purpose::batch);
  const std::size_t N = data.dim(0);
  Shape s = data.shape();
  s[0] = batch;
  const std::size_t per = shape_numel(s) / batch;
  x0_working = Tensor<T>(s);
  steps.resize(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t idx = rng::index(eng, N);
    for (std::size_t i = 0; i < per; ++i) x0_working[b * per + i] = T(2) * data[idx * per + i] - T(1);
    steps[b] = 1 + rng::index(eng, sched.steps());
  }
  noise = rng::normal<T>(s, eng);
}

/// Trains `model` in place from `state` (fresh or restored) until
/// `cfg.steps` total steps. `data` holds [0,1] images (N, C, H, W).
template <class T>
void train_denoiser(UNet<T>& model, const Tensor<T>& data, const NoiseSchedule& sched, const DenoiserTrainConfig& cfg,
                    TrainState& state,
                    const std::function<void(const UNet<T>&, const TrainState&)>& on_checkpoint = {}) {
  if (data.rank() != 4 || data.dim(0) == 0) throw std::invalid_argument("train_denoiser: empty dataset");
  if (cfg.batch == 0 || cfg.lr <= 0) throw std::invalid_argument("train_denoiser: batch and lr must be positive");
  const auto& mc = model.config();
  if (data.dim(1) != mc.channels || data.dim(2) != mc.resolution || data.dim(3) != mc.resolution)
    throw ResolutionError("train_denoiser: dataset " + shape_str(data.shape()) + " does not match model resolution");
  if (state.step == 0) state.seed = cfg.seed;

  nn::TrainableScope<T> scope(model.params(), true);
  nn::Adam<T> opt({cfg.lr});
  if (state.adam_steps) {
    std::vector<Tensor<T>> m, v;
    for (const auto& t : state.adam_m) m.push_back(t.template cast<T>());
    for (const auto& t : state.adam_v) v.push_back(t.template cast<T>());
    opt.restore(state.adam_steps, std::move(m), std::move(v));
  }
  auto sync = [&] {
    state.adam_steps = opt.steps();
    state.adam_m.clear();
    state.adam_v.clear();
    for (const auto& t : opt.first_moments()) state.adam_m.push_back(t.template cast<float>());
    for (const auto& t : opt.second_moments()) state.adam_v.push_back(t.template cast<float>());
  };

  Tensor<T> x0, noise;
  std::vector<std::size_t> steps;
  while (state.step < cfg.steps) {
    draw_denoiser_batch(data, sched, state.seed, state.step, cfg.batch, x0, steps, noise);
    Var<T> loss = denoising_loss<T>(model, sched, x0, steps, noise);
    const double l = double(loss.value()[0]);
    if (!std::isfinite(l))
      throw NonFiniteError("train_denoiser: non-finite loss at step " + std::to_string(state.step));
    loss.backward();
    opt.step(model.params());
    ++state.step;
    state.loss_history.push_back(l);
    state.loss_window.push_back(l);
    while (state.loss_window.size() > cfg.loss_window) state.loss_window.pop_front();
    if (cfg.checkpoint_every && state.step % cfg.checkpoint_every == 0 && on_checkpoint) {
      sync();
      on_checkpoint(model, state);
    }
  }
  sync();
}

}  // namespace dpgd
