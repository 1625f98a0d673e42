#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <new>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpgd/models.hpp"
#include "dpgd/projection.hpp"
#include "dpgd/sampler.hpp"

namespace dpgd {

/// Raised when backprop through the sampler chain cannot be allocated.
class MemoryBudgetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AttackConfig {
  double eps = 16.0 / 255.0;
  double eta = 2.0 / 255.0;
  std::size_t n = 10;
  Norm norm = Norm::linf;
  std::size_t K = 3;      // SDEdit reverse steps
  std::size_t ddim = 50;  // respaced step count T_s
  std::optional<int> target;
  std::uint64_t seed = 0;
  bool stochastic = false;

  void validate() const {
    if (!(eta >= 0 && eta <= eps && eps <= 1)) throw std::invalid_argument("attack: need 0 <= eta <= eps <= 1");
    if (n < 1) throw std::invalid_argument("attack: n must be >= 1");
  }
  SdeditConfig sdedit() const { return {K, stochastic, seed}; }
};

struct IterationRecord {
  double loss = 0;
  int pred = -1;  // prediction on the classifier input at this iterate
  bool success = false;
};

struct AttackOutput {
  Image x;     // clean input (projection anchor)
  Image x_n;   // bounded sample
  Image x_n0;  // purified sample
  int label = -1;
  std::optional<int> target;
  int pred_n = -1, pred_n0 = -1;
  bool success_n = false, success_n0 = false;
  std::vector<IterationRecord> trace;
  double ball_excess_n0 = 0;  // how far x_n0 leaves the ε-ball (0 if inside)
  double seconds = 0;
  std::int64_t peak_bytes = 0;
};

inline bool is_success(int pred, int label, const std::optional<int>& target) {
  return target ? pred == *target : pred != label;
}

/// Success of the purified output after `n` iterations, read from a longer
/// run: iterate n is classified through the same purification stream the
/// final pass of an n-iteration run uses.
inline bool purified_success_at(const AttackOutput& o, std::size_t n) {
  if (n == o.trace.size()) return o.success_n0;
  if (n >= 1 && n < o.trace.size()) return o.trace[n].success;
  throw std::out_of_range("purified_success_at: n outside the recorded run");
}

namespace detail {

using Clock = std::chrono::steady_clock;

// Maps an iterate to what the classifier sees; stream = iteration index.
using Purifier = std::function<Var<float>(const Var<float>&, std::uint64_t)>;

enum class GradMode { through_purifier, at_purified };

inline std::optional<Tensor<float>> mask_plane(const Mask* m, const Image& x) {
  if (!m) return std::nullopt;
  if (m->rank() != 2 || m->dim(0) != x.dim(2) || m->dim(1) != x.dim(3))
    throw ShapeError("attack mask " + shape_str(m->shape()) + " vs image " + shape_str(x.shape()));
  return *m;
}

inline Var<float> compose(const Var<float>& x0, const Image& xc, const std::optional<Tensor<float>>& mask) {
  Var<float> in = mask ? ops::where_mask(*mask, x0, Var<float>::constant(xc)) : x0;
  return ops::clamp(in, 0.0f, 1.0f);
}

inline double ball_excess(const Image& a, const Image& x, double eps, Norm norm) {
  if (norm == Norm::linf) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(x[i])));
    return std::max(0.0, m - eps);
  }
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (double(a[i]) - double(x[i])) * (double(a[i]) - double(x[i]));
  return std::max(0.0, std::sqrt(s) - eps);
}

// Shared PGD-family loop. All variants differ only in `purify` and `mode`.
inline AttackOutput run_loop(const Classifier<float>& clf, const Image& x, int y, const AttackConfig& cfg,
                             const Mask* mask, const Purifier& purify, GradMode mode, const Image* xc_override = nullptr) {
  cfg.validate();
  if (x.rank() != 4 || x.dim(0) != 1) throw ShapeError("attack expects a single (1,C,H,W) image");
  const auto plane = mask_plane(mask, x);
  const Image& xc = xc_override ? *xc_override : x;
  const std::vector<int> yv{cfg.target ? *cfg.target : y};
  const float dir = cfg.target ? -1.0f : 1.0f;

  const auto t0 = Clock::now();
  const std::int64_t base = memory::current();
  memory::reset_peak();

  AttackOutput out;
  out.x = x;
  out.label = y;
  out.target = cfg.target;
  Image xt = x;
  const std::size_t plane_size = x.dim(2) * x.dim(3);
  for (std::size_t t = 0; t < cfg.n; ++t) {
    Tensor<float> g;
    IterationRecord rec;
    try {
      Var<float> logits;
      Var<float> wrt;
      if (mode == GradMode::through_purifier) {
        wrt = Var<float>::leaf(xt);
        logits = clf.logits(compose(purify(wrt, t), xc, plane));
      } else {
        Tensor<float> x0;
        {
          NoGradGuard ng;
          x0 = purify(Var<float>::constant(xt), t).value();
        }
        wrt = Var<float>::leaf(std::move(x0));
        logits = clf.logits(compose(wrt, xc, plane));
      }
      Var<float> loss = ops::cross_entropy(logits, yv);
      rec.loss = loss.value()[0];
      const float* z = logits.value().data();
      rec.pred = int(std::max_element(z, z + clf.num_classes()) - z);
      rec.success = is_success(rec.pred, y, cfg.target);
      loss.backward();
      g = wrt.grad();
    } catch (const std::bad_alloc&) {
      throw MemoryBudgetError("attack: out of memory backpropagating through K=" + std::to_string(cfg.K) +
                              " sampler steps at " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)));
    }
    if (g.empty()) g = Tensor<float>(xt.shape());
    if (!all_finite(g) || !std::isfinite(rec.loss))
      throw NonFiniteError("attack: non-finite gradient at iteration " + std::to_string(t) +
                           " (loss " + std::to_string(rec.loss) + ")");
    if (plane)
      for (std::size_t i = 0; i < g.size(); ++i)
        if ((*plane)[i % plane_size] == 0.0f) g[i] = 0.0f;

    Image cand = xt;
    if (cfg.norm == Norm::linf) {
      for (std::size_t i = 0; i < cand.size(); ++i) cand[i] += dir * float(cfg.eta) * sign0(g[i]);
    } else {
      const double gn = l2_norm(g);
      if (gn > 0)
        for (std::size_t i = 0; i < cand.size(); ++i) cand[i] += float(dir * cfg.eta * double(g[i]) / gn);
    }
    xt = project(cand, x, cfg.eps, cfg.norm);
    out.trace.push_back(rec);
  }

  out.x_n = xt;
  {
    NoGradGuard ng;
    out.x_n0 = purify(Var<float>::constant(xt), cfg.n).value();
    out.x_n0 = compose(Var<float>::constant(out.x_n0), xc, plane).value();
  }
  out.pred_n = clf.predict_one(xt);
  out.pred_n0 = clf.predict_one(out.x_n0);
  out.success_n = is_success(out.pred_n, y, cfg.target);
  out.success_n0 = is_success(out.pred_n0, y, cfg.target);
  out.ball_excess_n0 = ball_excess(out.x_n0, x, cfg.eps, cfg.norm);
  out.peak_bytes = memory::peak() - base;
  out.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return out;
}

inline Purifier sdedit_purifier(const NoisePredictor<float>& model, const RespacedSchedule& sched,
                                const AttackConfig& cfg, const Mask* mask, const Image& anchor) {
  const SdeditConfig sc = cfg.sdedit();
  if (mask) {
    RepaintContext ctx{*mask, anchor};
    return [&model, &sched, sc, ctx](const Var<float>& v, std::uint64_t t) {
      return rsdedit(model, ctx, v, sched, sc, t);
    };
  }
  return [&model, &sched, sc](const Var<float>& v, std::uint64_t t) { return sdedit(model, v, sched, sc, t); };
}

inline void check_schedule(const AttackConfig& cfg, const RespacedSchedule& sched) {
  if (sched.steps() != cfg.ddim)
    throw std::invalid_argument("attack: config asks for DDIM" + std::to_string(cfg.ddim) + " but schedule has T_s=" +
                                std::to_string(sched.steps()));
  if (cfg.K > sched.steps()) throw std::invalid_argument("attack: K exceeds T_s");
}

}  // namespace detail

/// Signed-gradient PGD (rPGD when `mask` is given). x_n0 is a copy of x_n.
inline AttackOutput pgd(const Classifier<float>& clf, const Image& x, int y, const AttackConfig& cfg,
                        const Mask* mask = nullptr) {
  return detail::run_loop(clf, x, y, cfg, mask, [](const Var<float>& v, std::uint64_t) { return v; },
                          detail::GradMode::through_purifier);
}

/// Diff-PGD: the loss is taken on SDEdit(x_t) (rSDEdit when masked) and
/// differentiated through the whole sampler chain.
inline AttackOutput diff_pgd(const Classifier<float>& clf, const NoisePredictor<float>& model,
                             const RespacedSchedule& sched, const Image& x, int y, const AttackConfig& cfg,
                             const Mask* mask = nullptr) {
  detail::check_schedule(cfg, sched);
  return detail::run_loop(clf, x, y, cfg, mask, detail::sdedit_purifier(model, sched, cfg, mask, x),
                          detail::GradMode::through_purifier);
}

/// Accelerated Diff-PGD: gradient at the purified image, sampler run without history.
inline AttackOutput diff_pgd_accel(const Classifier<float>& clf, const NoisePredictor<float>& model,
                                   const RespacedSchedule& sched, const Image& x, int y, const AttackConfig& cfg,
                                   const Mask* mask = nullptr) {
  detail::check_schedule(cfg, sched);
  return detail::run_loop(clf, x, y, cfg, mask, detail::sdedit_purifier(model, sched, cfg, mask, x),
                          detail::GradMode::at_purified);
}

// ---------------------------------------------------------------- style

struct StyleConfig {
  double lambda_s = 4000.0;
  double lambda_c = 1.0;
  double eta_s = 0.01;
  std::size_t n_s = 100;
  Image x_s;  // style reference
  Mask mask;  // region to restyle and attack
  bool content_anchor_is_style = false;
};

struct StyleResult {
  Image image;
  std::vector<double> loss;  // per iteration, before the update; loss.back() is after the last one
};

/// λ_s·Σ‖G(f_h(x̂)) − G_h‖² + λ_c·Σ‖f_h(x̂) − F_h‖² for the given targets.
inline Var<float> style_loss(const FeatureExtractor<float>& fx, const Var<float>& xh,
                             const std::vector<Tensor<float>>& gram_targets,
                             const std::vector<Tensor<float>>& content_targets, double ls, double lc) {
  std::vector<std::string> handles = fx.style_handles;
  handles.insert(handles.end(), fx.content_handles.begin(), fx.content_handles.end());
  auto feats = extract_features(fx, xh, handles);
  Var<float> total = Var<float>::constant(Tensor<float>({1}));
  for (std::size_t i = 0; i < fx.style_handles.size(); ++i)
    total = ops::add(total, ops::scale(ops::sum_squared_error(ops::gram(feats[i]), gram_targets[i]), float(ls)));
  for (std::size_t i = 0; i < fx.content_handles.size(); ++i)
    total = ops::add(total, ops::scale(ops::sum_squared_error(feats[fx.style_handles.size() + i], content_targets[i]),
                                       float(lc)));
  return total;
}

/// Stage 1: style transfer restricted to the mask, optimized with Adam.
inline StyleResult style_transfer(const FeatureExtractor<float>& fx, const Image& x, const StyleConfig& sc) {
  if (sc.lambda_s < 0 || sc.lambda_c < 0) throw std::invalid_argument("style: weights must be >= 0");
  require_same_shape(sc.x_s.shape(), x.shape(), "style reference");
  const auto plane = detail::mask_plane(&sc.mask, x);
  std::vector<Tensor<float>> grams, contents;
  {
    NoGradGuard ng;
    for (const auto& f : extract_features(fx, Var<float>::constant(sc.x_s), fx.style_handles))
      grams.push_back(ops::gram(f).value());
    const Image& anchor = sc.content_anchor_is_style ? sc.x_s : x;
    for (const auto& f : extract_features(fx, Var<float>::constant(anchor), fx.content_handles))
      contents.push_back(f.value());
  }
  StyleResult res{x, {}};
  nn::Adam<float> opt({sc.eta_s});
  const std::size_t ps = x.dim(2) * x.dim(3);
  for (std::size_t t = 0; t <= sc.n_s; ++t) {
    Var<float> xv = Var<float>::leaf(res.image);
    Var<float> loss = style_loss(fx, xv, grams, contents, sc.lambda_s, sc.lambda_c);
    const double l = loss.value()[0];
    if (!std::isfinite(l)) throw NonFiniteError("style_transfer: non-finite loss at iteration " + std::to_string(t));
    res.loss.push_back(l);
    if (t == sc.n_s) break;
    loss.backward();
    Tensor<float> g = xv.grad();
    if (g.empty()) g = Tensor<float>(x.shape());
    for (std::size_t i = 0; i < g.size(); ++i)
      if ((*plane)[i % ps] == 0.0f) g[i] = 0.0f;
    opt.step(res.image, g);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if ((*plane)[i % ps] == 0.0f)
        res.image[i] = x[i];
      else
        res.image[i] = std::clamp(res.image[i], 0.0f, 1.0f);
    }
  }
  return res;
}

/// Two-stage style attack: style transfer, then Diff-rPGD anchored at the
/// stylized image with the same mask.
inline AttackOutput style_attack(const Classifier<float>& clf, const NoisePredictor<float>& model,
                                 const RespacedSchedule& sched, const FeatureExtractor<float>& fx, const Image& x,
                                 int y, const StyleConfig& sc, const AttackConfig& cfg, StyleResult* stage1 = nullptr) {
  StyleResult s1 = style_transfer(fx, x, sc);
  AttackOutput out = diff_pgd(clf, model, sched, s1.image, y, cfg, &sc.mask);
  if (stage1) *stage1 = std::move(s1);
  return out;
}

// ---------------------------------------------------------------- physical

struct TransformSpec {
  double scale_lo = 0.8, scale_hi = 1.2;
  std::size_t margin = 2;  // max translation in pixels from the nominal spot
  double bright_lo = 0.5, bright_hi = 1.5;
  std::vector<Image> backgrounds;
  std::size_t samples_per_step = 8;
  std::size_t patch_size = 24;  // nominal side length of the pasted patch
  std::optional<std::pair<long, long>> center;  // nominal (row, col) of the patch center; default: background center

  void validate() const {
    if (backgrounds.empty()) throw std::invalid_argument("transform spec: empty background set");
    if (!(scale_lo > 0 && scale_lo <= scale_hi)) throw std::invalid_argument("transform spec: bad scale range");
    if (!(bright_lo > 0 && bright_lo <= bright_hi)) throw std::invalid_argument("transform spec: bad brightness range");
    if (samples_per_step == 0 || patch_size == 0) throw std::invalid_argument("transform spec: zero sizes");
  }
};

struct Transform {
  std::size_t background = 0;
  double scale = 1;
  std::size_t size = 0;  // pasted side length
  std::size_t top = 0, left = 0;
  double brightness = 1;
};

inline Transform sample_transform(const TransformSpec& spec, rng::Engine& eng) {
  spec.validate();
  Transform t;
  t.background = spec.backgrounds.size() == 1 ? 0 : rng::index(eng, spec.backgrounds.size());
  t.scale = spec.scale_lo == spec.scale_hi ? spec.scale_lo : rng::uniform(eng, spec.scale_lo, spec.scale_hi);
  t.size = std::max<std::size_t>(1, std::size_t(std::lround(double(spec.patch_size) * t.scale)));
  const Image& bg = spec.backgrounds[t.background];
  const long H = long(bg.dim(2)), W = long(bg.dim(3)), S = long(t.size);
  if (S > H || S > W)
    throw std::invalid_argument("transform: scaled patch " + std::to_string(S) + " exceeds background " +
                                std::to_string(H) + "x" + std::to_string(W));
  const long cy = spec.center ? spec.center->first : H / 2, cx = spec.center ? spec.center->second : W / 2;
  const long m = long(spec.margin);
  const long dy = m ? long(rng::index(eng, std::size_t(2 * m + 1))) - m : 0;
  const long dx = m ? long(rng::index(eng, std::size_t(2 * m + 1))) - m : 0;
  t.top = std::size_t(std::clamp(cy - S / 2 + dy, 0L, H - S));
  t.left = std::size_t(std::clamp(cx - S / 2 + dx, 0L, W - S));
  t.brightness = spec.bright_lo == spec.bright_hi ? spec.bright_lo : rng::uniform(eng, spec.bright_lo, spec.bright_hi);
  return t;
}

inline Transform sample_transform(const TransformSpec& spec, std::uint64_t seed) {
  auto eng = rng::stream(seed, 0, rng::Purpose::transform);
  return sample_transform(spec, eng);
}

/// Resize, paste onto the chosen background, scale brightness, clamp.
template <class T>
Var<T> apply_transform(const TransformSpec& spec, const Transform& t, const Var<T>& patch) {
  Var<T> p = ops::resize_bilinear(patch, t.size, t.size);
  Var<T> comp = ops::paste(spec.backgrounds.at(t.background).template cast<T>(), p, t.top, t.left);
  return ops::clamp(ops::scale(comp, T(t.brightness)), T(0), T(1));
}

struct PhysOutput {
  Image x_star;   // optimized patch
  Image x_star0;  // purified patch
  std::vector<double> loss;
};

/// Unbounded signed-gradient optimization of a patch under EOT, with the
/// loss taken on SDEdit-purified patches; pixels stay in [0,1].
inline PhysOutput diff_phys(const Classifier<float>& clf, const NoisePredictor<float>& model,
                            const RespacedSchedule& sched, const Image& patch, int y, const TransformSpec& spec,
                            const AttackConfig& cfg) {
  spec.validate();
  detail::check_schedule(cfg, sched);
  if (!(cfg.eta >= 0)) throw std::invalid_argument("diff_phys: eta must be >= 0");
  const SdeditConfig sc = cfg.sdedit();
  const std::vector<int> yv(spec.samples_per_step, cfg.target ? *cfg.target : y);
  const float dir = cfg.target ? -1.0f : 1.0f;
  PhysOutput out{patch, patch, {}};
  for (std::size_t t = 0; t < cfg.n; ++t) {
    Var<float> xv = Var<float>::leaf(out.x_star);
    Var<float> x0 = ops::clamp(sdedit(model, xv, sched, sc, t), 0.0f, 1.0f);
    auto eng = rng::stream(cfg.seed, t, rng::Purpose::transform);
    std::vector<Var<float>> comps;
    for (std::size_t j = 0; j < spec.samples_per_step; ++j)
      comps.push_back(apply_transform(spec, sample_transform(spec, eng), x0));
    Var<float> loss = ops::cross_entropy(clf.logits(ops::concat_batch(comps)), yv);
    const double l = loss.value()[0];
    if (!std::isfinite(l)) throw NonFiniteError("diff_phys: non-finite loss at iteration " + std::to_string(t));
    out.loss.push_back(l);
    loss.backward();
    const Tensor<float>& g = xv.grad();
    if (g.empty()) continue;
    for (std::size_t i = 0; i < g.size(); ++i)
      out.x_star[i] = std::clamp(out.x_star[i] + dir * float(cfg.eta) * sign0(g[i]), 0.0f, 1.0f);
  }
  NoGradGuard ng;
  out.x_star0 = sdedit(model, Var<float>::constant(out.x_star), sched, sc, cfg.n).value();
  for (auto& v : out.x_star0.values()) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

/// Fraction of `draws` fresh transforms under which the composite is
/// misclassified (or hits the target).
inline double eot_fooling_rate(const Classifier<float>& clf, const Image& patch, int y, const TransformSpec& spec,
                               std::size_t draws, std::uint64_t seed, std::optional<int> target = std::nullopt) {
  NoGradGuard ng;
  auto eng = rng::stream(seed, 0, rng::Purpose::transform);
  std::size_t fooled = 0;
  const Var<float> pv = Var<float>::constant(patch);
  for (std::size_t j = 0; j < draws; ++j) {
    const Image comp = apply_transform(spec, sample_transform(spec, eng), pv).value();
    fooled += is_success(clf.predict_one(comp), y, target);
  }
  return draws ? double(fooled) / double(draws) : 0.0;
}

}  // namespace dpgd
