#include <gtest/gtest.h>

#include "dpgd/attacks.hpp"
#include "dpgd/io.hpp"
#include "fd.hpp"

using namespace dpgd;

namespace {

ClassifierConfig small_clf() {
  ClassifierConfig c;
  c.resolution = 8;
  c.widths[0] = 4;
  c.widths[1] = 6;
  c.widths[2] = 8;
  return c;
}

UNetConfig small_unet() {
  UNetConfig c;
  c.resolution = 8;
  c.widths = {4, 4};
  c.temb_dim = 8;
  c.max_groups = 2;
  return c;
}

Image uniform01(std::uint64_t seed, std::size_t res = 8) {
  auto eng = rng::stream(seed, {9});
  Image t({1, 3, res, res});
  for (auto& v : t.values()) v = float(rng::uniform(eng, 0, 1));
  return t;
}

Mask half_mask(std::size_t res = 8) {
  Mask m({res, res});
  for (std::size_t i = 0; i < res; ++i)
    for (std::size_t j = 0; j < res; ++j) m[i * res + j] = (i + j) % 3 == 0 ? 0.0f : 1.0f;
  return m;
}

struct Fixture {
  Classifier<float> clf{small_clf(), 1};
  UNet<float> unet{small_unet(), 2};
  RespacedSchedule sched = respace(make_schedule(1000, 1e-4, 0.02), 50);
};

const Fixture& fx() {
  static const Fixture f;
  return f;
}

void expect_same_trajectory(const AttackOutput& a, const AttackOutput& b) {
  EXPECT_TRUE(a.x_n == b.x_n);
  EXPECT_TRUE(a.x_n0 == b.x_n0);
  ASSERT_EQ(a.trace.size(), b.trace.size());
  for (std::size_t t = 0; t < a.trace.size(); ++t) {
    EXPECT_EQ(a.trace[t].loss, b.trace[t].loss);
    EXPECT_EQ(a.trace[t].pred, b.trace[t].pred);
  }
}

}  // namespace

TEST(Project, InsideBallUnchanged) {
  const Image x = uniform01(1);
  Image c = x;
  for (auto& v : c.values()) v = std::clamp(v + 0.01f, 0.0f, 1.0f);
  EXPECT_TRUE(project(c, x, 16.0 / 255, Norm::linf) == c);
}

TEST(Project, LinfClampArithmetic) {
  const Tensor<float> a({1}, {0.5f}), c({1}, {0.8f});
  EXPECT_FLOAT_EQ(project(c, a, 16.0 / 255, Norm::linf)[0], float(0.5f + float(16.0 / 255)));
}

TEST(Project, L2RescalesToRadius) {
  const double eps = 0.5;
  auto eng = rng::stream(2, {});
  const Tensor<double> anchor = rng::normal<double>({1, 1, 8, 8}, eng);
  Tensor<double> d = rng::normal<double>({1, 1, 8, 8}, eng);
  const double n = l2_norm(d);
  Tensor<double> cand = anchor;
  for (std::size_t i = 0; i < d.size(); ++i) cand[i] += d[i] * 2 * eps / n;
  const auto p = project_ball(cand, anchor, eps, Norm::l2);
  Tensor<double> diff(p.shape());
  for (std::size_t i = 0; i < p.size(); ++i) diff[i] = p[i] - anchor[i];
  EXPECT_NEAR(l2_norm(diff), eps, 1e-6);
}

TEST(Gram, ConstantSingleChannel) {
  const double v = 1.7;
  const auto g = ops::gram(Var<double>::constant(Tensor<double>({1, 1, 3, 5}, v))).value();
  ASSERT_EQ(g.shape(), (Shape{1, 1, 1}));
  EXPECT_NEAR(g[0], v * v, 1e-12);
}

TEST(Gram, SymmetricPositiveSemidefinite) {
  auto eng = rng::stream(3, {});
  const auto g = ops::gram(Var<double>::constant(rng::normal<double>({1, 4, 3, 3}, eng))).value();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(g[i * 4 + j], g[j * 4 + i]);
  // Quadratic forms with random vectors are non-negative.
  for (int k = 0; k < 20; ++k) {
    const auto z = rng::normal<double>({4}, eng);
    double q = 0;
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) q += z[i] * g[i * 4 + j] * z[j];
    EXPECT_GE(q, -1e-12);
  }
}

TEST(Gram, OrthogonalChannelsHaveZeroOffDiagonal) {
  // Disjoint supports are orthogonal over the spatial axis.
  Tensor<float> f({1, 2, 2, 2});
  f.at(0, 0, 0, 0) = 1.5f;
  f.at(0, 0, 1, 1) = -0.5f;
  f.at(0, 1, 0, 1) = 2.0f;
  f.at(0, 1, 1, 0) = 0.25f;
  const auto g = ops::gram(Var<float>::constant(f)).value();
  EXPECT_NEAR(g[1], 0.0, 1e-6);
  EXPECT_NEAR(g[2], 0.0, 1e-6);
  EXPECT_GT(g[0], 0.0f);
}

TEST(Pgd, ZeroRadiusReturnsInput) {
  const Image x = uniform01(4);
  AttackConfig cfg;
  cfg.eps = 0;
  cfg.eta = 0;
  const auto out = pgd(fx().clf, x, 1, cfg);
  EXPECT_TRUE(out.x_n == x);
  EXPECT_EQ(out.success_n, fx().clf.predict_one(x) != 1);
}

TEST(Pgd, EmptyMaskReturnsInput) {
  const Image x = uniform01(5);
  const Mask m({8, 8});
  const auto out = pgd(fx().clf, x, 0, AttackConfig{}, &m);
  EXPECT_TRUE(out.x_n == x);
  EXPECT_TRUE(out.x_n0 == x);
}

TEST(Pgd, BallInvariantBothNorms) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Image x = uniform01(10 + s);
    AttackConfig cfg;
    const auto o = pgd(fx().clf, x, int(s % 4), cfg);
    EXPECT_LE(max_abs_diff(o.x_n, x), float(cfg.eps + 1e-6));
    // After 8-bit quantization the bound holds in integer units.
    const Image qx = quantize8(x), qa = quantize8(o.x_n);
    for (std::size_t i = 0; i < x.size(); ++i)
      EXPECT_LE(std::abs(std::lround(qa[i] * 255.0f) - std::lround(qx[i] * 255.0f)), 16);
    cfg.norm = Norm::l2;
    cfg.eps = 0.5;
    cfg.eta = 0.2;
    const auto o2 = pgd(fx().clf, x, int(s % 4), cfg);
    Tensor<float> d(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) d[i] = o2.x_n[i] - x[i];
    EXPECT_LE(l2_norm(d), cfg.eps + 1e-4);
  }
}

TEST(Pgd, NonFiniteGradientAborts) {
  Classifier<float> bad(small_clf(), 6);
  for (const auto& [name, p] : bad.params().items())
    if (name == "head.weight") {
      Var<float> v = p;
      v.mutable_value().fill(std::numeric_limits<float>::quiet_NaN());
    }
  EXPECT_THROW(pgd(bad, uniform01(6), 0, AttackConfig{}), NonFiniteError);
}

TEST(Pgd, RejectsInvalidConfig) {
  AttackConfig cfg;
  cfg.eta = 0.5;
  EXPECT_THROW(pgd(fx().clf, uniform01(7), 0, cfg), std::invalid_argument);
  cfg = AttackConfig{};
  cfg.n = 0;
  EXPECT_THROW(pgd(fx().clf, uniform01(7), 0, cfg), std::invalid_argument);
}

TEST(DiffPgd, ZeroStepsReducesToPgd) {
  for (std::uint64_t s = 0; s < 4; ++s) {
    const Image x = uniform01(20 + s);
    AttackConfig cfg;
    cfg.K = 0;
    cfg.seed = s;
    const auto p = pgd(fx().clf, x, 2, cfg);
    expect_same_trajectory(diff_pgd(fx().clf, fx().unet, fx().sched, x, 2, cfg), p);
    expect_same_trajectory(diff_pgd_accel(fx().clf, fx().unet, fx().sched, x, 2, cfg), p);
    const Mask m = half_mask();
    const auto pm = pgd(fx().clf, x, 2, cfg, &m);
    expect_same_trajectory(diff_pgd(fx().clf, fx().unet, fx().sched, x, 2, cfg, &m), pm);
  }
}

TEST(DiffPgd, FullMaskReducesToUnmasked) {
  const Image x = uniform01(30);
  AttackConfig cfg;
  cfg.n = 4;
  const Mask ones({8, 8}, 1.0f);
  expect_same_trajectory(diff_pgd(fx().clf, fx().unet, fx().sched, x, 1, cfg, &ones),
                         diff_pgd(fx().clf, fx().unet, fx().sched, x, 1, cfg));
}

TEST(DiffPgd, RegionInvariant) {
  const Mask m = half_mask();
  for (std::uint64_t s = 0; s < 3; ++s) {
    const Image x = uniform01(40 + s);
    AttackConfig cfg;
    cfg.n = 4;
    cfg.seed = s;
    for (const auto& o : {diff_pgd(fx().clf, fx().unet, fx().sched, x, 0, cfg, &m),
                          diff_pgd_accel(fx().clf, fx().unet, fx().sched, x, 0, cfg, &m)}) {
      EXPECT_LE(max_abs_diff(o.x_n, x), float(cfg.eps + 1e-6));
      for (std::size_t i = 0; i < x.size(); ++i)
        if (m[i % 64] == 0.0f) {
          EXPECT_EQ(o.x_n[i], x[i]);
          EXPECT_LE(std::abs(o.x_n0[i] - x[i]), 1.0f / 255.0f);
        }
    }
  }
}

TEST(DiffPgd, DeterministicAndTraceMatchesShorterRuns) {
  const Image x = uniform01(50);
  AttackConfig cfg;
  cfg.n = 5;
  cfg.seed = 7;
  const auto a = diff_pgd(fx().clf, fx().unet, fx().sched, x, 3, cfg);
  expect_same_trajectory(a, diff_pgd(fx().clf, fx().unet, fx().sched, x, 3, cfg));
  for (std::size_t n : {2u, 4u}) {
    AttackConfig c = cfg;
    c.n = n;
    const auto b = diff_pgd(fx().clf, fx().unet, fx().sched, x, 3, c);
    EXPECT_EQ(purified_success_at(a, n), b.success_n0);
    EXPECT_EQ(a.trace[n].pred, b.pred_n0);
  }
  EXPECT_EQ(purified_success_at(a, 5), a.success_n0);
  EXPECT_THROW(purified_success_at(a, 6), std::out_of_range);
}

TEST(DiffPgd, AcceleratedUsesLessMemory) {
  const Image x = uniform01(60);
  AttackConfig cfg;
  cfg.n = 2;
  const auto full = diff_pgd(fx().clf, fx().unet, fx().sched, x, 0, cfg);
  const auto fast = diff_pgd_accel(fx().clf, fx().unet, fx().sched, x, 0, cfg);
  EXPECT_LT(fast.peak_bytes, full.peak_bytes);
}

TEST(DiffPgd, ScheduleMismatchRejected) {
  AttackConfig cfg;
  cfg.ddim = 10;
  EXPECT_THROW(diff_pgd(fx().clf, fx().unet, fx().sched, uniform01(61), 0, cfg), std::invalid_argument);
}

namespace {

// Linear stand-ins so the whole attack objective is smooth in double.
struct LinearStub final : NoisePredictor<double> {
  Var<double> forward(const Var<double>& x, std::span<const std::size_t> steps) const override {
    return ops::affine(x, 0.2 + 1e-4 * double(steps[0]), -0.03);
  }
};

}  // namespace

TEST(DiffPgd, ChainGradientOnToyMatchesFiniteDifferences) {
  LinearStub stub;
  Classifier<double> clf(
      [] {
        ClassifierConfig c = small_clf();
        c.resolution = 4;
        return c;
      }(),
      8);
  const auto sched = respace(make_schedule(1000, 1e-4, 0.02), 50);
  auto eng = rng::stream(9, {});
  Tensor<double> x({1, 3, 4, 4});
  for (auto& v : x.values()) v = rng::uniform(eng, 0.2, 0.8);
  const std::vector<int> y{2};
  auto f = [&](const Var<double>& v) {
    return ops::cross_entropy(clf.logits(sdedit(stub, v, sched, SdeditConfig{2, false, 1}, 0)), y);
  };
  EXPECT_LT(fd::directional_error(f, x, 10, 10), 1e-3);
}

TEST(Style, ZeroIterationsReturnsInput) {
  FeatureExtractor<float> f(fx().clf);
  const Image x = uniform01(70);
  StyleConfig sc;
  sc.n_s = 0;
  sc.x_s = uniform01(71);
  sc.mask = half_mask();
  EXPECT_TRUE(style_transfer(f, x, sc).image == x);
}

TEST(Style, SelfStyleIsFixedPoint) {
  FeatureExtractor<float> f(fx().clf);
  const Image x = uniform01(72);
  StyleConfig sc;
  sc.n_s = 5;
  sc.x_s = x;
  sc.mask = half_mask();
  const auto r = style_transfer(f, x, sc);
  EXPECT_EQ(r.loss.front(), 0.0);
  EXPECT_LE(max_abs_diff(r.image, x), 1e-6f);
}

TEST(Style, MaskedUpdatesOnly) {
  FeatureExtractor<float> f(fx().clf);
  const Image x = uniform01(73);
  StyleConfig sc;
  sc.n_s = 10;
  sc.x_s = uniform01(74);
  sc.mask = half_mask();
  const auto r = style_transfer(f, x, sc);
  for (std::size_t i = 0; i < x.size(); ++i)
    if (sc.mask[i % 64] == 0.0f) {
      EXPECT_EQ(r.image[i], x[i]);
    }
  EXPECT_LT(r.loss.back(), r.loss.front());
}

TEST(Style, EmptyMaskLeavesInput) {
  FeatureExtractor<float> f(fx().clf);
  const Image x = uniform01(75);
  StyleConfig sc;
  sc.n_s = 5;
  sc.x_s = uniform01(76);
  sc.mask = Mask({8, 8});
  AttackConfig cfg;
  cfg.ddim = 10;
  cfg.K = 2;
  cfg.n = 3;
  const auto s10 = respace(make_schedule(1000, 1e-4, 0.02), 10);
  const auto o = style_attack(fx().clf, fx().unet, s10, f, x, 0, sc, cfg);
  EXPECT_TRUE(o.x_n == x);
  EXPECT_TRUE(o.x_n0 == x);
}

namespace {

TransformSpec spec_with(std::size_t backgrounds) {
  TransformSpec s;
  for (std::size_t b = 0; b < backgrounds; ++b) s.backgrounds.push_back(uniform01(80 + b, 16));
  s.patch_size = 8;
  return s;
}

}  // namespace

TEST(Transform, DegenerateSpecIsFixed) {
  TransformSpec s = spec_with(1);
  s.scale_lo = s.scale_hi = 1;
  s.bright_lo = s.bright_hi = 1;
  s.margin = 0;
  const Image patch = uniform01(90);
  const auto a = apply_transform(s, sample_transform(s, 1), Var<float>::constant(patch)).value();
  for (std::uint64_t seed = 2; seed < 6; ++seed)
    EXPECT_TRUE(apply_transform(s, sample_transform(s, seed), Var<float>::constant(patch)).value() == a);
}

TEST(Transform, ScaleIsUniformOnRange) {
  const TransformSpec s = spec_with(2);
  auto eng = rng::stream(91, {});
  std::vector<double> v;
  for (int i = 0; i < 10000; ++i) v.push_back(sample_transform(s, eng).scale);
  std::sort(v.begin(), v.end());
  double D = 0;
  const double n = double(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double F = (v[i] - s.scale_lo) / (s.scale_hi - s.scale_lo);
    D = std::max({D, std::abs(F - double(i) / n), std::abs(double(i + 1) / n - F)});
  }
  // One-sample Kolmogorov-Smirnov critical value at the 1% level.
  EXPECT_LT(D, 1.628 / std::sqrt(n));
}

TEST(Transform, RejectsOversizedPatchAndEmptyBackgrounds) {
  TransformSpec s = spec_with(1);
  s.patch_size = 15;
  s.scale_lo = 1.1;
  s.scale_hi = 1.2;
  EXPECT_THROW(sample_transform(s, 1), std::invalid_argument);
  EXPECT_THROW(sample_transform(TransformSpec{}, 1), std::invalid_argument);
}

TEST(Phys, ZeroIterationsLeavePatch) {
  TransformSpec s = spec_with(2);
  AttackConfig cfg;
  cfg.n = 0;
  cfg.ddim = 10;
  cfg.K = 2;
  Classifier<float> clf(
      [] {
        ClassifierConfig c = small_clf();
        c.resolution = 16;
        return c;
      }(),
      92);
  const auto s10 = respace(make_schedule(1000, 1e-4, 0.02), 10);
  const Image patch = uniform01(93);
  const auto o = diff_phys(clf, fx().unet, s10, patch, 0, s, cfg);
  EXPECT_TRUE(o.x_star == patch);
  cfg.n = 2;
  const auto o2 = diff_phys(clf, fx().unet, s10, patch, 0, s, cfg);
  EXPECT_EQ(o2.loss.size(), 2u);
  for (float v : o2.x_star.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  const double r = eot_fooling_rate(clf, o2.x_star0, 0, s, 16, 5);
  EXPECT_GE(r, 0.0);
  EXPECT_LE(r, 1.0);
}
