#include <gtest/gtest.h>

#include <cmath>

#include "dpgd/dataset.hpp"
#include "dpgd/models.hpp"
#include "dpgd/store.hpp"
#include "fd.hpp"

using namespace dpgd;

namespace {

ClassifierConfig small(std::size_t res, std::size_t classes = 4) {
  ClassifierConfig c;
  c.resolution = res;
  c.classes = classes;
  c.widths[0] = 4;
  c.widths[1] = 6;
  c.widths[2] = 8;
  return c;
}

template <class T>
Tensor<T> uniform01(Shape s, std::uint64_t seed) {
  auto eng = rng::stream(seed, {5});
  Tensor<T> t(std::move(s));
  for (auto& v : t.values()) v = T(rng::uniform(eng, 0, 1));
  return t;
}

// Two classes separated by mean brightness.
void toy_set(std::size_t n, std::size_t res, std::uint64_t seed, Tensor<float>& x, std::vector<int>& y) {
  auto eng = rng::stream(seed, {6});
  x = Tensor<float>({n, 3, res, res});
  y.resize(n);
  const std::size_t per = 3 * res * res;
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = int(i % 2);
    const double base = y[i] ? 0.7 : 0.3;
    for (std::size_t p = 0; p < per; ++p) x[i * per + p] = float(std::clamp(base + rng::uniform(eng, -0.2, 0.2), 0.0, 1.0));
  }
}

}  // namespace

TEST(Classifier, LogitsShapeDeterminismAndResolutionCheck) {
  Classifier<float> c(small(8), 1);
  const auto x = uniform01<float>({3, 3, 8, 8}, 1);
  NoGradGuard ng;
  const auto a = c.logits(Var<float>::constant(x)).value();
  EXPECT_EQ(a.shape(), (Shape{3, 4}));
  EXPECT_TRUE(a == c.logits(Var<float>::constant(x)).value());
  EXPECT_THROW(c.logits(Var<float>::constant(Tensor<float>({1, 3, 12, 12}))), ResolutionError);
}

TEST(Classifier, SoftmaxNormalizes) {
  Classifier<float> c(small(8), 2);
  NoGradGuard ng;
  const auto p = softmax(c.logits(Var<float>::constant(uniform01<float>({5, 3, 8, 8}, 2))).value());
  for (std::size_t n = 0; n < 5; ++n) {
    double s = 0;
    for (std::size_t k = 0; k < 4; ++k) s += p[n * 4 + k];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Classifier, BatchedMatchesSingleSample) {
  Classifier<float> c(ClassifierConfig{}, 3);
  const auto x = uniform01<float>({6, 3, 32, 32}, 3);
  NoGradGuard ng;
  const auto batched = c.logits(Var<float>::constant(x)).value();
  for (std::size_t n = 0; n < 6; ++n) {
    const auto one = c.logits(Var<float>::constant(x.sample(n))).value();
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(one[k], batched[n * 4 + k], 1e-5);
  }
}

TEST(Features, HandlesCountsAndChannels) {
  Classifier<float> c(small(8), 4);
  FeatureExtractor<float> fx(c);
  const auto x = Var<float>::constant(uniform01<float>({1, 3, 8, 8}, 4));
  const auto f = extract_features(fx, x, fx.style_handles);
  ASSERT_EQ(f.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(f[i].shape()[1], fx.channels(fx.style_handles[i]));
  EXPECT_TRUE(extract_features(fx, x, {"conv4"})[0].value() == extract_features(fx, x, {"conv4"})[0].value());
  EXPECT_THROW(extract_features(fx, x, {"fc1"}), std::invalid_argument);
  EXPECT_THROW(extract_features(fx, x, {"conv0"}), std::invalid_argument);
}

TEST(Features, GradientMatchesFiniteDifferences) {
  Classifier<double> c(small(4), 5);
  FeatureExtractor<double> fx(c);
  const auto x = uniform01<double>({1, 3, 4, 4}, 5);
  for (const char* h : {"conv1", "conv4", "conv5"}) {
    auto f = [&](const Var<double>& v) { return ops::sum(ops::square(extract_features(fx, v, {h})[0])); };
    EXPECT_LT(fd::directional_error(f, x, 8, 6), 1e-3) << h;
  }
}

TEST(Training, SeparableToySetIsLearned) {
  Tensor<float> x;
  std::vector<int> y;
  toy_set(256, 8, 7, x, y);
  Classifier<float> c(small(8, 2), 7);
  ClassifierTrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch = 32;
  cfg.seed = 7;
  cfg.augment = false;
  const auto log = train_classifier(c, x, y, cfg);
  const auto pred = c.predict(x);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < y.size(); ++i) ok += pred[i] == y[i];
  EXPECT_GT(double(ok) / double(y.size()), 0.95);
  EXPECT_EQ(log.accuracy.size(), 8u);
}

TEST(Training, SameSeedGivesIdenticalParameters) {
  const auto ds = make_shapes_dataset(64, 8, ShapesConfig{.resolution = 8, .radius_min = 2, .radius_max = 3.5, .center_jitter = 1});
  ClassifierTrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch = 16;
  cfg.seed = 9;
  auto run = [&] {
    Classifier<float> c(small(8), 10);
    train_classifier(c, ds.images, ds.labels, cfg);
    return c.params().export_float();
  };
  EXPECT_TRUE(run() == run());
}

TEST(Training, ZeroRadiusAdversarialEqualsStandard) {
  const auto ds = make_shapes_dataset(48, 11, ShapesConfig{.resolution = 8, .radius_min = 2, .radius_max = 3.5, .center_jitter = 1});
  ClassifierTrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch = 16;
  cfg.seed = 12;
  Classifier<float> a(small(8), 13), b(small(8), 13);
  const auto la = train_classifier(a, ds.images, ds.labels, cfg);
  cfg.adversarial = true;
  cfg.adv_eps = 0;
  cfg.adv_eta = 0;
  const auto lb = train_classifier(b, ds.images, ds.labels, cfg);
  EXPECT_EQ(la.loss, lb.loss);
  EXPECT_TRUE(a.params().export_float() == b.params().export_float());
  EXPECT_EQ(b.recipe(), "adversarial");
}

TEST(Training, RejectsBadInput) {
  Classifier<float> c(small(8), 14);
  ClassifierTrainConfig cfg;
  EXPECT_THROW(train_classifier(c, Tensor<float>(), {}, cfg), std::invalid_argument);
  EXPECT_THROW(train_classifier(c, Tensor<float>({1, 3, 8, 8}), {7}, cfg), std::invalid_argument);
  EXPECT_THROW(train_classifier(c, Tensor<float>({1, 3, 4, 4}), {0}, cfg), ResolutionError);
  EXPECT_THROW(train_classifier(c, Tensor<float>({2, 3, 8, 8}, std::nanf("")), {0, 1}, cfg), NonFiniteError);
}

TEST(Training, CheckpointRoundTrip) {
  Classifier<float> c(small(8), 15, "adversarial");
  const auto path = std::filesystem::temp_directory_path() / "dpgd_tests" / "clf.ckpt";
  save_classifier(path, c, 15);
  const auto d = load_classifier(path);
  EXPECT_EQ(d->recipe(), "adversarial");
  const auto x = uniform01<float>({2, 3, 8, 8}, 16);
  NoGradGuard ng;
  EXPECT_TRUE(c.logits(Var<float>::constant(x)).value() == d->logits(Var<float>::constant(x)).value());
}

// Standard vs adversarial training on a small shapes set, compared under
// an eps = 8/255 ℓ∞ attack on held-out images.
TEST(Training, AdversarialTrainingIsMoreRobust) {
  const ShapesConfig sc{.resolution = 16, .radius_min = 3, .radius_max = 6, .center_jitter = 2};
  const auto train = make_shapes_dataset(1200, 17, sc), test = make_shapes_dataset(200, 18, sc);
  ClassifierConfig cc = small(16);
  cc.widths[0] = 8;
  cc.widths[1] = 16;
  cc.widths[2] = 16;
  ClassifierTrainConfig cfg;
  cfg.epochs = 6;
  cfg.batch = 32;
  cfg.seed = 19;
  Classifier<float> standard(cc, 20), robust(cc, 20);
  train_classifier(standard, train.images, train.labels, cfg);
  cfg.adversarial = true;
  train_classifier(robust, train.images, train.labels, cfg);

  auto robust_accuracy = [&](const Classifier<float>& c) {
    const auto xa = linf_pgd_batch(c, test.images, test.labels, 8.0 / 255, 2.0 / 255, 10);
    const auto p = c.predict(xa);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < p.size(); ++i) ok += p[i] == test.labels[i];
    return double(ok) / double(p.size());
  };
  const double rs = robust_accuracy(standard), rr = robust_accuracy(robust);
  RecordProperty("standard", std::to_string(rs));
  RecordProperty("adversarial", std::to_string(rr));
  EXPECT_GT(rr, rs);
}
