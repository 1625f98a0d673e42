#include "fixture.hpp"

#include <chrono>
#include <cstdarg>

#include "dpgd/eval.hpp"

namespace accept {

void log(const char* fmt, ...) {
  std::va_list ap;
  va_start(ap, fmt);
  std::vfprintf(stderr, fmt, ap);
  va_end(ap);
  std::fputc('\n', stderr);
  std::fflush(stderr);
}

double accuracy(const Classifier<float>& clf, const Dataset& ds) {
  std::vector<Image> imgs;
  for (std::size_t i = 0; i < ds.size(); ++i) imgs.push_back(ds.image(i));
  const auto p = predict_all(clf, imgs);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < p.size(); ++i) ok += p[i] == ds.labels[i];
  return double(ok) / double(ds.size());
}

namespace {

struct ClassifierRecipe {
  char name;
  std::size_t widths[3];
  std::uint64_t init_seed, train_seed;
};

std::unique_ptr<Classifier<float>> classifier(const Desk& d, const ClassifierRecipe& r) {
  const fs::path p = d.classifier_path(r.name);
  if (fs::exists(p)) return load_classifier(p);
  log("training classifier %c (%zu,%zu,%zu)", r.name, r.widths[0], r.widths[1], r.widths[2]);
  ClassifierConfig cc;
  std::copy(std::begin(r.widths), std::end(r.widths), cc.widths);
  auto clf = std::make_unique<Classifier<float>>(cc, r.init_seed);
  ClassifierTrainConfig tc;
  tc.epochs = 6;
  tc.batch = 64;
  tc.seed = r.train_seed;
  const auto t0 = std::chrono::steady_clock::now();
  train_classifier(*clf, d.train.images, d.train.labels, tc);
  log("  done in %.0fs", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  save_classifier(p, *clf, r.train_seed);
  return clf;
}

LoadedDenoiser denoiser(const fs::path& cache, const Dataset& train) {
  const fs::path final_path = cache / "denoiser.ckpt";
  if (fs::exists(final_path)) return load_denoiser(final_path);
  const fs::path partial = cache / "denoiser.partial.ckpt", state_path = cache / "denoiser.state.ckpt";
  const auto sched = make_schedule(1000, 1e-4, 0.02);
  std::unique_ptr<UNet<float>> model;
  TrainState st;
  if (fs::exists(partial) && fs::exists(state_path)) {
    model = load_denoiser(partial).model;
    st = load_train_state(state_path);
    log("resuming denoiser training at step %llu", (unsigned long long)st.step);
  } else {
    model = std::make_unique<UNet<float>>(UNetConfig{}, kDenoiserSeed);
    log("training denoiser for %zu steps", kDenoiserSteps);
  }
  DenoiserTrainConfig cfg;
  cfg.steps = kDenoiserSteps;
  cfg.seed = kDenoiserSeed;
  cfg.checkpoint_every = 250;
  const auto t0 = std::chrono::steady_clock::now();
  train_denoiser<float>(*model, train.images, sched, cfg, st, [&](const UNet<float>& m, const TrainState& s) {
    save_denoiser(partial, m, sched, kDenoiserSeed);
    save_train_state(state_path, s);
    log("  step %llu loss %.4f (%.0fs)", (unsigned long long)s.step, s.running_loss(),
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  });
  save_denoiser(final_path, *model, sched, kDenoiserSeed);
  fs::remove(partial);
  fs::remove(state_path);
  return load_denoiser(final_path);
}

}  // namespace

Desk load_desk(const fs::path& cache) {
  fs::create_directories(cache);
  Dataset train = make_shapes_dataset(kTrainCount, kTrainSeed);
  Desk d(denoiser(cache, train));
  d.cache = cache;
  d.train = std::move(train);
  d.test = make_shapes_dataset(kTestCount, kTestSeed);
  if (!fs::exists(d.test_dir() / "index.txt")) save_dataset(d.test_dir(), d.test);

  d.A = classifier(d, {'A', {16, 32, 64}, 21, 22});
  d.B = classifier(d, {'B', {24, 48, 96}, 31, 32});
  d.accuracy_A = accuracy(*d.A, d.test);
  d.accuracy_B = accuracy(*d.B, d.test);

  std::vector<Image> imgs;
  for (std::size_t i = 0; i < d.test.size(); ++i) imgs.push_back(d.test.image(i));
  const auto pred = predict_all(*d.A, imgs);
  for (std::size_t i = 0; i < d.test.size() && d.eval.size() < kEvalCount; ++i)
    if (pred[i] == d.test.labels[i]) d.eval.push_back(i);
  return d;
}

}  // namespace accept
