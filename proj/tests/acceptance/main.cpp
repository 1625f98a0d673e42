// Desk-scale acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails.
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <set>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "../fd.hpp"
#include "dpgd/attacks.hpp"
#include "dpgd/eval.hpp"
#include "fixture.hpp"

using namespace accept;
using json = nlohmann::json;

namespace {

constexpr double kEps = 16.0 / 255.0, kEta = 2.0 / 255.0;

struct Verdicts {
  int failed = 0;
  void line(bool pass, const std::string& name, const std::string& detail) {
    std::printf("%s  %-44s %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
    std::fflush(stdout);
    failed += !pass;
  }
};

std::string f3(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.3f", v);
  return b;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

AttackConfig digital(std::size_t K = 3, std::size_t ddim = 50) {
  AttackConfig c;
  c.eps = kEps;
  c.eta = kEta;
  c.n = 10;
  c.K = K;
  c.ddim = ddim;
  return c;
}

template <class F>
std::vector<AttackOutput> attack_eval_set(const Desk& d, std::size_t count, F&& f) {
  std::vector<AttackOutput> out;
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t i = d.eval[k];
    out.push_back(f(d.test.image(i), d.test.labels[i], i));
  }
  return out;
}

bool same_trajectory(const AttackOutput& a, const AttackOutput& b) {
  if (!(a.x_n == b.x_n) || !(a.x_n0 == b.x_n0) || a.trace.size() != b.trace.size()) return false;
  for (std::size_t t = 0; t < a.trace.size(); ++t)
    if (a.trace[t].loss != b.trace[t].loss || a.trace[t].pred != b.trace[t].pred) return false;
  return true;
}

// Integer-level ℓ∞ distance after 8-bit quantization.
long quantized_linf(const Image& a, const Image& b) {
  const Image qa = quantize8(a), qb = quantize8(b);
  long m = 0;
  for (std::size_t i = 0; i < qa.size(); ++i) m = std::max(m, std::abs(std::lround(qa[i] * 255.0f) - std::lround(qb[i] * 255.0f)));
  return m;
}

struct Lazy {
  explicit Lazy(const Desk& desk) : d(desk), s50(respace(desk.denoiser.schedule, 50)) {}

  const Desk& d;
  RespacedSchedule s50;
  std::optional<std::vector<AttackOutput>> pgd_, diff_, accel_;

  const std::vector<AttackOutput>& pgd_runs() {
    if (!pgd_) {
      const auto t0 = std::chrono::steady_clock::now();
      pgd_ = attack_eval_set(d, kEvalCount, [&](const Image& x, int y, std::size_t i) {
        AttackConfig c = digital();
        c.seed = i;
        return pgd(*d.A, x, y, c);
      });
      log("pgd on %zu images: %.0fs", kEvalCount, seconds_since(t0));
    }
    return *pgd_;
  }
  const std::vector<AttackOutput>& diff_runs() {
    if (!diff_) {
      const auto t0 = std::chrono::steady_clock::now();
      diff_ = attack_eval_set(d, kEvalCount, [&](const Image& x, int y, std::size_t i) {
        AttackConfig c = digital();
        c.seed = i;
        return diff_pgd(*d.A, *d.denoiser.model, s50, x, y, c);
      });
      log("diff-pgd on %zu images: %.0fs", kEvalCount, seconds_since(t0));
    }
    return *diff_;
  }
  const std::vector<AttackOutput>& accel_runs() {
    if (!accel_) {
      const auto t0 = std::chrono::steady_clock::now();
      accel_ = attack_eval_set(d, kEvalCount, [&](const Image& x, int y, std::size_t i) {
        AttackConfig c = digital();
        c.seed = i;
        return diff_pgd_accel(*d.A, *d.denoiser.model, s50, x, y, c);
      });
      log("diff-pgd-acc on %zu images: %.0fs", kEvalCount, seconds_since(t0));
    }
    return *accel_;
  }
};

// ------------------------------------------------------------------ baselines

void baselines(const Desk& d, Verdicts& v) {
  v.line(d.accuracy_A >= 0.95 && d.accuracy_B >= 0.95, "baseline: classifier accuracy",
         "A=" + f3(d.accuracy_A) + " B=" + f3(d.accuracy_B) + " (>=0.95 on held-out)");

  const auto& sched = d.denoiser.schedule;
  Tensor<float> x0, noise;
  std::vector<std::size_t> steps;
  draw_denoiser_batch(d.test.images, sched, 99, 0, 256, x0, steps, noise);
  auto mse = [&](const UNet<float>& m) {
    NoGradGuard ng;
    double total = 0;
    for (std::size_t s = 0; s < 256; s += 64) {
      std::vector<std::size_t> st(steps.begin() + long(s), steps.begin() + long(s + 64));
      Tensor<float> xb({64, 3, 32, 32}), nb({64, 3, 32, 32});
      std::copy_n(x0.data() + s * 3072, 64 * 3072, xb.data());
      std::copy_n(noise.data() + s * 3072, 64 * 3072, nb.data());
      total += denoising_loss<float>(m, sched, xb, st, nb).value()[0];
    }
    return total / 4;
  };
  const UNet<float> init(UNetConfig{}, kDenoiserSeed);
  const double m0 = mse(init), m1 = mse(*d.denoiser.model);
  v.line(m0 / m1 >= 5.0, "baseline: denoiser MSE improvement",
         "init=" + f3(m0) + " trained=" + f3(m1) + " ratio=" + f3(m0 / m1) + " (>=5)");

  const auto s50 = respace(sched, 50);
  const Tensor<float> g = generate<float>(*d.denoiser.model, s50, {64, 3, 32, 32}, 5);
  auto moments = [](const Tensor<float>& t, std::size_t n) {
    std::vector<double> mean(3), sd(3);
    const std::size_t P = 32 * 32;
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0, q = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < P; ++p) {
          const double x = t[(i * 3 + c) * P + p];
          s += x, q += x * x;
        }
      mean[c] = s / double(n * P);
      sd[c] = std::sqrt(q / double(n * P) - mean[c] * mean[c]);
    }
    return std::pair{mean, sd};
  };
  const auto [gm, gs] = moments(g, 64);
  const auto [dm, ds] = moments(d.test.images, d.test.size());
  double worst = 0;
  for (std::size_t c = 0; c < 3; ++c)
    worst = std::max({worst, std::abs(gm[c] - dm[c]) / dm[c], std::abs(gs[c] - ds[c]) / ds[c]});
  v.line(worst <= 0.20, "baseline: sample moments", "worst per-channel relative error " + f3(worst) + " (<=0.20)");

  SampleSet clean;
  for (std::size_t i : d.eval) clean.images.push_back(d.test.image(i)), clean.labels.push_back(d.test.labels[i]), clean.targets.emplace_back();
  const Rate r = purified_success_rate(*d.A, *d.denoiser.model, s50, clean, SdeditConfig{5, false, 77});
  v.line(1 - r.value >= 0.90, "baseline: purifier clean accuracy", f3(1 - r.value) + " over " + std::to_string(r.count) + " (>=0.90)");
}

// ------------------------------------------------------------------ criteria

void crit1(const Desk& d, Lazy& lz, Verdicts& v) {
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t same = 0;
  AttackConfig c = digital(0);
  for (std::size_t k = 0; k < 50; ++k) {
    const std::size_t i = d.eval[k];
    c.seed = 1000 + i;
    same += same_trajectory(diff_pgd(*d.A, *d.denoiser.model, lz.s50, d.test.image(i), d.test.labels[i], c),
                            pgd(*d.A, d.test.image(i), d.test.labels[i], c));
  }
  v.line(same == 50, "1 reduction identity (K=0 vs pgd)",
         std::to_string(same) + "/50 bit-identical, " + f3(seconds_since(t0)) + "s");
}

void crit2(const Desk& d, Lazy& lz, Verdicts& v) {
  const auto t0 = std::chrono::steady_clock::now();
  long worst = 0;
  for (const auto& o : lz.diff_runs()) worst = std::max(worst, quantized_linf(o.x_n, o.x));
  for (const auto& o : lz.pgd_runs()) worst = std::max(worst, quantized_linf(o.x_n, o.x));
  // Masked runs on the object regions.
  std::size_t exact = 0, within = 0;
  const std::size_t masked = 50;
  for (std::size_t k = 0; k < masked; ++k) {
    const std::size_t i = d.eval[k];
    const Mask m = d.test.mask(i);
    AttackConfig c = digital();
    c.seed = i;
    const Image x = d.test.image(i);
    const auto o = diff_pgd(*d.A, *d.denoiser.model, lz.s50, x, d.test.labels[i], c, &m);
    bool e = true, w = true;
    for (std::size_t p = 0; p < x.size(); ++p)
      if (m[p % 1024] == 0.0f) {
        e &= o.x_n[p] == x[p];
        w &= std::abs(o.x_n0[p] - x[p]) <= 1.0f / 255.0f;
      }
    exact += e, within += w;
  }
  v.line(worst <= 16 && exact == masked && within == masked, "2 ball + region invariants",
         "max quantized linf " + std::to_string(worst) + "/255 over 500 outputs; masked " + std::to_string(exact) + "/" +
             std::to_string(masked) + " exact, " + std::to_string(within) + "/" + std::to_string(masked) +
             " within 1/255 (" + f3(seconds_since(t0)) + "s excl. shared runs)");
}

std::string sci(double x) {
  char b[32];
  std::snprintf(b, sizeof b, "%.2e", x);
  return b;
}

void crit3(Verdicts& v) {
  const auto t0 = std::chrono::steady_clock::now();
  UNetConfig uc;
  uc.resolution = 4;
  uc.widths = {4, 4};
  uc.temb_dim = 8;
  uc.max_groups = 2;
  const UNet<double> m(uc, 3);
  const auto s50 = respace(make_schedule(1000, 1e-4, 0.02), 50);
  auto eng = rng::stream(4, {});
  Tensor<double> x({1, 3, 4, 4});
  for (auto& e : x.values()) e = rng::uniform(eng, 0.05, 0.95);
  const Tensor<double> proj = rng::normal<double>(x.shape(), eng);
  auto f = [&](const Var<double>& in) {
    return ops::sum(ops::mul(sdedit(m, in, s50, SdeditConfig{2, false, 1}, 0), Var<double>::constant(proj)));
  };
  const double err = fd::directional_error(f, x, 20, 5);
  v.line(err < 1e-3, "3 gradient oracle (K=2, 4x4)", "relative error " + sci(err) + " over 20 probes (<1e-3), " + f3(seconds_since(t0)) + "s");
}

void crit4(Lazy& lz, Verdicts& v) {
  const auto t0 = std::chrono::steady_clock::now();
  const Rate p = success_rate(*lz.d.A, lz.pgd_runs(), Which::x_n);
  const auto& dr = lz.diff_runs();
  const Rate r0 = success_rate(*lz.d.A, dr, Which::x_n0);
  const auto curve = success_curve(dr);
  const double c2 = curve[1].value, c5 = curve[4].value, c10 = curve[9].value;
  v.line(p.value >= 0.95 && r0.value >= 0.90 && c2 <= c5 && c5 <= c10, "4 success-rate trend",
         "pgd " + f3(p.value) + " (>=0.95); diff-pgd x_n0 " + f3(r0.value) + " (>=0.90); n=2/5/10: " + f3(c2) + "/" +
             f3(c5) + "/" + f3(c10) + " (non-decreasing), " + f3(seconds_since(t0)) + "s");
}

void crit5(Lazy& lz, Verdicts& v) {
  const auto& dr = lz.diff_runs();
  const auto& ar = lz.accel_runs();
  const Rate rd = success_rate(*lz.d.A, dr, Which::x_n0), ra = success_rate(*lz.d.A, ar, Which::x_n0);
  const auto td = runtime_stats(dr), ta = runtime_stats(ar);
  const double time_ratio = ta.seconds_mean / td.seconds_mean, mem_ratio = ta.peak_bytes_mean / td.peak_bytes_mean;
  v.line(std::abs(ra.value - rd.value) <= 0.03 && time_ratio <= 0.7 && mem_ratio <= 0.5, "5 accelerated variant",
         "success " + f3(ra.value) + " vs " + f3(rd.value) + " (within 0.03); time x" + f3(time_ratio) +
             " (<=0.7); memory x" + f3(mem_ratio) + " (<=0.5)");
}

void crit6(Lazy& lz, Verdicts& v) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto t = anti_purification_report(*lz.d.A, *lz.d.denoiser.model, lz.s50,
                                          {{"pgd", samples_of(lz.pgd_runs(), Which::x_n)},
                                           {"diff-pgd/x_n", samples_of(lz.diff_runs(), Which::x_n)},
                                           {"diff-pgd/x_n0", samples_of(lz.diff_runs(), Which::x_n0)}},
                                          SdeditConfig{5, false, 77});
  const double a = t.margin("diff-pgd/x_n", "pgd"), b = t.margin("diff-pgd/x_n0", "pgd");
  v.line(a >= 0.10 && b >= 0.10, "6 anti-purification ordering",
         "purified success pgd " + f3(t.row("pgd").after.value) + ", x_n " + f3(t.row("diff-pgd/x_n").after.value) +
             ", x_n0 " + f3(t.row("diff-pgd/x_n0").after.value) + " (margins >=0.10), " + f3(seconds_since(t0)) + "s");
}

void crit7(Lazy& lz, Verdicts& v) {
  const auto& B = *lz.d.B;
  const double p = success_rate(B, lz.pgd_runs(), Which::x_n).value;
  const double dn = success_rate(B, lz.diff_runs(), Which::x_n).value;
  const double dn0 = success_rate(B, lz.diff_runs(), Which::x_n0).value;
  v.line(dn - p >= 0.05 && dn0 - p >= 0.05, "7 transferability ordering (A -> B)",
         "pgd " + f3(p) + ", diff-pgd x_n " + f3(dn) + ", x_n0 " + f3(dn0) + " (margins >=0.05)");
}

void crit8(const Desk& d, Verdicts& v) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto s10 = respace(d.denoiser.schedule, 10);
  const FeatureExtractor<float> fx(*d.A);
  std::size_t zero_init = 0, adversarial = 0, preserved = 0;
  const std::size_t count = 50;
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t i = d.eval[k];
    const Image x = d.test.image(i);
    StyleConfig sc;
    sc.x_s = x;
    sc.mask = d.test.mask(i);
    AttackConfig c = digital(2, 10);
    c.seed = i;
    StyleResult s1;
    const auto o = style_attack(*d.A, *d.denoiser.model, s10, fx, x, d.test.labels[i], sc, c, &s1);
    zero_init += s1.loss.front() == 0.0;
    adversarial += o.success_n0;
    const Image a = quantize8(o.x_n0), b = quantize8(x);
    bool same = true;
    for (std::size_t p = 0; p < a.size(); ++p)
      if (sc.mask[p % 1024] == 0.0f && a[p] != b[p]) same = false;
    preserved += same;
  }
  const double rate = double(adversarial) / double(count);
  v.line(zero_init == count && rate >= 0.80 && preserved == count, "8 style pipeline",
         "zero initial loss " + std::to_string(zero_init) + "/50; x_n0 adversarial " + f3(rate) +
             " (>=0.80); unmasked preserved " + std::to_string(preserved) + "/50, " + f3(seconds_since(t0)) + "s");
}

void crit9(const Desk& d, Verdicts& v) {
  const auto t0 = std::chrono::steady_clock::now();
  TransformSpec spec;
  for (std::uint64_t j = 0; j < 2; ++j) spec.backgrounds.push_back(make_background(100 + j));
  const std::uint64_t eval_seed = 9001;
  // The desk patch: the first evaluation image that is recognized when pasted.
  std::size_t pick = d.eval.size();
  double clean = 1;
  for (std::size_t k = 0; k < d.eval.size(); ++k) {
    const std::size_t i = d.eval[k];
    clean = eot_fooling_rate(*d.A, d.test.image(i), d.test.labels[i], spec, 64, eval_seed);
    if (clean <= 0.20) {
      pick = i;
      break;
    }
  }
  if (pick == d.eval.size()) {
    v.line(false, "9 EOT physical simulation", "no evaluation image is recognized when pasted");
    return;
  }
  AttackConfig c;
  c.ddim = 10;
  c.K = 2;
  c.n = 50;
  c.eta = 4.0 / 255.0;
  c.eps = 1;
  c.seed = 5;
  const auto s10 = respace(d.denoiser.schedule, 10);
  const auto out = diff_phys(*d.A, *d.denoiser.model, s10, d.test.image(pick), d.test.labels[pick], spec, c);
  const double fooled = eot_fooling_rate(*d.A, quantize8(out.x_star0), d.test.labels[pick], spec, 64, eval_seed);
  v.line(fooled >= 0.80 && clean <= 0.20, "9 EOT physical simulation",
         "test image " + std::to_string(pick) + ": purified patch fools " + f3(fooled) + " of 64 held-out draws (>=0.80), clean " +
             f3(clean) + " (<=0.20), " + f3(seconds_since(t0)) + "s");
}

// ------------------------------------------------------------------ 10: CLI replay

int shell(const std::string& cmd) {
  log("$ %s", cmd.c_str());
  return std::system((cmd + " >/dev/null 2>&1").c_str());
}

json manifest(const fs::path& dir) { return json::parse(std::ifstream(dir / "manifest.json")); }

bool replay_matches(const fs::path& a, const fs::path& b, std::string& why) {
  const json ma = manifest(a), mb = manifest(b);
  if (ma["metrics"] != mb["metrics"]) {
    why = "metrics differ";
    return false;
  }
  // records.json carries wall-clock timings and is the one output allowed to differ.
  std::size_t images = 0, files = 0;
  for (auto it = ma["outputs"].begin(); it != ma["outputs"].end(); ++it) {
    const std::string name = it.key();
    if (name == "records.json") continue;
    images += name.ends_with(".ppm") || name.ends_with(".pgm");
    ++files;
    if (!mb["outputs"].contains(name) || mb["outputs"][name] != it.value()) {
      why = name + " differs";
      return false;
    }
  }
  why = std::to_string(files) + " outputs identical (" + std::to_string(images) + " images)";
  return true;
}

void crit10(const Desk& d, Verdicts& v) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::string cli = DPGD_CLI_PATH;
  const fs::path root = d.cache / "replay";
  fs::remove_all(root);
  const std::string A = d.classifier_path('A').string(), D = d.denoiser_path().string();
  struct Step {
    std::string name, args;
  };
  const std::vector<Step> steps{
      {"make-dataset", "--count 40 --seed 5"},
      {"attack", "--variant diff-pgd --classifier " + A + " --denoiser " + D + " --data " + d.test_dir().string() +
                     " --count 3 --n 4 --eps 16/255 --eta 2/255 --k 3 --ddim 50 --seed 3"},
      {"eval-purify", "--classifier " + A + " --denoiser " + D + " --runs " + (root / "attack_1").string()}};
  std::vector<std::string> details;
  bool ok = true;
  for (const auto& s : steps) {
    const fs::path one = root / (s.name + "_1"), two = root / (s.name + "_2");
    int rc = shell(cli + " " + s.name + " " + s.args + " --deterministic --out " + one.string());
    if (rc == 0)
      rc = shell(cli + " " + s.name + " --replay " + (one / "manifest.json").string() + " --deterministic --out " + two.string());
    std::string why = "exit status " + std::to_string(rc);
    const bool same = rc == 0 && replay_matches(one, two, why);
    ok &= same;
    details.push_back(s.name + ": " + why);
  }
  std::string detail;
  for (const auto& s : details) detail += s + "; ";
  v.line(ok, "10 determinism via manifest replay", detail + f3(seconds_since(t0)) + "s");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diff-PGD desk acceptance"};
  std::string cache = "acceptance-cache";
  std::vector<int> only;
  app.add_option("--cache", cache, "trained-model cache directory");
  app.add_option("--only", only, "run only these criteria (0 = baselines)")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  const std::set<int> pick(only.begin(), only.end());
  auto want = [&](int c) { return pick.empty() || pick.count(c); };

  const auto t0 = std::chrono::steady_clock::now();
  const Desk d = load_desk(cache);
  log("desk ready in %.0fs: %zu evaluation images", seconds_since(t0), d.eval.size());
  Verdicts v;
  Lazy lz{d};
  if (want(0)) baselines(d, v);
  if (want(1)) crit1(d, lz, v);
  if (want(2)) crit2(d, lz, v);
  if (want(3)) crit3(v);
  if (want(4)) crit4(lz, v);
  if (want(5)) crit5(lz, v);
  if (want(6)) crit6(lz, v);
  if (want(7)) crit7(lz, v);
  if (want(8)) crit8(d, v);
  if (want(9)) crit9(d, v);
  if (want(10)) crit10(d, v);
  std::printf("%d failed, total %.0fs\n", v.failed, seconds_since(t0));
  return v.failed ? 1 : 0;
}
