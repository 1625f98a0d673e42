#include "commands.hpp"

#include <atomic>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <thread>

#include "dpgd/attacks.hpp"
#include "dpgd/dataset.hpp"
#include "dpgd/eval.hpp"
#include "dpgd/store.hpp"

namespace dpgd::cli {

namespace {

constexpr const char* kVersion = "0.1.0";

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto p = s.find(sep, start);
    out.push_back(trim(s.substr(start, p - start)));
    if (p == std::string::npos) break;
    start = p + 1;
  }
  return out;
}

std::string fmt_index(std::size_t i) {
  char b[32];
  std::snprintf(b, sizeof b, "%04zu", i);
  return b;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw FileError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& s) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw FileError("cannot write " + p.string());
  out << s;
}

void need_file(const fs::path& p, const std::string& what) {
  if (p.empty()) throw UsageError(what + " is required");
  if (!fs::exists(p)) throw FileError(what + " not found: " + p.string());
}

template <class F>
void parallel_for(std::size_t n, unsigned jobs, F&& f) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (unsigned j = 0; j < std::min<std::size_t>(jobs, n); ++j)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          f(i);
        } catch (...) {
          std::lock_guard lk(mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

json rate_json(const Rate& r) { return {{"successes", r.successes}, {"count", r.count}, {"value", r.value}}; }
Rate rate_from(const json& j) { return Rate::of(j.at("successes").get<std::size_t>(), j.at("count").get<std::size_t>()); }

std::unique_ptr<Classifier<float>> classifier_at(const Config& c, const std::string& key = "classifier") {
  need_file(c.path(key), "--" + key);
  return load_classifier(c.path(key));
}

LoadedDenoiser denoiser_at(const Config& c) {
  need_file(c.path("denoiser"), "--denoiser");
  return load_denoiser(c.path("denoiser"));
}

Dataset dataset_at(const Config& c, const std::string& key = "data") {
  need_file(c.path(key), "--" + key);
  return load_dataset(c.path(key));
}

void check_resolution(const Image& x, std::size_t res, const std::string& who) {
  if (x.dim(2) != res || x.dim(3) != res)
    throw ResolutionError(who + " expects " + std::to_string(res) + "x" + std::to_string(res) + " images, got " +
                          shape_str(x.shape()));
}

std::optional<int> target_of(const Config& c) {
  if (c.str("target") == "none" || c.str("target").empty()) return std::nullopt;
  return int(c.sint("target"));
}

// ------------------------------------------------------------ dataset / training

Result make_dataset_cmd(const Config& c, const Context& ctx) {
  ShapesConfig sc;
  sc.resolution = c.uint("resolution");
  sc.radius_min = c.num("radius-min");
  sc.radius_max = c.num("radius-max");
  sc.center_jitter = c.num("jitter");
  const auto ds = make_shapes_dataset(c.uint("count"), c.uint("seed"), sc);
  save_dataset(ctx.out, ds);
  Result r;
  r.seeds["data"] = c.uint("seed");
  std::vector<std::size_t> per(ds.num_classes());
  for (int y : ds.labels) ++per[std::size_t(y)];
  r.metrics["count"] = ds.size();
  r.metrics["per_class"] = per;
  return r;
}

Result train_diffusion_cmd(const Config& c, const Context& ctx) {
  const Dataset ds = dataset_at(c);
  UNetConfig uc;
  uc.resolution = ds.images.dim(2);
  uc.widths = c.sizes("widths");
  uc.temb_dim = c.uint("temb");
  uc.max_groups = c.uint("groups");
  const auto sched = make_schedule(c.uint("T"), c.num("beta-start"), c.num("beta-end"));
  DenoiserTrainConfig tc;
  tc.steps = c.uint("steps");
  tc.batch = c.uint("batch");
  tc.lr = c.num("lr");
  tc.seed = c.uint("seed");
  tc.checkpoint_every = c.uint("checkpoint-every");
  const fs::path model_path = ctx.out / "denoiser.ckpt", state_path = ctx.out / "train_state.ckpt";
  fs::create_directories(ctx.out);

  std::unique_ptr<UNet<float>> model;
  TrainState st;
  if (c.flag("resume") && fs::exists(state_path)) {
    auto loaded = load_denoiser(model_path);
    model = std::move(loaded.model);
    st = load_train_state(state_path);
  } else {
    model = std::make_unique<UNet<float>>(uc, c.uint("init-seed"));
  }
  check_resolution(ds.image(0), model->config().resolution, "denoiser");
  train_denoiser<float>(*model, ds.images, sched, tc, st, [&](const UNet<float>& m, const TrainState& s) {
    save_denoiser(model_path, m, sched, tc.seed);
    save_train_state(state_path, s);
    std::fprintf(stderr, "step %llu loss %.5f\n", (unsigned long long)s.step, s.running_loss());
  });
  save_denoiser(model_path, *model, sched, tc.seed);
  save_train_state(state_path, st);

  Result r;
  r.inputs.push_back(c.path("data") / "index.txt");
  r.seeds["train"] = tc.seed;
  r.seeds["init"] = c.uint("init-seed");
  r.metrics["steps"] = st.step;
  r.metrics["parameters"] = model->params().scalar_count();
  r.metrics["final_loss"] = st.running_loss();
  r.metrics["first_loss"] = st.loss_history.empty() ? 0.0 : st.loss_history.front();
  return r;
}

double accuracy(const Classifier<float>& clf, const Dataset& ds) {
  std::vector<Image> imgs;
  for (std::size_t i = 0; i < ds.size(); ++i) imgs.push_back(ds.image(i));
  const auto p = predict_all(clf, imgs);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < p.size(); ++i) ok += p[i] == ds.labels[i];
  return ds.size() ? double(ok) / double(ds.size()) : 0.0;
}

Result train_classifier_cmd(const Config& c, const Context& ctx) {
  const Dataset ds = dataset_at(c);
  ClassifierConfig cc;
  cc.resolution = ds.images.dim(2);
  cc.classes = ds.num_classes();
  const auto w = c.sizes("widths");
  if (w.size() != 3) throw ConfigError("widths: need three comma-separated values");
  std::copy(w.begin(), w.end(), cc.widths);
  ClassifierTrainConfig tc;
  tc.epochs = c.uint("epochs");
  tc.batch = c.uint("batch");
  tc.lr = c.num("lr");
  tc.seed = c.uint("seed");
  tc.augment = c.flag("augment");
  tc.adversarial = c.flag("adversarial");
  tc.adv_eps = c.num("adv-eps");
  tc.adv_eta = c.num("adv-eta");
  tc.adv_steps = c.uint("adv-steps");
  Classifier<float> clf(cc, c.uint("init-seed"));
  const auto log = train_classifier(clf, ds.images, ds.labels, tc);
  fs::create_directories(ctx.out);
  save_classifier(ctx.out / "classifier.ckpt", clf, tc.seed);

  Result r;
  r.inputs.push_back(c.path("data") / "index.txt");
  r.seeds["train"] = tc.seed;
  r.seeds["init"] = c.uint("init-seed");
  r.metrics["recipe"] = clf.recipe();
  r.metrics["final_loss"] = log.loss.empty() ? 0.0 : log.loss.back();
  r.metrics["train_accuracy"] = accuracy(clf, ds);
  if (c.has("test-data")) {
    r.metrics["test_accuracy"] = accuracy(clf, dataset_at(c, "test-data"));
    r.inputs.push_back(c.path("test-data") / "index.txt");
  }
  return r;
}

Result sample_cmd(const Config& c, const Context& ctx) {
  auto d = denoiser_at(c);
  const auto sched = respace(d.schedule, c.uint("ddim"));
  const std::size_t res = d.model->config().resolution, n = c.uint("count");
  std::vector<Image> imgs(n);
  parallel_for(n, ctx.jobs, [&](std::size_t i) {
    imgs[i] = generate<float>(*d.model, sched, {1, 3, res, res}, c.uint("seed") + i, c.flag("stochastic"),
                              c.flag("clip-x0"));
  });
  double sum = 0, sq = 0, cnt = 0;
  for (std::size_t i = 0; i < n; ++i) {
    save_image(ctx.out / ("sample_" + fmt_index(i) + ".ppm"), imgs[i]);
    for (float v : quantize8(imgs[i]).values()) sum += v, sq += double(v) * v, ++cnt;
  }
  Result r;
  r.inputs.push_back(c.path("denoiser"));
  r.seeds["sample"] = c.uint("seed");
  r.metrics["count"] = n;
  r.metrics["pixel_mean"] = cnt ? sum / cnt : 0.0;
  r.metrics["pixel_std"] = cnt ? std::sqrt(std::max(0.0, sq / cnt - (sum / cnt) * (sum / cnt))) : 0.0;
  return r;
}

// ------------------------------------------------------------ attacks

struct Item {
  std::size_t index = 0;
  Image x;
  int label = 0;
  Mask mask;
};

// Selects the first `count` correctly classified images from `offset`, or
// the single --image.
std::vector<Item> select_items(const Config& c, const Classifier<float>& clf, Dataset* keep = nullptr) {
  std::vector<Item> items;
  const std::string mask_src = c.str("mask");
  if (c.has("image")) {
    need_file(c.path("image"), "--image");
    Item it;
    it.x = load_image(c.path("image"));
    check_resolution(it.x, clf.config().resolution, "classifier");
    it.label = c.has("label") ? int(c.sint("label")) : clf.predict_one(it.x);
    if (!mask_src.empty()) {
      if (mask_src == "object") throw UsageError("--mask object needs --data");
      need_file(mask_src, "--mask");
      it.mask = load_mask(mask_src);
    }
    items.push_back(std::move(it));
    return items;
  }
  Dataset ds = dataset_at(c);
  check_resolution(ds.image(0), clf.config().resolution, "classifier");
  Mask fixed;
  if (!mask_src.empty() && mask_src != "object") {
    need_file(mask_src, "--mask");
    fixed = load_mask(mask_src);
  }
  if (mask_src == "object" && ds.masks.empty()) throw UsageError("--mask object: dataset has no object masks");
  const std::size_t want = c.uint("count");
  std::vector<Image> batch;
  for (std::size_t start = c.uint("offset"); start < ds.size() && items.size() < want; start += 64) {
    std::vector<std::size_t> idx;
    batch.clear();
    for (std::size_t i = start; i < std::min(ds.size(), start + 64); ++i) idx.push_back(i), batch.push_back(ds.image(i));
    const auto pred = predict_all(clf, batch);
    for (std::size_t k = 0; k < idx.size() && items.size() < want; ++k) {
      if (pred[k] != ds.labels[idx[k]]) continue;
      Item it{idx[k], batch[k], ds.labels[idx[k]], {}};
      if (mask_src == "object") it.mask = ds.mask(idx[k]);
      else if (!fixed.empty()) it.mask = fixed;
      items.push_back(std::move(it));
    }
  }
  if (items.size() < want)
    throw UsageError("only " + std::to_string(items.size()) + " correctly classified images available, asked for " +
                     std::to_string(want));
  if (keep) *keep = std::move(ds);
  return items;
}

AttackConfig attack_config(const Config& c) {
  AttackConfig a;
  a.eps = c.num("eps");
  a.eta = c.num("eta");
  a.n = c.uint("n");
  a.norm = parse_norm(c.str("norm"));
  a.K = c.uint("k");
  a.ddim = c.uint("ddim");
  a.target = target_of(c);
  a.seed = c.uint("seed");
  a.stochastic = c.flag("stochastic");
  return a;
}

json trace_json(const AttackOutput& o) {
  json t = json::array();
  for (const auto& r : o.trace) t.push_back({{"loss", r.loss}, {"pred", r.pred}, {"success", r.success}});
  return t;
}

json record_json(const AttackOutput& o, const Item& it, const std::string& prefix) {
  json j{{"index", it.index},      {"label", o.label},
         {"target", o.target ? json(*o.target) : json(nullptr)},
         {"pred_n", o.pred_n},     {"pred_n0", o.pred_n0},
         {"success_n", o.success_n}, {"success_n0", o.success_n0},
         {"ball_excess_n0", o.ball_excess_n0},
         {"seconds", o.seconds},   {"peak_bytes", o.peak_bytes},
         {"files", {{"x", prefix + "_x.ppm"}, {"x_n", prefix + "_xn.ppm"}, {"x_n0", prefix + "_xn0.ppm"}}},
         {"trace", trace_json(o)}};
  return j;
}

void save_attack_images(const fs::path& dir, const std::string& prefix, const AttackOutput& o) {
  save_image(dir / (prefix + "_x.ppm"), o.x);
  save_image(dir / (prefix + "_xn.ppm"), o.x_n);
  save_image(dir / (prefix + "_xn0.ppm"), o.x_n0);
  save_image(dir / (prefix + "_pert_n.ppm"), perturbation_map(o.x_n, o.x, 5.0f));
  save_image(dir / (prefix + "_pert_n0.ppm"), perturbation_map(o.x_n0, o.x, 5.0f));
}

// Metrics that depend only on the attack itself; timings stay in the readings.
json attack_metrics(const std::vector<AttackOutput>& outs) {
  const auto s = summarize("run", outs);
  json m{{"count", outs.size()}, {"success_x_n", rate_json(s.rate_n)}, {"success_x_n0", rate_json(s.rate_n0)}};
  json curve = json::array();
  for (const auto& r : s.curve) curve.push_back(r.value);
  m["success_curve_x_n0"] = curve;
  m["linf_mean_x_n"] = s.pert_n.linf_mean;
  m["l2_mean_x_n"] = s.pert_n.l2_mean;
  m["linf_mean_x_n0"] = s.pert_n0.linf_mean;
  double excess = 0;
  for (const auto& o : outs) excess = std::max(excess, o.ball_excess_n0);
  m["ball_excess_n0_max"] = excess;
  return m;
}

StyleConfig style_config(const Config& c, const Item& it, const Dataset* ds) {
  StyleConfig sc;
  sc.lambda_s = c.num("lambda-s");
  sc.lambda_c = c.num("lambda-c");
  sc.eta_s = c.num("eta-s");
  sc.n_s = c.uint("n-s");
  sc.content_anchor_is_style = c.str("content-anchor") == "style";
  if (c.str("content-anchor") != "x" && c.str("content-anchor") != "style")
    throw ConfigError("content-anchor: expected x or style");
  const std::string s = c.str("style");
  if (s == "self") {
    sc.x_s = it.x;
  } else if (s.rfind("index:", 0) == 0) {
    if (!ds) throw UsageError("--style index:N needs --data");
    sc.x_s = ds->image(std::size_t(parse_number(s.substr(6), "style index")));
  } else {
    need_file(s, "--style");
    sc.x_s = load_image(s);
  }
  if (it.mask.empty()) throw UsageError("style attack needs --mask");
  sc.mask = it.mask;
  return sc;
}

Result phys_cmd(const Config& c, const Context& ctx, const Classifier<float>& clf, const LoadedDenoiser& d) {
  TransformSpec spec;
  spec.scale_lo = c.num("scale-lo");
  spec.scale_hi = c.num("scale-hi");
  spec.margin = c.uint("margin");
  spec.bright_lo = c.num("bright-lo");
  spec.bright_hi = c.num("bright-hi");
  spec.samples_per_step = c.uint("samples-per-step");
  spec.patch_size = c.uint("patch-size");
  ShapesConfig bgc;
  bgc.resolution = clf.config().resolution;
  for (std::size_t j = 0; j < c.uint("backgrounds"); ++j) {
    spec.backgrounds.push_back(make_background(c.uint("background-seed") + j, bgc));
    save_image(ctx.out / ("background_" + fmt_index(j) + ".ppm"), spec.backgrounds.back());
  }
  Image patch;
  int label;
  if (c.has("image")) {
    need_file(c.path("image"), "--image");
    patch = load_image(c.path("image"));
    label = int(c.sint("label"));
  } else {
    const Dataset ds = dataset_at(c);
    const std::size_t i = c.uint("offset");
    if (i >= ds.size()) throw UsageError("--offset beyond dataset");
    patch = ds.image(i);
    label = ds.labels[i];
  }
  check_resolution(patch, d.model->config().resolution, "denoiser");
  const AttackConfig ac = attack_config(c);
  const auto sched = respace(d.schedule, ac.ddim);
  const auto out = diff_phys(clf, *d.model, sched, patch, label, spec, ac);
  save_image(ctx.out / "patch.ppm", patch);
  save_image(ctx.out / "x_star.ppm", out.x_star);
  save_image(ctx.out / "x_star0.ppm", out.x_star0);
  save_image(ctx.out / "pert_star.ppm", perturbation_map(out.x_star, patch, 5.0f));
  const std::size_t draws = c.uint("eval-draws");
  const std::uint64_t es = c.uint("eval-seed");
  Result r;
  r.seeds["attack"] = ac.seed;
  r.seeds["eval_transforms"] = es;
  r.seeds["backgrounds"] = c.uint("background-seed");
  r.metrics["label"] = label;
  r.metrics["fooling_clean"] = eot_fooling_rate(clf, patch, label, spec, draws, es, ac.target);
  r.metrics["fooling_x_star"] = eot_fooling_rate(clf, quantize8(out.x_star), label, spec, draws, es, ac.target);
  r.metrics["fooling_x_star0"] = eot_fooling_rate(clf, quantize8(out.x_star0), label, spec, draws, es, ac.target);
  r.metrics["eval_draws"] = draws;
  r.metrics["loss"] = out.loss;
  return r;
}

Result attack_cmd(const Config& c, const Context& ctx) {
  const std::string variant = c.str("variant");
  static const std::vector<std::string> known{"pgd", "diff-pgd", "diff-rpgd", "diff-pgd-acc", "style", "phys"};
  if (std::find(known.begin(), known.end(), variant) == known.end())
    throw ConfigError("variant: unknown '" + variant + "'");
  const auto clf = classifier_at(c);
  std::optional<LoadedDenoiser> d;
  if (variant != "pgd") d = denoiser_at(c);
  fs::create_directories(ctx.out);
  if (variant == "phys") {
    Result r = phys_cmd(c, ctx, *clf, *d);
    r.inputs = {c.path("classifier"), c.path("denoiser")};
    return r;
  }
  if (d && d->model->config().resolution != clf->config().resolution)
    throw ResolutionError("denoiser and classifier resolutions differ");
  Dataset ds;
  const auto items = select_items(c, *clf, &ds);
  const bool masked = !c.str("mask").empty();
  if (variant == "diff-rpgd" && !masked) throw UsageError("diff-rpgd needs --mask");
  if (variant == "diff-pgd" && masked) throw UsageError("diff-pgd takes no mask; use diff-rpgd");
  const AttackConfig base = attack_config(c);
  std::optional<RespacedSchedule> sched;
  if (d) sched = respace(d->schedule, base.ddim);
  std::optional<FeatureExtractor<float>> fx;
  if (variant == "style") fx.emplace(*clf);

  std::vector<AttackOutput> outs(items.size());
  std::vector<Image> stage1(items.size());
  parallel_for(items.size(), ctx.jobs, [&](std::size_t i) {
    const Item& it = items[i];
    const Mask* m = it.mask.empty() ? nullptr : &it.mask;
    AttackConfig ac = base;
    ac.seed = base.seed + it.index;  // sample-specific noise streams
    if (variant == "pgd") outs[i] = pgd(*clf, it.x, it.label, ac, m);
    else if (variant == "diff-pgd" || variant == "diff-rpgd") outs[i] = diff_pgd(*clf, *d->model, *sched, it.x, it.label, ac, m);
    else if (variant == "diff-pgd-acc") outs[i] = diff_pgd_accel(*clf, *d->model, *sched, it.x, it.label, ac, m);
    else {
      StyleResult s1;
      outs[i] = style_attack(*clf, *d->model, *sched, *fx, it.x, it.label,
                             style_config(c, it, ds.size() ? &ds : nullptr), ac, &s1);
      stage1[i] = std::move(s1.image);
    }
  });

  json records{{"variant", variant}, {"samples", json::array()}};
  for (std::size_t i = 0; i < items.size(); ++i) {
    const std::string prefix = fmt_index(i);
    // A style run perturbs around the stylized image; the record keeps the original as x.
    if (variant == "style") {
      save_image(ctx.out / (prefix + "_stage1.ppm"), stage1[i]);
      save_image(ctx.out / (prefix + "_orig.ppm"), items[i].x);
    }
    save_attack_images(ctx.out, prefix, outs[i]);
    if (!items[i].mask.empty()) save_mask(ctx.out / (prefix + "_mask.pgm"), items[i].mask);
    records["samples"].push_back(record_json(outs[i], items[i], prefix));
  }
  write_text(ctx.out / "records.json", records.dump(2) + "\n");

  Result r;
  r.inputs.push_back(c.path("classifier"));
  if (d) r.inputs.push_back(c.path("denoiser"));
  if (c.has("data")) r.inputs.push_back(c.path("data") / "index.txt");
  if (c.has("image")) r.inputs.push_back(c.path("image"));
  r.seeds["attack"] = base.seed;
  r.metrics = attack_metrics(outs);
  if (variant == "style") {
    std::size_t kept = 0;
    for (std::size_t i = 0; i < items.size(); ++i) {
      const Image a = quantize8(outs[i].x_n0), b = quantize8(items[i].x);
      bool same = true;
      const std::size_t ps = a.dim(2) * a.dim(3);
      for (std::size_t p = 0; p < a.size(); ++p)
        if (items[i].mask[p % ps] == 0.0f && a[p] != b[p]) same = false;
      kept += same;
    }
    r.metrics["unmasked_preserved"] = kept;
  }
  return r;
}

// Reloads an attack run from its records and saved images.
struct LoadedRun {
  std::string variant;
  json manifest;
  std::vector<AttackOutput> outputs;
};

LoadedRun load_run(const fs::path& dir) {
  need_file(dir / "records.json", "attack run");
  const json rec = read_json(dir / "records.json");
  LoadedRun run;
  run.variant = rec.at("variant").get<std::string>();
  if (fs::exists(dir / "manifest.json")) run.manifest = read_json(dir / "manifest.json");
  for (const auto& s : rec.at("samples")) {
    AttackOutput o;
    const auto& f = s.at("files");
    o.x = load_image(dir / f.at("x").get<std::string>());
    o.x_n = load_image(dir / f.at("x_n").get<std::string>());
    o.x_n0 = load_image(dir / f.at("x_n0").get<std::string>());
    o.label = s.at("label").get<int>();
    if (!s.at("target").is_null()) o.target = s.at("target").get<int>();
    o.pred_n = s.at("pred_n").get<int>();
    o.pred_n0 = s.at("pred_n0").get<int>();
    o.success_n = s.at("success_n").get<bool>();
    o.success_n0 = s.at("success_n0").get<bool>();
    o.ball_excess_n0 = s.at("ball_excess_n0").get<double>();
    o.seconds = s.at("seconds").get<double>();
    o.peak_bytes = s.at("peak_bytes").get<std::int64_t>();
    for (const auto& t : s.at("trace"))
      o.trace.push_back({t.at("loss").get<double>(), t.at("pred").get<int>(), t.at("success").get<bool>()});
    run.outputs.push_back(std::move(o));
  }
  return run;
}

std::vector<fs::path> run_dirs(const Config& c) {
  std::vector<fs::path> out;
  for (const auto& s : c.list("runs")) out.emplace_back(s);
  if (out.empty()) throw UsageError("--runs is required");
  return out;
}

// ------------------------------------------------------------ purify / eval

Result purify_cmd(const Config& c, const Context& ctx) {
  auto d = denoiser_at(c);
  const SdeditConfig sc{c.uint("k"), c.flag("stochastic"), c.uint("seed")};
  const auto sched = respace(d.schedule, c.uint("ddim"));
  std::vector<Image> imgs;
  std::vector<int> labels;
  need_file(c.path("input"), "--input");
  if (fs::is_directory(c.path("input"))) {
    const Dataset ds = load_dataset(c.path("input"));
    const std::size_t n = std::min<std::size_t>(c.uint("count"), ds.size());
    for (std::size_t i = 0; i < n; ++i) imgs.push_back(ds.image(i)), labels.push_back(ds.labels[i]);
  } else {
    imgs.push_back(load_image(c.path("input")));
  }
  for (const auto& x : imgs) check_resolution(x, d.model->config().resolution, "denoiser");
  std::vector<Image> out = purify_all(*d.model, sched, imgs, sc);
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (auto& v : out[i].values()) v = std::clamp(v, 0.0f, 1.0f);
    save_image(ctx.out / ("purified_" + fmt_index(i) + ".ppm"), out[i]);
  }
  Result r;
  r.inputs.push_back(c.path("denoiser"));
  r.seeds["purifier"] = sc.seed;
  r.metrics["count"] = out.size();
  if (c.has("classifier") && !labels.empty()) {
    const auto clf = classifier_at(c);
    r.inputs.push_back(c.path("classifier"));
    const auto before = predict_all(*clf, imgs), after = predict_all(*clf, out);
    std::size_t ok_before = 0, ok_after = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) ok_before += before[i] == labels[i], ok_after += after[i] == labels[i];
    r.metrics["accuracy_clean"] = double(ok_before) / double(labels.size());
    r.metrics["accuracy_purified"] = double(ok_after) / double(labels.size());
  }
  return r;
}

Result eval_success_cmd(const Config& c, const Context& ctx) {
  const fs::path dir = c.path("run");
  const LoadedRun run = load_run(dir);
  Config cc = c;
  if (!c.has("classifier")) cc.values["classifier"] = run.manifest.at("config").at("classifier").get<std::string>();
  const auto clf = classifier_at(cc);
  json tables{{"variant", run.variant},
              {"x_n", rate_json(success_rate(*clf, run.outputs, Which::x_n))},
              {"x_n0", rate_json(success_rate(*clf, run.outputs, Which::x_n0))}};
  write_text(ctx.out / "eval_success.json", tables.dump(2) + "\n");
  Result r;
  r.inputs = {dir / "records.json", cc.path("classifier")};
  r.metrics = tables;
  return r;
}

TransferMatrix matrix_from(const json& j) {
  TransferMatrix m;
  m.names = j.at("names").get<std::vector<std::string>>();
  m.sources = j.at("sources").get<std::vector<std::string>>();
  for (const auto& row : j.at("cells")) {
    m.cells.emplace_back();
    for (const auto& cell : row) m.cells.back().push_back(rate_from(cell));
  }
  return m;
}

json matrix_json(const TransferMatrix& m) {
  json rows = json::array();
  for (const auto& row : m.cells) {
    json cells = json::array();
    for (const auto& x : row) cells.push_back(rate_json(x));
    rows.push_back(cells);
  }
  return {{"names", m.names}, {"sources", m.sources}, {"cells", rows}};
}

Result eval_transfer_cmd(const Config& c, const Context& ctx) {
  const auto paths = c.list("classifiers");
  auto names = c.list("names");
  const auto dirs = run_dirs(c);
  if (names.empty())
    for (std::size_t i = 0; i < paths.size(); ++i) names.push_back("C" + std::to_string(i));
  if (paths.size() != dirs.size() || names.size() != paths.size())
    throw UsageError("--classifiers, --names and --runs need one entry per classifier");
  std::vector<std::unique_ptr<Classifier<float>>> owned;
  std::vector<const Classifier<float>*> clfs;
  Result r;
  for (const auto& p : paths) {
    need_file(p, "classifier");
    owned.push_back(load_classifier(p));
    clfs.push_back(owned.back().get());
    r.inputs.emplace_back(p);
  }
  std::vector<LoadedRun> runs;
  for (const auto& d : dirs) {
    runs.push_back(load_run(d));
    r.inputs.push_back(d / "records.json");
  }
  // One row per (source, output) pair, all evaluated on every classifier.
  TransferMatrix merged;
  merged.names = names;
  for (Which w : {Which::x_n, Which::x_n0}) {
    std::vector<SampleSet> per;
    for (const auto& run : runs) per.push_back(samples_of(run.outputs, w));
    const auto m = transfer_matrix(clfs, names, per);
    for (std::size_t i = 0; i < m.cells.size(); ++i) {
      merged.sources.push_back(runs[i].variant + "@" + names[i] + "/" + which_name(w));
      merged.cells.push_back(m.cells[i]);
    }
  }
  const json j = matrix_json(merged);
  write_text(ctx.out / "transfer.json", j.dump(2) + "\n");
  r.metrics = j;
  return r;
}

json table_json(const AntiPurificationTable& t) {
  json rows = json::array();
  for (const auto& row : t.rows)
    rows.push_back({{"method", row.method}, {"before", rate_json(row.before)}, {"after", rate_json(row.after)}});
  return {{"purifier_K", t.purifier_K}, {"purifier_ddim", t.purifier_ddim}, {"purifier_seed", t.purifier_seed},
          {"rows", rows}};
}

AntiPurificationTable table_from(const json& j) {
  AntiPurificationTable t;
  t.purifier_K = j.at("purifier_K").get<std::size_t>();
  t.purifier_ddim = j.at("purifier_ddim").get<std::size_t>();
  t.purifier_seed = j.at("purifier_seed").get<std::uint64_t>();
  for (const auto& row : j.at("rows"))
    t.rows.push_back({row.at("method").get<std::string>(), rate_from(row.at("before")), rate_from(row.at("after"))});
  return t;
}

Result eval_purify_cmd(const Config& c, const Context& ctx) {
  auto d = denoiser_at(c);
  const auto clf = classifier_at(c);
  const SdeditConfig sc{c.uint("k"), c.flag("stochastic"), c.uint("seed")};
  const auto sched = respace(d.schedule, c.uint("ddim"));
  Result r;
  r.inputs = {c.path("classifier"), c.path("denoiser")};
  std::vector<std::pair<std::string, SampleSet>> methods;
  for (const auto& dir : run_dirs(c)) {
    const LoadedRun run = load_run(dir);
    r.inputs.push_back(dir / "records.json");
    if (run.variant == "pgd") {
      methods.emplace_back("pgd", samples_of(run.outputs, Which::x_n));
    } else {
      methods.emplace_back(run.variant + "/x_n", samples_of(run.outputs, Which::x_n));
      methods.emplace_back(run.variant + "/x_n0", samples_of(run.outputs, Which::x_n0));
    }
  }
  const auto t = anti_purification_report(*clf, *d.model, sched, methods, sc);
  const json j = table_json(t);
  write_text(ctx.out / "anti_purification.json", j.dump(2) + "\n");
  r.seeds["purifier"] = sc.seed;
  r.metrics = j;
  return r;
}

Result report_cmd(const Config& c, const Context& ctx) {
  const auto froms = c.list("from");
  if (froms.empty()) throw UsageError("--from is required");
  EvalReport rep;
  for (const auto& f : froms) {
    const fs::path dir(f);
    if (!fs::is_directory(dir)) throw FileError("run directory not found: " + f);
    bool any = false;
    if (fs::exists(dir / "records.json")) {
      const LoadedRun run = load_run(dir);
      rep.methods.push_back(summarize(run.variant, run.outputs));
      any = true;
    }
    if (fs::exists(dir / "transfer.json")) {
      const auto m = matrix_from(read_json(dir / "transfer.json"));
      if (!rep.transfer) rep.transfer = TransferMatrix{m.names, {}, {}};
      if (rep.transfer->names != m.names) throw UsageError("transfer runs evaluated on different classifiers");
      rep.transfer->sources.insert(rep.transfer->sources.end(), m.sources.begin(), m.sources.end());
      rep.transfer->cells.insert(rep.transfer->cells.end(), m.cells.begin(), m.cells.end());
      any = true;
    }
    if (fs::exists(dir / "anti_purification.json")) {
      rep.anti_purification = table_from(read_json(dir / "anti_purification.json"));
      any = true;
    }
    if (!any) throw FileError("no attack or evaluation results in " + f);
  }
  write_text(ctx.out / "report.txt", report_text(rep));
  write_text(ctx.out / "report.json", report_json(rep));
  write_plots(ctx.out / "plots", rep);
  Result r;
  for (const auto& f : froms)
    for (const char* name : {"records.json", "transfer.json", "anti_purification.json"})
      if (fs::exists(fs::path(f) / name)) r.inputs.push_back(fs::path(f) / name);
  r.metrics["methods"] = rep.methods.size();
  return r;
}

// ------------------------------------------------------------ registry

const std::vector<Key> kAttackKeys{
    {"variant", "diff-pgd", "pgd | diff-pgd | diff-rpgd | diff-pgd-acc | style | phys"},
    {"classifier", "", "classifier checkpoint"},
    {"denoiser", "", "denoiser checkpoint"},
    {"data", "", "dataset directory"},
    {"image", "", "single input image instead of --data"},
    {"label", "", "label for --image (default: the classifier's prediction)"},
    {"count", "1", "number of correctly classified images to attack"},
    {"offset", "0", "first dataset index considered"},
    {"eps", "16/255", "perturbation budget"},
    {"eta", "2/255", "step size"},
    {"n", "10", "iterations"},
    {"norm", "linf", "linf | l2"},
    {"k", "3", "SDEdit reverse steps"},
    {"ddim", "50", "respaced sampler steps"},
    {"target", "none", "target class for a targeted attack"},
    {"seed", "0", "attack seed"},
    {"stochastic", "false", "stochastic sampler"},
    {"mask", "", "mask image, or 'object' for dataset object masks"},
    {"style", "self", "style reference: self | index:N | image path"},
    {"lambda-s", "4000", "style weight"},
    {"lambda-c", "1", "content weight"},
    {"eta-s", "0.01", "style learning rate"},
    {"n-s", "100", "style iterations"},
    {"content-anchor", "x", "x | style"},
    {"backgrounds", "2", "generated backgrounds for phys"},
    {"background-seed", "100", "seed of the first background"},
    {"patch-size", "24", "nominal pasted patch size"},
    {"scale-lo", "0.8", ""},
    {"scale-hi", "1.2", ""},
    {"margin", "2", "translation range in pixels"},
    {"bright-lo", "0.5", ""},
    {"bright-hi", "1.5", ""},
    {"samples-per-step", "8", "transform draws per iteration"},
    {"eval-draws", "64", "held-out transforms for the fooling rate"},
    {"eval-seed", "9001", "seed of the held-out transforms"}};

}  // namespace

// ------------------------------------------------------------ config

const std::string& Config::str(const std::string& k) const {
  const auto it = values.find(k);
  if (it == values.end()) throw std::logic_error("config key not registered: " + k);
  return it->second;
}

double parse_number(const std::string& text, const std::string& what) {
  auto one = [&](const std::string& s) {
    const std::string t = trim(s);
    double v = 0;
    const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || ec != std::errc() || p != t.data() + t.size())
      throw ConfigError(what + ": not a number: '" + text + "'");
    return v;
  };
  const auto slash = text.find('/');
  if (slash == std::string::npos) return one(text);
  const double den = one(text.substr(slash + 1));
  if (den == 0) throw ConfigError(what + ": zero denominator");
  return one(text.substr(0, slash)) / den;
}

double Config::num(const std::string& k) const { return parse_number(str(k), k); }

std::uint64_t Config::uint(const std::string& k) const {
  const std::string t = trim(str(k));
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || p != t.data() + t.size())
    throw ConfigError(k + ": not a non-negative integer: '" + t + "'");
  return v;
}

long Config::sint(const std::string& k) const {
  const std::string t = trim(str(k));
  long v = 0;
  const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || p != t.data() + t.size()) throw ConfigError(k + ": not an integer: '" + t + "'");
  return v;
}

bool Config::flag(const std::string& k) const {
  const std::string t = trim(str(k));
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError(k + ": expected true or false, got '" + t + "'");
}

std::vector<std::string> Config::list(const std::string& k) const { return split(str(k), ','); }

std::vector<std::size_t> Config::sizes(const std::string& k) const {
  std::vector<std::size_t> out;
  for (const auto& s : list(k)) {
    Config one;
    one.values[k] = s;
    out.push_back(one.uint(k));
  }
  if (out.empty()) throw ConfigError(k + ": empty list");
  return out;
}

fs::path Config::path(const std::string& k) const { return fs::path(str(k)); }

std::map<std::string, std::string> read_config_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw FileError("config file not found: " + p.string());
  std::map<std::string, std::string> out;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || trim(line.substr(0, eq)).empty())
      throw ConfigError(p.string() + ":" + std::to_string(no) + ": expected key = value");
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

void write_manifest(const Context& ctx, const Config& cfg, const Result& r, double seconds, std::int64_t peak_bytes) {
  json m;
  m["tool"] = "dpgd";
  m["version"] = kVersion;
  m["command"] = ctx.command;
  m["config"] = cfg.values;
  m["seeds"] = r.seeds;
  json inputs = json::object();
  for (const auto& p : r.inputs) inputs[p.string()] = file_digest(p);
  m["inputs"] = inputs;
  json outputs = json::object();
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(ctx.out))
    if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) outputs[fs::relative(f, ctx.out).generic_string()] = file_digest(f);
  m["outputs"] = outputs;
  m["metrics"] = r.metrics;
  m["readings"] = {{"wall_seconds", seconds},
                   {"peak_tensor_bytes", peak_bytes},
                   {"jobs", ctx.jobs},
                   {"deterministic", ctx.deterministic}};
  write_text(ctx.out / "manifest.json", m.dump(2) + "\n");
}

const std::vector<Command>& commands() {
  static const std::vector<Command> all{
      {"make-dataset",
       "generate the procedural shapes dataset",
       {{"count", "2000", ""},
        {"seed", "1", ""},
        {"resolution", "32", ""},
        {"radius-min", "5", ""},
        {"radius-max", "11", ""},
        {"jitter", "5", "shape center jitter in pixels"}},
       make_dataset_cmd},
      {"train-diffusion",
       "train the noise-prediction UNet",
       {{"data", "", "dataset directory"},
        {"steps", "4000", ""},
        {"batch", "32", ""},
        {"lr", "1e-4", ""},
        {"seed", "11", "batch and noise seed"},
        {"init-seed", "11", "parameter init seed"},
        {"widths", "32,64,64", "channels per UNet level"},
        {"temb", "64", "timestep embedding width"},
        {"groups", "8", "max GroupNorm groups"},
        {"T", "1000", "diffusion steps"},
        {"beta-start", "1e-4", ""},
        {"beta-end", "0.02", ""},
        {"checkpoint-every", "250", "0 disables intermediate checkpoints"},
        {"resume", "false", "continue from train_state.ckpt in --out"}},
       train_diffusion_cmd},
      {"train-classifier",
       "train a classifier on a dataset",
       {{"data", "", "dataset directory"},
        {"test-data", "", "held-out dataset for accuracy"},
        {"epochs", "10", ""},
        {"batch", "64", ""},
        {"lr", "1e-3", ""},
        {"seed", "0", ""},
        {"init-seed", "0", ""},
        {"widths", "16,32,64", "channels per stage"},
        {"augment", "true", ""},
        {"adversarial", "false", "PGD adversarial training"},
        {"adv-eps", "8/255", ""},
        {"adv-eta", "2/255", ""},
        {"adv-steps", "5", ""}},
       train_classifier_cmd},
      {"sample",
       "draw images from the denoiser",
       {{"denoiser", "", ""},
        {"count", "8", ""},
        {"ddim", "50", ""},
        {"seed", "0", ""},
        {"stochastic", "false", ""},
        {"clip-x0", "true", "clamp the predicted clean image at every step"}},
       sample_cmd},
      {"attack", "run an attack and save the adversarial images", kAttackKeys, attack_cmd},
      {"purify",
       "purify images with SDEdit",
       {{"denoiser", "", ""},
        {"classifier", "", "optional; reports accuracy before and after"},
        {"input", "", "image file or dataset directory"},
        {"count", "250", "images taken from a dataset"},
        {"k", "5", ""},
        {"ddim", "50", ""},
        {"seed", "77", ""},
        {"stochastic", "false", ""}},
       purify_cmd},
      {"eval-success",
       "success rates of a saved attack run",
       {{"run", "", "attack run directory"}, {"classifier", "", "default: the run's classifier"}},
       eval_success_cmd},
      {"eval-transfer",
       "transfer matrix across classifiers",
       {{"classifiers", "", "comma-separated checkpoints"},
        {"names", "", "comma-separated display names"},
        {"runs", "", "attack run per classifier, same order"}},
       eval_transfer_cmd},
      {"eval-purify",
       "success after an SDEdit purifier",
       {{"classifier", "", ""},
        {"denoiser", "", ""},
        {"runs", "", "comma-separated attack runs"},
        {"k", "5", ""},
        {"ddim", "50", ""},
        {"seed", "77", ""},
        {"stochastic", "false", ""}},
       eval_purify_cmd},
      {"report",
       "render tables and plots from saved results",
       {{"from", "", "comma-separated result directories"}},
       report_cmd},
  };
  return all;
}

}  // namespace dpgd::cli
