#include "dpgd/store.hpp"

#include <cstdio>
#include <sstream>

namespace dpgd {

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::size_t> split_sizes(const std::string& s, const std::string& what) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    try {
      out.push_back(std::stoul(tok));
    } catch (const std::exception&) {
      throw FormatError("checkpoint: bad " + what + " '" + s + "'");
    }
  }
  return out;
}

const std::string& need(const Checkpoint& ck, const std::string& key) {
  auto it = ck.arch.find(key);
  if (it == ck.arch.end()) throw FormatError("checkpoint: missing arch field '" + key + "'");
  return it->second;
}

std::size_t need_size(const Checkpoint& ck, const std::string& key) {
  const auto v = split_sizes(need(ck, key), key);
  if (v.size() != 1) throw FormatError("checkpoint: arch field '" + key + "' is not a single integer");
  return v[0];
}

void expect_kind(const Checkpoint& ck, const std::string& kind, const std::filesystem::path& path) {
  if (ck.kind != kind) throw FormatError(path.string() + ": expected a " + kind + " checkpoint, found '" + ck.kind + "'");
}

}  // namespace

std::string schedule_ref(const NoiseSchedule& s) {
  return "linear " + std::to_string(s.steps()) + " " + fmt17(s.beta_start()) + " " + fmt17(s.beta_end());
}

NoiseSchedule parse_schedule_ref(const std::string& ref) {
  std::istringstream in(ref);
  std::string kind;
  std::size_t T = 0;
  double b0 = 0, b1 = 0;
  if (!(in >> kind >> T >> b0 >> b1) || kind != "linear") throw FormatError("bad schedule reference '" + ref + "'");
  try {
    return make_schedule(T, b0, b1);
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("schedule reference: ") + e.what());
  }
}

void save_denoiser(const std::filesystem::path& path, const UNet<float>& model, const NoiseSchedule& sched,
                   std::uint64_t seed) {
  const auto& c = model.config();
  Checkpoint ck;
  ck.kind = "denoiser";
  ck.arch = {{"channels", std::to_string(c.channels)},
             {"resolution", std::to_string(c.resolution)},
             {"widths", join(c.widths)},
             {"temb_dim", std::to_string(c.temb_dim)},
             {"max_groups", std::to_string(c.max_groups)}};
  ck.schedule = schedule_ref(sched);
  ck.seed = seed;
  ck.tensors = model.params().export_float();
  save_checkpoint(path, ck);
}

LoadedDenoiser load_denoiser(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  expect_kind(ck, "denoiser", path);
  UNetConfig c;
  c.channels = need_size(ck, "channels");
  c.resolution = need_size(ck, "resolution");
  c.widths = split_sizes(need(ck, "widths"), "widths");
  c.temb_dim = need_size(ck, "temb_dim");
  c.max_groups = need_size(ck, "max_groups");
  LoadedDenoiser out{std::make_unique<UNet<float>>(c, ck.seed), parse_schedule_ref(ck.schedule), ck.seed};
  try {
    out.model->params().import_float(ck.tensors);
  } catch (const std::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return out;
}

void save_classifier(const std::filesystem::path& path, const Classifier<float>& model, std::uint64_t seed) {
  const auto& c = model.config();
  Checkpoint ck;
  ck.kind = "classifier";
  ck.arch = {{"channels", std::to_string(c.channels)},
             {"resolution", std::to_string(c.resolution)},
             {"classes", std::to_string(c.classes)},
             {"widths", join({c.widths[0], c.widths[1], c.widths[2]})},
             {"recipe", model.recipe()}};
  ck.seed = seed;
  ck.tensors = model.params().export_float();
  save_checkpoint(path, ck);
}

std::unique_ptr<Classifier<float>> load_classifier(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  expect_kind(ck, "classifier", path);
  ClassifierConfig c;
  c.channels = need_size(ck, "channels");
  c.resolution = need_size(ck, "resolution");
  c.classes = need_size(ck, "classes");
  const auto w = split_sizes(need(ck, "widths"), "widths");
  if (w.size() != 3) throw FormatError(path.string() + ": classifier needs three stage widths");
  for (int i = 0; i < 3; ++i) c.widths[i] = w[i];
  auto m = std::make_unique<Classifier<float>>(c, ck.seed, need(ck, "recipe"));
  try {
    m->params().import_float(ck.tensors);
  } catch (const std::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return m;
}

void save_train_state(const std::filesystem::path& path, const TrainState& st) {
  Checkpoint ck;
  ck.kind = "train-state";
  ck.seed = st.seed;
  ck.arch = {{"step", std::to_string(st.step)},
             {"adam_steps", std::to_string(st.adam_steps)},
             {"moments", std::to_string(st.adam_m.size())}};
  for (std::size_t i = 0; i < st.adam_m.size(); ++i) {
    ck.tensors.emplace("m." + std::to_string(i), st.adam_m[i]);
    ck.tensors.emplace("v." + std::to_string(i), st.adam_v[i]);
  }
  // Losses are doubles; kept as full-precision text.
  std::ostringstream hist, win;
  for (double l : st.loss_history) hist << fmt17(l) << ' ';
  for (double l : st.loss_window) win << fmt17(l) << ' ';
  ck.arch["loss_history"] = hist.str();
  ck.arch["loss_window"] = win.str();
  save_checkpoint(path, ck);
}

TrainState load_train_state(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  expect_kind(ck, "train-state", path);
  TrainState st;
  st.seed = ck.seed;
  st.step = need_size(ck, "step");
  st.adam_steps = need_size(ck, "adam_steps");
  const std::size_t M = need_size(ck, "moments");
  for (std::size_t i = 0; i < M; ++i) {
    auto m = ck.tensors.find("m." + std::to_string(i)), v = ck.tensors.find("v." + std::to_string(i));
    if (m == ck.tensors.end() || v == ck.tensors.end()) throw FormatError(path.string() + ": missing optimizer moment");
    st.adam_m.push_back(m->second);
    st.adam_v.push_back(v->second);
  }
  std::istringstream hist(need(ck, "loss_history")), win(need(ck, "loss_window"));
  for (double l; hist >> l;) st.loss_history.push_back(l);
  for (double l; win >> l;) st.loss_window.push_back(l);
  return st;
}

}  // namespace dpgd
