#include "dpgd/eval.hpp"

#include <algorithm>
#include <stdexcept>

namespace dpgd {

Rate Rate::of(std::size_t successes, std::size_t count) {
  if (successes > count) throw std::invalid_argument("rate: more successes than samples");
  Rate r;
  r.successes = successes;
  r.count = count;
  r.value = count ? double(successes) / double(count) : 0.0;
  r.significant = count >= kSignificantCount;
  return r;
}

const char* which_name(Which w) { return w == Which::x_n ? "x_n" : "x_n0"; }

SampleSet samples_of(const std::vector<AttackOutput>& outputs, Which which) {
  SampleSet s;
  for (const auto& o : outputs) {
    s.images.push_back(which == Which::x_n ? o.x_n : o.x_n0);
    s.labels.push_back(o.label);
    s.targets.push_back(o.target);
  }
  return s;
}

SampleSet clean_samples(const std::vector<AttackOutput>& outputs) {
  SampleSet s;
  for (const auto& o : outputs) {
    s.images.push_back(o.x);
    s.labels.push_back(o.label);
    s.targets.push_back(o.target);
  }
  return s;
}

std::vector<int> predict_all(const Classifier<float>& clf, const std::vector<Image>& images, std::size_t batch) {
  std::vector<int> out;
  out.reserve(images.size());
  for (std::size_t b0 = 0; b0 < images.size(); b0 += batch) {
    const std::size_t nb = std::min(batch, images.size() - b0);
    const auto p = clf.predict(stack_samples<float>(std::span<const Image>(images.data() + b0, nb)));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

Rate success_rate(const Classifier<float>& clf, const SampleSet& s) {
  if (s.size() == 0) throw std::invalid_argument("success_rate: empty sample set");
  const auto pred = predict_all(clf, s.images);
  std::size_t k = 0;
  for (std::size_t i = 0; i < s.size(); ++i) k += is_success(pred[i], s.labels[i], s.targets[i]);
  return Rate::of(k, s.size());
}

Rate success_rate(const Classifier<float>& clf, const std::vector<AttackOutput>& outputs, Which which) {
  return success_rate(clf, samples_of(outputs, which));
}

int purify_then_classify(const Classifier<float>& clf, const NoisePredictor<float>& model,
                         const RespacedSchedule& sched, const Image& x, const SdeditConfig& cfg,
                         std::uint64_t stream_index) {
  NoGradGuard ng;
  Image p = sdedit(model, Var<float>::constant(x), sched, cfg, stream_index).value();
  for (auto& v : p.values()) v = std::clamp(v, 0.0f, 1.0f);
  return clf.predict_one(p);
}

std::vector<Image> purify_all(const NoisePredictor<float>& model, const RespacedSchedule& sched,
                              const std::vector<Image>& images, const SdeditConfig& cfg) {
  NoGradGuard ng;
  std::vector<Image> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    Image p = sdedit(model, Var<float>::constant(images[i]), sched, cfg, i).value();
    for (auto& v : p.values()) v = std::clamp(v, 0.0f, 1.0f);
    out.push_back(std::move(p));
  }
  return out;
}

Rate purified_success_rate(const Classifier<float>& clf, const NoisePredictor<float>& model,
                           const RespacedSchedule& sched, const SampleSet& s, const SdeditConfig& cfg) {
  SampleSet p = s;
  p.images = purify_all(model, sched, s.images, cfg);
  return success_rate(clf, p);
}

TransferMatrix transfer_matrix(const std::vector<const Classifier<float>*>& classifiers,
                               const std::vector<std::string>& names, const std::vector<SampleSet>& per_source) {
  if (classifiers.size() < 2) throw std::invalid_argument("transfer_matrix: need at least two classifiers");
  if (names.size() != classifiers.size() || per_source.size() != classifiers.size())
    throw std::invalid_argument("transfer_matrix: one name and one sample set per classifier");
  for (const auto* c : classifiers)
    if (c->num_classes() != classifiers[0]->num_classes())
      throw std::invalid_argument("transfer_matrix: classifiers disagree on the label space");
  TransferMatrix m;
  m.names = names;
  m.sources = names;
  for (std::size_t i = 0; i < classifiers.size(); ++i) {
    m.cells.emplace_back();
    for (std::size_t j = 0; j < classifiers.size(); ++j) m.cells[i].push_back(success_rate(*classifiers[j], per_source[i]));
  }
  return m;
}

double AntiPurificationTable::margin(const std::string& a, const std::string& b) const {
  return row(a).after.value - row(b).after.value;
}

const AntiPurificationRow& AntiPurificationTable::row(const std::string& method) const {
  for (const auto& r : rows)
    if (r.method == method) return r;
  throw std::out_of_range("anti-purification table has no method '" + method + "'");
}

AntiPurificationTable anti_purification_report(const Classifier<float>& clf, const NoisePredictor<float>& model,
                                               const RespacedSchedule& sched,
                                               const std::vector<std::pair<std::string, SampleSet>>& methods,
                                               const SdeditConfig& cfg) {
  AntiPurificationTable t;
  t.purifier_K = cfg.K;
  t.purifier_ddim = sched.steps();
  t.purifier_seed = cfg.seed;
  for (const auto& [name, s] : methods) {
    if (s.size() != methods.front().second.size() || s.labels != methods.front().second.labels)
      throw std::invalid_argument("anti_purification_report: method '" + name + "' uses a different evaluation set");
    AntiPurificationRow row{name, {}, {}};
    if (s.size()) {
      row.before = success_rate(clf, s);
      row.after = purified_success_rate(clf, model, sched, s, cfg);
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

PerturbationStats perturbation_stats(const std::vector<AttackOutput>& outputs, Which which) {
  PerturbationStats p;
  for (const auto& o : outputs) {
    const Image& a = which == Which::x_n ? o.x_n : o.x_n0;
    double m = 0, s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = double(a[i]) - double(o.x[i]);
      m = std::max(m, std::abs(d));
      s += d * d;
    }
    p.linf_mean += m;
    p.l2_mean += std::sqrt(s);
    p.linf_max = std::max(p.linf_max, m);
    ++p.count;
  }
  if (p.count) {
    p.linf_mean /= double(p.count);
    p.l2_mean /= double(p.count);
  }
  return p;
}

RuntimeStats runtime_stats(const std::vector<AttackOutput>& outputs) {
  RuntimeStats r;
  for (const auto& o : outputs) {
    r.seconds_mean += o.seconds;
    r.peak_bytes_mean += double(o.peak_bytes);
    ++r.count;
  }
  if (r.count) {
    r.seconds_mean /= double(r.count);
    r.peak_bytes_mean /= double(r.count);
  }
  return r;
}

std::vector<Rate> success_curve(const std::vector<AttackOutput>& outputs) {
  if (outputs.empty()) return {};
  std::size_t n = outputs.front().trace.size();
  for (const auto& o : outputs) n = std::min(n, o.trace.size());
  std::vector<Rate> curve;
  for (std::size_t k = 1; k <= n; ++k) {
    std::size_t s = 0;
    for (const auto& o : outputs) s += purified_success_at(o, k) ? 1 : 0;
    curve.push_back(Rate::of(s, outputs.size()));
  }
  return curve;
}

MethodSummary summarize(const std::string& method, const std::vector<AttackOutput>& outputs) {
  MethodSummary m;
  m.method = method;
  std::size_t sn = 0, sn0 = 0;
  for (const auto& o : outputs) {
    sn += o.success_n;
    sn0 += o.success_n0;
  }
  m.rate_n = Rate::of(sn, outputs.size());
  m.rate_n0 = Rate::of(sn0, outputs.size());
  m.pert_n = perturbation_stats(outputs, Which::x_n);
  m.pert_n0 = perturbation_stats(outputs, Which::x_n0);
  m.runtime = runtime_stats(outputs);
  m.curve = success_curve(outputs);
  return m;
}

}  // namespace dpgd
