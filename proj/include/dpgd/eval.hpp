#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dpgd/attacks.hpp"

namespace dpgd {

/// A success fraction together with its denominator.
struct Rate {
  std::size_t successes = 0;
  std::size_t count = 0;
  double value = 0;
  bool significant = false;  // count >= kSignificantCount

  static constexpr std::size_t kSignificantCount = 50;
  static Rate of(std::size_t successes, std::size_t count);
};

enum class Which { x_n, x_n0 };
const char* which_name(Which w);

/// One classifier input per attacked sample, with the label it must avoid
/// (or the target it must hit).
struct SampleSet {
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<std::optional<int>> targets;

  std::size_t size() const { return images.size(); }
};

SampleSet samples_of(const std::vector<AttackOutput>& outputs, Which which);
SampleSet clean_samples(const std::vector<AttackOutput>& outputs);

/// Predictions for a list of equally shaped images, evaluated in batches.
std::vector<int> predict_all(const Classifier<float>& clf, const std::vector<Image>& images, std::size_t batch = 64);

Rate success_rate(const Classifier<float>& clf, const SampleSet& s);
Rate success_rate(const Classifier<float>& clf, const std::vector<AttackOutput>& outputs, Which which);

/// Classify sdedit(x, K); K = 0 is plain classification. The noise stream is
/// (cfg.seed, stream_index).
int purify_then_classify(const Classifier<float>& clf, const NoisePredictor<float>& model,
                         const RespacedSchedule& sched, const Image& x, const SdeditConfig& cfg,
                         std::uint64_t stream_index = 0);

/// sdedit applied to every image; sample i uses stream i.
std::vector<Image> purify_all(const NoisePredictor<float>& model, const RespacedSchedule& sched,
                              const std::vector<Image>& images, const SdeditConfig& cfg);

/// Success after purification; sample i uses stream i for every method so all
/// methods face the same purifier realization.
Rate purified_success_rate(const Classifier<float>& clf, const NoisePredictor<float>& model,
                           const RespacedSchedule& sched, const SampleSet& s, const SdeditConfig& cfg);

struct TransferMatrix {
  std::vector<std::string> names;    // evaluated-on classifiers (columns)
  std::vector<std::string> sources;  // row labels; equal to names for a square matrix
  std::vector<std::vector<Rate>> cells;  // [source][target]
};

/// Entry (i, j): attacks crafted on classifier i, evaluated on classifier j.
TransferMatrix transfer_matrix(const std::vector<const Classifier<float>*>& classifiers,
                               const std::vector<std::string>& names, const std::vector<SampleSet>& per_source);

struct AntiPurificationRow {
  std::string method;
  Rate before;  // on the undefended classifier
  Rate after;   // through purify_then_classify
};

struct AntiPurificationTable {
  std::size_t purifier_K = 0, purifier_ddim = 0;
  std::uint64_t purifier_seed = 0;
  std::vector<AntiPurificationRow> rows;

  /// after(a) - after(b) in rate units.
  double margin(const std::string& a, const std::string& b) const;
  const AntiPurificationRow& row(const std::string& method) const;
};

AntiPurificationTable anti_purification_report(const Classifier<float>& clf, const NoisePredictor<float>& model,
                                               const RespacedSchedule& sched,
                                               const std::vector<std::pair<std::string, SampleSet>>& methods,
                                               const SdeditConfig& cfg);

struct PerturbationStats {
  double linf_mean = 0, l2_mean = 0, linf_max = 0;
  std::size_t count = 0;
};
PerturbationStats perturbation_stats(const std::vector<AttackOutput>& outputs, Which which);

struct RuntimeStats {
  double seconds_mean = 0;
  double peak_bytes_mean = 0;
  std::size_t count = 0;
};
RuntimeStats runtime_stats(const std::vector<AttackOutput>& outputs);

/// Fraction of samples successful after each iteration count 1..n, read
/// from the recorded traces.
std::vector<Rate> success_curve(const std::vector<AttackOutput>& outputs);

struct MethodSummary {
  std::string method;
  Rate rate_n, rate_n0;
  PerturbationStats pert_n, pert_n0;
  RuntimeStats runtime;
  std::vector<Rate> curve;
};

MethodSummary summarize(const std::string& method, const std::vector<AttackOutput>& outputs);

struct EvalReport {
  std::vector<MethodSummary> methods;
  std::optional<TransferMatrix> transfer;
  std::optional<AntiPurificationTable> anti_purification;
};

std::string report_text(const EvalReport& r);
std::string report_json(const EvalReport& r);

/// Raster plots mirroring the evaluation figure panels. Written only for the
/// parts present in the report; returns the files written.
std::vector<std::filesystem::path> write_plots(const std::filesystem::path& dir, const EvalReport& r);

}  // namespace dpgd
