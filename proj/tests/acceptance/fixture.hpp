#pragma once

#include <cstdio>
#include <filesystem>
#include <memory>
#include <vector>

#include "dpgd/dataset.hpp"
#include "dpgd/models.hpp"
#include "dpgd/store.hpp"

namespace accept {

using namespace dpgd;
namespace fs = std::filesystem;

/// Everything the criteria share: the desk data, two classifiers, the
/// denoiser and the 250-image evaluation set.
struct Desk {
  explicit Desk(LoadedDenoiser d) : denoiser(std::move(d)) {}

  fs::path cache;
  Dataset train, test;
  std::unique_ptr<Classifier<float>> A, B;
  LoadedDenoiser denoiser;
  std::vector<std::size_t> eval;  // test indices classified correctly by A
  double accuracy_A = 0, accuracy_B = 0;

  fs::path classifier_path(char which) const { return cache / (std::string("classifier_") + which + ".ckpt"); }
  fs::path denoiser_path() const { return cache / "denoiser.ckpt"; }
  fs::path test_dir() const { return cache / "test_data"; }
};

inline constexpr std::size_t kTrainCount = 8000, kTestCount = 1000, kEvalCount = 250;
inline constexpr std::uint64_t kTrainSeed = 1, kTestSeed = 2;
inline constexpr std::size_t kDenoiserSteps = 4000;
inline constexpr std::uint64_t kDenoiserSeed = 11;

/// Loads cached models or trains them (the denoiser resumes from its last
/// checkpoint if interrupted).
Desk load_desk(const fs::path& cache);

double accuracy(const Classifier<float>& clf, const Dataset& ds);

void log(const char* fmt, ...);

}  // namespace accept
