#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "dpgd/denoiser.hpp"
#include "dpgd/io.hpp"
#include "dpgd/models.hpp"
#include "dpgd/schedule.hpp"

namespace dpgd {

/// "linear <T> <beta_start> <beta_end>" at full precision.
std::string schedule_ref(const NoiseSchedule& s);
NoiseSchedule parse_schedule_ref(const std::string& ref);

struct LoadedDenoiser {
  std::unique_ptr<UNet<float>> model;
  NoiseSchedule schedule;
  std::uint64_t seed = 0;
};

void save_denoiser(const std::filesystem::path& path, const UNet<float>& model, const NoiseSchedule& sched,
                   std::uint64_t seed);
LoadedDenoiser load_denoiser(const std::filesystem::path& path);

void save_classifier(const std::filesystem::path& path, const Classifier<float>& model, std::uint64_t seed);
std::unique_ptr<Classifier<float>> load_classifier(const std::filesystem::path& path);

void save_train_state(const std::filesystem::path& path, const TrainState& st);
TrainState load_train_state(const std::filesystem::path& path);

}  // namespace dpgd
