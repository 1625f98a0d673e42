#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpgd/tensor.hpp"

namespace dpgd {

/// File missing or unreadable.
class FileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File readable but its content is not what was expected.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit binary PPM (P6). Values map v -> v/255.
Image load_image(const std::filesystem::path& path);
/// Rounds to nearest 8-bit level after clamping to [0, 1].
void save_image(const std::filesystem::path& path, const Image& img);

/// 8-bit binary PGM (P5); levels >= 128 mark the region.
Mask load_mask(const std::filesystem::path& path);
void save_mask(const std::filesystem::path& path, const Mask& m);

/// Nearest 8-bit level, as save/load would produce.
Image quantize8(const Image& img);

/// Perturbation x_adv - x amplified by `gain` around mid-gray.
Image perturbation_map(const Image& x_adv, const Image& x, float gain = 5.0f);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);
std::string file_digest(const std::filesystem::path& path);

/// Versioned binary container for model parameters.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  std::string kind;                          // "denoiser" | "classifier" | "train-state"
  std::map<std::string, std::string> arch;   // architecture descriptor
  std::string schedule;                      // schedule reference (denoisers)
  std::uint64_t seed = 0;                    // training seed
  std::map<std::string, Tensor<float>> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dpgd
