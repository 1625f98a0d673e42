#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dpgd/io.hpp"

namespace dpgd {

/// Labeled image collection held as one (N, C, H, W) batch in [0, 1].
struct Dataset {
  Tensor<float> images;
  std::vector<int> labels;
  Tensor<float> masks;  // (N, H, W) object regions; empty when unknown
  std::vector<std::string> class_names;

  std::size_t size() const { return labels.size(); }
  std::size_t num_classes() const { return class_names.size(); }
  Image image(std::size_t i) const { return images.sample(i); }
  Mask mask(std::size_t i) const;
  Dataset subset(const std::vector<std::size_t>& idx) const;
};

/// Procedural generator: one filled shape (disk, square, triangle, cross)
/// over a two-color gradient, sometimes on a rectangular panel.
struct ShapesConfig {
  std::size_t resolution = 32;
  double radius_min = 5.0, radius_max = 11.0;
  double center_jitter = 5.0;
  double panel_prob = 0.35;
  double noise = 0.02;
  double min_contrast = 0.45;  // mean abs channel difference, shape vs surround
};

const std::vector<std::string>& shape_class_names();

Dataset make_shapes_dataset(std::size_t count, std::uint64_t seed, const ShapesConfig& cfg = {});
/// Shape-free gradient scene, used as physical-attack backdrop.
Image make_background(std::uint64_t seed, const ShapesConfig& cfg = {});

/// Directory layout: `index.txt` with lines "<image.ppm> <label> [<mask.pgm>]"
/// plus `classes.txt` with one class name per line.
void save_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace dpgd
