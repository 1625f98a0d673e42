#include "dpgd/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "dpgd/rng.hpp"

namespace dpgd {

namespace {

namespace fs = std::filesystem;
using Color = std::array<double, 3>;

Color random_color(rng::Engine& eng) { return {rng::uniform(eng, 0, 1), rng::uniform(eng, 0, 1), rng::uniform(eng, 0, 1)}; }

double contrast(const Color& a, const Color& b) {
  return (std::abs(a[0] - b[0]) + std::abs(a[1] - b[1]) + std::abs(a[2] - b[2])) / 3.0;
}

Color contrasting_color(rng::Engine& eng, const Color& ref, double min_contrast) {
  Color c = random_color(eng);
  for (int tries = 0; tries < 64 && contrast(c, ref) < min_contrast; ++tries) c = random_color(eng);
  if (contrast(c, ref) < min_contrast)
    for (int k = 0; k < 3; ++k) c[k] = ref[k] < 0.5 ? 1.0 : 0.0;
  return c;
}

// Inside test in the shape's rotated frame, radius-normalized coordinates.
bool inside(int cls, double u, double v) {
  switch (cls) {
    case 0:
      return u * u + v * v <= 1.0;
    case 1:
      return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case 2: {
      // Equilateral triangle with unit circumradius, apex up.
      const double s3 = std::sqrt(3.0);
      return v <= 0.5 && s3 * u - v <= 1.0 && -s3 * u - v <= 1.0;
    }
    default:
      return (std::abs(u) <= 1.0 && std::abs(v) <= 0.3) || (std::abs(v) <= 1.0 && std::abs(u) <= 0.3);
  }
}

struct Scene {
  Color bg0, bg1;
  double gdir;
};

Scene random_scene(rng::Engine& eng) {
  Scene s{random_color(eng), random_color(eng), rng::uniform(eng, 0, 2 * std::numbers::pi)};
  return s;
}

Color scene_at(const Scene& s, double x, double y, double res) {
  const double t = std::clamp(0.5 + ((x / res - 0.5) * std::cos(s.gdir) + (y / res - 0.5) * std::sin(s.gdir)), 0.0, 1.0);
  return {s.bg0[0] * (1 - t) + s.bg1[0] * t, s.bg0[1] * (1 - t) + s.bg1[1] * t, s.bg0[2] * (1 - t) + s.bg1[2] * t};
}

// Sensor noise, then 8-bit levels so generated images survive save/load exactly.
void add_noise(Image& img, rng::Engine& eng, double sigma) {
  std::normal_distribution<double> d(0.0, sigma);
  for (auto& v : img.values()) v = float(std::lround(std::clamp(double(v) + d(eng), 0.0, 1.0) * 255.0)) / 255.0f;
}

}  // namespace

const std::vector<std::string>& shape_class_names() {
  static const std::vector<std::string> names{"disk", "square", "triangle", "cross"};
  return names;
}

Mask Dataset::mask(std::size_t i) const {
  if (masks.empty()) throw std::logic_error("dataset has no masks");
  const std::size_t H = masks.dim(1), W = masks.dim(2);
  Mask m({H, W});
  std::copy_n(masks.data() + i * H * W, H * W, m.data());
  return m;
}

Dataset Dataset::subset(const std::vector<std::size_t>& idx) const {
  Dataset out;
  out.class_names = class_names;
  std::vector<Tensor<float>> imgs, ms;
  for (std::size_t i : idx) {
    if (i >= size()) throw std::out_of_range("dataset subset index");
    imgs.push_back(image(i));
    out.labels.push_back(labels[i]);
    if (!masks.empty()) {
      Tensor<float> m = mask(i);
      m.reshape({1, m.dim(0), m.dim(1)});
      ms.push_back(std::move(m));
    }
  }
  if (!imgs.empty()) out.images = stack_samples<float>(imgs);
  if (!ms.empty()) out.masks = stack_samples<float>(ms);
  return out;
}

Dataset make_shapes_dataset(std::size_t count, std::uint64_t seed, const ShapesConfig& cfg) {
  if (count == 0) throw std::invalid_argument("make_shapes_dataset: count must be positive");
  const std::size_t R = cfg.resolution, plane = R * R;
  const double res = double(R);
  const int K = int(shape_class_names().size());
  constexpr int ss = 4;  // supersampling per axis

  Dataset ds;
  ds.class_names = shape_class_names();
  ds.images = Tensor<float>({count, 3, R, R});
  ds.masks = Tensor<float>({count, R, R});
  ds.labels.resize(count);
  for (std::size_t n = 0; n < count; ++n) {
    auto eng = rng::stream(seed, n, rng::Purpose::data);
    const int cls = int(n % std::size_t(K));
    ds.labels[n] = cls;
    const Scene scene = random_scene(eng);
    const double r = rng::uniform(eng, cfg.radius_min, cfg.radius_max);
    const double cx = res / 2 + rng::uniform(eng, -cfg.center_jitter, cfg.center_jitter);
    const double cy = res / 2 + rng::uniform(eng, -cfg.center_jitter, cfg.center_jitter);
    const double rot = rng::uniform(eng, 0, 2 * std::numbers::pi);
    const bool panel = rng::uniform(eng, 0, 1) < cfg.panel_prob;
    const double ph = r * rng::uniform(eng, 1.2, 1.6), pw = r * rng::uniform(eng, 1.2, 1.6);
    const Color panel_color = random_color(eng);

    const Color surround = panel ? panel_color : scene_at(scene, cx, cy, res);
    const Color fg = contrasting_color(eng, surround, cfg.min_contrast);
    const double c = std::cos(rot), s = std::sin(rot);

    float* img = ds.images.data() + n * 3 * plane;
    float* msk = ds.masks.data() + n * plane;
    for (std::size_t y = 0; y < R; ++y)
      for (std::size_t x = 0; x < R; ++x) {
        Color acc{0, 0, 0};
        int hits = 0;
        for (int sy = 0; sy < ss; ++sy)
          for (int sx = 0; sx < ss; ++sx) {
            const double px = double(x) + (sx + 0.5) / ss, py = double(y) + (sy + 0.5) / ss;
            const double dx = px - cx, dy = py - cy;
            Color col = scene_at(scene, px, py, res);
            if (panel && std::abs(dx) <= pw && std::abs(dy) <= ph) col = panel_color;
            const double u = (c * dx + s * dy) / r, v = (-s * dx + c * dy) / r;
            if (inside(cls, u, v)) {
              col = fg;
              ++hits;
            }
            for (int k = 0; k < 3; ++k) acc[k] += col[k];
          }
        for (int k = 0; k < 3; ++k) img[std::size_t(k) * plane + y * R + x] = float(acc[k] / (ss * ss));
        msk[y * R + x] = hits * 2 >= ss * ss ? 1.0f : 0.0f;
      }
    Image view({1, 3, R, R}, std::span<const float>(img, 3 * plane));
    add_noise(view, eng, cfg.noise);
    std::copy_n(view.data(), 3 * plane, img);
  }
  return ds;
}

Image make_background(std::uint64_t seed, const ShapesConfig& cfg) {
  auto eng = rng::stream(seed, 0, rng::Purpose::data);
  const std::size_t R = cfg.resolution;
  const Scene scene = random_scene(eng);
  Image img({1, 3, R, R});
  for (std::size_t y = 0; y < R; ++y)
    for (std::size_t x = 0; x < R; ++x) {
      const Color col = scene_at(scene, double(x) + 0.5, double(y) + 0.5, double(R));
      for (std::size_t k = 0; k < 3; ++k) img[(k * R + y) * R + x] = float(col[k]);
    }
  add_noise(img, eng, cfg.noise);
  return img;
}

void save_dataset(const fs::path& dir, const Dataset& ds) {
  fs::create_directories(dir);
  std::ofstream idx(dir / "index.txt");
  std::ofstream cls(dir / "classes.txt");
  if (!idx || !cls) throw FileError("cannot write dataset index in " + dir.string());
  for (const auto& n : ds.class_names) cls << n << '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%05zu.ppm", i);
    save_image(dir / name, ds.image(i));
    idx << name << ' ' << ds.labels[i];
    if (!ds.masks.empty()) {
      std::snprintf(name, sizeof name, "mask_%05zu.pgm", i);
      save_mask(dir / name, ds.mask(i));
      idx << ' ' << name;
    }
    idx << '\n';
  }
}

Dataset load_dataset(const fs::path& dir) {
  std::ifstream idx(dir / "index.txt");
  if (!idx) throw FileError("no dataset index at " + (dir / "index.txt").string());
  Dataset ds;
  if (std::ifstream cls(dir / "classes.txt"); cls)
    for (std::string line; std::getline(cls, line);)
      if (!line.empty()) ds.class_names.push_back(line);
  std::vector<Tensor<float>> imgs, masks;
  std::string line;
  std::size_t lineno = 0;
  int max_label = -1;
  while (std::getline(idx, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string img, mask;
    int label;
    if (!(ls >> img >> label) || label < 0)
      throw FormatError((dir / "index.txt").string() + ":" + std::to_string(lineno) + ": expected '<image> <label>'");
    ls >> mask;
    Image im = load_image(dir / img);
    if (!imgs.empty() && im.shape() != imgs.front().shape())
      throw ResolutionError(img + ": resolution differs from the first image");
    imgs.push_back(std::move(im));
    ds.labels.push_back(label);
    max_label = std::max(max_label, label);
    if (!mask.empty()) {
      Mask m = load_mask(dir / mask);
      m.reshape({1, m.dim(0), m.dim(1)});
      masks.push_back(std::move(m));
    }
  }
  if (imgs.empty()) throw FormatError("dataset at " + dir.string() + " is empty");
  if (!masks.empty() && masks.size() != imgs.size())
    throw FormatError("dataset at " + dir.string() + ": masks given for some images only");
  ds.images = stack_samples<float>(imgs);
  if (!masks.empty()) ds.masks = stack_samples<float>(masks);
  if (ds.class_names.empty())
    for (int k = 0; k <= max_label; ++k) ds.class_names.push_back("class" + std::to_string(k));
  if (max_label >= int(ds.class_names.size())) throw FormatError("dataset label exceeds class list");
  return ds;
}

}  // namespace dpgd
