#include "dpgd/io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dpgd {

namespace {

namespace fs = std::filesystem;

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open " + path.string());
  return in;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FileError("cannot write " + path.string());
  return out;
}

// Netpbm header token, skipping whitespace and '#' comments.
std::string token(std::istream& in) {
  std::string t;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!t.empty()) break;
      continue;
    }
    t.push_back(char(c));
  }
  return t;
}

struct Raster {
  std::size_t channels, width, height;
  std::vector<unsigned char> bytes;
};

Raster read_pnm(const fs::path& path) {
  auto in = open_in(path);
  const std::string magic = token(in);
  std::size_t ch;
  if (magic == "P6")
    ch = 3;
  else if (magic == "P5")
    ch = 1;
  else
    throw FormatError(path.string() + ": not a binary PPM/PGM file");
  std::size_t w, h, maxv;
  try {
    w = std::stoul(token(in));
    h = std::stoul(token(in));
    maxv = std::stoul(token(in));
  } catch (const std::exception&) {
    throw FormatError(path.string() + ": malformed header");
  }
  if (maxv != 255) throw FormatError(path.string() + ": only 8-bit rasters are supported");
  Raster r{ch, w, h, std::vector<unsigned char>(ch * w * h)};
  in.read(reinterpret_cast<char*>(r.bytes.data()), std::streamsize(r.bytes.size()));
  if (std::size_t(in.gcount()) != r.bytes.size()) throw FormatError(path.string() + ": truncated pixel data");
  return r;
}

void write_pnm(const fs::path& path, const char* magic, std::size_t w, std::size_t h,
               const std::vector<unsigned char>& bytes) {
  auto out = open_out(path);
  out << magic << '\n' << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw FileError("write failed: " + path.string());
}

unsigned char to_byte(float v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

template <class V>
void put(std::ostream& o, const V& v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
void put_str(std::ostream& o, const std::string& s) {
  put(o, std::uint32_t(s.size()));
  o.write(s.data(), std::streamsize(s.size()));
}
template <class V>
V get(std::istream& in, const std::string& where) {
  V v;
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw FormatError(where + ": truncated checkpoint");
  return v;
}
std::string get_str(std::istream& in, const std::string& where) {
  const auto n = get<std::uint32_t>(in, where);
  if (n > (1u << 20)) throw FormatError(where + ": corrupt string length");
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw FormatError(where + ": truncated checkpoint");
  return s;
}

constexpr char kMagic[8] = {'D', 'P', 'G', 'D', 'C', 'K', 'P', 'T'};

}  // namespace

Image load_image(const fs::path& path) {
  Raster r = read_pnm(path);
  if (r.channels != 3) throw FormatError(path.string() + ": expected 3 channels, found " + std::to_string(r.channels));
  Image img({1, 3, r.height, r.width});
  const std::size_t plane = r.height * r.width;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) img[c * plane + p] = float(r.bytes[p * 3 + c]) / 255.0f;
  return img;
}

void save_image(const fs::path& path, const Image& img) {
  if (img.rank() != 4 || img.dim(0) != 1 || img.dim(1) != 3)
    throw ShapeError("save_image: expected (1,3,H,W), got " + shape_str(img.shape()));
  const std::size_t H = img.dim(2), W = img.dim(3), plane = H * W;
  std::vector<unsigned char> bytes(plane * 3);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) bytes[p * 3 + c] = to_byte(img[c * plane + p]);
  write_pnm(path, "P6", W, H, bytes);
}

Mask load_mask(const fs::path& path) {
  Raster r = read_pnm(path);
  if (r.channels != 1) throw FormatError(path.string() + ": mask must be single-channel PGM");
  Mask m({r.height, r.width});
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = r.bytes[i] >= 128 ? 1.0f : 0.0f;
  return m;
}

void save_mask(const fs::path& path, const Mask& m) {
  if (m.rank() != 2) throw ShapeError("save_mask: expected (H,W), got " + shape_str(m.shape()));
  std::vector<unsigned char> bytes(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) bytes[i] = m[i] != 0.0f ? 255 : 0;
  write_pnm(path, "P5", m.dim(1), m.dim(0), bytes);
}

Image quantize8(const Image& img) {
  Image out = img;
  for (auto& v : out.values()) v = float(to_byte(v)) / 255.0f;
  return out;
}

Image perturbation_map(const Image& x_adv, const Image& x, float gain) {
  require_same_shape(x_adv.shape(), x.shape(), "perturbation_map");
  Image out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(0.5f + gain * (x_adv[i] - x[i]), 0.0f, 1.0f);
  return out;
}

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string file_digest(const fs::path& path) {
  auto in = open_in(path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    h = fnv1a(buf, std::size_t(in.gcount()), h);
  }
  return hex64(h);
}

void save_checkpoint(const fs::path& path, const Checkpoint& ck) {
  auto out = open_out(path);
  out.write(kMagic, sizeof kMagic);
  put(out, Checkpoint::kVersion);
  put_str(out, ck.kind);
  put(out, std::uint32_t(ck.arch.size()));
  for (const auto& [k, v] : ck.arch) {
    put_str(out, k);
    put_str(out, v);
  }
  put_str(out, ck.schedule);
  put(out, ck.seed);
  put(out, std::uint32_t(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    put_str(out, name);
    put(out, std::uint32_t(t.rank()));
    for (std::size_t d : t.shape()) put(out, std::uint64_t(d));
    out.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.size() * sizeof(float)));
  }
  if (!out) throw FileError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  auto in = open_in(path);
  const std::string where = path.string();
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw FormatError(where + ": not a checkpoint file");
  const auto version = get<std::uint32_t>(in, where);
  if (version != Checkpoint::kVersion)
    throw FormatError(where + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.kind = get_str(in, where);
  const auto na = get<std::uint32_t>(in, where);
  for (std::uint32_t i = 0; i < na; ++i) {
    std::string k = get_str(in, where);
    ck.arch[k] = get_str(in, where);
  }
  ck.schedule = get_str(in, where);
  ck.seed = get<std::uint64_t>(in, where);
  const auto nt = get<std::uint32_t>(in, where);
  for (std::uint32_t i = 0; i < nt; ++i) {
    std::string name = get_str(in, where);
    const auto rank = get<std::uint32_t>(in, where);
    if (rank > 8) throw FormatError(where + ": corrupt tensor rank");
    Shape s(rank);
    for (auto& d : s) d = std::size_t(get<std::uint64_t>(in, where));
    Tensor<float> t(s);
    in.read(reinterpret_cast<char*>(t.data()), std::streamsize(t.size() * sizeof(float)));
    if (!in) throw FormatError(where + ": truncated tensor " + name);
    ck.tensors.emplace(std::move(name), std::move(t));
  }
  return ck;
}

}  // namespace dpgd
