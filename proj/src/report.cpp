#include <algorithm>
#include <array>
#include <cstdio>
#include <sstream>

#include "dpgd/eval.hpp"
#include "dpgd/io.hpp"
#include "json.hpp"

namespace dpgd {

namespace {

using nlohmann::ordered_json;

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string rate_cell(const Rate& r) {
  std::string s = fmt("%.3f", r.value) + " (" + std::to_string(r.successes) + "/" + std::to_string(r.count) + ")";
  if (!r.significant) s += "*";
  return s;
}

std::string pad(const std::string& s, std::size_t w) { return s + std::string(s.size() < w ? w - s.size() : 1, ' '); }

ordered_json rate_json(const Rate& r) {
  return {{"value", r.value}, {"successes", r.successes}, {"count", r.count}, {"significant", r.significant}};
}

ordered_json pert_json(const PerturbationStats& p) {
  return {{"linf_mean", p.linf_mean}, {"l2_mean", p.l2_mean}, {"linf_max", p.linf_max}, {"count", p.count}};
}

// Minimal RGB canvas for bar and line charts.
struct Canvas {
  std::size_t W, H;
  Image img;
  Canvas(std::size_t w, std::size_t h) : W(w), H(h), img({1, 3, h, w}, 1.0f) {}

  void dot(long x, long y, const std::array<float, 3>& c) {
    if (x < 0 || y < 0 || x >= long(W) || y >= long(H)) return;
    for (std::size_t k = 0; k < 3; ++k) img.at(0, k, std::size_t(y), std::size_t(x)) = c[k];
  }
  void rect(long x0, long y0, long x1, long y1, const std::array<float, 3>& c) {
    for (long y = std::min(y0, y1); y <= std::max(y0, y1); ++y)
      for (long x = std::min(x0, x1); x <= std::max(x0, x1); ++x) dot(x, y, c);
  }
  void line(long x0, long y0, long x1, long y1, const std::array<float, 3>& c) {
    const long n = std::max({std::abs(x1 - x0), std::abs(y1 - y0), 1L});
    for (long i = 0; i <= n; ++i)
      rect(x0 + (x1 - x0) * i / n, y0 + (y1 - y0) * i / n, x0 + (x1 - x0) * i / n + 1, y0 + (y1 - y0) * i / n + 1, c);
  }
};

constexpr std::array<std::array<float, 3>, 6> kPalette{{{0.12f, 0.47f, 0.71f},
                                                         {1.00f, 0.50f, 0.05f},
                                                         {0.17f, 0.63f, 0.17f},
                                                         {0.84f, 0.15f, 0.16f},
                                                         {0.58f, 0.40f, 0.74f},
                                                         {0.55f, 0.34f, 0.29f}}};
constexpr std::array<float, 3> kAxis{0.2f, 0.2f, 0.2f}, kGrid{0.85f, 0.85f, 0.85f};

constexpr long kW = 360, kH = 240, kL = 30, kR = 10, kT = 10, kB = 30;

long ypix(double v) { return kT + long((1.0 - std::clamp(v, 0.0, 1.0)) * double(kH - kT - kB)); }

void frame(Canvas& c) {
  for (int q = 0; q <= 4; ++q) c.line(kL, ypix(q / 4.0), kW - kR, ypix(q / 4.0), kGrid);
  c.line(kL, kT, kL, kH - kB, kAxis);
  c.line(kL, kH - kB, kW - kR, kH - kB, kAxis);
}

// Groups of bars, one group per entry, one bar per series.
void bars(Canvas& c, const std::vector<std::vector<double>>& groups) {
  frame(c);
  if (groups.empty()) return;
  const long span = (kW - kL - kR) / long(groups.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const long bw = std::max(2L, (span - 8) / long(std::max<std::size_t>(1, groups[g].size())));
    for (std::size_t s = 0; s < groups[g].size(); ++s) {
      const long x0 = kL + long(g) * span + 4 + long(s) * bw;
      c.rect(x0, ypix(groups[g][s]), x0 + bw - 2, kH - kB - 1, kPalette[s % kPalette.size()]);
    }
  }
}

}  // namespace

std::string report_text(const EvalReport& r) {
  std::ostringstream o;
  o << "# success rates (* = fewer than " << Rate::kSignificantCount << " samples)\n";
  o << "method          x_n                  x_n0                 linf(x_n)  l2(x_n)   linf(x_n0) sec/sample  peak MiB\n";
  for (const auto& m : r.methods) {
    char line[256];
    std::snprintf(line, sizeof line, "%-15s %-20s %-20s %-10.5f %-9.5f %-10.5f %-11.3f %.2f\n", m.method.c_str(),
                  rate_cell(m.rate_n).c_str(), rate_cell(m.rate_n0).c_str(), m.pert_n.linf_mean, m.pert_n.l2_mean,
                  m.pert_n0.linf_mean, m.runtime.seconds_mean, m.runtime.peak_bytes_mean / (1024.0 * 1024.0));
    o << line;
  }
  o << "\n# success vs iterations (purified output of an n-iteration run)\n";
  for (const auto& m : r.methods) {
    o << m.method << ':';
    for (std::size_t i = 0; i < m.curve.size(); ++i) o << ' ' << (i + 1) << '=' << fmt("%.3f", m.curve[i].value);
    o << '\n';
  }
  if (r.transfer) {
    o << "\n# transfer matrix (rows: source, columns: evaluated on)\n" << pad("", 24);
    for (const auto& n : r.transfer->names) o << pad(n, 22);
    o << '\n';
    for (std::size_t i = 0; i < r.transfer->cells.size(); ++i) {
      o << pad(r.transfer->sources[i], 24);
      for (const auto& cell : r.transfer->cells[i]) o << pad(rate_cell(cell), 22);
      o << '\n';
    }
  }
  if (r.anti_purification) {
    const auto& t = *r.anti_purification;
    o << "\n# anti-purification (purifier DDIM" << t.purifier_ddim << ", K=" << t.purifier_K << ", seed "
      << t.purifier_seed << ")\n";
    o << "method          undefended           purified\n";
    for (const auto& row : t.rows) {
      char line[160];
      std::snprintf(line, sizeof line, "%-15s %-20s %s\n", row.method.c_str(), rate_cell(row.before).c_str(),
                    rate_cell(row.after).c_str());
      o << line;
    }
  }
  return o.str();
}

std::string report_json(const EvalReport& r) {
  ordered_json j;
  j["methods"] = ordered_json::array();
  for (const auto& m : r.methods) {
    ordered_json curve = ordered_json::array();
    for (const auto& c : m.curve) curve.push_back(rate_json(c));
    j["methods"].push_back({{"method", m.method},
                            {"success_x_n", rate_json(m.rate_n)},
                            {"success_x_n0", rate_json(m.rate_n0)},
                            {"perturbation_x_n", pert_json(m.pert_n)},
                            {"perturbation_x_n0", pert_json(m.pert_n0)},
                            {"seconds_per_sample", m.runtime.seconds_mean},
                            {"peak_bytes_mean", m.runtime.peak_bytes_mean},
                            {"success_curve", curve}});
  }
  if (r.transfer) {
    ordered_json rows = ordered_json::array();
    for (const auto& row : r.transfer->cells) {
      ordered_json cells = ordered_json::array();
      for (const auto& c : row) cells.push_back(rate_json(c));
      rows.push_back(cells);
    }
    j["transfer"] = {{"names", r.transfer->names}, {"sources", r.transfer->sources}, {"cells", rows}};
  }
  if (r.anti_purification) {
    const auto& t = *r.anti_purification;
    ordered_json rows = ordered_json::array();
    for (const auto& row : t.rows)
      rows.push_back({{"method", row.method}, {"undefended", rate_json(row.before)}, {"purified", rate_json(row.after)}});
    j["anti_purification"] = {
        {"purifier_ddim", t.purifier_ddim}, {"purifier_K", t.purifier_K}, {"purifier_seed", t.purifier_seed}, {"rows", rows}};
  }
  return j.dump(2) + "\n";
}

std::vector<std::filesystem::path> write_plots(const std::filesystem::path& dir, const EvalReport& r) {
  std::vector<std::filesystem::path> out;
  std::filesystem::create_directories(dir);
  if (!r.methods.empty()) {
    Canvas c(kW, kH);
    frame(c);
    std::size_t n = 1;
    for (const auto& m : r.methods) n = std::max(n, m.curve.size());
    auto xpix = [&](std::size_t k) { return kL + long(k) * (kW - kL - kR) / long(n); };
    for (std::size_t s = 0; s < r.methods.size(); ++s) {
      const auto& curve = r.methods[s].curve;
      for (std::size_t k = 0; k + 1 < curve.size(); ++k)
        c.line(xpix(k + 1), ypix(curve[k].value), xpix(k + 2), ypix(curve[k + 1].value), kPalette[s % kPalette.size()]);
      for (std::size_t k = 0; k < curve.size(); ++k)
        c.rect(xpix(k + 1) - 2, ypix(curve[k].value) - 2, xpix(k + 1) + 2, ypix(curve[k].value) + 2,
               kPalette[s % kPalette.size()]);
    }
    out.push_back(dir / "success_vs_iterations.ppm");
    save_image(out.back(), c.img);
  }
  if (r.transfer) {
    Canvas c(kW, kH);
    std::vector<std::vector<double>> groups;
    for (const auto& row : r.transfer->cells) {
      groups.emplace_back();
      for (const auto& cell : row) groups.back().push_back(cell.value);
    }
    bars(c, groups);
    out.push_back(dir / "transfer.ppm");
    save_image(out.back(), c.img);
  }
  if (r.anti_purification) {
    Canvas c(kW, kH);
    std::vector<std::vector<double>> groups;
    for (const auto& row : r.anti_purification->rows) groups.push_back({row.before.value, row.after.value});
    bars(c, groups);
    out.push_back(dir / "anti_purification.ppm");
    save_image(out.back(), c.img);
  }
  return out;
}

}  // namespace dpgd
