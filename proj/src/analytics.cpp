#include "pcmoe/analytics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "pcmoe/errors.hpp"

namespace pcmoe {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  return os;
}

}  // namespace

RoutingTrace::RoutingTrace(int n_experts, int n_classes)
    : n_experts_(n_experts),
      n_classes_(n_classes),
      expert_counts_(static_cast<std::size_t>(n_experts), 0),
      class_expert_(n_classes, n_experts),
      cooccur_(static_cast<std::size_t>(n_experts) * n_experts, 0) {
  if (n_experts < 1 || n_classes < 1) throw ConfigError("trace needs at least one expert and class");
}

void RoutingTrace::add(std::span<const int> ids, std::span<const double> class_fractions) {
  if (ids.empty()) throw DataError("routing decision selects no experts");
  if (k_ == 0) k_ = static_cast<int>(ids.size());
  if (static_cast<int>(ids.size()) != k_) throw DataError("routing decisions disagree on k");
  if (!class_fractions.empty() && static_cast<int>(class_fractions.size()) != n_classes_) {
    throw DataError("class fractions have " + std::to_string(class_fractions.size()) +
                    " entries, expected " + std::to_string(n_classes_));
  }
  for (int id : ids) {
    if (id < 0 || id >= n_experts_) throw DataError("expert id out of range in trace");
    ++expert_counts_[static_cast<std::size_t>(id)];
    for (std::size_t c = 0; c < class_fractions.size(); ++c) {
      class_expert_.at(static_cast<int>(c), id) += class_fractions[c];
    }
  }
  for (std::size_t a = 0; a < ids.size(); ++a) {
    for (std::size_t b = a + 1; b < ids.size(); ++b) {
      if (ids[a] == ids[b]) continue;
      ++cooccur_[static_cast<std::size_t>(ids[a]) * n_experts_ + ids[b]];
      ++cooccur_[static_cast<std::size_t>(ids[b]) * n_experts_ + ids[a]];
    }
  }
  ++n_decisions_;
}

RoutingTrace build_trace(std::span<const TraceRecord> records, int n_classes) {
  if (records.empty()) throw DataError("empty routing trace");
  RoutingTrace trace(static_cast<int>(records.front().full_probs.size()), n_classes);
  for (const auto& r : records) trace.add(r.expert_ids, r.class_fractions);
  return trace;
}

std::vector<double> as_doubles(std::span<const std::int64_t> counts) {
  return std::vector<double>(counts.begin(), counts.end());
}

double nre(std::span<const double> counts) {
  if (counts.size() < 2) throw ConfigError("NRE needs at least two experts");
  double total = 0.0;
  for (double c : counts) total += c;
  if (!(total > 0.0)) throw DataError("NRE undefined for all-zero counts");
  double h = 0.0;
  for (double c : counts) {
    if (c > 0.0) {
      const double q = c / total;
      h -= q * std::log(q);
    }
  }
  return h / std::log(static_cast<double>(counts.size()));
}

double tec(std::span<const double> counts) {
  if (counts.empty()) throw ConfigError("TEC needs at least one expert");
  double total = 0.0;
  for (double c : counts) total += c;
  if (!(total > 0.0)) throw DataError("TEC undefined for all-zero counts");
  return *std::max_element(counts.begin(), counts.end()) / total;
}

Matrix class_expert_heatmap(const RoutingTrace& trace) {
  Matrix m = trace.class_expert_counts();
  for (int r = 0; r < m.rows; ++r) {
    double s = 0.0;
    for (int c = 0; c < m.cols; ++c) s += m.at(r, c);
    if (s > 0.0) {
      for (int c = 0; c < m.cols; ++c) m.at(r, c) /= s;
    }
  }
  return m;
}

Matrix co_routing_matrix(const RoutingTrace& trace) {
  const int n = trace.n_experts();
  Matrix m(n, n);
  if (trace.n_decisions() == 0) return m;
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b)
      m.at(a, b) = static_cast<double>(trace.cooccur(a, b)) / static_cast<double>(trace.n_decisions());
  return m;
}

std::array<std::uint8_t, 3> ramp_color(double t) {
  constexpr double lo[3] = {255, 255, 255};
  constexpr double mid[3] = {253, 141, 60};
  constexpr double hi[3] = {128, 0, 38};
  t = std::clamp(t, 0.0, 1.0);
  std::array<std::uint8_t, 3> out{};
  for (int ch = 0; ch < 3; ++ch) {
    const double v = t <= 0.5 ? lo[ch] + (mid[ch] - lo[ch]) * (t / 0.5)
                              : mid[ch] + (hi[ch] - mid[ch]) * ((t - 0.5) / 0.5);
    out[ch] = static_cast<std::uint8_t>(std::lround(v));
  }
  return out;
}

RgbImage heatmap_image(const Matrix& m, int cell_px) {
  if (m.rows < 1 || m.cols < 1) throw UsageError("cannot render an empty matrix");
  if (cell_px < 1) throw UsageError("cell size must be positive");
  double max_v = 0.0;
  for (double v : m.values) {
    if (!std::isfinite(v) || v < 0.0) throw UsageError("heatmap values must be finite and non-negative");
    max_v = std::max(max_v, v);
  }
  RgbImage img{m.cols * cell_px, m.rows * cell_px, {}};
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double v = m.at(y / cell_px, x / cell_px);
      const auto rgb = ramp_color(max_v > 0.0 ? v / max_v : 0.0);
      const std::size_t p = (static_cast<std::size_t>(y) * img.width + x) * 3;
      img.pixels[p] = rgb[0];
      img.pixels[p + 1] = rgb[1];
      img.pixels[p + 2] = rgb[2];
    }
  }
  return img;
}

void render_heatmap(const Matrix& m, const std::filesystem::path& path) {
  write_ppm(path, heatmap_image(m));
}

void write_expert_counts_csv(const std::filesystem::path& path, const RoutingTrace& trace) {
  auto os = open_out(path);
  os << "expert,count\n";
  for (int j = 0; j < trace.n_experts(); ++j) os << j << ',' << trace.expert_counts()[j] << '\n';
}

void write_class_expert_csv(const std::filesystem::path& path, const Matrix& heatmap) {
  auto os = open_out(path);
  os << "class";
  for (int j = 0; j < heatmap.cols; ++j) os << ",expert_" << j;
  os << '\n';
  for (int r = 0; r < heatmap.rows; ++r) {
    os << r;
    for (int j = 0; j < heatmap.cols; ++j) os << ',' << fmt(heatmap.at(r, j));
    os << '\n';
  }
}

void write_cooccur_csv(const std::filesystem::path& path, const Matrix& co) {
  auto os = open_out(path);
  os << "expert";
  for (int j = 0; j < co.cols; ++j) os << ",expert_" << j;
  os << '\n';
  for (int r = 0; r < co.rows; ++r) {
    os << r;
    for (int j = 0; j < co.cols; ++j) os << ',' << fmt(co.at(r, j));
    os << '\n';
  }
}

void export_analysis(const std::filesystem::path& dir, const RoutingTrace& trace) {
  std::filesystem::create_directories(dir);
  const Matrix heat = class_expert_heatmap(trace);
  const Matrix co = co_routing_matrix(trace);
  write_expert_counts_csv(dir / "expert_counts.csv", trace);
  write_class_expert_csv(dir / "class_expert.csv", heat);
  write_cooccur_csv(dir / "cooccur.csv", co);
  render_heatmap(heat, dir / "class_expert.ppm");
  render_heatmap(co, dir / "cooccur.ppm");
  auto os = open_out(dir / "summary.txt");
  const auto counts = as_doubles(trace.expert_counts());
  os << "decisions " << trace.n_decisions() << '\n';
  os << "nre " << (counts.size() >= 2 ? fmt(nre(counts)) : std::string("nan")) << '\n';
  os << "tec " << fmt(tec(counts)) << '\n';
}

}  // namespace pcmoe
