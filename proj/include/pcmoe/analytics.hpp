#pragma once

// Routing-collapse analytics: normalized routing entropy (NRE), top expert
// concentration (TEC), class-by-expert heatmaps and co-routing matrices.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "pcmoe/image_io.hpp"
#include "pcmoe/trace_io.hpp"

namespace pcmoe {

struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;  // row-major

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), values(static_cast<std::size_t>(r) * c, 0.0) {}
  double& at(int r, int c) { return values[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
};

/// Hard-count aggregation of routing decisions. Every top-k slot counts
/// once; a decision adds its patch's class pixel fractions to the column of
/// each selected expert; each unordered pair of selected experts is one
/// co-occurrence.
class RoutingTrace {
 public:
  RoutingTrace(int n_experts, int n_classes);

  void add(std::span<const int> expert_ids, std::span<const double> class_fractions);

  int n_experts() const { return n_experts_; }
  int n_classes() const { return n_classes_; }
  int k() const { return k_; }
  std::int64_t n_decisions() const { return n_decisions_; }
  const std::vector<std::int64_t>& expert_counts() const { return expert_counts_; }
  const Matrix& class_expert_counts() const { return class_expert_; }
  std::int64_t cooccur(int a, int b) const {
    return cooccur_[static_cast<std::size_t>(a) * n_experts_ + b];
  }

 private:
  int n_experts_;
  int n_classes_;
  int k_ = 0;
  std::int64_t n_decisions_ = 0;
  std::vector<std::int64_t> expert_counts_;
  Matrix class_expert_;
  std::vector<std::int64_t> cooccur_;
};

/// Builds a trace from records; n_experts is taken from full_probs.
RoutingTrace build_trace(std::span<const TraceRecord> records, int n_classes);

/// H(q) / ln N with q = counts / sum(counts). Requires N >= 2 and a positive
/// total.
double nre(std::span<const double> counts);
/// max_j counts_j / sum(counts).
double tec(std::span<const double> counts);
std::vector<double> as_doubles(std::span<const std::int64_t> counts);

/// Row-normalised class_expert_counts; rows of absent classes stay zero.
Matrix class_expert_heatmap(const RoutingTrace& trace);
/// cooccur_counts / n_decisions.
Matrix co_routing_matrix(const RoutingTrace& trace);

/// Colour ramp for t in [0, 1]: piecewise linear through (255,255,255),
/// (253,141,60) at 0.5 and (128,0,38) at 1. Every channel is non-increasing.
std::array<std::uint8_t, 3> ramp_color(double t);

/// One cell per entry, coloured by ramp_color(value / max) (all cells at
/// t = 0 when max is 0), each cell cell_px x cell_px pixels.
RgbImage heatmap_image(const Matrix& m, int cell_px = 32);
void render_heatmap(const Matrix& m, const std::filesystem::path& path);

void write_expert_counts_csv(const std::filesystem::path& path, const RoutingTrace& trace);
void write_class_expert_csv(const std::filesystem::path& path, const Matrix& heatmap);
void write_cooccur_csv(const std::filesystem::path& path, const Matrix& co_routing);

/// expert_counts.csv, class_expert.csv, cooccur.csv, class_expert.ppm,
/// cooccur.ppm and summary.txt (NRE / TEC) into dir.
void export_analysis(const std::filesystem::path& dir, const RoutingTrace& trace);

}  // namespace pcmoe
