#include "pcmoe/balancing.hpp"

#include <cmath>
#include <limits>

#include "pcmoe/errors.hpp"

namespace pcmoe {

namespace {

std::vector<double> column_sums(const GateBatch& b) {
  const int N = b.experts();
  std::vector<double> s(static_cast<std::size_t>(N), 0.0);
  const auto p = b.probs.data();
  for (int r = 0; r < b.rows(); ++r)
    for (int j = 0; j < N; ++j) s[j] += p[static_cast<std::size_t>(r) * N + j];
  return s;
}

// Builds a scalar whose gradient w.r.t. probs[r, j] is dcol[j] for every row.
Tensor column_loss(const GateBatch& b, double value, std::vector<double> dcol, const char* op) {
  auto pn = b.probs.node();
  const int N = b.experts();
  return make_result(
      Shape{}, {value}, {b.probs},
      [pn, N, dcol = std::move(dcol)](const detail::Node& self) {
        auto& g = pn->grad_buffer();
        const std::size_t rows = g.size() / static_cast<std::size_t>(N);
        for (std::size_t r = 0; r < rows; ++r)
          for (int j = 0; j < N; ++j) g[r * N + j] += self.grad[0] * dcol[j];
      },
      op);
}

}  // namespace

void GateBatch::validate() const {
  const Shape s = probs.shape();
  if (s.h != 1 || s.w != 1) throw ConfigError("gate batch probabilities must be [rows, N, 1, 1]");
  if (static_cast<int>(assignments.size()) != s.n) {
    throw ConfigError("gate batch has " + std::to_string(s.n) + " rows but " +
                      std::to_string(assignments.size()) + " assignments");
  }
  for (const auto& a : assignments) {
    for (int id : a) {
      if (id < 0 || id >= s.c) throw ConfigError("assignment id out of range");
    }
  }
}

GateBatch gate_batch(const MoEOutput& out) { return {out.gate_probs, out.assignments}; }

Tensor importance_loss(const GateBatch& batch) {
  batch.validate();
  const int N = batch.experts();
  const auto imp = column_sums(batch);
  double mean = 0.0;
  for (double v : imp) mean += v;
  mean /= N;
  double var = 0.0;
  for (double v : imp) var += (v - mean) * (v - mean);
  var /= N;
  const double m2 = mean * mean;
  std::vector<double> dcol(static_cast<std::size_t>(N));
  for (int j = 0; j < N; ++j) {
    dcol[j] = 2.0 * (imp[j] - mean) / (N * m2) - 2.0 * var / (N * m2 * mean);
  }
  return column_loss(batch, var / m2, std::move(dcol), "importance_loss");
}

Tensor switch_loss(const GateBatch& batch) {
  batch.validate();
  const int N = batch.experts();
  const int rows = batch.rows();
  std::vector<double> counts(static_cast<std::size_t>(N), 0.0);
  double slots = 0.0;
  for (const auto& a : batch.assignments) {
    for (int id : a) counts[id] += 1.0;
    slots += static_cast<double>(a.size());
  }
  const auto col = column_sums(batch);
  double value = 0.0;
  std::vector<double> dcol(static_cast<std::size_t>(N));
  for (int j = 0; j < N; ++j) {
    const double f = slots > 0.0 ? counts[j] / slots : 0.0;
    value += f * col[j] / rows;
    dcol[j] = N * f / rows;
  }
  return column_loss(batch, N * value, std::move(dcol), "switch_loss");
}

Tensor entropy_loss(const GateBatch& batch) {
  batch.validate();
  const int N = batch.experts();
  const auto col = column_sums(batch);
  const double rows = batch.rows();
  double neg_entropy = 0.0;
  std::vector<double> dcol(static_cast<std::size_t>(N));
  for (int j = 0; j < N; ++j) {
    const double p = col[j] / rows;
    if (p > 0.0) neg_entropy += p * std::log(p);
    dcol[j] = (std::log(std::max(p, std::numeric_limits<double>::min())) + 1.0) / rows;
  }
  return column_loss(batch, std::log(static_cast<double>(N)) + neg_entropy, std::move(dcol),
                     "entropy_loss");
}

Tensor balancing_loss(BalancingLoss kind, const GateBatch& batch) {
  switch (kind) {
    case BalancingLoss::None: return Tensor::scalar(0.0);
    case BalancingLoss::Importance: return importance_loss(batch);
    case BalancingLoss::Switch: return switch_loss(batch);
    case BalancingLoss::Entropy: return entropy_loss(batch);
  }
  return Tensor::scalar(0.0);
}

Tensor total_loss(const Tensor& task, const Tensor& balancing, double lambda) {
  if (!(lambda >= 0.0)) throw ConfigError("balancing loss weight must be non-negative");
  if (lambda == 0.0) return task;
  return add(task, scale(balancing, lambda));
}

}  // namespace pcmoe
