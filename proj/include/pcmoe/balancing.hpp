#pragma once

// Auxiliary losses that discourage routing collapse. All three read a batch
// of gate probability vectors (one row per batch item and patch) and are
// differentiable with respect to those probabilities.

#include <vector>

#include "pcmoe/moe.hpp"
#include "pcmoe/tensor.hpp"

namespace pcmoe {

struct GateBatch {
  Tensor probs;                               // [rows, N, 1, 1]
  std::vector<std::vector<int>> assignments;  // top-k ids per row

  int rows() const { return probs.shape().n; }
  int experts() const { return probs.shape().c; }
  /// Throws ConfigError if rows and assignments disagree or ids are out of range.
  void validate() const;
};

GateBatch gate_batch(const MoEOutput& out);

/// Squared coefficient of variation of per-expert importance
/// (column sums), population variance: Var(I) / Mean(I)^2.
Tensor importance_loss(const GateBatch& batch);

/// N * sum_j f_j * P_j with f_j = count_j / (rows * k) over every top-k slot
/// (held constant) and P_j the mean probability of expert j.
Tensor switch_loss(const GateBatch& batch);

/// ln N - H(p_bar), p_bar the batch-mean probability vector, 0 ln 0 = 0.
Tensor entropy_loss(const GateBatch& batch);

/// Dispatches on kind; BalancingLoss::None yields a constant zero.
Tensor balancing_loss(BalancingLoss kind, const GateBatch& batch);

/// task + lambda * balancing.
Tensor total_loss(const Tensor& task, const Tensor& balancing, double lambda);

}  // namespace pcmoe
