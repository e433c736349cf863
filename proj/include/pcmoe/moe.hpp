#pragma once

// PatchConvMoE: a convolution replaced by a pool of convolutional experts
// routed per spatial patch.
//
// The input map is cut into a g x g grid (see PatchGrid). For every patch and
// batch item a gating network produces a probability vector over the N
// routed experts; the k most probable experts run on that patch only and
// their outputs are summed, each scaled by its raw (not renormalised) gate
// probability. Shared experts, when configured, run on every patch and are
// added with weight 1. Patch outputs are stitched back into a map of the
// input's spatial size.
//
// The gate sees the patch alone (zero padding at the patch border). Experts
// see the patch plus a one-pixel halo taken from the surrounding map, so a
// 3x3 expert produces exactly what the replaced full-map convolution would
// produce on that patch.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pcmoe/layers.hpp"
#include "pcmoe/patch_grid.hpp"
#include "pcmoe/tensor.hpp"

namespace pcmoe {

enum class GateKind { ConvGAP, TwoConvGAP, ThreeConvGAP };
enum class ExpertKernel { k1x1, k3x3 };
enum class BalancingLoss { None, Importance, Switch, Entropy };

std::string to_string(GateKind kind);
std::string to_string(BalancingLoss kind);
std::string to_string(ExpertKernel kernel);
/// Accepts "conv", "2conv", "3conv".
GateKind parse_gate_kind(const std::string& s);
/// Accepts "none", "importance", "switch", "entropy".
BalancingLoss parse_balancing_loss(const std::string& s);
/// Accepts "1x1", "3x3".
ExpertKernel parse_expert_kernel(const std::string& s);

struct MoEConfig {
  int n_experts = 8;
  int top_k = 2;
  int grid = 3;
  GateKind gate = GateKind::TwoConvGAP;
  int gate_hidden_channels = 16;
  int n_shared = 0;
  ExpertKernel expert_kernel = ExpertKernel::k3x3;
  int in_channels = 16;
  int out_channels = 16;
  BalancingLoss balancing = BalancingLoss::Entropy;
  double loss_weight = 0.01;

  int kernel_size() const { return expert_kernel == ExpertKernel::k3x3 ? 3 : 1; }
  /// Throws ConfigError unless 1 <= k <= N, g >= 1, lambda >= 0 and all
  /// channel counts are positive.
  void validate() const;
};

class GateNetwork {
 public:
  static GateNetwork create(const std::string& prefix, GateKind kind, int in_channels, int hidden,
                            int n_experts);

  /// Global-average-pooled output of the last convolution, [B, N, 1, 1].
  Tensor logits(const Tensor& patch) const;
  /// softmax(logits), [B, N, 1, 1].
  Tensor forward(const Tensor& patch) const;

  std::vector<ConvLayer>& layers() { return layers_; }
  const std::vector<ConvLayer>& layers() const { return layers_; }
  int n_experts() const { return layers_.back().out_channels(); }
  int in_channels() const { return layers_.front().in_channels(); }
  std::int64_t parameter_count() const;
  void init(std::uint64_t seed);
  void append_parameters(std::vector<Parameter*>& out);

 private:
  std::vector<ConvLayer> layers_;
};

/// Experts are plain convolutions; they are applied with padding 0 to a
/// halo-extended patch.
using ConvExpert = ConvLayer;

struct RoutingDecision {
  int batch_index = 0;
  int patch_index = 0;
  std::vector<int> expert_ids;
  std::vector<double> weights;
  std::vector<double> full_probs;
};

struct TopK {
  std::vector<int> ids;
  std::vector<double> weights;
};

/// Indices of the k largest probabilities, ordered by descending weight then
/// ascending index (ties therefore go to the lower index).
TopK top_k_select(std::span<const double> probs, int k);

struct MoEOutput {
  Tensor output;                                // [B, C_o, H, W]
  std::vector<RoutingDecision> decisions;       // ordered by (batch, patch)
  Tensor gate_probs;                            // [B * p, N, 1, 1], row = patch * B + batch
  std::vector<std::vector<int>> assignments;    // selected ids per gate_probs row
  PatchGrid grid;
};

/// Sparse forward pass. When expert_calls is given it is incremented once per
/// routed-expert evaluation (shared experts are not counted).
MoEOutput moe_forward(const Tensor& f, const MoEConfig& config, const GateNetwork& gate,
                      std::span<const ConvExpert> experts, std::span<const ConvExpert> shared,
                      std::uint64_t* expert_calls = nullptr);

/// Owns the gate, routed experts and shared experts of one layer.
class PatchConvMoE {
 public:
  PatchConvMoE(MoEConfig config, const std::string& name, std::uint64_t seed);

  MoEOutput forward(const Tensor& f);

  const MoEConfig& config() const { return config_; }
  GateNetwork& gate() { return gate_; }
  const GateNetwork& gate() const { return gate_; }
  std::vector<ConvExpert>& experts() { return experts_; }
  const std::vector<ConvExpert>& experts() const { return experts_; }
  std::vector<ConvExpert>& shared() { return shared_; }
  const std::vector<ConvExpert>& shared() const { return shared_; }

  std::vector<Parameter*> parameters();
  std::uint64_t expert_calls() const { return expert_calls_; }
  void reset_expert_calls() { expert_calls_ = 0; }

 private:
  MoEConfig config_;
  GateNetwork gate_;
  std::vector<ConvExpert> experts_;
  std::vector<ConvExpert> shared_;
  std::uint64_t expert_calls_ = 0;
};

struct ParamCount {
  std::int64_t total = 0;
  std::int64_t active = 0;
};

std::int64_t gate_parameter_count(const MoEConfig& config);
std::int64_t expert_parameter_count(const MoEConfig& config);
/// total = gate + (N + shared) * expert; active = gate + (k + shared) * expert.
ParamCount count_parameters(const MoEConfig& config);

struct FlopCount {
  std::int64_t total = 0;
  std::int64_t active = 0;
};

/// FLOPs (2 per multiply-accumulate) of the gate convolutions over all
/// patches plus the experts: k + shared per patch for active, N + shared for
/// total. Bias additions, pooling, softmax and the weighted sum are ignored.
FlopCount estimate_flops(const MoEConfig& config, int height, int width);

}  // namespace pcmoe
