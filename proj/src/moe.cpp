#include "pcmoe/moe.hpp"

#include <algorithm>
#include <numeric>

#include "pcmoe/errors.hpp"

namespace pcmoe {

std::string to_string(GateKind kind) {
  switch (kind) {
    case GateKind::ConvGAP: return "conv";
    case GateKind::TwoConvGAP: return "2conv";
    case GateKind::ThreeConvGAP: return "3conv";
  }
  return "?";
}

std::string to_string(BalancingLoss kind) {
  switch (kind) {
    case BalancingLoss::None: return "none";
    case BalancingLoss::Importance: return "importance";
    case BalancingLoss::Switch: return "switch";
    case BalancingLoss::Entropy: return "entropy";
  }
  return "?";
}

std::string to_string(ExpertKernel kernel) { return kernel == ExpertKernel::k3x3 ? "3x3" : "1x1"; }

GateKind parse_gate_kind(const std::string& s) {
  if (s == "conv") return GateKind::ConvGAP;
  if (s == "2conv") return GateKind::TwoConvGAP;
  if (s == "3conv") return GateKind::ThreeConvGAP;
  throw ConfigError("unknown gate kind '" + s + "' (expected conv, 2conv or 3conv)");
}

BalancingLoss parse_balancing_loss(const std::string& s) {
  if (s == "none") return BalancingLoss::None;
  if (s == "importance") return BalancingLoss::Importance;
  if (s == "switch") return BalancingLoss::Switch;
  if (s == "entropy") return BalancingLoss::Entropy;
  throw ConfigError("unknown balancing loss '" + s +
                    "' (expected none, importance, switch or entropy)");
}

ExpertKernel parse_expert_kernel(const std::string& s) {
  if (s == "1x1") return ExpertKernel::k1x1;
  if (s == "3x3") return ExpertKernel::k3x3;
  throw ConfigError("unknown expert kernel '" + s + "' (expected 1x1 or 3x3)");
}

void MoEConfig::validate() const {
  if (n_experts < 1) throw ConfigError("number of experts must be at least 1");
  if (top_k < 1 || top_k > n_experts) {
    throw ConfigError("top-k must satisfy 1 <= k <= N (k = " + std::to_string(top_k) +
                      ", N = " + std::to_string(n_experts) + ")");
  }
  if (grid < 1) throw ConfigError("grid size must be at least 1");
  if (gate_hidden_channels < 1) throw ConfigError("gate hidden channels must be positive");
  if (n_shared < 0) throw ConfigError("number of shared experts must be non-negative");
  if (in_channels < 1 || out_channels < 1) throw ConfigError("channel counts must be positive");
  if (!(loss_weight >= 0.0)) throw ConfigError("balancing loss weight must be non-negative");
}

// ---- gate -----------------------------------------------------------------

GateNetwork GateNetwork::create(const std::string& prefix, GateKind kind, int in_channels,
                                int hidden, int n_experts) {
  GateNetwork gate;
  int depth = 1;
  if (kind == GateKind::TwoConvGAP) depth = 2;
  if (kind == GateKind::ThreeConvGAP) depth = 3;
  int in = in_channels;
  for (int i = 0; i < depth; ++i) {
    const int out = (i + 1 == depth) ? n_experts : hidden;
    gate.layers_.push_back(
        ConvLayer::create(prefix + ".conv" + std::to_string(i), in, out, 3, 1, 1));
    in = out;
  }
  return gate;
}

Tensor GateNetwork::logits(const Tensor& patch) const {
  if (patch.shape().c != in_channels()) {
    throw ConfigError("gate expects " + std::to_string(in_channels()) + " channels, patch has " +
                      std::to_string(patch.shape().c));
  }
  Tensor x = patch;
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) x = relu(layers_[i].forward(x));
  // The last convolution only feeds the average pool, so it is folded into
  // it; only stride-1 layers reach here.
  const ConvLayer& last = layers_.back();
  return conv2d_mean(x, last.weight.value, last.bias.value, last.padding);
}

Tensor GateNetwork::forward(const Tensor& patch) const { return softmax_channels(logits(patch)); }

std::int64_t GateNetwork::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& l : layers_) n += l.parameter_count();
  return n;
}

void GateNetwork::init(std::uint64_t seed) {
  for (auto& l : layers_) l.init(seed);
}

void GateNetwork::append_parameters(std::vector<Parameter*>& out) {
  for (auto& l : layers_) l.append_parameters(out);
}

// ---- routing --------------------------------------------------------------

TopK top_k_select(std::span<const double> probs, int k) {
  if (k < 1 || static_cast<std::size_t>(k) > probs.size()) {
    throw ConfigError("top-k must satisfy 1 <= k <= N (k = " + std::to_string(k) +
                      ", N = " + std::to_string(probs.size()) + ")");
  }
  std::vector<int> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
    if (probs[a] != probs[b]) return probs[a] > probs[b];
    return a < b;
  });
  TopK out;
  out.ids.assign(order.begin(), order.begin() + k);
  for (int id : out.ids) out.weights.push_back(probs[id]);
  return out;
}

MoEOutput moe_forward(const Tensor& f, const MoEConfig& config, const GateNetwork& gate,
                      std::span<const ConvExpert> experts, std::span<const ConvExpert> shared,
                      std::uint64_t* expert_calls) {
  config.validate();
  const int N = config.n_experts;
  const int kk = config.kernel_size();
  if (static_cast<int>(experts.size()) != N) {
    throw ConfigError("expected " + std::to_string(N) + " experts, got " +
                      std::to_string(experts.size()));
  }
  if (static_cast<int>(shared.size()) != config.n_shared) {
    throw ConfigError("expected " + std::to_string(config.n_shared) + " shared experts, got " +
                      std::to_string(shared.size()));
  }
  const Shape expected_w{config.out_channels, config.in_channels, kk, kk};
  for (const auto* pool : {&experts, &shared}) {
    for (const auto& e : *pool) {
      if (e.weight.value.shape() != expected_w) {
        throw ConfigError("expert weight " + to_string(e.weight.value.shape()) +
                          " inconsistent with configured " + to_string(expected_w));
      }
    }
  }
  if (gate.n_experts() != N) throw ConfigError("gate output size does not match expert count");
  const Shape s = f.shape();
  if (s.c != config.in_channels) {
    throw ConfigError("MoE layer expects " + std::to_string(config.in_channels) +
                      " input channels, got " + std::to_string(s.c));
  }

  MoEOutput result;
  result.grid = PatchGrid::make(s.h, s.w, config.grid);
  const int halo = kk / 2;
  const int P = result.grid.patch_count();
  std::vector<Tensor> prob_rows;
  std::vector<Block> blocks;
  prob_rows.reserve(static_cast<std::size_t>(P));
  blocks.reserve(static_cast<std::size_t>(P) * s.n);
  result.assignments.resize(static_cast<std::size_t>(P) * s.n);
  result.decisions.resize(static_cast<std::size_t>(P) * s.n);

  for (int i = 0; i < P; ++i) {
    const PatchRect& r = result.grid.rect(i);
    const Tensor patch = crop(f, 0, s.n, r.row0, r.col0, r.height(), r.width());
    const Tensor probs = gate.forward(patch);
    prob_rows.push_back(probs);
    for (int b = 0; b < s.n; ++b) {
      const auto row = probs.data().subspan(static_cast<std::size_t>(b) * N, N);
      TopK sel = top_k_select(row, config.top_k);
      const Tensor region = crop(f, b, 1, r.row0 - halo, r.col0 - halo, r.height() + 2 * halo,
                                 r.width() + 2 * halo);
      // Selected experts and shared experts run together on one lowering of
      // the region; nothing else is evaluated for this patch.
      std::vector<MixtureTerm> terms;
      terms.reserve(sel.ids.size() + shared.size());
      for (int id : sel.ids) {
        const ConvExpert& e = experts[static_cast<std::size_t>(id)];
        terms.push_back({e.weight.value, e.bias.value, static_cast<std::size_t>(b) * N + id});
        if (expert_calls != nullptr) ++*expert_calls;
      }
      for (const auto& e : shared) terms.push_back({e.weight.value, e.bias.value});
      blocks.push_back({mixture_conv2d(region, terms, probs), b, r.row0, r.col0});

      result.assignments[static_cast<std::size_t>(i) * s.n + b] = sel.ids;
      RoutingDecision& d = result.decisions[static_cast<std::size_t>(b) * P + i];
      d.batch_index = b;
      d.patch_index = i;
      d.expert_ids = std::move(sel.ids);
      d.weights = std::move(sel.weights);
      d.full_probs.assign(row.begin(), row.end());
    }
  }
  result.output = assemble(blocks, Shape{s.n, config.out_channels, s.h, s.w});
  result.gate_probs = concat_batch(prob_rows);
  return result;
}

// ---- layer ----------------------------------------------------------------

PatchConvMoE::PatchConvMoE(MoEConfig config, const std::string& name, std::uint64_t seed)
    : config_(config) {
  config_.validate();
  const int kk = config_.kernel_size();
  gate_ = GateNetwork::create(name + ".gate", config_.gate, config_.in_channels,
                              config_.gate_hidden_channels, config_.n_experts);
  gate_.init(seed);
  for (int j = 0; j < config_.n_experts; ++j) {
    experts_.push_back(ConvLayer::create(name + ".expert" + std::to_string(j), config_.in_channels,
                                         config_.out_channels, kk, 1, 0));
    experts_.back().init(seed);
  }
  for (int j = 0; j < config_.n_shared; ++j) {
    shared_.push_back(ConvLayer::create(name + ".shared" + std::to_string(j), config_.in_channels,
                                        config_.out_channels, kk, 1, 0));
    shared_.back().init(seed);
  }
}

MoEOutput PatchConvMoE::forward(const Tensor& f) {
  return moe_forward(f, config_, gate_, experts_, shared_, &expert_calls_);
}

std::vector<Parameter*> PatchConvMoE::parameters() {
  std::vector<Parameter*> out;
  gate_.append_parameters(out);
  for (auto& e : experts_) e.append_parameters(out);
  for (auto& e : shared_) e.append_parameters(out);
  return out;
}

// ---- accounting -----------------------------------------------------------

std::int64_t gate_parameter_count(const MoEConfig& c) {
  const std::int64_t h = c.gate_hidden_channels;
  const std::int64_t in = c.in_channels;
  const std::int64_t n = c.n_experts;
  switch (c.gate) {
    case GateKind::ConvGAP: return n * in * 9 + n;
    case GateKind::TwoConvGAP: return (h * in * 9 + h) + (n * h * 9 + n);
    case GateKind::ThreeConvGAP: return (h * in * 9 + h) + (h * h * 9 + h) + (n * h * 9 + n);
  }
  return 0;
}

std::int64_t expert_parameter_count(const MoEConfig& c) {
  const std::int64_t kk = c.kernel_size();
  return static_cast<std::int64_t>(c.out_channels) * c.in_channels * kk * kk + c.out_channels;
}

ParamCount count_parameters(const MoEConfig& c) {
  c.validate();
  const std::int64_t gate = gate_parameter_count(c);
  const std::int64_t expert = expert_parameter_count(c);
  return {gate + (c.n_experts + c.n_shared) * expert, gate + (c.top_k + c.n_shared) * expert};
}

FlopCount estimate_flops(const MoEConfig& c, int height, int width) {
  c.validate();
  PatchGrid::make(height, width, c.grid);  // validates the grid against the map
  const std::int64_t pixels = static_cast<std::int64_t>(height) * width;
  const std::int64_t h = c.gate_hidden_channels;
  const std::int64_t in = c.in_channels;
  const std::int64_t n = c.n_experts;
  std::int64_t gate_per_pixel = 0;
  switch (c.gate) {
    case GateKind::ConvGAP: gate_per_pixel = n * in * 9; break;
    case GateKind::TwoConvGAP: gate_per_pixel = h * in * 9 + n * h * 9; break;
    case GateKind::ThreeConvGAP: gate_per_pixel = h * in * 9 + h * h * 9 + n * h * 9; break;
  }
  const std::int64_t kk = c.kernel_size();
  const std::int64_t expert_per_pixel = static_cast<std::int64_t>(c.out_channels) * in * kk * kk;
  const std::int64_t gate_macs = gate_per_pixel * pixels;
  const std::int64_t expert_macs = expert_per_pixel * pixels;
  return {2 * (gate_macs + (c.n_experts + c.n_shared) * expert_macs),
          2 * (gate_macs + (c.top_k + c.n_shared) * expert_macs)};
}

}  // namespace pcmoe
