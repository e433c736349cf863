#include "pcmoe/selftest.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>

#include "pcmoe/analytics.hpp"
#include "pcmoe/balancing.hpp"
#include "pcmoe/moe.hpp"
#include "pcmoe/patch_grid.hpp"
#include "pcmoe/rng.hpp"
#include "pcmoe/seg.hpp"

namespace pcmoe {

namespace {

constexpr double kFdStep = 1e-5;
constexpr double kGradTol = 1e-4;
constexpr double kGradFloor = 1e-6;  // denominators below this count as this
constexpr double kOracleTol = 1e-10;
constexpr double kAnchorTol = 1e-10;

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

Tensor random_tensor(Shape s, Rng& rng, bool grad = true, double scale = 1.0) {
  std::vector<double> v(s.numel());
  for (double& x : v) x = scale * rng.normal();
  return Tensor::from_data(s, std::move(v), grad);
}

// One evaluation of a family of losses that share a forward pass. The
// signature identifies the discrete routing so coordinates whose
// perturbation changes it can be excluded.
struct Evaluation {
  std::vector<Tensor> losses;
  std::vector<int> signature;
};

struct GradReport {
  double max_rel = 0.0;  // over all losses and checked coordinates
  int checked = 0;
  int skipped = 0;
};

GradReport check_gradients(const std::function<Evaluation()>& eval, const std::vector<Tensor*>& leaves) {
  GradReport report;
  const Evaluation base = eval();
  const std::size_t L = base.losses.size();
  std::vector<std::vector<std::vector<double>>> analytic(L);
  for (std::size_t l = 0; l < L; ++l) {
    for (Tensor* t : leaves) t->zero_grad();
    const Evaluation e = eval();
    backward(e.losses[l]);
    for (Tensor* t : leaves) analytic[l].emplace_back(t->grad().begin(), t->grad().end());
  }
  NoGradGuard no_grad;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto values = leaves[li]->mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + kFdStep;
      const Evaluation plus = eval();
      values[i] = orig - kFdStep;
      const Evaluation minus = eval();
      values[i] = orig;
      if (plus.signature != base.signature || minus.signature != base.signature) {
        ++report.skipped;
        continue;
      }
      ++report.checked;
      for (std::size_t l = 0; l < L; ++l) {
        const double numeric = (plus.losses[l].item() - minus.losses[l].item()) / (2 * kFdStep);
        const double a = analytic[l][li][i];
        const double denom = std::max({std::abs(a), std::abs(numeric), kGradFloor});
        report.max_rel = std::max(report.max_rel, std::abs(a - numeric) / denom);
      }
    }
  }
  return report;
}

CheckResult grad_result(std::string name, const GradReport& r) {
  CheckResult c{std::move(name), r.max_rel < kGradTol && r.checked > 0, "", 0.0};
  c.detail = "max rel err " + fmt("%.2e", r.max_rel) + " over " + std::to_string(r.checked) +
             " coordinates";
  if (r.skipped > 0) c.detail += ", " + std::to_string(r.skipped) + " skipped at routing changes";
  return c;
}

// Weighted sum so every output element influences the scalar differently.
Tensor probe_loss(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

std::vector<Tensor*> leaves_of(std::vector<Parameter*> params) {
  std::vector<Tensor*> out;
  for (Parameter* p : params) out.push_back(&p->value);
  return out;
}

// ---- primitive gradients --------------------------------------------------

CheckResult check_conv_grad(Rng& rng) {
  GradReport total;
  struct Case { int cin, cout, h, w, k, stride, pad; };
  const Case cases[] = {{2, 3, 6, 5, 3, 1, 1}, {3, 2, 7, 7, 3, 2, 1}, {2, 2, 5, 6, 1, 1, 0},
                        {2, 3, 7, 5, 3, 2, 0}, {1, 2, 5, 5, 3, 1, 2}};
  for (const Case& c : cases) {
    Tensor x = random_tensor({2, c.cin, c.h, c.w}, rng);
    Tensor w = random_tensor({c.cout, c.cin, c.k, c.k}, rng);
    Tensor b = random_tensor({1, c.cout, 1, 1}, rng);
    const Tensor y0 = conv2d(x, w, b, c.stride, c.pad);
    const Tensor probe = random_tensor(y0.shape(), rng, false);
    const auto r = check_gradients(
        [&] { return Evaluation{{probe_loss(conv2d(x, w, b, c.stride, c.pad), probe)}, {}}; },
        {&x, &w, &b});
    total.max_rel = std::max(total.max_rel, r.max_rel);
    total.checked += r.checked;
  }
  return grad_result("gradient: conv2d", total);
}

CheckResult check_fused_grad(Rng& rng) {
  GradReport total;
  auto merge = [&](const GradReport& r) {
    total.max_rel = std::max(total.max_rel, r.max_rel);
    total.checked += r.checked;
  };
  for (int pad : {0, 1}) {
    Tensor x = random_tensor({2, 3, 5, 6}, rng);
    Tensor w = random_tensor({4, 3, 3, 3}, rng);
    Tensor b = random_tensor({1, 4, 1, 1}, rng);
    const Tensor probe = random_tensor({2, 4, 1, 1}, rng, false);
    merge(check_gradients(
        [&] { return Evaluation{{probe_loss(conv2d_mean(x, w, b, pad), probe)}, {}}; }, {&x, &w, &b}));
  }
  Tensor x = random_tensor({1, 2, 6, 5}, rng);
  Tensor s = random_tensor({1, 4, 1, 1}, rng);
  Tensor w0 = random_tensor({3, 2, 3, 3}, rng), b0 = random_tensor({1, 3, 1, 1}, rng);
  Tensor w1 = random_tensor({3, 2, 3, 3}, rng), b1 = random_tensor({1, 3, 1, 1}, rng);
  Tensor w2 = random_tensor({3, 2, 3, 3}, rng), b2 = random_tensor({1, 3, 1, 1}, rng);
  const Tensor probe = random_tensor({1, 3, 4, 3}, rng, false);
  merge(check_gradients(
      [&] {
        const std::vector<MixtureTerm> terms{{w0, b0, 3}, {w1, b1, 1}, {w2, b2}};
        return Evaluation{{probe_loss(mixture_conv2d(x, terms, s), probe)}, {}};
      },
      {&x, &s, &w0, &b0, &w1, &b1, &w2, &b2}));
  return grad_result("gradient: fused gate pooling and expert mixture", total);
}

CheckResult check_op_grads(Rng& rng) {
  Tensor x = random_tensor({2, 3, 4, 5}, rng);
  Tensor y = random_tensor({2, 3, 4, 5}, rng);
  Tensor logits = random_tensor({3, 4, 1, 1}, rng);
  Tensor blk = random_tensor({1, 3, 2, 3}, rng);
  const Tensor p_up = random_tensor({2, 3, 8, 10}, rng, false);
  const Tensor p_crop = random_tensor({1, 3, 4, 4}, rng, false);
  const Tensor p_soft = random_tensor({3, 4, 1, 1}, rng, false);
  const Tensor p_asm = random_tensor({2, 3, 4, 5}, rng, false);
  const Tensor p_cat = random_tensor({4, 3, 4, 5}, rng, false);
  // Shift away from the ReLU kink so the difference quotient is clean.
  for (double& v : x.mutable_data()) v += v >= 0 ? 0.05 : -0.05;
  const auto r = check_gradients(
      [&] {
        std::vector<Tensor> losses;
        losses.push_back(probe_loss(upsample_nearest(relu(x), 2), p_up));
        losses.push_back(probe_loss(crop(mul(x, y), 1, 1, -1, 2, 4, 4), p_crop));
        losses.push_back(probe_loss(softmax_channels(logits), p_soft));
        losses.push_back(probe_loss(assemble({{blk, 1, 1, 2}, {scale(blk, 2.0), 0, 0, 0}}, x.shape()), p_asm));
        losses.push_back(probe_loss(concat_batch({x, add(x, y)}), p_cat));
        losses.push_back(mean(scale_by_entry(y, logits, 5)));
        return Evaluation{losses, {}};
      },
      {&x, &y, &logits, &blk});
  return grad_result("gradient: elementwise, pooling and layout ops", r);
}

// ---- MoE gradient check ---------------------------------------------------

MoEConfig random_small_config(Rng& rng) {
  MoEConfig c;
  c.n_experts = 2 + static_cast<int>(rng.uniform_int(3));  // 2..4
  c.top_k = 1 + static_cast<int>(rng.uniform_int(std::min(2, c.n_experts)));
  c.grid = 1 + static_cast<int>(rng.uniform_int(3));
  c.gate = static_cast<GateKind>(rng.uniform_int(3));
  c.gate_hidden_channels = 4;
  c.n_shared = static_cast<int>(rng.uniform_int(2));
  c.expert_kernel = rng.uniform_int(4) == 0 ? ExpertKernel::k1x1 : ExpertKernel::k3x3;
  c.in_channels = 3;
  c.out_channels = 3;
  return c;
}

std::vector<int> routing_signature(const MoEOutput& out) {
  std::vector<int> sig;
  for (const auto& a : out.assignments) sig.insert(sig.end(), a.begin(), a.end());
  return sig;
}

CheckResult check_moe_grad(int seeds, std::uint64_t base_seed) {
  GradReport total;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(splitmix64(base_seed * 1000 + static_cast<std::uint64_t>(s)));
    const MoEConfig cfg = random_small_config(rng);
    PatchConvMoE layer(cfg, "st", rng.next());
    const int H = 8, W = 8, B = 2;
    const Tensor f = random_tensor({B, cfg.in_channels, H, W}, rng, false);
    std::vector<LabelMap> labels(B);
    for (auto& m : labels) {
      m = {H, W, std::vector<int>(static_cast<std::size_t>(H) * W)};
      for (int& v : m.labels) v = static_cast<int>(rng.uniform_int(cfg.out_channels));
    }
    const auto r = check_gradients(
        [&] {
          MoEOutput out = layer.forward(f);
          const Tensor ce = pixel_cross_entropy(out.output, labels);
          const GateBatch gb = gate_batch(out);
          Evaluation e;
          e.losses.push_back(ce);
          for (auto kind : {BalancingLoss::Importance, BalancingLoss::Switch, BalancingLoss::Entropy}) {
            e.losses.push_back(total_loss(ce, balancing_loss(kind, gb), 0.5));
          }
          e.signature = routing_signature(out);
          return e;
        },
        leaves_of(layer.parameters()));
    total.max_rel = std::max(total.max_rel, r.max_rel);
    total.checked += r.checked;
    total.skipped += r.skipped;
  }
  return grad_result("gradient: moe + cross-entropy + balancing losses (" + std::to_string(seeds) +
                         " seeds)",
                     total);
}

// ---- dense oracle ---------------------------------------------------------

// Every expert runs on the whole map; per patch the output keeps the selected
// experts' windows scaled by their gate probabilities. Gate probabilities are
// recomposed from primitives on each patch.
Tensor dense_oracle(const Tensor& f, const MoEConfig& cfg, const PatchConvMoE& layer) {
  NoGradGuard no_grad;
  const Shape s = f.shape();
  const int pad = cfg.kernel_size() / 2;
  std::vector<Tensor> full;
  for (const auto& e : layer.experts()) full.push_back(conv2d(f, e.weight.value, e.bias.value, 1, pad));
  std::vector<Tensor> shared;
  for (const auto& e : layer.shared()) shared.push_back(conv2d(f, e.weight.value, e.bias.value, 1, pad));
  const PatchGrid grid = PatchGrid::make(s.h, s.w, cfg.grid);
  std::vector<double> out(static_cast<std::size_t>(s.n) * cfg.out_channels * s.h * s.w, 0.0);
  const int Co = cfg.out_channels;
  for (const PatchRect& r : grid.rects()) {
    for (int b = 0; b < s.n; ++b) {
      Tensor h = crop(f, b, 1, r.row0, r.col0, r.height(), r.width());
      const auto& gl = layer.gate().layers();
      for (std::size_t i = 0; i < gl.size(); ++i) {
        h = conv2d(h, gl[i].weight.value, gl[i].bias.value, 1, gl[i].padding);
        if (i + 1 < gl.size()) h = relu(h);
      }
      const Tensor probs = softmax_channels(global_avg_pool(h));
      std::vector<double> mask(static_cast<std::size_t>(cfg.n_experts), 0.0);
      const TopK sel = top_k_select(probs.data(), cfg.top_k);
      for (std::size_t j = 0; j < sel.ids.size(); ++j) mask[sel.ids[j]] = sel.weights[j];
      for (int co = 0; co < Co; ++co) {
        for (int y = r.row0; y < r.row1; ++y) {
          for (int x = r.col0; x < r.col1; ++x) {
            double acc = 0.0;
            for (int j = 0; j < cfg.n_experts; ++j) acc += mask[j] * full[j].at(b, co, y, x);
            for (const auto& t : shared) acc += t.at(b, co, y, x);
            out[((static_cast<std::size_t>(b) * Co + co) * s.h + y) * s.w + x] = acc;
          }
        }
      }
    }
  }
  return Tensor::from_data({s.n, Co, s.h, s.w}, std::move(out));
}

CheckResult check_dense_oracle(int configs, std::uint64_t base_seed) {
  double worst = 0.0;
  for (int i = 0; i < configs; ++i) {
    Rng rng(splitmix64(base_seed * 7919 + static_cast<std::uint64_t>(i)));
    MoEConfig cfg;
    cfg.n_experts = 1 + static_cast<int>(rng.uniform_int(8));
    cfg.top_k = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.n_experts)));
    cfg.gate = static_cast<GateKind>(rng.uniform_int(3));
    cfg.gate_hidden_channels = 2 + static_cast<int>(rng.uniform_int(4));
    cfg.n_shared = static_cast<int>(rng.uniform_int(2));
    cfg.expert_kernel = rng.uniform_int(2) == 0 ? ExpertKernel::k1x1 : ExpertKernel::k3x3;
    cfg.in_channels = 1 + static_cast<int>(rng.uniform_int(3));
    cfg.out_channels = 1 + static_cast<int>(rng.uniform_int(3));
    const int H = 4 + static_cast<int>(rng.uniform_int(9));
    const int W = 4 + static_cast<int>(rng.uniform_int(9));
    cfg.grid = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(std::min({4, H, W}))));
    PatchConvMoE layer(cfg, "oracle", rng.next());
    const Tensor f = random_tensor({2, cfg.in_channels, H, W}, rng, false);
    NoGradGuard no_grad;
    const Tensor sparse = layer.forward(f).output;
    const Tensor dense = dense_oracle(f, cfg, layer);
    for (std::size_t j = 0; j < sparse.numel(); ++j) {
      worst = std::max(worst, std::abs(sparse.data()[j] - dense.data()[j]));
    }
  }
  return {"dense-oracle equivalence (" + std::to_string(configs) + " configs)", worst <= kOracleTol,
          "max abs diff " + fmt("%.2e", worst), 0.0};
}

// ---- conditional computation ----------------------------------------------

CheckResult check_conditional(std::uint64_t base_seed) {
  Rng rng(splitmix64(base_seed ^ 0xC0DE));
  MoEConfig cfg;
  cfg.n_experts = 6;
  cfg.top_k = 2;
  cfg.grid = 3;
  cfg.in_channels = 3;
  cfg.out_channels = 3;
  PatchConvMoE layer(cfg, "cc", rng.next());
  const Tensor f = random_tensor({3, 3, 9, 9}, rng, false);
  layer.reset_expert_calls();
  MoEOutput out = layer.forward(f);
  const std::uint64_t expected = static_cast<std::uint64_t>(cfg.top_k) * 9 * 3;
  const bool calls_ok = layer.expert_calls() == expected;

  std::vector<bool> used(static_cast<std::size_t>(cfg.n_experts), false);
  for (const auto& a : out.assignments) {
    for (int id : a) used[static_cast<std::size_t>(id)] = true;
  }
  for (Parameter* p : layer.parameters()) p->value.zero_grad();
  backward(sum(out.output));
  bool zero_ok = true;
  bool any_unused = false;
  for (int j = 0; j < cfg.n_experts; ++j) {
    if (used[static_cast<std::size_t>(j)]) continue;
    any_unused = true;
    for (double g : layer.experts()[static_cast<std::size_t>(j)].weight.value.grad()) zero_ok &= g == 0.0;
    for (double g : layer.experts()[static_cast<std::size_t>(j)].bias.value.grad()) zero_ok &= g == 0.0;
  }
  std::string detail = std::to_string(layer.expert_calls()) + " expert calls (expected " +
                       std::to_string(expected) + ")";
  detail += any_unused ? (zero_ok ? ", unselected experts have zero gradient" : ", unselected expert has gradient")
                       : ", every expert selected somewhere";
  return {"conditional computation", calls_ok && zero_ok, detail, 0.0};
}

// ---- patch roundtrip ------------------------------------------------------

CheckResult check_roundtrip(int cases, std::uint64_t base_seed) {
  Rng rng(splitmix64(base_seed ^ 0x9A7C4));
  int failures = 0;
  for (int i = 0; i < cases; ++i) {
    const int H = 1 + static_cast<int>(rng.uniform_int(40));
    const int W = 1 + static_cast<int>(rng.uniform_int(40));
    const int g = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(std::min({H, W, 8}))));
    const int C = 1 + static_cast<int>(rng.uniform_int(3));
    const Tensor f = random_tensor({2, C, H, W}, rng, false);
    auto [patches, grid] = split(f, g);
    const Tensor back = reassemble(patches, grid, C);
    if (!std::equal(back.data().begin(), back.data().end(), f.data().begin())) ++failures;
  }
  return {"patch roundtrip (" + std::to_string(cases) + " cases)", failures == 0,
          std::to_string(failures) + " mismatches", 0.0};
}

// ---- anchor values --------------------------------------------------------

GateBatch uniform_batch(int rows, int n, int k) {
  GateBatch b;
  b.probs = Tensor::full({rows, n, 1, 1}, 1.0 / n);
  for (int r = 0; r < rows; ++r) {
    // Spread assignments evenly so the dispatch fractions are uniform too.
    std::vector<int> ids;
    for (int j = 0; j < k; ++j) ids.push_back((r * k + j) % n);
    b.assignments.push_back(ids);
  }
  return b;
}

GateBatch collapsed_batch(int rows, int n) {
  GateBatch b;
  std::vector<double> p(static_cast<std::size_t>(rows) * n, 0.0);
  for (int r = 0; r < rows; ++r) p[static_cast<std::size_t>(r) * n] = 1.0;
  b.probs = Tensor::from_data({rows, n, 1, 1}, std::move(p));
  b.assignments.assign(static_cast<std::size_t>(rows), std::vector<int>{0});
  return b;
}

CheckResult check_loss_values() {
  double worst = 0.0;
  auto track = [&](double got, double want) { worst = std::max(worst, std::abs(got - want)); };
  for (int n : {2, 4, 8}) {
    const GateBatch u = uniform_batch(2 * n, n, 2 <= n ? 2 : 1);
    track(switch_loss(u).item(), 1.0);
    track(entropy_loss(u).item(), 0.0);
    track(importance_loss(u).item(), 0.0);
    const GateBatch c = collapsed_batch(6, n);
    track(switch_loss(c).item(), n);
    track(entropy_loss(c).item(), std::log(static_cast<double>(n)));
  }
  // Uniform logits give ln C cross-entropy.
  const Tensor logits = Tensor::zeros({1, 4, 2, 2});
  const std::vector<LabelMap> labels{{2, 2, {0, 1, 2, 3}}};
  track(pixel_cross_entropy(logits, labels).item(), std::log(4.0));
  return {"balancing and cross-entropy anchor values", worst <= kAnchorTol,
          "max deviation " + fmt("%.2e", worst), 0.0};
}

CheckResult check_metric_values() {
  double worst = 0.0;
  auto track = [&](double got, double want) { worst = std::max(worst, std::abs(got - want)); };
  for (int n : {2, 4, 8}) {
    const std::vector<double> uniform(static_cast<std::size_t>(n), 5.0);
    track(nre(uniform), 1.0);
    track(tec(uniform), 1.0 / n);
    std::vector<double> onehot(static_cast<std::size_t>(n), 0.0);
    onehot[1] = 9.0;
    track(nre(onehot), 0.0);
    track(tec(onehot), 1.0);
  }
  const std::vector<double> c31{3.0, 1.0};
  track(nre(c31), -(0.75 * std::log(0.75) + 0.25 * std::log(0.25)) / std::log(2.0));
  return {"routing metric anchor values", worst <= 1e-12, "max deviation " + fmt("%.2e", worst), 0.0};
}

}  // namespace

std::vector<CheckResult> run_selftest(const SelftestOptions& options) {
  Rng rng(splitmix64(options.seed));
  std::vector<std::function<CheckResult()>> checks{
      [&] { return check_conv_grad(rng); },
      [&] { return check_fused_grad(rng); },
      [&] { return check_op_grads(rng); },
      [&] { return check_moe_grad(options.gradient_seeds, options.seed); },
      [&] { return check_dense_oracle(options.oracle_configs, options.seed); },
      [&] { return check_conditional(options.seed); },
      [&] { return check_roundtrip(options.roundtrip_cases, options.seed); },
      [&] { return check_loss_values(); },
      [&] { return check_metric_values(); },
  };
  std::vector<CheckResult> results;
  for (const auto& run : checks) {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r;
    try {
      r = run();
    } catch (const std::exception& e) {
      r.name = "check #" + std::to_string(results.size() + 1);
      r.passed = false;
      r.detail = std::string("threw: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace pcmoe
