#pragma once

// Reference implementations used only by the tests. Everything here is
// written with plain loops over std::vector, sharing no code with the
// library kernels it checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include "pcmoe/moe.hpp"
#include "pcmoe/rng.hpp"
#include "pcmoe/tensor.hpp"

namespace oracle {

using pcmoe::Shape;

struct Array {
  Shape shape;
  std::vector<double> v;

  Array() = default;
  explicit Array(Shape s) : shape(s), v(s.numel(), 0.0) {}
  Array(Shape s, std::span<const double> data) : shape(s), v(data.begin(), data.end()) {}
  double& at(int n, int c, int h, int w) {
    return v[((static_cast<std::size_t>(n) * shape.c + c) * shape.h + h) * shape.w + w];
  }
  double at(int n, int c, int h, int w) const {
    return v[((static_cast<std::size_t>(n) * shape.c + c) * shape.h + h) * shape.w + w];
  }
};

inline Array of(const pcmoe::Tensor& t) { return Array(t.shape(), t.data()); }

/// Six nested loops; out-of-range taps read zero. macs, when given, counts
/// every multiply-accumulate including those on padding.
inline Array conv2d(const Array& x, const Array& w, std::span<const double> bias, int stride, int pad,
                    std::uint64_t* macs = nullptr) {
  const int Co = w.shape.n, Ci = w.shape.c, kh = w.shape.h, kw = w.shape.w;
  const int Ho = (x.shape.h + 2 * pad - kh) / stride + 1;
  const int Wo = (x.shape.w + 2 * pad - kw) / stride + 1;
  Array y(Shape{x.shape.n, Co, Ho, Wo});
  for (int n = 0; n < x.shape.n; ++n)
    for (int co = 0; co < Co; ++co)
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow) {
          double s = bias.empty() ? 0.0 : bias[co];
          for (int ci = 0; ci < Ci; ++ci)
            for (int i = 0; i < kh; ++i)
              for (int j = 0; j < kw; ++j) {
                const int ih = oh * stride - pad + i, iw = ow * stride - pad + j;
                if (macs) ++*macs;
                if (ih < 0 || iw < 0 || ih >= x.shape.h || iw >= x.shape.w) continue;
                s += x.at(n, ci, ih, iw) * w.at(co, ci, i, j);
              }
          y.at(n, co, oh, ow) = s;
        }
  return y;
}

inline Array relu(Array x) {
  for (double& v : x.v) v = std::max(v, 0.0);
  return x;
}

/// Per-channel mean of each item: [n][c].
inline std::vector<std::vector<double>> channel_means(const Array& x) {
  std::vector<std::vector<double>> out(x.shape.n, std::vector<double>(x.shape.c, 0.0));
  for (int n = 0; n < x.shape.n; ++n)
    for (int c = 0; c < x.shape.c; ++c) {
      double s = 0.0;
      for (int h = 0; h < x.shape.h; ++h)
        for (int w = 0; w < x.shape.w; ++w) s += x.at(n, c, h, w);
      out[n][c] = s / (x.shape.h * x.shape.w);
    }
  return out;
}

inline std::vector<double> softmax(std::vector<double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double& v : z) s += (v = std::exp(v - m));
  for (double& v : z) v /= s;
  return z;
}

/// Indices of the k largest values by a full stable sort (descending value,
/// ascending index).
inline std::vector<int> top_k_by_sort(const std::vector<double>& p, int k) {
  std::vector<int> ids(p.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return p[a] > p[b]; });
  ids.resize(static_cast<std::size_t>(k));
  return ids;
}

inline Array window(const Array& x, int n, int r0, int r1, int c0, int c1) {
  Array out(Shape{1, x.shape.c, r1 - r0, c1 - c0});
  for (int c = 0; c < x.shape.c; ++c)
    for (int r = r0; r < r1; ++r)
      for (int q = c0; q < c1; ++q) out.at(0, c, r - r0, q - c0) = x.at(n, c, r, q);
  return out;
}

inline Array weights_of(const pcmoe::ConvLayer& l) { return of(l.weight.value); }
inline std::vector<double> bias_of(const pcmoe::ConvLayer& l) {
  auto d = l.bias.value.data();
  return {d.begin(), d.end()};
}

/// Gate probabilities for one patch: conv (+ReLU between layers), spatial
/// mean, softmax. Every gate conv is 3x3 with zero padding 1 on the patch.
inline std::vector<double> gate_probs(const pcmoe::GateNetwork& gate, const Array& patch,
                                      std::uint64_t* macs = nullptr) {
  Array x = patch;
  const auto& layers = gate.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    x = conv2d(x, weights_of(layers[i]), bias_of(layers[i]), 1, 1, macs);
    if (i + 1 < layers.size()) x = relu(x);
  }
  return softmax(channel_means(x)[0]);
}

struct DenseResult {
  Array output;
  std::vector<std::vector<int>> selected;  // per (batch, patch), batch-major
  std::vector<std::vector<double>> probs;
};

/// Evaluates every expert on the whole map (so patch borders see their true
/// neighbours), then for each patch keeps the top-k experts weighted by their
/// gate probability plus the shared experts, and zero-masks the rest.
inline DenseResult dense_moe(const Array& f, const pcmoe::MoEConfig& cfg, const pcmoe::GateNetwork& gate,
                             std::span<const pcmoe::ConvLayer> experts,
                             std::span<const pcmoe::ConvLayer> shared) {
  const int pad = cfg.kernel_size() / 2;
  std::vector<Array> full;
  for (const auto& e : experts) full.push_back(conv2d(f, weights_of(e), bias_of(e), 1, pad));
  std::vector<Array> full_shared;
  for (const auto& e : shared) full_shared.push_back(conv2d(f, weights_of(e), bias_of(e), 1, pad));

  const int H = f.shape.h, W = f.shape.w, g = cfg.grid;
  auto bounds = [g](int extent, int i) {
    const int step = extent / g;
    return std::pair{i * step, i + 1 == g ? extent : (i + 1) * step};
  };
  DenseResult out;
  out.output = Array(Shape{f.shape.n, cfg.out_channels, H, W});
  for (int n = 0; n < f.shape.n; ++n) {
    for (int pi = 0; pi < g; ++pi) {
      for (int pj = 0; pj < g; ++pj) {
        const auto [r0, r1] = bounds(H, pi);
        const auto [c0, c1] = bounds(W, pj);
        const auto p = gate_probs(gate, window(f, n, r0, r1, c0, c1));
        const auto ids = top_k_by_sort(p, cfg.top_k);
        out.selected.push_back(ids);
        out.probs.push_back(p);
        for (int j = 0; j < static_cast<int>(experts.size()); ++j) {
          const bool on = std::find(ids.begin(), ids.end(), j) != ids.end();
          const double m = on ? p[j] : 0.0;
          for (int c = 0; c < cfg.out_channels; ++c)
            for (int r = r0; r < r1; ++r)
              for (int q = c0; q < c1; ++q) out.output.at(n, c, r, q) += m * full[j].at(n, c, r, q);
        }
        for (const auto& s : full_shared)
          for (int c = 0; c < cfg.out_channels; ++c)
            for (int r = r0; r < r1; ++r)
              for (int q = c0; q < c1; ++q) out.output.at(n, c, r, q) += s.at(n, c, r, q);
      }
    }
  }
  return out;
}

inline pcmoe::Tensor random_tensor(pcmoe::Rng& rng, Shape s, bool requires_grad = false, double lo = -1.0,
                                   double hi = 1.0) {
  std::vector<double> v(s.numel());
  for (double& x : v) x = rng.uniform(lo, hi);
  return pcmoe::Tensor::from_data(s, std::move(v), requires_grad);
}

inline void randomize(pcmoe::Parameter& p, pcmoe::Rng& rng, double scale) {
  for (double& x : p.value.mutable_data()) x = scale * rng.uniform(-1.0, 1.0);
}

/// Central-difference check of d loss / d x for every element of every
/// tensor in wrt. loss is rebuilt from the current leaf values on each call.
/// Returns the largest |a - n| / max(|a|, |n|, floor).
inline double max_fd_error(const std::function<pcmoe::Tensor()>& loss, std::vector<pcmoe::Tensor> wrt,
                           double h = 1e-5, double floor = 1e-6) {
  for (auto& t : wrt) t.zero_grad();
  pcmoe::backward(loss());
  double worst = 0.0;
  for (auto& t : wrt) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto v = t.mutable_data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double x0 = v[i];
      v[i] = x0 + h;
      const double fp = loss().item();
      v[i] = x0 - h;
      const double fm = loss().item();
      v[i] = x0;
      const double numeric = (fp - fm) / (2 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace oracle
