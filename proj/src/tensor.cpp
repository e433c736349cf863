#include "pcmoe/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

#include "pcmoe/errors.hpp"

namespace pcmoe {

namespace {

thread_local bool t_no_grad = false;
thread_local std::uint64_t t_conv_macs = 0;
std::atomic<bool> g_conv_fault{false};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using StridedConstMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

// Eigen's vectorised reductions peel a head that depends on the buffer's
// address, so their rounding changes with heap layout. Reductions over tensor
// buffers use these fixed-order loops instead.
double ordered_sum(const double* x, std::ptrdiff_t n) {
  double s = 0.0;
  for (std::ptrdiff_t i = 0; i < n; ++i) s += x[i];
  return s;
}

double ordered_dot(const double* x, const double* y, std::ptrdiff_t n) {
  double s = 0.0;
  for (std::ptrdiff_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

std::size_t idx(const Shape& s, int n, int c, int h, int w) {
  return ((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w;
}

void check_positive(const Shape& s, const char* what) {
  if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
    throw ConfigError(std::string(what) + ": invalid shape " + to_string(s));
  }
}

// Output columns [lo, hi) of a kernel tap that land inside the input row.
std::pair<int, int> valid_range(int kj, int stride, int pad, int W, int Wo) {
  int lo = 0;
  if (pad - kj > 0) lo = (pad - kj + stride - 1) / stride;
  int hi = (W - 1 + pad - kj) >= 0 ? (W - 1 + pad - kj) / stride + 1 : 0;
  hi = std::min(hi, Wo);
  lo = std::min(lo, hi);
  return {lo, hi};
}

// Rows are (c, ki, kj); columns are output positions; ld is the stride
// between rows. Border columns that fall into the horizontal padding are the
// same for every output row range and are never written, so cols must start
// zeroed and keep that geometry across calls.
// Lowers output rows [oh0, oh1) only; column 0 of cols is output row oh0.
void im2col(const double* in, int C, int H, int W, int kh, int kw, int stride, int pad, int oh0,
            int oh1, int Wo, double* cols, std::size_t ld) {
  for (int c = 0; c < C; ++c) {
    const double* plane = in + static_cast<std::size_t>(c) * H * W;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        double* row = cols + (static_cast<std::size_t>(c * kh + ki) * kw + kj) * ld;
        const auto [lo, hi] = valid_range(kj, stride, pad, W, Wo);
        for (int oh = oh0; oh < oh1; ++oh) {
          const int ih = oh * stride - pad + ki;
          double* dst = row + static_cast<std::size_t>(oh - oh0) * Wo;
          if (ih < 0 || ih >= H) {
            std::fill(dst, dst + Wo, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(ih) * W - pad + kj;
          if (stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (int ow = lo; ow < hi; ++ow) dst[ow] = src[ow * stride];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, int C, int H, int W, int kh, int kw, int stride, int pad,
                int oh0, int oh1, int Wo, double* out, std::size_t ld) {
  for (int c = 0; c < C; ++c) {
    double* plane = out + static_cast<std::size_t>(c) * H * W;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const double* row = cols + (static_cast<std::size_t>(c * kh + ki) * kw + kj) * ld;
        const auto [lo, hi] = valid_range(kj, stride, pad, W, Wo);
        for (int oh = oh0; oh < oh1; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          const double* src = row + static_cast<std::size_t>(oh - oh0) * Wo;
          double* dst = plane + static_cast<std::size_t>(ih) * W - pad + kj;
          if (stride == 1) {
            for (int ow = lo; ow < hi; ++ow) dst[ow] += src[ow];
          } else {
            for (int ow = lo; ow < hi; ++ow) dst[ow * stride] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace

std::string to_string(const Shape& s) {
  return "[" + std::to_string(s.n) + ", " + std::to_string(s.c) + ", " + std::to_string(s.h) +
         ", " + std::to_string(s.w) + "]";
}

std::vector<double>& detail::Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape s, bool requires_grad) { return full(s, 0.0, requires_grad); }

Tensor Tensor::full(Shape s, double v, bool requires_grad) {
  return from_data(s, std::vector<double>(s.numel(), v), requires_grad);
}

Tensor Tensor::from_data(Shape s, std::vector<double> data, bool requires_grad) {
  check_positive(s, "tensor");
  if (data.size() != s.numel()) {
    throw ConfigError("tensor data length " + std::to_string(data.size()) +
                      " does not match shape " + to_string(s));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = s;
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return full(Shape{}, v, requires_grad); }

const Shape& Tensor::shape() const {
  if (!node_) throw UsageError("undefined tensor");
  return node_->shape;
}

std::span<const double> Tensor::data() const {
  if (!node_) throw UsageError("undefined tensor");
  return node_->value;
}

std::span<double> Tensor::mutable_data() {
  if (!node_) throw UsageError("undefined tensor");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

double Tensor::at(int n, int c, int h, int w) const { return node_->value[idx(shape(), n, c, h, w)]; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!node_) throw UsageError("undefined tensor");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_) throw UsageError("undefined tensor");
  node_->grad.assign(node_->value.size(), 0.0);
}

std::span<double> Tensor::mutable_grad() {
  if (!node_) throw UsageError("undefined tensor");
  return node_->grad_buffer();
}

Tensor Tensor::detach() const { return from_data(shape(), node_->value, false); }

Tensor make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& parents,
                   detail::BackwardFn backward, const char* op) {
  // v - v is NaN exactly when v is infinite or NaN, so one pass that the
  // compiler can vectorise detects both.
  double probe = 0.0;
  for (double v : values) probe += v - v;
  if (probe != 0.0) throw NumericError(std::string(op) + " produced a non-finite value");
  auto node = std::make_shared<detail::Node>();
  node->shape = shape;
  node->value = std::move(values);
  node->op = op;
  if (!t_no_grad) {
    for (const auto& p : parents) {
      if (p.requires_grad()) {
        node->requires_grad = true;
        break;
      }
    }
  }
  if (node->requires_grad) {
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

NoGradGuard::NoGradGuard() : previous_(t_no_grad) { t_no_grad = true; }
NoGradGuard::~NoGradGuard() { t_no_grad = previous_; }
bool grad_enabled() { return !t_no_grad; }

// ---- operations -----------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding) {
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  if (stride < 1) throw ConfigError("conv2d: stride must be positive");
  if (padding < 0) throw ConfigError("conv2d: padding must be non-negative");
  if (is.c != ws.c) {
    throw ConfigError("conv2d: input has " + std::to_string(is.c) + " channels, weight expects " +
                      std::to_string(ws.c));
  }
  if (bias.defined() && bias.numel() != static_cast<std::size_t>(ws.n)) {
    throw ConfigError("conv2d: bias length does not match output channels");
  }
  const int span_h = is.h + 2 * padding - ws.h;
  const int span_w = is.w + 2 * padding - ws.w;
  if (span_h < 0 || span_w < 0 || span_h % stride != 0 || span_w % stride != 0) {
    throw ConfigError("conv2d: output size is not a positive integer for input " +
                      to_string(is) + ", kernel " + to_string(ws) + ", stride " +
                      std::to_string(stride) + ", padding " + std::to_string(padding));
  }
  const int Ho = span_h / stride + 1;
  const int Wo = span_w / stride + 1;
  const int N = is.n, Cin = is.c, Cout = ws.n, kh = ws.h, kw = ws.w;
  const int K = Cin * kh * kw;
  const std::size_t P = static_cast<std::size_t>(Ho) * Wo;
  const bool pointwise = (kh == 1 && kw == 1 && stride == 1 && padding == 0);
  const std::size_t in_item = static_cast<std::size_t>(Cin) * is.h * is.w;
  const std::size_t out_item = static_cast<std::size_t>(Cout) * P;

  // Lowering is done in tiles of whole output rows sized to stay in L2, and
  // redone in backward rather than stored.
  const int tile_rows =
      pointwise ? Ho : std::clamp(static_cast<int>((192 * 1024) / (8 * std::size_t(K) * Wo)), 1, Ho);
  const double* x = input.data().data();
  const Shape out_shape{N, Cout, Ho, Wo};
  std::vector<double> out(out_shape.numel());
  {
    ConstMap Wm(weight.data().data(), Cout, K);
    std::vector<double> cols(pointwise ? 0 : static_cast<std::size_t>(K) * tile_rows * Wo);
    for (int n = 0; n < N; ++n) {
      const double* src = x + n * in_item;
      for (int oh0 = 0; oh0 < Ho; oh0 += tile_rows) {
        const int oh1 = std::min(Ho, oh0 + tile_rows);
        const Eigen::Index tp = static_cast<Eigen::Index>(oh1 - oh0) * Wo;
        const std::size_t ld = pointwise ? P : static_cast<std::size_t>(tile_rows) * Wo;
        if (!pointwise) im2col(src, Cin, is.h, is.w, kh, kw, stride, padding, oh0, oh1, Wo, cols.data(), ld);
        StridedConstMap Cm(pointwise ? src : cols.data(), K, tp, Eigen::OuterStride<>(ld));
        StridedMap Om(out.data() + n * out_item + static_cast<std::size_t>(oh0) * Wo, Cout, tp,
                      Eigen::OuterStride<>(P));
        Om.noalias() = Wm * Cm;
      }
    }
    if (bias.defined()) {
      const auto b = bias.data();
      for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Cout; ++co) {
          double* o = out.data() + n * out_item + co * P;
          for (std::size_t p = 0; p < P; ++p) o[p] += b[co];
        }
      }
    }
  }
  t_conv_macs += static_cast<std::uint64_t>(N) * Cout * K * P;

  auto in_node = input.node();
  auto w_node = weight.node();
  auto b_node = bias.defined() ? bias.node() : nullptr;
  std::vector<Tensor> parents{input, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_result(
      out_shape, std::move(out), parents,
      [=](const detail::Node& self) {
        ConstMap Wm(w_node->value.data(), Cout, K);
        const double* x = in_node->value.data();
        const bool need_w = w_node->requires_grad;
        const bool need_x = in_node->requires_grad;
        const std::size_t tile_cap = static_cast<std::size_t>(K) * tile_rows * Wo;
        std::vector<double> cols(pointwise || !need_w ? 0 : tile_cap);
        std::vector<double> dcols(pointwise || !need_x ? 0 : tile_cap);
        RowMat dWacc = RowMat::Zero(need_w ? Cout : 0, need_w ? K : 0);
        for (int n = 0; n < N; ++n) {
          const double* src = x + n * in_item;
          const double* g = self.grad.data() + n * out_item;
          for (int oh0 = 0; oh0 < Ho; oh0 += tile_rows) {
            const int oh1 = std::min(Ho, oh0 + tile_rows);
            const Eigen::Index tp = static_cast<Eigen::Index>(oh1 - oh0) * Wo;
            const std::size_t ld = pointwise ? P : static_cast<std::size_t>(tile_rows) * Wo;
            StridedConstMap dO(g + static_cast<std::size_t>(oh0) * Wo, Cout, tp, Eigen::OuterStride<>(P));
            if (need_w) {
              if (!pointwise) im2col(src, Cin, is.h, is.w, kh, kw, stride, padding, oh0, oh1, Wo, cols.data(), ld);
              StridedConstMap Cm(pointwise ? src + static_cast<std::size_t>(oh0) * Wo : cols.data(), K, tp,
                                 Eigen::OuterStride<>(ld));
              dWacc.noalias() += dO * Cm.transpose();
            }
            if (need_x) {
              double* dx = in_node->grad_buffer().data() + n * in_item;
              if (pointwise) {
                StridedMap dX(dx + static_cast<std::size_t>(oh0) * Wo, K, tp, Eigen::OuterStride<>(P));
                dX.noalias() += Wm.transpose() * dO;
              } else {
                StridedMap dC(dcols.data(), K, tp, Eigen::OuterStride<>(ld));
                dC.noalias() = Wm.transpose() * dO;
                col2im_add(dcols.data(), Cin, is.h, is.w, kh, kw, stride, padding, oh0, oh1, Wo, dx, ld);
              }
            }
          }
        }
        if (need_w) {
          MutMap dW(w_node->grad_buffer().data(), Cout, K);
          if (g_conv_fault.load(std::memory_order_relaxed)) {
            dW += 1.05 * dWacc;
          } else {
            dW += dWacc;
          }
        }
        if (b_node && b_node->requires_grad) {
          auto& db = b_node->grad_buffer();
          for (int n = 0; n < N; ++n) {
            for (int co = 0; co < Cout; ++co) {
              const double* gp = self.grad.data() + n * out_item + co * P;
              double acc = 0.0;
              for (std::size_t p = 0; p < P; ++p) acc += gp[p];
              db[co] += acc;
            }
          }
        }
      },
      "conv2d");
}

Tensor global_avg_pool(const Tensor& input) {
  const Shape s = input.shape();
  const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
  std::vector<double> out(static_cast<std::size_t>(s.n) * s.c);
  const auto x = input.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < plane; ++j) acc += x[i * plane + j];
    out[i] = acc / static_cast<double>(plane);
  }
  auto in_node = input.node();
  return make_result(
      Shape{s.n, s.c, 1, 1}, std::move(out), {input},
      [in_node, plane](const detail::Node& self) {
        auto& g = in_node->grad_buffer();
        const double inv = 1.0 / static_cast<double>(plane);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const double v = self.grad[i] * inv;
          for (std::size_t j = 0; j < plane; ++j) g[i * plane + j] += v;
        }
      },
      "global_avg_pool");
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    z += out[i];
  }
  for (double& v : out) v /= z;
  return out;
}

Tensor conv2d_mean(const Tensor& input, const Tensor& weight, const Tensor& bias, int padding) {
  const Shape is = input.shape();
  const Shape ws = weight.shape();
  if (padding < 0) throw ConfigError("conv2d_mean: padding must be non-negative");
  if (is.c != ws.c) throw ConfigError("conv2d_mean: channel mismatch");
  if (bias.defined() && bias.numel() != static_cast<std::size_t>(ws.n)) {
    throw ConfigError("conv2d_mean: bias length does not match output channels");
  }
  const int Ho = is.h + 2 * padding - ws.h + 1;
  const int Wo = is.w + 2 * padding - ws.w + 1;
  if (Ho < 1 || Wo < 1) throw ConfigError("conv2d_mean: kernel larger than padded input");
  const int N = is.n, Cin = is.c, Cout = ws.n, kh = ws.h, kw = ws.w;
  const int K = Cin * kh * kw;
  const double inv_p = 1.0 / (static_cast<double>(Ho) * Wo);
  // Input rows/cols seen by kernel tap ki/kj over the whole output.
  auto tap_range = [padding](int k, int out, int in) {
    return std::pair{std::max(0, k - padding), std::min(in, k - padding + out)};
  };

  // S[n, (ci, ki, kj)] = sum of the input under tap (ki, kj).
  auto S = std::make_shared<RowMat>(N, K);
  const double* x = input.data().data();
  std::vector<double> part(static_cast<std::size_t>(is.h) * kw);
  for (int n = 0; n < N; ++n) {
    for (int ci = 0; ci < Cin; ++ci) {
      const double* plane = x + (static_cast<std::size_t>(n) * Cin + ci) * is.h * is.w;
      for (int ih = 0; ih < is.h; ++ih) {
        for (int kj = 0; kj < kw; ++kj) {
          const auto [c0, c1] = tap_range(kj, Wo, is.w);
          double acc = 0.0;
          for (int iw = c0; iw < c1; ++iw) acc += plane[ih * is.w + iw];
          part[static_cast<std::size_t>(ih) * kw + kj] = acc;
        }
      }
      for (int ki = 0; ki < kh; ++ki) {
        const auto [r0, r1] = tap_range(ki, Ho, is.h);
        for (int kj = 0; kj < kw; ++kj) {
          double acc = 0.0;
          for (int ih = r0; ih < r1; ++ih) acc += part[static_cast<std::size_t>(ih) * kw + kj];
          (*S)(n, (ci * kh + ki) * kw + kj) = acc;
        }
      }
    }
  }
  RowMat m = (*S * ConstMap(weight.data().data(), Cout, K).transpose()) * inv_p;
  if (bias.defined()) {
    for (int co = 0; co < Cout; ++co) m.col(co).array() += bias.data()[co];
  }
  t_conv_macs += static_cast<std::uint64_t>(N) * Cout * K;

  auto in_node = input.node();
  auto w_node = weight.node();
  auto b_node = bias.defined() ? bias.node() : nullptr;
  std::vector<Tensor> parents{input, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_result(
      Shape{N, Cout, 1, 1}, std::vector<double>(m.data(), m.data() + m.size()), parents,
      [=](const detail::Node& self) {
        ConstMap dm(self.grad.data(), N, Cout);
        if (w_node->requires_grad) {
          MutMap dW(w_node->grad_buffer().data(), Cout, K);
          const double f = g_conv_fault.load(std::memory_order_relaxed) ? 1.05 * inv_p : inv_p;
          dW.noalias() += f * (dm.transpose() * *S);
        }
        if (b_node && b_node->requires_grad) {
          auto& db = b_node->grad_buffer();
          for (int co = 0; co < Cout; ++co) db[co] += dm.col(co).sum();
        }
        if (!in_node->requires_grad) return;
        const RowMat G = (dm * ConstMap(w_node->value.data(), Cout, K)) * inv_p;
        double* dx = in_node->grad_buffer().data();
        std::vector<double> rowg(static_cast<std::size_t>(kh) * is.w);
        for (int n = 0; n < N; ++n) {
          for (int ci = 0; ci < Cin; ++ci) {
            // rowg[ki, iw]: gradient reaching column iw through kernel row ki.
            std::fill(rowg.begin(), rowg.end(), 0.0);
            for (int ki = 0; ki < kh; ++ki) {
              for (int kj = 0; kj < kw; ++kj) {
                const double g = G(n, (ci * kh + ki) * kw + kj);
                const auto [c0, c1] = tap_range(kj, Wo, is.w);
                for (int iw = c0; iw < c1; ++iw) rowg[static_cast<std::size_t>(ki) * is.w + iw] += g;
              }
            }
            double* plane = dx + (static_cast<std::size_t>(n) * Cin + ci) * is.h * is.w;
            for (int ki = 0; ki < kh; ++ki) {
              const auto [r0, r1] = tap_range(ki, Ho, is.h);
              const double* rg = rowg.data() + static_cast<std::size_t>(ki) * is.w;
              for (int ih = r0; ih < r1; ++ih) {
                for (int iw = 0; iw < is.w; ++iw) plane[ih * is.w + iw] += rg[iw];
              }
            }
          }
        }
      },
      "conv2d_mean");
}

Tensor mixture_conv2d(const Tensor& input, std::span<const MixtureTerm> terms, const Tensor& scales) {
  if (terms.empty()) throw ConfigError("mixture_conv2d: no terms");
  const Shape is = input.shape();
  const Shape ws = terms.front().weight.shape();
  if (is.n != 1) throw ConfigError("mixture_conv2d: input must hold a single item");
  if (is.c != ws.c) throw ConfigError("mixture_conv2d: channel mismatch");
  for (const auto& t : terms) {
    if (t.weight.shape() != ws) throw ConfigError("mixture_conv2d: weight shapes differ");
    if (t.bias.defined() && t.bias.numel() != static_cast<std::size_t>(ws.n)) {
      throw ConfigError("mixture_conv2d: bias length does not match output channels");
    }
    if (t.scale_index != MixtureTerm::kUnscaled &&
        (!scales.defined() || t.scale_index >= scales.numel())) {
      throw ConfigError("mixture_conv2d: scale index out of range");
    }
  }
  const int Ho = is.h - ws.h + 1;
  const int Wo = is.w - ws.w + 1;
  if (Ho < 1 || Wo < 1) throw ConfigError("mixture_conv2d: kernel larger than input");
  const int Cin = is.c, Cout = ws.n, kh = ws.h, kw = ws.w;
  const int K = Cin * kh * kw;
  const int T = static_cast<int>(terms.size());
  const Eigen::Index P = static_cast<Eigen::Index>(Ho) * Wo;

  auto cols = std::make_shared<RowMat>(RowMat::Zero(K, P));
  im2col(input.data().data(), Cin, is.h, is.w, kh, kw, 1, 0, 0, Ho, Wo, cols->data(),
         static_cast<std::size_t>(P));
  RowMat stacked(T * Cout, K);
  for (int t = 0; t < T; ++t) {
    stacked.middleRows(t * Cout, Cout) = ConstMap(terms[t].weight.data().data(), Cout, K);
  }
  const RowMat Y = stacked * *cols;  // every term evaluated on its own rows
  std::vector<double> sv(terms.size());
  for (int t = 0; t < T; ++t) {
    sv[t] = terms[t].scale_index == MixtureTerm::kUnscaled ? 1.0 : scales.data()[terms[t].scale_index];
  }
  std::vector<double> out(static_cast<std::size_t>(Cout) * P, 0.0);
  MutMap Om(out.data(), Cout, P);
  for (int t = 0; t < T; ++t) {
    RowMat yt = Y.middleRows(t * Cout, Cout);
    if (terms[t].bias.defined()) {
      for (int co = 0; co < Cout; ++co) yt.row(co).array() += terms[t].bias.data()[co];
    }
    Om += sv[t] * yt;
  }
  t_conv_macs += static_cast<std::uint64_t>(T) * Cout * K * P;

  std::vector<Tensor> parents{input};
  if (scales.defined()) parents.push_back(scales);
  for (const auto& t : terms) {
    parents.push_back(t.weight);
    if (t.bias.defined()) parents.push_back(t.bias);
  }
  auto in_node = input.node();
  auto s_node = scales.defined() ? scales.node() : nullptr;
  std::vector<std::shared_ptr<detail::Node>> w_nodes, b_nodes;
  std::vector<std::size_t> idx;
  for (const auto& t : terms) {
    w_nodes.push_back(t.weight.node());
    b_nodes.push_back(t.bias.defined() ? t.bias.node() : nullptr);
    idx.push_back(t.scale_index);
  }
  return make_result(
      Shape{1, Cout, Ho, Wo}, std::move(out), parents,
      [=](const detail::Node& self) {
        ConstMap dO(self.grad.data(), Cout, P);
        std::vector<double> dsum(static_cast<std::size_t>(Cout));
        for (int co = 0; co < Cout; ++co) dsum[co] = ordered_sum(self.grad.data() + static_cast<std::size_t>(co) * P, P);
        // Every term sees the same lowered input, so dO * cols^T is shared.
        const RowMat dmix = dO * cols->transpose();
        const double fault = g_conv_fault.load(std::memory_order_relaxed) ? 1.05 : 1.0;
        RowMat wmix = RowMat::Zero(Cout, K);
        for (int t = 0; t < T; ++t) {
          ConstMap Wt(w_nodes[t]->value.data(), Cout, K);
          if (w_nodes[t]->requires_grad) {
            MutMap(w_nodes[t]->grad_buffer().data(), Cout, K) += (fault * sv[t]) * dmix;
          }
          if (b_nodes[t] && b_nodes[t]->requires_grad) {
            auto& db = b_nodes[t]->grad_buffer();
            for (int co = 0; co < Cout; ++co) db[co] += sv[t] * dsum[co];
          }
          if (idx[t] != MixtureTerm::kUnscaled && s_node->requires_grad) {
            double ds = ordered_dot(Wt.data(), dmix.data(), Cout * K);
            if (b_nodes[t]) {
              for (int co = 0; co < Cout; ++co) ds += b_nodes[t]->value[co] * dsum[co];
            }
            s_node->grad_buffer()[idx[t]] += ds;
          }
          wmix += sv[t] * Wt;
        }
        if (!in_node->requires_grad) return;
        const RowMat dC = wmix.transpose() * dO;
        col2im_add(dC.data(), Cin, is.h, is.w, kh, kw, 1, 0, 0, Ho, Wo,
                   in_node->grad_buffer().data(), static_cast<std::size_t>(P));
      },
      "mixture_conv2d");
}

Tensor softmax_channels(const Tensor& input) {
  const Shape s = input.shape();
  if (s.h != 1 || s.w != 1) throw ConfigError("softmax_channels expects [N, C, 1, 1]");
  std::vector<double> out(s.numel());
  const auto x = input.data();
  for (int n = 0; n < s.n; ++n) {
    auto row = softmax(x.subspan(static_cast<std::size_t>(n) * s.c, s.c));
    std::copy(row.begin(), row.end(), out.begin() + static_cast<std::ptrdiff_t>(n) * s.c);
  }
  auto in_node = input.node();
  return make_result(
      s, std::move(out), {input},
      [in_node, s](const detail::Node& self) {
        auto& g = in_node->grad_buffer();
        for (int n = 0; n < s.n; ++n) {
          const std::size_t o = static_cast<std::size_t>(n) * s.c;
          double dot = 0.0;
          for (int c = 0; c < s.c; ++c) dot += self.grad[o + c] * self.value[o + c];
          for (int c = 0; c < s.c; ++c) g[o + c] += self.value[o + c] * (self.grad[o + c] - dot);
        }
      },
      "softmax");
}

Tensor relu(const Tensor& input) {
  const auto x = input.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  auto in_node = input.node();
  return make_result(
      input.shape(), std::move(out), {input},
      [in_node](const detail::Node& self) {
        auto& g = in_node->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (in_node->value[i] > 0.0) g[i] += self.grad[i];
        }
      },
      "relu");
}

Tensor upsample_nearest(const Tensor& input, int factor) {
  if (factor < 1) throw ConfigError("upsample factor must be positive");
  const Shape s = input.shape();
  const Shape o{s.n, s.c, s.h * factor, s.w * factor};
  std::vector<double> out(o.numel());
  const auto x = input.data();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int h = 0; h < o.h; ++h)
        for (int w = 0; w < o.w; ++w) out[idx(o, n, c, h, w)] = x[idx(s, n, c, h / factor, w / factor)];
  auto in_node = input.node();
  return make_result(
      o, std::move(out), {input},
      [in_node, s, o, factor](const detail::Node& self) {
        auto& g = in_node->grad_buffer();
        for (int n = 0; n < s.n; ++n)
          for (int c = 0; c < s.c; ++c)
            for (int h = 0; h < o.h; ++h)
              for (int w = 0; w < o.w; ++w)
                g[idx(s, n, c, h / factor, w / factor)] += self.grad[idx(o, n, c, h, w)];
      },
      "upsample_nearest");
}

Tensor add(const Tensor& a, const Tensor& b) { return add_n({a, b}); }

Tensor add_n(const std::vector<Tensor>& terms) {
  if (terms.empty()) throw UsageError("add_n of no terms");
  const Shape s = terms.front().shape();
  std::vector<double> out(s.numel(), 0.0);
  for (const auto& t : terms) {
    if (t.shape() != s) {
      throw ConfigError("add: shape mismatch " + to_string(s) + " vs " + to_string(t.shape()));
    }
    const auto x = t.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += x[i];
  }
  std::vector<std::shared_ptr<detail::Node>> nodes;
  for (const auto& t : terms) nodes.push_back(t.node());
  return make_result(
      s, std::move(out), terms,
      [nodes](const detail::Node& self) {
        for (const auto& p : nodes) {
          if (!p->requires_grad) continue;
          auto& g = p->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
      },
      "add");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ConfigError("mul: shape mismatch");
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  auto an = a.node();
  auto bn = b.node();
  return make_result(
      a.shape(), std::move(out), {a, b},
      [an, bn](const detail::Node& self) {
        if (an->requires_grad) {
          auto& g = an->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
          auto& g = bn->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
        }
      },
      "mul");
}

Tensor scale(const Tensor& a, double factor) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  auto an = a.node();
  return make_result(
      a.shape(), std::move(out), {a},
      [an, factor](const detail::Node& self) {
        auto& g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
      },
      "scale");
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  auto an = a.node();
  return make_result(
      Shape{}, {acc}, {a},
      [an](const detail::Node& self) {
        auto& g = an->grad_buffer();
        for (double& v : g) v += self.grad[0];
      },
      "sum");
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor scale_by_entry(const Tensor& x, const Tensor& s, std::size_t index) {
  if (index >= s.numel()) throw UsageError("scale_by_entry: index out of range");
  const double f = s.data()[index];
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * f;
  auto xn = x.node();
  auto sn = s.node();
  return make_result(
      x.shape(), std::move(out), {x, s},
      [xn, sn, index, f](const detail::Node& self) {
        if (xn->requires_grad) {
          auto& g = xn->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * f;
        }
        if (sn->requires_grad) {
          double dot = 0.0;
          for (std::size_t i = 0; i < self.grad.size(); ++i) dot += self.grad[i] * xn->value[i];
          sn->grad_buffer()[index] += dot;
        }
      },
      "scale_by_entry");
}

Tensor crop(const Tensor& x, int batch0, int nb, int row0, int col0, int h, int w) {
  const Shape s = x.shape();
  if (batch0 < 0 || nb < 1 || batch0 + nb > s.n) throw ConfigError("crop: batch range out of bounds");
  if (h < 1 || w < 1) throw ConfigError("crop: empty window");
  const Shape o{nb, s.c, h, w};
  std::vector<double> out(o.numel(), 0.0);
  const auto v = x.data();
  const int r_lo = std::max(0, -row0), r_hi = std::min(h, s.h - row0);
  const int c_lo = std::max(0, -col0), c_hi = std::min(w, s.w - col0);
  for (int n = 0; n < nb; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int r = r_lo; r < r_hi; ++r)
        for (int q = c_lo; q < c_hi; ++q)
          out[idx(o, n, c, r, q)] = v[idx(s, batch0 + n, c, row0 + r, col0 + q)];
  auto xn = x.node();
  return make_result(
      o, std::move(out), {x},
      [=](const detail::Node& self) {
        auto& g = xn->grad_buffer();
        for (int n = 0; n < nb; ++n)
          for (int c = 0; c < s.c; ++c)
            for (int r = r_lo; r < r_hi; ++r)
              for (int q = c_lo; q < c_hi; ++q)
                g[idx(s, batch0 + n, c, row0 + r, col0 + q)] += self.grad[idx(o, n, c, r, q)];
      },
      "crop");
}

Tensor assemble(const std::vector<Block>& blocks, Shape out_shape) {
  check_positive(out_shape, "assemble");
  std::vector<double> out(out_shape.numel(), 0.0);
  std::vector<Tensor> parents;
  parents.reserve(blocks.size());
  for (const auto& b : blocks) {
    const Shape bs = b.tensor.shape();
    if (bs.c != out_shape.c || b.batch < 0 || b.batch + bs.n > out_shape.n || b.row < 0 ||
        b.col < 0 || b.row + bs.h > out_shape.h || b.col + bs.w > out_shape.w) {
      throw ConfigError("assemble: block " + to_string(bs) + " does not fit output " +
                        to_string(out_shape));
    }
    const auto v = b.tensor.data();
    for (int n = 0; n < bs.n; ++n)
      for (int c = 0; c < bs.c; ++c)
        for (int r = 0; r < bs.h; ++r)
          for (int q = 0; q < bs.w; ++q)
            out[idx(out_shape, b.batch + n, c, b.row + r, b.col + q)] += v[idx(bs, n, c, r, q)];
    parents.push_back(b.tensor);
  }
  struct Placement {
    std::shared_ptr<detail::Node> node;
    int batch, row, col;
  };
  std::vector<Placement> places;
  places.reserve(blocks.size());
  for (const auto& b : blocks) places.push_back({b.tensor.node(), b.batch, b.row, b.col});
  return make_result(
      out_shape, std::move(out), parents,
      [places, out_shape](const detail::Node& self) {
        for (const auto& p : places) {
          if (!p.node->requires_grad) continue;
          const Shape bs = p.node->shape;
          auto& g = p.node->grad_buffer();
          for (int n = 0; n < bs.n; ++n)
            for (int c = 0; c < bs.c; ++c)
              for (int r = 0; r < bs.h; ++r)
                for (int q = 0; q < bs.w; ++q)
                  g[idx(bs, n, c, r, q)] +=
                      self.grad[idx(out_shape, p.batch + n, c, p.row + r, p.col + q)];
        }
      },
      "assemble");
}

Tensor concat_batch(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw UsageError("concat_batch of no parts");
  Shape s = parts.front().shape();
  int total = 0;
  for (const auto& p : parts) {
    const Shape ps = p.shape();
    if (ps.c != s.c || ps.h != s.h || ps.w != s.w) throw ConfigError("concat_batch: shape mismatch");
    total += ps.n;
  }
  s.n = total;
  std::vector<double> out;
  out.reserve(s.numel());
  std::vector<std::shared_ptr<detail::Node>> nodes;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    nodes.push_back(p.node());
  }
  return make_result(
      s, std::move(out), parts,
      [nodes](const detail::Node& self) {
        std::size_t off = 0;
        for (const auto& p : nodes) {
          const std::size_t len = p->value.size();
          if (p->requires_grad) {
            auto& g = p->grad_buffer();
            for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[off + i];
          }
          off += len;
        }
      },
      "concat_batch");
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward() requires a scalar loss");
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS over nodes that carry a backward closure.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && p->backward && seen.insert(p).second) stack.emplace_back(p, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (!node->backward || node->grad.empty()) continue;
    node->backward(*node);
    // Interior gradients are no longer needed once propagated.
    std::vector<double>().swap(node->grad);
  }
}

Parameter Parameter::create(std::string name, Shape shape) {
  Parameter p;
  p.name = std::move(name);
  p.value = Tensor::zeros(shape, true);
  p.velocity.assign(shape.numel(), 0.0);
  return p;
}

void sgd_step(std::span<Parameter* const> params, double lr, double momentum) {
  if (!(lr > 0.0)) throw ConfigError("sgd_step: learning rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("sgd_step: momentum must be in [0, 1)");
  for (const Parameter* p : params) {
    if (!p->value.has_grad()) throw UsageError("sgd_step: parameter '" + p->name + "' has no gradient");
  }
  for (Parameter* p : params) {
    auto w = p->value.mutable_data();
    auto g = p->value.mutable_grad();
    if (p->velocity.size() != w.size()) p->velocity.assign(w.size(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) {
      p->velocity[i] = momentum * p->velocity[i] + g[i];
      w[i] -= lr * p->velocity[i];
      g[i] = 0.0;
    }
  }
}

std::uint64_t conv_mac_count() { return t_conv_macs; }
void reset_conv_mac_count() { t_conv_macs = 0; }

namespace testing {
void set_conv_backward_fault(bool enabled) { g_conv_fault.store(enabled); }
bool conv_backward_fault() { return g_conv_fault.load(); }
}  // namespace testing

}  // namespace pcmoe
