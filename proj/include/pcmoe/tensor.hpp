#pragma once

// Dense NCHW tensors of doubles with tape-based reverse-mode differentiation.
//
// Every operation records its parents and a backward closure on the result
// node; backward() walks the recorded graph in reverse topological order.
// Graphs are rebuilt on each forward pass and released with their tensors.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace pcmoe {

struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) *
           static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  bool operator==(const Shape&) const = default;
};

std::string to_string(const Shape& s);

namespace detail {

struct Node;
using BackwardFn = std::function<void(const Node&)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
  const char* op = "leaf";

  // Allocates a zero gradient on first use.
  std::vector<double>& grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape s, bool requires_grad = false);
  static Tensor full(Shape s, double v, bool requires_grad = false);
  static Tensor from_data(Shape s, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const { return shape().numel(); }

  std::span<const double> data() const;
  // Writable view; only meaningful on leaves (parameters and inputs).
  std::span<double> mutable_data();
  double item() const;
  double at(int n, int c, int h, int w) const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  // Sets the gradient buffer to zeros, allocating it if absent.
  void zero_grad();
  std::span<double> mutable_grad();

  // Copy of the values, detached from any graph.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend Tensor make_result(Shape, std::vector<double>, const std::vector<Tensor>&,
                            detail::BackwardFn, const char*);

  std::shared_ptr<detail::Node> node_;
};

/// Builds an operation result. Throws NumericError if any value is not
/// finite. When gradients are enabled and a parent requires them, the node
/// keeps its parents and the closure, which must accumulate the node's grad
/// into the parents' grad buffers.
Tensor make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& parents,
                   detail::BackwardFn backward, const char* op);

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---- operations -----------------------------------------------------------

/// Direct convolution (patch-gather + GEMM). weight is [C_out, C_in, kh, kw];
/// bias has C_out elements or is undefined.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding);
Tensor global_avg_pool(const Tensor& input);
/// global_avg_pool(conv2d(input, weight, bias, 1, padding)) computed from
/// window sums of the input, without materialising the convolution output.
Tensor conv2d_mean(const Tensor& input, const Tensor& weight, const Tensor& bias, int padding);

/// One term of mixture_conv2d. The term is scaled by scales[scale_index], or
/// by 1 when scale_index is kUnscaled.
struct MixtureTerm {
  static constexpr std::size_t kUnscaled = static_cast<std::size_t>(-1);
  Tensor weight;
  Tensor bias;
  std::size_t scale_index = kUnscaled;
};
/// sum_t s_t * conv2d(input, W_t, b_t, 1, 0) for a single-item input. All
/// weights share one shape; the input is lowered once and every term is
/// evaluated by one stacked GEMM.
Tensor mixture_conv2d(const Tensor& input, std::span<const MixtureTerm> terms, const Tensor& scales);
/// Softmax over the channel axis of an [N, C, 1, 1] tensor.
Tensor softmax_channels(const Tensor& input);
Tensor relu(const Tensor& input);
Tensor upsample_nearest(const Tensor& input, int factor);

Tensor add(const Tensor& a, const Tensor& b);
Tensor add_n(const std::vector<Tensor>& terms);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// x * s[index], differentiable in both x and the selected element of s.
Tensor scale_by_entry(const Tensor& x, const Tensor& s, std::size_t index);

/// Window [batch0, batch0+nb) x [row0, row0+h) x [col0, col0+w). Cells
/// outside the source are zero, so negative offsets produce zero halos.
Tensor crop(const Tensor& x, int batch0, int nb, int row0, int col0, int h, int w);

struct Block {
  Tensor tensor;
  int batch = 0;
  int row = 0;
  int col = 0;
};
/// Adds each block into a zero tensor of the given shape at its offset.
Tensor assemble(const std::vector<Block>& blocks, Shape out_shape);
/// Concatenates along the batch axis.
Tensor concat_batch(const std::vector<Tensor>& parts);

/// Numerically stable softmax (max-subtracted).
std::vector<double> softmax(std::span<const double> logits);

/// Reverse pass from a scalar. Leaf gradients accumulate across calls until
/// cleared with zero_grad().
void backward(const Tensor& loss);

// ---- parameters -----------------------------------------------------------

struct Parameter {
  std::string name;
  Tensor value;
  std::vector<double> velocity;

  static Parameter create(std::string name, Shape shape);
};

/// v <- momentum * v + grad; w <- w - lr * v; grad <- 0.
void sgd_step(std::span<Parameter* const> params, double lr, double momentum);

// ---- instrumentation ------------------------------------------------------

/// Multiply-accumulates performed by conv2d on this thread.
std::uint64_t conv_mac_count();
void reset_conv_mac_count();

namespace testing {
/// Fault-injection hook: when set, conv2d's weight gradient is scaled by 1.05.
void set_conv_backward_fault(bool enabled);
bool conv_backward_fault();
}  // namespace testing

}  // namespace pcmoe
