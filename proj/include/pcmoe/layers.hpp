#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pcmoe/tensor.hpp"

namespace pcmoe {

/// A convolution with its own weight [out, in, k, k] and bias parameters.
struct ConvLayer {
  Parameter weight;
  Parameter bias;
  int stride = 1;
  int padding = 0;

  static ConvLayer create(const std::string& name, int in_channels, int out_channels, int kernel,
                          int stride, int padding);

  int in_channels() const { return weight.value.shape().c; }
  int out_channels() const { return weight.value.shape().n; }
  int kernel() const { return weight.value.shape().h; }
  std::int64_t parameter_count() const {
    return static_cast<std::int64_t>(weight.value.numel() + bias.value.numel());
  }

  /// He-normal weights (std = sqrt(2 / fan_in)), zero bias. The stream is
  /// derived from seed and the parameter name, so initialisation does not
  /// depend on construction order.
  void init(std::uint64_t seed);

  Tensor forward(const Tensor& x) const;
  void append_parameters(std::vector<Parameter*>& out);
};

}  // namespace pcmoe
