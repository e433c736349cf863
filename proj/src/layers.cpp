#include "pcmoe/layers.hpp"

#include <cmath>

#include "pcmoe/rng.hpp"

namespace pcmoe {

ConvLayer ConvLayer::create(const std::string& name, int in_channels, int out_channels, int kernel,
                            int stride, int padding) {
  ConvLayer layer;
  layer.weight = Parameter::create(name + ".weight", Shape{out_channels, in_channels, kernel, kernel});
  layer.bias = Parameter::create(name + ".bias", Shape{1, out_channels, 1, 1});
  layer.stride = stride;
  layer.padding = padding;
  return layer;
}

void ConvLayer::init(std::uint64_t seed) {
  Rng rng(seed ^ fnv1a64(weight.name));
  const Shape s = weight.value.shape();
  const double std_dev = std::sqrt(2.0 / static_cast<double>(s.c * s.h * s.w));
  for (double& v : weight.value.mutable_data()) v = std_dev * rng.normal();
  for (double& v : bias.value.mutable_data()) v = 0.0;
}

Tensor ConvLayer::forward(const Tensor& x) const {
  return conv2d(x, weight.value, bias.value, stride, padding);
}

void ConvLayer::append_parameters(std::vector<Parameter*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

}  // namespace pcmoe
