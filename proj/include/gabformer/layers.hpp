#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gabformer/ops.hpp"
#include "gabformer/random.hpp"
#include "gabformer/tensor.hpp"

namespace gabformer {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedTensor>;

std::size_t count_params(const ParamList& params);

// Convolution with "same" reflect padding and stride 1.
struct Conv2d {
  Tensor weight;
  std::optional<Tensor> bias;
  Conv2dOptions options;

  // Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
  static Conv2d make(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t groups,
                     Rng& rng, bool with_bias = true);
  static Conv2d pointwise(std::size_t in_channels, std::size_t out_channels, Rng& rng) {
    return make(in_channels, out_channels, 1, 1, rng);
  }
  static Conv2d depthwise(std::size_t channels, std::size_t kernel, Rng& rng) {
    return make(channels, channels, kernel, channels, rng);
  }

  std::size_t in_channels() const { return weight.dim(1) * options.groups; }
  std::size_t out_channels() const { return weight.dim(0); }

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, options); }
  void collect(const std::string& prefix, ParamList& out) const;
};

// Channel-wise layer norm with a learnable scale (no bias).
struct LayerNormChannel {
  Tensor weight;
  double eps = 1e-5;

  static LayerNormChannel make(std::size_t channels);
  Tensor operator()(const Tensor& x) const { return layer_norm_channel(x, weight, eps); }
  void collect(const std::string& prefix, ParamList& out) const;
};

}  // namespace gabformer
