#include "gabformer/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace gabformer {

std::size_t count_params(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

Conv2d Conv2d::make(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t groups,
                    Rng& rng, bool with_bias) {
  if (groups == 0 || in_channels % groups != 0 || out_channels % groups != 0) {
    throw std::invalid_argument("conv: " + std::to_string(groups) + " groups incompatible with " +
                                std::to_string(in_channels) + " -> " + std::to_string(out_channels) + " channels");
  }
  if (kernel % 2 == 0) throw std::invalid_argument("conv: kernel size must be odd");
  const std::size_t cin_g = in_channels / groups;
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin_g * kernel * kernel));
  std::vector<double> w(out_channels * cin_g * kernel * kernel);
  for (auto& v : w) v = rng.uniform(-bound, bound);
  Conv2d conv;
  conv.weight = Tensor({out_channels, cin_g, kernel, kernel}, std::move(w), true);
  if (with_bias) conv.bias = Tensor::zeros({out_channels}, true);
  conv.options = {.stride = 1, .padding = kernel / 2, .mode = PaddingMode::reflect, .groups = groups};
  return conv;
}

void Conv2d::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight});
  if (bias) out.push_back({prefix + ".bias", *bias});
}

LayerNormChannel LayerNormChannel::make(std::size_t channels) {
  return LayerNormChannel{Tensor::full({channels}, 1.0, true)};
}

void LayerNormChannel::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight});
}

}  // namespace gabformer
