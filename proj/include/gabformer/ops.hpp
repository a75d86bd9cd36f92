#pragma once

#include <optional>
#include <vector>

#include "gabformer/tensor.hpp"

// Differentiable ops. Each op records a backward closure on the active tape
// when at least one input requires a gradient.
namespace gabformer {

enum class PaddingMode { zero, reflect };

// Reflected index for any offset, folding repeatedly when the pad is wider
// than the extent (e.g. a 7x7 kernel on a 2x2 feature map).
std::size_t reflect_index(long long i, std::size_t n);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  PaddingMode mode = PaddingMode::zero;
  std::size_t groups = 1;
};

// input: B x Cin x H x W, weight: Cout x (Cin/groups) x kh x kw, bias: Cout.
Tensor conv2d(const Tensor& input, const Tensor& weight, const std::optional<Tensor>& bias,
              const Conv2dOptions& options);

Tensor pad2d(const Tensor& input, std::size_t pad, PaddingMode mode);

// Rank 2 (M x K)(K x N), or batched over all leading axes with equal batch extents.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor relu(const Tensor& x);
// Exact form x * Phi(x) with the Gaussian CDF via erf.
Tensor gelu(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor reciprocal(const Tensor& x);

// x / max(||x||_2, eps) along the last axis.
Tensor l2_normalize_last(const Tensor& x, double eps = 1e-12);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

// y[b, c, ...] = x[b, c, ...] * s[c]; x has rank >= 2, s has shape (C).
Tensor channel_scale(const Tensor& x, const Tensor& s);

// Per-pixel normalization across channels (axis 1) of a B x C x H x W tensor,
// followed by a learnable per-channel scale. No bias.
Tensor layer_norm_channel(const Tensor& x, const Tensor& weight, double eps = 1e-5);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);

// (B, C, H, W) -> (B, C*r*r, H/r, W/r) and its inverse.
Tensor pixel_unshuffle(const Tensor& x, std::size_t r);
Tensor pixel_shuffle(const Tensor& x, std::size_t r);

}  // namespace gabformer
