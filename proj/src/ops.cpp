#include "gabformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <numbers>
#include <string>
#include <utility>

namespace gabformer {

namespace {

bool should_track(std::initializer_list<const Tensor*> inputs) {
  if (!active_tape()) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

Tensor make_result(const char* op, Shape shape, std::vector<double> data, bool track, Tape::BackwardFn fn) {
  if (check_finite_enabled()) {
    for (double v : data) {
      if (!std::isfinite(v)) throw NonFiniteError(std::string(op) + " produced a non-finite value");
    }
  }
  Tensor out(std::move(shape), std::move(data), track);
  if (track) active_tape()->record(out, std::move(fn));
  return out;
}

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                                      shape_to_string(b.shape()));
}

void require_rank4(const Tensor& x, const char* op) {
  require(x.rank() == 4, std::string(op) + ": expected B x C x H x W, got " + shape_to_string(x.shape()));
}

// Extents before, along and after an axis.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename Forward, typename Derivative>
Tensor unary(const char* op, const Tensor& x, Forward f, Derivative df) {
  std::vector<double> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  const bool track = should_track({&x});
  return make_result(op, x.shape(), std::move(out), track, [x, df](std::span<const double> g) {
    if (!x.requires_grad()) return;
    auto gx = x.grad_buffer();
    auto in = x.data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * df(in[i]);
  });
}

// Valid (unpadded) grouped convolution.
Tensor conv2d_valid(const Tensor& x, const Tensor& w, const std::optional<Tensor>& bias, std::size_t stride,
                    std::size_t groups) {
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), cin_g = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  require(h >= kh && wd >= kw, "conv2d: kernel " + shape_to_string(w.shape()) + " larger than padded input " +
                                   shape_to_string(x.shape()));
  const std::size_t oh = (h - kh) / stride + 1, ow = (wd - kw) / stride + 1;
  const std::size_t cout_g = cout / groups;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1;

  std::vector<double> out(batch * cout * oh * ow, 0.0);
  auto xd = x.data();
  auto wdat = w.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t oc = 0; oc < cout; ++oc) {
      double* orow_base = out.data() + (b * cout + oc) * oh * ow;
      if (bias) std::fill(orow_base, orow_base + oh * ow, (*bias)[oc]);
      const std::size_t g = oc / cout_g;
      for (std::size_t icg = 0; icg < cin_g; ++icg) {
        const double* plane = xd.data() + (b * cin + g * cin_g + icg) * h * wd;
        const double* kern = wdat.data() + (oc * cin_g + icg) * kh * kw;
        if (pointwise) {
          const double wv = kern[0];
          for (std::size_t p = 0; p < oh * ow; ++p) orow_base[p] += wv * plane[p];
          continue;
        }
        for (std::size_t i = 0; i < kh; ++i) {
          for (std::size_t j = 0; j < kw; ++j) {
            const double wv = kern[i * kw + j];
            for (std::size_t y = 0; y < oh; ++y) {
              const double* irow = plane + (y * stride + i) * wd + j;
              double* orow = orow_base + y * ow;
              if (stride == 1) {
                for (std::size_t xo = 0; xo < ow; ++xo) orow[xo] += wv * irow[xo];
              } else {
                for (std::size_t xo = 0; xo < ow; ++xo) orow[xo] += wv * irow[xo * stride];
              }
            }
          }
        }
      }
    }
  }

  const bool track = should_track({&x, &w}) || (bias && should_track({&*bias}));
  Shape shape{batch, cout, oh, ow};
  return make_result("conv2d", shape, std::move(out), track, [=](std::span<const double> gy) {
    auto xd = x.data();
    auto wdat = w.data();
    std::span<double> gx, gw;
    if (x.requires_grad()) gx = x.grad_buffer();
    if (w.requires_grad()) gw = w.grad_buffer();
    if (bias && bias->requires_grad()) {
      auto gb = bias->grad_buffer();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t oc = 0; oc < cout; ++oc) {
          const double* grow = gy.data() + (b * cout + oc) * oh * ow;
          double acc = 0.0;
          for (std::size_t p = 0; p < oh * ow; ++p) acc += grow[p];
          gb[oc] += acc;
        }
    }
    if (gx.empty() && gw.empty()) return;
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t oc = 0; oc < cout; ++oc) {
        const double* grow_base = gy.data() + (b * cout + oc) * oh * ow;
        const std::size_t g = oc / cout_g;
        for (std::size_t icg = 0; icg < cin_g; ++icg) {
          const std::size_t plane_off = (b * cin + g * cin_g + icg) * h * wd;
          const double* plane = xd.data() + plane_off;
          double* gplane = gx.empty() ? nullptr : gx.data() + plane_off;
          const std::size_t koff = (oc * cin_g + icg) * kh * kw;
          for (std::size_t i = 0; i < kh; ++i) {
            for (std::size_t j = 0; j < kw; ++j) {
              const double wv = wdat[koff + i * kw + j];
              double wacc = 0.0;
              for (std::size_t y = 0; y < oh; ++y) {
                const std::size_t ioff = (y * stride + i) * wd + j;
                const double* grow = grow_base + y * ow;
                const double* irow = plane + ioff;
                for (std::size_t xo = 0; xo < ow; ++xo) wacc += grow[xo] * irow[xo * stride];
                if (gplane) {
                  double* girow = gplane + ioff;
                  for (std::size_t xo = 0; xo < ow; ++xo) girow[xo * stride] += wv * grow[xo];
                }
              }
              if (!gw.empty()) gw[koff + i * kw + j] += wacc;
            }
          }
        }
      }
    }
  });
}

}  // namespace

std::size_t reflect_index(long long i, std::size_t n) {
  if (n == 1) return 0;
  const long long period = 2 * (static_cast<long long>(n) - 1);
  long long m = i % period;
  if (m < 0) m += period;
  if (m >= static_cast<long long>(n)) m = period - m;
  return static_cast<std::size_t>(m);
}

Tensor pad2d(const Tensor& x, std::size_t pad, PaddingMode mode) {
  require_rank4(x, "pad2d");
  if (pad == 0) return x;
  const std::size_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ph = h + 2 * pad, pw = w + 2 * pad;
  const auto p = static_cast<long long>(pad);

  // Source index per padded coordinate; -1 marks a zero pad.
  std::vector<long long> rows(ph), cols(pw);
  for (std::size_t i = 0; i < ph; ++i) {
    const long long s = static_cast<long long>(i) - p;
    rows[i] = mode == PaddingMode::reflect ? static_cast<long long>(reflect_index(s, h))
                                           : (s >= 0 && s < static_cast<long long>(h) ? s : -1);
  }
  for (std::size_t j = 0; j < pw; ++j) {
    const long long s = static_cast<long long>(j) - p;
    cols[j] = mode == PaddingMode::reflect ? static_cast<long long>(reflect_index(s, w))
                                           : (s >= 0 && s < static_cast<long long>(w) ? s : -1);
  }

  std::vector<double> out(bc * ph * pw, 0.0);
  auto xd = x.data();
  for (std::size_t c = 0; c < bc; ++c)
    for (std::size_t i = 0; i < ph; ++i) {
      if (rows[i] < 0) continue;
      for (std::size_t j = 0; j < pw; ++j) {
        if (cols[j] < 0) continue;
        out[(c * ph + i) * pw + j] = xd[(c * h + rows[i]) * w + cols[j]];
      }
    }
  Shape shape{x.dim(0), x.dim(1), ph, pw};
  return make_result("pad2d", shape, std::move(out), should_track({&x}),
                     [x, rows, cols, bc, h, w, ph, pw](std::span<const double> g) {
                       if (!x.requires_grad()) return;
                       auto gx = x.grad_buffer();
                       for (std::size_t c = 0; c < bc; ++c)
                         for (std::size_t i = 0; i < ph; ++i) {
                           if (rows[i] < 0) continue;
                           for (std::size_t j = 0; j < pw; ++j) {
                             if (cols[j] < 0) continue;
                             gx[(c * h + rows[i]) * w + cols[j]] += g[(c * ph + i) * pw + j];
                           }
                         }
                     });
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const std::optional<Tensor>& bias,
              const Conv2dOptions& options) {
  require_rank4(input, "conv2d");
  require(weight.rank() == 4, "conv2d: weight must be Cout x Cin/groups x kh x kw, got " +
                                  shape_to_string(weight.shape()));
  const std::size_t groups = options.groups;
  require(groups >= 1, "conv2d: groups must be positive");
  require(options.stride >= 1, "conv2d: stride must be positive");
  require(input.dim(1) % groups == 0, "conv2d: " + std::to_string(groups) + " groups do not divide " +
                                          std::to_string(input.dim(1)) + " input channels");
  require(weight.dim(0) % groups == 0, "conv2d: " + std::to_string(groups) + " groups do not divide " +
                                           std::to_string(weight.dim(0)) + " output channels");
  require(weight.dim(1) * groups == input.dim(1),
          "conv2d: weight " + shape_to_string(weight.shape()) + " expects " +
              std::to_string(weight.dim(1) * groups) + " input channels, input has " +
              std::to_string(input.dim(1)));
  if (bias) {
    require(bias->rank() == 1 && bias->dim(0) == weight.dim(0),
            "conv2d: bias shape " + shape_to_string(bias->shape()) + " does not match " +
                std::to_string(weight.dim(0)) + " output channels");
  }
  const Tensor padded = pad2d(input, options.padding, options.mode);
  return conv2d_valid(padded, weight, bias, options.stride, groups);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() >= 2 && a.rank() == b.rank(), "matmul: ranks " + shape_to_string(a.shape()) + " and " +
                                                     shape_to_string(b.shape()) + " are incompatible");
  const std::size_t r = a.rank();
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < r; ++i) {
    require(a.dim(i) == b.dim(i), "matmul: batch extents differ: " + shape_to_string(a.shape()) + " vs " +
                                      shape_to_string(b.shape()));
    batch *= a.dim(i);
  }
  const std::size_t m = a.dim(r - 2), k = a.dim(r - 1), n = b.dim(r - 1);
  require(b.dim(r - 2) == k, "matmul: inner extents differ: " + shape_to_string(a.shape()) + " vs " +
                                 shape_to_string(b.shape()));

  std::vector<double> out(batch * m * n, 0.0);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t t = 0; t < batch; ++t) {
    const double* ab = ad.data() + t * m * k;
    const double* bb = bd.data() + t * k * n;
    double* ob = out.data() + t * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t q = 0; q < k; ++q) {
        const double av = ab[i * k + q];
        const double* brow = bb + q * n;
        double* orow = ob + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
  }
  Shape shape = a.shape();
  shape[r - 1] = n;
  return make_result("matmul", shape, std::move(out), should_track({&a, &b}),
                     [a, b, batch, m, k, n](std::span<const double> g) {
                       auto ad = a.data();
                       auto bd = b.data();
                       if (a.requires_grad()) {
                         auto ga = a.grad_buffer();
                         for (std::size_t t = 0; t < batch; ++t)
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t q = 0; q < k; ++q) {
                               const double* grow = g.data() + (t * m + i) * n;
                               const double* brow = bd.data() + (t * k + q) * n;
                               double acc = 0.0;
                               for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                               ga[(t * m + i) * k + q] += acc;
                             }
                       }
                       if (b.requires_grad()) {
                         auto gb = b.grad_buffer();
                         for (std::size_t t = 0; t < batch; ++t)
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t q = 0; q < k; ++q) {
                               const double av = ad[(t * m + i) * k + q];
                               const double* grow = g.data() + (t * m + i) * n;
                               double* gbrow = gb.data() + (t * k + q) * n;
                               for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                             }
                       }
                     });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw std::out_of_range("softmax: axis " + std::to_string(axis) + " out of range for shape " +
                            shape_to_string(x.shape()));
  }
  const AxisSplit s = split_at(x.shape(), axis);
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double mx = -INFINITY;
      for (std::size_t e = 0; e < s.extent; ++e) mx = std::max(mx, xd[base + e * s.inner]);
      double total = 0.0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        const double v = std::exp(xd[base + e * s.inner] - mx);
        out[base + e * s.inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < s.extent; ++e) out[base + e * s.inner] /= total;
    }
  Tensor y_copy(x.shape(), out);
  return make_result("softmax", x.shape(), std::move(out), should_track({&x}),
                     [x, y_copy, s](std::span<const double> g) {
                       if (!x.requires_grad()) return;
                       auto gx = x.grad_buffer();
                       auto y = y_copy.data();
                       for (std::size_t o = 0; o < s.outer; ++o)
                         for (std::size_t in = 0; in < s.inner; ++in) {
                           const std::size_t base = o * s.extent * s.inner + in;
                           double dot = 0.0;
                           for (std::size_t e = 0; e < s.extent; ++e) {
                             const std::size_t idx = base + e * s.inner;
                             dot += g[idx] * y[idx];
                           }
                           for (std::size_t e = 0; e < s.extent; ++e) {
                             const std::size_t idx = base + e * s.inner;
                             gx[idx] += y[idx] * (g[idx] - dot);
                           }
                         }
                     });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  constexpr double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  return unary(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v) { return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v); });
}

// Subgradient convention: sign(0) = 0.
Tensor abs(const Tensor& x) {
  return unary(
      "abs", x, [](double v) { return std::fabs(v); },
      [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor reciprocal(const Tensor& x) {
  return unary(
      "reciprocal", x, [](double v) { return 1.0 / v; }, [](double v) { return -1.0 / (v * v); });
}

Tensor l2_normalize_last(const Tensor& x, double eps) {
  require(x.rank() >= 1 && x.numel() > 0, "l2_normalize_last: empty input");
  const std::size_t n = x.shape().back(), rows = x.numel() / n;
  std::vector<double> out(x.numel()), norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) ss += x[r * n + i] * x[r * n + i];
    norms[r] = std::max(std::sqrt(ss), eps);
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = x[r * n + i] / norms[r];
  }
  std::vector<double> y = out;
  return make_result("l2_normalize_last", x.shape(), std::move(out), should_track({&x}),
                     [x, y = std::move(y), norms = std::move(norms), n, eps](std::span<const double> g) {
                       auto gx = x.grad_buffer();
                       for (std::size_t r = 0; r < norms.size(); ++r) {
                         const double nr = norms[r];
                         // Below eps the op is a plain scaling by 1 / eps.
                         double dot = 0.0;
                         if (nr > eps) {
                           for (std::size_t i = 0; i < n; ++i) dot += y[r * n + i] * g[r * n + i];
                         }
                         for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += (g[r * n + i] - y[r * n + i] * dot) / nr;
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result("add", a.shape(), std::move(out), should_track({&a, &b}), [a, b](std::span<const double> g) {
    for (const Tensor* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto gt = t->grad_buffer();
      for (std::size_t i = 0; i < gt.size(); ++i) gt[i] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result("sub", a.shape(), std::move(out), should_track({&a, &b}), [a, b](std::span<const double> g) {
    if (a.requires_grad()) {
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_buffer();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result("mul", a.shape(), std::move(out), should_track({&a, &b}), [a, b](std::span<const double> g) {
    if (a.requires_grad()) {
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * b[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_buffer();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * a[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      "scale", x, [factor](double v) { return v * factor; }, [factor](double) { return factor; });
}

Tensor channel_scale(const Tensor& x, const Tensor& s) {
  require(x.rank() >= 2, "channel_scale: input needs a channel axis, got " + shape_to_string(x.shape()));
  require(s.rank() == 1 && s.dim(0) == x.dim(1), "channel_scale: scale shape " + shape_to_string(s.shape()) +
                                                     " does not match channel extent of " +
                                                     shape_to_string(x.shape()));
  const AxisSplit sp = split_at(x.shape(), 1);
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t c = 0; c < sp.extent; ++c) {
      const std::size_t base = (o * sp.extent + c) * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) out[base + i] = x[base + i] * s[c];
    }
  return make_result("channel_scale", x.shape(), std::move(out), should_track({&x, &s}),
                     [x, s, sp](std::span<const double> g) {
                       std::span<double> gx, gs;
                       if (x.requires_grad()) gx = x.grad_buffer();
                       if (s.requires_grad()) gs = s.grad_buffer();
                       for (std::size_t o = 0; o < sp.outer; ++o)
                         for (std::size_t c = 0; c < sp.extent; ++c) {
                           const std::size_t base = (o * sp.extent + c) * sp.inner;
                           double acc = 0.0;
                           for (std::size_t i = 0; i < sp.inner; ++i) {
                             if (!gx.empty()) gx[base + i] += g[base + i] * s[c];
                             acc += g[base + i] * x[base + i];
                           }
                           if (!gs.empty()) gs[c] += acc;
                         }
                     });
}

Tensor layer_norm_channel(const Tensor& x, const Tensor& weight, double eps) {
  require_rank4(x, "layer_norm_channel");
  const std::size_t batch = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(weight.rank() == 1 && weight.dim(0) == c, "layer_norm_channel: weight shape " +
                                                        shape_to_string(weight.shape()) + " for " +
                                                        std::to_string(c) + " channels");
  std::vector<double> xhat(x.numel()), inv_std(batch * hw), out(x.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t base = b * c * hw + p;
      double mu = 0.0;
      for (std::size_t k = 0; k < c; ++k) mu += x[base + k * hw];
      mu /= static_cast<double>(c);
      double var = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double d = x[base + k * hw] - mu;
        var += d * d;
      }
      var /= static_cast<double>(c);
      const double inv = 1.0 / std::sqrt(var + eps);
      inv_std[b * hw + p] = inv;
      for (std::size_t k = 0; k < c; ++k) {
        const std::size_t idx = base + k * hw;
        xhat[idx] = (x[idx] - mu) * inv;
        out[idx] = xhat[idx] * weight[k];
      }
    }
  return make_result(
      "layer_norm_channel", x.shape(), std::move(out), should_track({&x, &weight}),
      [x, weight, xhat = std::move(xhat), inv_std = std::move(inv_std), batch, c, hw](std::span<const double> g) {
        std::span<double> gx, gw;
        if (x.requires_grad()) gx = x.grad_buffer();
        if (weight.requires_grad()) gw = weight.grad_buffer();
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t p = 0; p < hw; ++p) {
            const std::size_t base = b * c * hw + p;
            double mean_g = 0.0, mean_gx = 0.0;
            for (std::size_t k = 0; k < c; ++k) {
              const std::size_t idx = base + k * hw;
              const double gh = g[idx] * weight[k];
              mean_g += gh;
              mean_gx += gh * xhat[idx];
              if (!gw.empty()) gw[k] += g[idx] * xhat[idx];
            }
            if (gx.empty()) continue;
            mean_g *= inv_c;
            mean_gx *= inv_c;
            const double inv = inv_std[b * hw + p];
            for (std::size_t k = 0; k < c; ++k) {
              const std::size_t idx = base + k * hw;
              gx[idx] += inv * (g[idx] * weight[k] - mean_g - xhat[idx] * mean_gx);
            }
          }
      });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_result("sum", {1}, {total}, should_track({&x}), [x](std::span<const double> g) {
    if (!x.requires_grad()) return;
    auto gx = x.grad_buffer();
    for (auto& v : gx) v += g[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor reshape(const Tensor& x, Shape shape) {
  require(shape_numel(shape) == x.numel(), "reshape: cannot view " + shape_to_string(x.shape()) + " as " +
                                               shape_to_string(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result("reshape", std::move(shape), std::move(out), should_track({&x}),
                     [x](std::span<const double> g) {
                       if (!x.requires_grad()) return;
                       auto gx = x.grad_buffer();
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
                     });
}

Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1) {
  const std::size_t r = x.rank();
  if (axis0 >= r || axis1 >= r) {
    throw std::out_of_range("transpose: axes out of range for shape " + shape_to_string(x.shape()));
  }
  Shape out_shape = x.shape();
  std::swap(out_shape[axis0], out_shape[axis1]);

  // Input stride for each output axis.
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * x.dim(i);
  std::vector<std::size_t> strides = in_strides;
  std::swap(strides[axis0], strides[axis1]);

  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    src[i] = offset;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      offset += strides[d];
      if (idx[d] < out_shape[d]) break;
      offset -= strides[d] * idx[d];
      idx[d] = 0;
    }
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = x[src[i]];
  return make_result("transpose", out_shape, std::move(out), should_track({&x}),
                     [x, src = std::move(src)](std::span<const double> g) {
                       if (!x.requires_grad()) return;
                       auto gx = x.grad_buffer();
                       for (std::size_t i = 0; i < src.size(); ++i) gx[src[i]] += g[i];
                     });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) {
    throw std::out_of_range("concat: axis " + std::to_string(axis) + " out of range for shape " +
                            shape_to_string(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    require(probe.size() == first.size(), "concat: rank mismatch");
    probe[axis] = first[axis];
    require(probe == first, "concat: shapes " + shape_to_string(first) + " and " + shape_to_string(p.shape()) +
                                " differ outside axis " + std::to_string(axis));
    out_shape[axis] += p.dim(axis);
  }
  const AxisSplit total = split_at(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t start = 0;
  bool track = false;
  for (const auto& p : parts) {
    const std::size_t chunk = p.dim(axis) * total.inner;
    for (std::size_t o = 0; o < total.outer; ++o) {
      std::copy_n(p.data().begin() + o * chunk, chunk,
                  out.begin() + (o * total.extent + start) * total.inner);
    }
    start += p.dim(axis);
    track = track || should_track({&p});
  }
  return make_result("concat", out_shape, std::move(out), track, [parts, total, axis](std::span<const double> g) {
    std::size_t start = 0;
    for (const auto& p : parts) {
      const std::size_t chunk = p.dim(axis) * total.inner;
      if (p.requires_grad()) {
        auto gp = p.grad_buffer();
        for (std::size_t o = 0; o < total.outer; ++o) {
          const double* src = g.data() + (o * total.extent + start) * total.inner;
          for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += src[i];
        }
      }
      start += p.dim(axis);
    }
  });
}

Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.rank()) {
    throw std::out_of_range("narrow: axis " + std::to_string(axis) + " out of range for shape " +
                            shape_to_string(x.shape()));
  }
  require(start + length <= x.dim(axis), "narrow: range [" + std::to_string(start) + ", " +
                                             std::to_string(start + length) + ") exceeds extent " +
                                             std::to_string(x.dim(axis)));
  const AxisSplit s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  const std::size_t chunk = length * s.inner;
  std::vector<double> out(s.outer * chunk);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.data().begin() + (o * s.extent + start) * s.inner, chunk, out.begin() + o * chunk);
  }
  return make_result("narrow", out_shape, std::move(out), should_track({&x}),
                     [x, s, start, chunk](std::span<const double> g) {
                       if (!x.requires_grad()) return;
                       auto gx = x.grad_buffer();
                       for (std::size_t o = 0; o < s.outer; ++o) {
                         double* dst = gx.data() + (o * s.extent + start) * s.inner;
                         for (std::size_t i = 0; i < chunk; ++i) dst[i] += g[o * chunk + i];
                       }
                     });
}

namespace {

// Index of x[b][c][h*r+i][w*r+j] for every element of unshuffle's output.
std::vector<std::size_t> unshuffle_map(std::size_t batch, std::size_t c, std::size_t h, std::size_t w,
                                       std::size_t r) {
  const std::size_t oh = h / r, ow = w / r;
  std::vector<std::size_t> map(batch * c * h * w);
  std::size_t o = 0;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < r; ++j)
          for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xx = 0; xx < ow; ++xx) map[o++] = ((b * c + ch) * h + y * r + i) * w + xx * r + j;
  return map;
}

enum class Direction { gather, scatter };

Tensor permute_by_map(const char* op, const Tensor& x, Shape out_shape, std::vector<std::size_t> map,
                      Direction dir) {
  std::vector<double> out(x.numel());
  if (dir == Direction::gather) {
    for (std::size_t i = 0; i < map.size(); ++i) out[i] = x[map[i]];
  } else {
    for (std::size_t i = 0; i < map.size(); ++i) out[map[i]] = x[i];
  }
  return make_result(op, std::move(out_shape), std::move(out), should_track({&x}),
                     [x, map = std::move(map), dir](std::span<const double> g) {
                       if (!x.requires_grad()) return;
                       auto gx = x.grad_buffer();
                       if (dir == Direction::gather) {
                         for (std::size_t i = 0; i < map.size(); ++i) gx[map[i]] += g[i];
                       } else {
                         for (std::size_t i = 0; i < map.size(); ++i) gx[i] += g[map[i]];
                       }
                     });
}

}  // namespace

Tensor pixel_unshuffle(const Tensor& x, std::size_t r) {
  require_rank4(x, "pixel_unshuffle");
  require(r >= 1, "pixel_unshuffle: factor must be positive");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(h % r == 0 && w % r == 0, "pixel_unshuffle: spatial size " + std::to_string(h) + "x" +
                                        std::to_string(w) + " not divisible by " + std::to_string(r));
  return permute_by_map("pixel_unshuffle", x, {b, c * r * r, h / r, w / r}, unshuffle_map(b, c, h, w, r),
                        Direction::gather);
}

Tensor pixel_shuffle(const Tensor& x, std::size_t r) {
  require_rank4(x, "pixel_shuffle");
  require(r >= 1, "pixel_shuffle: factor must be positive");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(c % (r * r) == 0, "pixel_shuffle: " + std::to_string(c) + " channels not divisible by " +
                                std::to_string(r * r));
  const std::size_t oc = c / (r * r);
  return permute_by_map("pixel_shuffle", x, {b, oc, h * r, w * r}, unshuffle_map(b, oc, h * r, w * r, r),
                        Direction::scatter);
}

}  // namespace gabformer
