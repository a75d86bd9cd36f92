#include "gabformer/metrics.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "gabformer/keyvalue.hpp"
#include "gabformer/ops.hpp"

namespace gabformer {

namespace {

constexpr std::size_t kWindow = 11;
constexpr double kWindowSigma = 1.5;
constexpr double kL = 255.0;
constexpr double kC1 = (0.01 * kL) * (0.01 * kL);
constexpr double kC2 = (0.03 * kL) * (0.03 * kL);

std::vector<double> gaussian_taps() {
  std::vector<double> g(kWindow);
  double total = 0.0;
  const double center = static_cast<double>(kWindow / 2);
  for (std::size_t i = 0; i < kWindow; ++i) {
    const double d = static_cast<double>(i) - center;
    g[i] = std::exp(-(d * d) / (2.0 * kWindowSigma * kWindowSigma));
    total += g[i];
  }
  for (auto& v : g) v /= total;
  return g;
}

// Separable valid-mode filtering of an h x w plane.
std::vector<double> filter_valid(const std::vector<double>& plane, std::size_t h, std::size_t w,
                                 const std::vector<double>& taps) {
  const std::size_t k = taps.size(), oh = h - k + 1, ow = w - k + 1;
  std::vector<double> rows(h * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += taps[t] * plane[y * w + x + t];
      rows[y * ow + x] = acc;
    }
  std::vector<double> out(oh * ow, 0.0);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += taps[t] * rows[(y + t) * ow + x];
      out[y * ow + x] = acc;
    }
  return out;
}

struct Planes {
  std::size_t count = 0, h = 0, w = 0;
};

Planes plane_layout(const Tensor& t) {
  if (t.rank() == 2) return {1, t.dim(0), t.dim(1)};
  if (t.rank() == 3) return {t.dim(0), t.dim(1), t.dim(2)};
  if (t.rank() == 4) return {t.dim(0) * t.dim(1), t.dim(2), t.dim(3)};
  throw std::invalid_argument("metrics: expected an image tensor, got " + shape_to_string(t.shape()));
}

}  // namespace

std::string to_string(ColorSpace cs) { return cs == ColorSpace::luminance ? "luminance" : "rgb_mean"; }

ColorSpace color_space_from_string(const std::string& name) {
  if (name == "luminance" || name == "y") return ColorSpace::luminance;
  if (name == "rgb_mean" || name == "rgb") return ColorSpace::rgb_mean;
  throw std::invalid_argument("unknown color space '" + name + "' (known: luminance, rgb_mean)");
}

double psnr(const Tensor& a, const Tensor& b, double peak) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("psnr: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                                shape_to_string(b.shape()));
  }
  if (!(peak > 0.0)) throw std::invalid_argument("psnr: peak must be positive");
  double se = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.numel());
  if (mse == 0.0) return kIdenticalPsnr;
  return 10.0 * std::log10(peak * peak / mse);
}

double ssim_plane(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() != 2) {
    throw std::invalid_argument("ssim: expected equal H x W planes, got " + shape_to_string(a.shape()) + " and " +
                                shape_to_string(b.shape()));
  }
  const std::size_t h = a.dim(0), w = a.dim(1);
  if (h < kWindow || w < kWindow) {
    throw std::invalid_argument("ssim: image " + std::to_string(h) + "x" + std::to_string(w) +
                                " smaller than the 11x11 window");
  }
  const auto taps = gaussian_taps();
  std::vector<double> x(a.data().begin(), a.data().end()), y(b.data().begin(), b.data().end());
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mu_x = filter_valid(x, h, w, taps), mu_y = filter_valid(y, h, w, taps);
  const auto e_xx = filter_valid(xx, h, w, taps), e_yy = filter_valid(yy, h, w, taps),
             e_xy = filter_valid(xy, h, w, taps);
  double total = 0.0;
  for (std::size_t i = 0; i < mu_x.size(); ++i) {
    const double mx = mu_x[i], my = mu_y[i];
    const double vx = e_xx[i] - mx * mx, vy = e_yy[i] - my * my, cov = e_xy[i] - mx * my;
    total += ((2.0 * mx * my + kC1) * (2.0 * cov + kC2)) / ((mx * mx + my * my + kC1) * (vx + vy + kC2));
  }
  return total / static_cast<double>(mu_x.size());
}

double ssim(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("ssim: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                                shape_to_string(b.shape()));
  }
  const Planes layout = plane_layout(a);
  double total = 0.0;
  const std::size_t plane = layout.h * layout.w;
  for (std::size_t p = 0; p < layout.count; ++p) {
    auto slice = [&](const Tensor& t) {
      return Tensor({layout.h, layout.w},
                    std::vector<double>(t.data().begin() + p * plane, t.data().begin() + (p + 1) * plane));
    };
    total += ssim_plane(slice(a), slice(b));
  }
  return total / static_cast<double>(layout.count);
}

Tensor rgb_to_luminance(const Tensor& rgb01) {
  if (rgb01.rank() != 4 || rgb01.dim(1) != 3) {
    throw std::invalid_argument("rgb_to_luminance: expected B x 3 x H x W, got " + shape_to_string(rgb01.shape()));
  }
  const std::size_t batch = rgb01.dim(0), hw = rgb01.dim(2) * rgb01.dim(3);
  std::vector<double> y(batch * hw);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      const double r = rgb01[(b * 3 + 0) * hw + p], g = rgb01[(b * 3 + 1) * hw + p], bl = rgb01[(b * 3 + 2) * hw + p];
      y[b * hw + p] = 16.0 + 65.481 * r + 128.553 * g + 24.966 * bl;
    }
  return Tensor({batch, 1, rgb01.dim(2), rgb01.dim(3)}, std::move(y));
}

MetricReport evaluate_images(const Tensor& pred, const Tensor& target, ColorSpace cs) {
  if (pred.shape() != target.shape()) {
    throw std::invalid_argument("evaluate: shape mismatch " + shape_to_string(pred.shape()) + " vs " +
                                shape_to_string(target.shape()));
  }
  Tensor a, b;
  if (cs == ColorSpace::luminance) {
    a = rgb_to_luminance(pred);
    b = rgb_to_luminance(target);
  } else {
    a = scale(pred, 255.0);
    b = scale(target, 255.0);
  }
  return MetricReport{psnr(a, b, 255.0), ssim(a, b), cs};
}

std::string format_report_text(const std::vector<NamedReport>& per_image, const MetricReport& mean) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  for (const auto& r : per_image) os << r.id << " psnr_db=" << r.report.psnr_db << " ssim=" << r.report.ssim << '\n';
  os << "mean psnr_db=" << mean.psnr_db << " ssim=" << mean.ssim << " color_space=" << to_string(mean.color_space)
     << " count=" << per_image.size() << '\n';
  return os.str();
}

std::string format_report_keyvalues(const std::vector<NamedReport>& per_image, const MetricReport& mean) {
  KeyValues kv;
  kv.set("color_space", to_string(mean.color_space));
  kv.set("count", std::to_string(per_image.size()));
  kv.set("mean.psnr_db", format_double(mean.psnr_db));
  kv.set("mean.ssim", format_double(mean.ssim));
  for (const auto& r : per_image) {
    kv.set("image." + r.id + ".psnr_db", format_double(r.report.psnr_db));
    kv.set("image." + r.id + ".ssim", format_double(r.report.ssim));
  }
  return kv.to_text();
}

}  // namespace gabformer
