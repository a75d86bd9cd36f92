#pragma once

#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "gabformer/tensor.hpp"

namespace gabformer {

enum class ColorSpace { luminance, rgb_mean };

std::string to_string(ColorSpace cs);
ColorSpace color_space_from_string(const std::string& name);

struct MetricReport {
  // +inf when the images are identical.
  double psnr_db = 0.0;
  double ssim = 0.0;
  ColorSpace color_space = ColorSpace::luminance;
};

inline constexpr double kIdenticalPsnr = std::numeric_limits<double>::infinity();

// 10 log10(peak^2 / MSE) over all elements; +inf when MSE is zero.
double psnr(const Tensor& a, const Tensor& b, double peak = 255.0);

// Mean SSIM over the valid 11x11 Gaussian windows (sigma 1.5,
// K1 = 0.01, K2 = 0.03, L = 255) of single-plane images. Planes are given as
// H x W tensors in the 0..255 range.
double ssim_plane(const Tensor& a, const Tensor& b);

// Mean of ssim_plane over every H x W plane of a B x C x H x W (or C x H x W,
// or H x W) image in 0..255.
double ssim(const Tensor& a, const Tensor& b);

// Converts [0, 1] RGB images to the 0..255 convention and reports PSNR and
// SSIM, either on BT.601 luminance or on the RGB channels (PSNR over all
// channels, SSIM averaged over channels).
MetricReport evaluate_images(const Tensor& pred, const Tensor& target, ColorSpace cs = ColorSpace::luminance);

// Y = 16 + 65.481 R + 128.553 G + 24.966 B for R, G, B in [0, 1]; result is
// a B x 1 x H x W tensor in 0..255.
Tensor rgb_to_luminance(const Tensor& rgb01);

struct NamedReport {
  std::string id;
  MetricReport report;
};

// "id psnr_db ssim" lines, then a mean line.
std::string format_report_text(const std::vector<NamedReport>& per_image, const MetricReport& mean);
// key=value form: mean.psnr_db, mean.ssim, color_space, count, image.<id>.psnr_db, ...
std::string format_report_keyvalues(const std::vector<NamedReport>& per_image, const MetricReport& mean);

}  // namespace gabformer
