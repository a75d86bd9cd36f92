#include "gabformer/gabor.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

#include "gabformer/ops.hpp"

namespace gabformer {

namespace {

// Rounds values within a few ulp of 0 or +-1 so that axis-aligned
// orientations rotate the grid exactly (sin(pi) is 1.2e-16, not 0).
double snap_unit(double v) {
  constexpr double tol = 4.0 * std::numeric_limits<double>::epsilon();
  if (std::fabs(v) < tol) return 0.0;
  if (std::fabs(v - 1.0) < tol) return 1.0;
  if (std::fabs(v + 1.0) < tol) return -1.0;
  return v;
}

}  // namespace

double degrees_to_radians(double degrees) { return degrees * std::numbers::pi / 180.0; }

void GaborParams::validate() const {
  if (!(lambda > 0.0)) throw std::invalid_argument("gabor: wavelength must be positive");
  if (!(sigma > 0.0)) throw std::invalid_argument("gabor: sigma must be positive");
  if (!(gamma > 0.0)) throw std::invalid_argument("gabor: gamma must be positive");
  if (ksize < 3 || ksize % 2 == 0) {
    throw std::invalid_argument("gabor: kernel size must be odd and at least 3, got " + std::to_string(ksize));
  }
}

std::vector<double> gabor_kernel(const GaborParams& p) {
  p.validate();
  const double c = snap_unit(std::cos(p.theta));
  const double s = snap_unit(std::sin(p.theta));
  const long long half = static_cast<long long>(p.ksize / 2);
  const double two_sigma_sq = 2.0 * p.sigma * p.sigma;
  std::vector<double> taps(p.ksize * p.ksize);
  for (long long y = -half; y <= half; ++y) {
    for (long long x = -half; x <= half; ++x) {
      const double xd = static_cast<double>(x), yd = static_cast<double>(y);
      const double xr = xd * c + yd * s;
      const double yr = -xd * s + yd * c;
      const double envelope = std::exp(-(xr * xr + p.gamma * p.gamma * yr * yr) / two_sigma_sq);
      const double carrier = std::cos(2.0 * std::numbers::pi * xr / p.lambda + p.psi);
      taps[static_cast<std::size_t>((y + half) * static_cast<long long>(p.ksize) + (x + half))] =
          envelope * carrier;
    }
  }
  return taps;
}

GaborBank::GaborBank(std::vector<double> wavelengths, std::vector<double> orientations, double psi, double sigma,
                     double gamma, std::size_t ksize)
    : wavelengths_(std::move(wavelengths)), orientations_(std::move(orientations)), ksize_(ksize) {
  if (wavelengths_.empty() || orientations_.empty()) {
    throw std::invalid_argument("gabor bank needs at least one wavelength and one orientation");
  }
  for (double lambda : wavelengths_)
    for (double theta : orientations_) {
      GaborParams p{lambda, theta, psi, sigma, gamma, ksize};
      kernels_.push_back(gabor_kernel(p));
      params_.push_back(p);
    }
  enabled_.assign(params_.size(), true);
}

void GaborBank::check_index(std::size_t i, std::size_t j) const {
  if (i >= rows() || j >= cols()) {
    throw std::out_of_range("gabor bank index (" + std::to_string(i) + ", " + std::to_string(j) +
                            ") out of range");
  }
}

void GaborBank::set_enabled(std::size_t i, std::size_t j, bool on) {
  check_index(i, j);
  enabled_[i * cols() + j] = on;
}

void GaborBank::set_all_enabled(bool on) { enabled_.assign(enabled_.size(), on); }

std::size_t GaborBank::enabled_count() const {
  std::size_t n = 0;
  for (bool e : enabled_) n += e ? 1 : 0;
  return n;
}

Tensor GaborBank::combined_kernel() const {
  std::vector<double> acc(ksize_ * ksize_, 0.0);
  for (std::size_t k = 0; k < kernels_.size(); ++k) {
    if (!enabled_[k]) continue;
    for (std::size_t t = 0; t < acc.size(); ++t) acc[t] += kernels_[k][t];
  }
  return Tensor({1, 1, ksize_, ksize_}, std::move(acc));
}

GaborBank default_bank(std::size_t ksize) {
  std::vector<double> thetas;
  for (double deg : {45.0, 90.0, 135.0, 180.0}) thetas.push_back(degrees_to_radians(deg));
  return GaborBank({1.0, 1.5, 2.0, 2.5}, std::move(thetas), 0.0, 2.0 * std::numbers::pi, 0.5, ksize);
}

Tensor apply_bank(const Tensor& x, const GaborBank& bank) {
  if (x.rank() != 4) {
    throw std::invalid_argument("apply_bank: expected B x C x H x W, got " + shape_to_string(x.shape()));
  }
  if (bank.enabled_count() == 0) throw std::invalid_argument("apply_bank: no kernel enabled");
  // The responses share padding, so their sum is one convolution with the
  // summed kernel.
  const Tensor summed = bank.combined_kernel();
  const std::size_t channels = x.dim(1), k = bank.ksize();
  std::vector<double> weights;
  weights.reserve(channels * k * k);
  for (std::size_t c = 0; c < channels; ++c) weights.insert(weights.end(), summed.data().begin(), summed.data().end());
  const Tensor weight({channels, 1, k, k}, std::move(weights));
  return conv2d(x, weight, std::nullopt, {.stride = 1, .padding = k / 2, .mode = PaddingMode::reflect,
                                          .groups = channels});
}

std::vector<BankSubset> sensitivity_subsets(std::size_t rows, std::size_t cols) {
  std::vector<BankSubset> out;
  auto make = [&](std::string name, auto pick) {
    BankSubset s{std::move(name), std::vector<bool>(rows * cols, false)};
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) s.mask[i * cols + j] = pick(i, j);
    out.push_back(std::move(s));
  };
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      make("l" + std::to_string(i + 1) + "_t" + std::to_string(j + 1),
           [=](std::size_t a, std::size_t b) { return a == i && b == j; });
    }
    make("l" + std::to_string(i + 1) + "_all", [=](std::size_t a, std::size_t) { return a == i; });
  }
  for (std::size_t j = 0; j < cols; ++j) {
    make("all_t" + std::to_string(j + 1), [=](std::size_t, std::size_t b) { return b == j; });
  }
  make("all", [](std::size_t, std::size_t) { return true; });
  return out;
}

}  // namespace gabformer
