#pragma once

#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "gabformer/tensor.hpp"

namespace gabformer {

double degrees_to_radians(double degrees);

// Parameters of one real Gabor kernel. Angles are in radians.
struct GaborParams {
  double lambda = 2.0;  // wavelength, pixels
  double theta = 0.0;   // orientation
  double psi = 0.0;     // phase offset
  double sigma = 2.0 * std::numbers::pi;
  double gamma = 0.5;   // spatial ellipticity
  std::size_t ksize = 7;

  void validate() const;
};

// ksize x ksize taps, row-major, row = y offset, column = x offset:
//   G(x, y) = exp(-(x'^2 + gamma^2 y'^2) / (2 sigma^2)) * cos(2 pi x' / lambda + psi)
//   x' =  x cos(theta) + y sin(theta)
//   y' = -x sin(theta) + y cos(theta)
// Taps are not normalized.
std::vector<double> gabor_kernel(const GaborParams& p);

// Grid of kernels over (wavelength, orientation) pairs sharing psi, sigma,
// gamma and ksize. Entry (i, j) uses wavelengths[i] and orientations[j];
// storage is row-major in (i, j), i.e. (lambda, theta) lexicographic.
class GaborBank {
 public:
  GaborBank(std::vector<double> wavelengths, std::vector<double> orientations, double psi, double sigma,
            double gamma, std::size_t ksize);

  std::size_t rows() const { return wavelengths_.size(); }
  std::size_t cols() const { return orientations_.size(); }
  std::size_t size() const { return params_.size(); }
  std::size_t ksize() const { return ksize_; }

  const std::vector<double>& wavelengths() const { return wavelengths_; }
  const std::vector<double>& orientations() const { return orientations_; }
  const GaborParams& params(std::size_t i, std::size_t j) const { return params_[i * cols() + j]; }
  const std::vector<double>& kernel(std::size_t i, std::size_t j) const { return kernels_[i * cols() + j]; }

  bool enabled(std::size_t i, std::size_t j) const { return enabled_[i * cols() + j]; }
  void set_enabled(std::size_t i, std::size_t j, bool on);
  void set_all_enabled(bool on);
  std::size_t enabled_count() const;

  // Sum of the enabled kernels, as a 1 x 1 x k x k tensor.
  Tensor combined_kernel() const;

 private:
  void check_index(std::size_t i, std::size_t j) const;

  std::vector<double> wavelengths_;
  std::vector<double> orientations_;
  std::size_t ksize_;
  std::vector<GaborParams> params_;
  std::vector<std::vector<double>> kernels_;
  std::vector<bool> enabled_;
};

// Wavelengths {1.0, 1.5, 2.0, 2.5} x orientations {45, 90, 135, 180} deg,
// sigma = 2 pi, psi = 0, gamma = 0.5.
GaborBank default_bank(std::size_t ksize = 7);

// Applies every enabled kernel depthwise (the same kernel on each channel,
// reflect padding) and sums the responses. The kernels are constants.
Tensor apply_bank(const Tensor& x, const GaborBank& bank);

// Enabled-mask over a rows x cols bank, row-major.
struct BankSubset {
  std::string name;
  std::vector<bool> mask;
};

// Every single (wavelength, orientation) cell, each wavelength over all
// orientations, each orientation over all wavelengths, and the full mix:
// rows*cols + rows + cols + 1 subsets (25 for the default bank).
// Names: "l1_t2", "l3_all", "all_t4", "all" (1-based).
std::vector<BankSubset> sensitivity_subsets(std::size_t rows, std::size_t cols);

}  // namespace gabformer
