#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gabformer/random.hpp"
#include "gabformer/tensor.hpp"

namespace gabformer {

// Aligned (rainy, clean) images, each 1 x 3 x H x W with values in [0, 1].
struct ImagePair {
  Tensor rainy;
  Tensor clean;
  std::string id;

  void validate() const;
};

// PNG (8/16-bit, gray or RGB, alpha dropped) or the raw tensor format
// (".gft"). Returns 1 x 3 x H x W in [0, 1].
Tensor load_image(const std::filesystem::path& path);
// PNG output is 8-bit RGB (or gray for 1-channel input) after clamping to
// [0, 1] and rounding; ".gft" output is lossless.
void save_image(const Tensor& image, const std::filesystem::path& path);

// Per-image min-max stretch to [0, 1]; a constant image maps to 0.5.
Tensor normalize_for_display(const Tensor& image);

// Deterministic textured RGB test scene (gradients, discs, stripes).
Tensor synthetic_scene(std::size_t height, std::size_t width, std::uint64_t seed);

struct RainParams {
  double streak_angle_deg = 15.0;  // from vertical
  double streak_length = 12.0;     // pixels
  double density = 0.05;           // fraction of pixels seeding a streak
  double intensity = 0.8;
  std::uint64_t seed = 0;

  void validate() const;
};

// Single-channel streak layer (1 x 1 x H x W) in [0, intensity]: thresholded
// uniform noise, motion-blurred along the streak direction, contrast
// stretched and clipped.
Tensor streak_layer(std::size_t height, std::size_t width, const RainParams& p);

// rainy = clip(clean + streak, 0, 1), the streak added to every channel.
ImagePair synth_rain(const Tensor& clean, const RainParams& p, const std::string& id = "synthetic");

Tensor crop(const Tensor& image, std::size_t top, std::size_t left, std::size_t height, std::size_t width);

// Aligned random square crops; deterministic per seed.
class PatchSampler {
 public:
  PatchSampler(ImagePair pair, std::size_t size, std::uint64_t seed);
  ImagePair next();

 private:
  ImagePair pair_;
  std::size_t size_;
  Rng rng_;
};

// root/rainy/<stem>.png (or .gft) paired with root/clean/<stem>.png (or
// .gft), sorted by stem. The .gft file is used when both exist.
std::vector<ImagePair> load_paired_dataset(const std::filesystem::path& root);
ImagePair load_pair(const std::filesystem::path& root, const std::string& id);

}  // namespace gabformer
