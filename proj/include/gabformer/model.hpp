#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "gabformer/blocks.hpp"
#include "gabformer/gabor.hpp"
#include "gabformer/keyvalue.hpp"

namespace gabformer {

inline constexpr std::size_t kLevels = 4;

// Gabor bank settings as written in config files. Orientations are kept in
// degrees here and converted once when the bank is built.
struct GaborSettings {
  std::size_t ksize = 7;
  std::vector<double> wavelengths{1.0, 1.5, 2.0, 2.5};
  std::vector<double> orientations_deg{45.0, 90.0, 135.0, 180.0};
  double sigma = 2.0 * std::numbers::pi;
  double psi = 0.0;
  double gamma = 0.5;
  // Row-major over (wavelength, orientation); empty means all enabled.
  std::vector<bool> enabled;

  GaborBank make_bank() const;
};

struct GabformerConfig {
  std::string preset = "toy";
  std::size_t base_channels = 8;
  std::array<std::size_t, kLevels> block_counts{1, 1, 1, 2};
  std::array<std::size_t, kLevels> head_counts{1, 2, 4, 8};
  double epsilon = 2.66;
  GaborSettings gabor;
  AttentionVariant variant;
  // Zero output conv: the untrained model is the identity map.
  bool zero_init_output = false;

  static GabformerConfig toy();
  static GabformerConfig full();
  static GabformerConfig from_preset(const std::string& name);

  // channels of level k = base_channels * 2^k
  std::array<std::size_t, kLevels> level_channels() const;
  void validate() const;

  // Canonical key=value form; from_keyvalues starts from the preset named by
  // "preset" (toy when absent) and overrides any keys present.
  KeyValues to_keyvalues() const;
  static GabformerConfig from_keyvalues(const KeyValues& kv);
};

struct ForwardOptions {
  // Replace the encoder feature of skip level 1..3 with zeros.
  std::array<bool, kLevels - 1> drop_skip{false, false, false};
  // Receives the shape of each encoder level output (levels 1..4).
  std::vector<Shape>* encoder_shapes = nullptr;
  std::vector<Tensor>* attention_maps = nullptr;
};

// Four-level symmetric encoder-decoder. Level k (0-based) runs at
// base_channels * 2^k channels and 1/2^k resolution; downsampling is
// pixel-unshuffle then 1x1 conv (4C -> 2C), upsampling is 1x1 conv (C -> 2C)
// then pixel-shuffle, and each skip is concatenated and fused back by a 1x1
// conv. The output conv predicts a residual added to the input image.
class GabformerModel {
 public:
  static GabformerModel build(const GabformerConfig& config, std::uint64_t seed);

  // image: B x 3 x H x W with H and W divisible by 8.
  Tensor forward(const Tensor& image, const ForwardOptions& options = {}) const;

  // Stable names, e.g. "encoder2.block3.mgsa.q_conv1.weight".
  ParamList parameters() const;
  std::size_t param_count() const;
  // Parameter totals grouped by top-level component, in build order.
  std::vector<std::pair<std::string, std::size_t>> param_breakdown() const;

  const GabformerConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  const GaborBank& bank() const { return bank_; }

 private:
  GabformerModel(GabformerConfig config, std::uint64_t seed, GaborBank bank);

  GabformerConfig config_;
  std::uint64_t seed_;
  GaborBank bank_;
  Conv2d embed_;
  std::array<std::vector<BlockParams>, kLevels> encoders_;
  std::array<Conv2d, kLevels - 1> downs_;    // level k -> k+1
  std::array<Conv2d, kLevels - 1> ups_;      // level k+1 -> k
  std::array<Conv2d, kLevels - 1> fuses_;    // at level k
  std::array<std::vector<BlockParams>, kLevels - 1> decoders_;
  Conv2d output_;
};

// "GFCK" | version:u32 | config text length:u64 | config text (includes
// seed=...) | record count:u64 | per record: name length:u64, name, tensor.
void save_checkpoint(const GabformerModel& model, const std::filesystem::path& path);
GabformerModel load_checkpoint(const std::filesystem::path& path);

}  // namespace gabformer
