// gabformer command-line front end.
//
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "gabformer/data.hpp"
#include "gabformer/gabor.hpp"
#include "gabformer/keyvalue.hpp"
#include "gabformer/metrics.hpp"
#include "gabformer/model.hpp"
#include "gabformer/ops.hpp"
#include "gabformer/serialize.hpp"
#include "gabformer/train.hpp"

namespace fs = std::filesystem;
using namespace gabformer;

namespace {

constexpr const char* kVersion = "0.1.0";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Resolved config + versions + seed, next to every output.
void write_manifest(const fs::path& path, const std::string& command, std::uint64_t seed, const KeyValues& resolved) {
  KeyValues kv = resolved;
  kv.set("tool", "gabformer");
  kv.set("tool.version", kVersion);
  kv.set("tool.compiler", __VERSION__);
  kv.set("command", command);
  kv.set("seed", std::to_string(seed));
  kv.save(path);
}

fs::path manifest_for_file(const fs::path& out) { return fs::path(out.string() + ".manifest.txt"); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

// Bank flags shared by kernels and filter.
struct BankFlags {
  std::vector<double> lambdas{1.0, 1.5, 2.0, 2.5};
  std::vector<double> thetas{45.0, 90.0, 135.0, 180.0};
  std::size_t ksize = 7;
  double sigma = 2.0 * std::numbers::pi;
  double psi = 0.0;
  double gamma = 0.5;

  void add(CLI::App* app) {
    app->add_option("--lambda", lambdas, "Wavelengths")->delimiter(',')->capture_default_str();
    app->add_option("--theta", thetas, "Orientations in degrees")->delimiter(',')->capture_default_str();
    app->add_option("--ksize", ksize, "Kernel size (odd, >= 3)")->capture_default_str();
    app->add_option("--sigma", sigma, "Gaussian envelope width")->capture_default_str();
    app->add_option("--psi", psi, "Phase offset in radians")->capture_default_str();
    app->add_option("--gamma", gamma, "Spatial aspect ratio")->capture_default_str();
  }

  GaborSettings settings() const {
    GaborSettings s;
    s.ksize = ksize;
    s.wavelengths = lambdas;
    s.orientations_deg = thetas;
    s.sigma = sigma;
    s.psi = psi;
    s.gamma = gamma;
    return s;
  }

  KeyValues keyvalues() const {
    KeyValues kv;
    kv.set("gabor.wavelengths", join_doubles(lambdas));
    kv.set("gabor.orientations_deg", join_doubles(thetas));
    kv.set("gabor.ksize", std::to_string(ksize));
    kv.set("gabor.sigma", format_double(sigma));
    kv.set("gabor.psi", format_double(psi));
    kv.set("gabor.gamma", format_double(gamma));
    return kv;
  }
};

// Nearest-neighbour enlargement so 7x7 kernels are viewable.
Tensor enlarge(const Tensor& img, std::size_t factor) {
  const std::size_t c = img.dim(1), h = img.dim(2), w = img.dim(3);
  std::vector<double> out(c * h * factor * w * factor);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h * factor; ++y)
      for (std::size_t x = 0; x < w * factor; ++x)
        out[(ch * h * factor + y) * w * factor + x] = img[(ch * h + y / factor) * w + x / factor];
  return Tensor({1, c, h * factor, w * factor}, std::move(out));
}

int run_kernels(const BankFlags& bank_flags, const fs::path& out, std::size_t scale, std::uint64_t seed) {
  const GaborBank bank = bank_flags.settings().make_bank();
  fs::create_directories(out);
  std::string index = "file lambda theta_deg ksize\n";
  for (std::size_t i = 0; i < bank.rows(); ++i) {
    for (std::size_t j = 0; j < bank.cols(); ++j) {
      const std::string stem =
          "kernel_l" + format_double(bank_flags.lambdas[i]) + "_t" + format_double(bank_flags.thetas[j]);
      const auto k = bank.kernel(i, j);
      const Tensor raw({1, 1, bank_flags.ksize, bank_flags.ksize}, k);
      save_tensor(out / (stem + ".gft"), raw);
      save_image(enlarge(normalize_for_display(raw), scale), out / (stem + ".png"));
      index += stem + ".png " + format_double(bank_flags.lambdas[i]) + " " + format_double(bank_flags.thetas[j]) +
               " " + std::to_string(bank_flags.ksize) + "\n";
    }
  }
  write_text(out / "index.txt", index);
  KeyValues kv = bank_flags.keyvalues();
  kv.set("kernels.scale", std::to_string(scale));
  write_manifest(out / "manifest.txt", "kernels", seed, kv);
  std::cout << "wrote " << bank.size() << " kernels to " << out.string() << "\n";
  return 0;
}

int run_filter(const BankFlags& bank_flags, const fs::path& in, const fs::path& out, std::uint64_t seed) {
  const GaborBank bank = bank_flags.settings().make_bank();
  const Tensor image = load_image(in);
  const Tensor response = apply_bank(image, bank);
  if (out.extension() == ".gft") {
    save_tensor(out, response);
  } else {
    fs::path raw = out;
    raw.replace_extension(".gft");
    save_tensor(raw, response);
    save_image(normalize_for_display(response), out);
  }
  KeyValues kv = bank_flags.keyvalues();
  kv.set("filter.input", in.string());
  write_manifest(manifest_for_file(out), "filter", seed, kv);
  std::cout << "wrote bank response to " << out.string() << "\n";
  return 0;
}

int run_derain(const fs::path& ckpt, const fs::path& in, const fs::path& out) {
  const GabformerModel model = load_checkpoint(ckpt);
  const Tensor image = load_image(in);
  save_image(forward_padded(model, image), out);
  KeyValues kv = model.config().to_keyvalues();
  kv.set("derain.checkpoint", ckpt.string());
  kv.set("derain.input", in.string());
  write_manifest(manifest_for_file(out), "derain", model.seed(), kv);
  std::cout << "wrote " << out.string() << "\n";
  return 0;
}

// Model config: preset < config file < flags.
struct ModelFlags {
  std::string preset = "toy";
  fs::path config_file;
  std::optional<std::string> variant;
  std::optional<double> epsilon;
  std::optional<std::size_t> base_channels;

  void add(CLI::App* app) {
    app->add_option("--preset", preset, "Model preset: toy or full")->capture_default_str();
    app->add_option("--config", config_file, "key=value config file (overrides the preset)");
    app->add_option("--variant", variant, "Attention variant name");
    app->add_option("--epsilon", epsilon, "Feed-forward expansion ratio");
    app->add_option("--base-channels", base_channels, "Channels at the first level");
  }

  KeyValues file_values() const { return config_file.empty() ? KeyValues{} : KeyValues::load(config_file); }

  GabformerConfig resolve() const {
    KeyValues kv = GabformerConfig::from_preset(preset).to_keyvalues();
    for (const auto& [k, v] : file_values().entries()) {
      if (k.rfind("train.", 0) != 0 && k.rfind("rain.", 0) != 0) kv.set(k, v);
    }
    if (variant) {
      kv.set("variant", *variant);
      for (const char* k : {"variant.q_gabor", "variant.kv_gabor", "variant.attention", "variant.ffn"}) kv.erase(k);
    }
    if (epsilon) kv.set("epsilon", format_double(*epsilon));
    if (base_channels) kv.set("base_channels", std::to_string(*base_channels));
    return GabformerConfig::from_keyvalues(kv);
  }
};

struct TrainFlags {
  std::optional<std::size_t> steps, patch, batch, checkpoint_every;
  std::optional<double> lr_init, lr_min;

  void add(CLI::App* app) {
    app->add_option("--steps", steps, "Training steps [1000]");
    app->add_option("--patch", patch, "Crop size, multiple of 8 [min(64, image size)]");
    app->add_option("--batch", batch, "Crops per step [1]");
    app->add_option("--lr-init", lr_init, "Initial learning rate [3e-4]");
    app->add_option("--lr-min", lr_min, "Final learning rate [1e-6]");
    app->add_option("--checkpoint-every", checkpoint_every, "Intermediate checkpoint period, 0 = final only [0]");
  }

  TrainConfig resolve(const KeyValues& file, std::uint64_t seed, std::size_t default_patch) const {
    KeyValues kv;
    kv.set("train.patch", std::to_string(default_patch));
    for (const auto& [k, v] : file.entries()) {
      if (k.rfind("train.", 0) == 0) kv.set(k, v);
    }
    if (steps) kv.set("train.total_steps", std::to_string(*steps));
    if (patch) kv.set("train.patch", std::to_string(*patch));
    if (batch) kv.set("train.batch", std::to_string(*batch));
    if (checkpoint_every) kv.set("train.checkpoint_every", std::to_string(*checkpoint_every));
    if (lr_init) kv.set("train.lr_init", format_double(*lr_init));
    if (lr_min) kv.set("train.lr_min", format_double(*lr_min));
    kv.set("train.seed", std::to_string(seed));
    return TrainConfig::from_keyvalues(kv);
  }
};

struct RainFlags {
  RainParams params;

  void add(CLI::App* app) {
    app->add_option("--rain-angle", params.streak_angle_deg, "Streak angle from vertical, degrees")
        ->capture_default_str();
    app->add_option("--rain-length", params.streak_length, "Streak length in pixels")->capture_default_str();
    app->add_option("--rain-density", params.density, "Fraction of seeding pixels")->capture_default_str();
    app->add_option("--rain-intensity", params.intensity, "Streak amplitude")->capture_default_str();
  }
};

int run_train_toy(const ModelFlags& model_flags, const TrainFlags& train_flags, RainParams rain,
                  const fs::path& clean_path, std::size_t size, const fs::path& out, std::uint64_t seed) {
  Tensor clean;
  if (clean_path.empty()) {
    clean = synthetic_scene(size, size, seed);
  } else {
    const Tensor loaded = load_image(clean_path);
    const std::size_t h = loaded.dim(2) / 8 * 8, w = loaded.dim(3) / 8 * 8;
    if (h == 0 || w == 0) throw std::runtime_error("clean image must be at least 8x8");
    clean = crop(loaded, 0, 0, h, w);
  }
  rain.seed = seed + 1;
  const ImagePair pair = synth_rain(clean, rain, "toy");
  const std::size_t default_patch = std::min<std::size_t>(64, std::min(clean.dim(2), clean.dim(3)));

  const GabformerConfig config = model_flags.resolve();
  const TrainConfig train = train_flags.resolve(model_flags.file_values(), seed, default_patch);
  GabformerModel model = GabformerModel::build(config, seed);

  fs::create_directories(out / "data" / "rainy");
  fs::create_directories(out / "data" / "clean");
  save_image(pair.rainy, out / "data" / "rainy" / "toy.gft");
  save_image(pair.clean, out / "data" / "clean" / "toy.gft");
  save_image(pair.rainy, out / "rainy.png");
  save_image(pair.clean, out / "clean.png");

  const EvalResult before = evaluate_with([](const Tensor& x) { return x; }, {pair});
  std::cout << "rainy baseline: " << format_double(before.mean.psnr_db) << " dB\n";
  TrainOptions options;
  options.out_dir = out;
  options.on_step = [&](const LossRecord& r) {
    if (r.step % 100 == 0 || r.step + 1 == train.total_steps) {
      std::printf("step %zu lr %.3e loss %.6f\n", r.step, r.lr, r.loss);
      std::fflush(stdout);
    }
  };
  train_loop(model, {pair}, train, options);
  const EvalResult after = evaluate(model, {pair});
  save_image(forward_padded(model, pair.rainy), out / "restored.png");

  KeyValues metrics;
  metrics.set("rainy.psnr_db", format_double(before.mean.psnr_db));
  metrics.set("rainy.ssim", format_double(before.mean.ssim));
  metrics.set("restored.psnr_db", format_double(after.mean.psnr_db));
  metrics.set("restored.ssim", format_double(after.mean.ssim));
  metrics.set("gain_db", format_double(after.mean.psnr_db - before.mean.psnr_db));
  metrics.set("color_space", to_string(after.mean.color_space));
  metrics.save(out / "metrics.txt");

  KeyValues resolved = config.to_keyvalues();
  for (const auto& [k, v] : train.to_keyvalues().entries()) resolved.set(k, v);
  resolved.set("rain.streak_angle_deg", format_double(rain.streak_angle_deg));
  resolved.set("rain.streak_length", format_double(rain.streak_length));
  resolved.set("rain.density", format_double(rain.density));
  resolved.set("rain.intensity", format_double(rain.intensity));
  resolved.set("rain.seed", std::to_string(rain.seed));
  resolved.set("train_toy.clean", clean_path.empty() ? "synthetic" : clean_path.string());
  write_manifest(out / "manifest.txt", "train-toy", seed, resolved);

  std::cout << "restored: " << format_double(after.mean.psnr_db) << " dB (gain "
            << format_double(after.mean.psnr_db - before.mean.psnr_db) << " dB)\n";
  return 0;
}

int run_eval(const fs::path& ckpt, bool identity, const fs::path& data, const std::string& color_space,
             const fs::path& out, std::uint64_t seed) {
  if (ckpt.empty() == !identity) throw UsageError("eval needs exactly one of --ckpt or --identity");
  const ColorSpace cs = color_space_from_string(color_space);
  const auto dataset = load_paired_dataset(data);
  std::optional<GabformerModel> model;
  EvalResult result;
  if (identity) {
    result = evaluate_with([](const Tensor& x) { return x; }, dataset, cs);
  } else {
    model = load_checkpoint(ckpt);
    result = evaluate(*model, dataset, cs);
  }
  const std::string text = format_report_text(result.per_image, result.mean);
  std::cout << text;
  if (!out.empty()) {
    fs::create_directories(out);
    write_text(out / "report.txt", text);
    write_text(out / "report.kv", format_report_keyvalues(result.per_image, result.mean));
    KeyValues kv = model ? model->config().to_keyvalues() : KeyValues{};
    kv.set("eval.data", data.string());
    kv.set("eval.model", identity ? "identity" : ckpt.string());
    kv.set("eval.color_space", to_string(cs));
    write_manifest(out / "manifest.txt", "eval", model ? model->seed() : seed, kv);
  }
  return 0;
}

double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// One block at the given width: forward, sum-of-squares loss, backward.
// Returns (loss, gradient norm over the block parameters).
std::pair<double, double> block_step(const AttentionVariant& v, const GaborBank& bank, std::size_t channels,
                                     std::size_t heads, std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  const BlockParams block = BlockParams::make(channels, heads, 2.66, v, rng);
  std::vector<double> xs(channels * size * size);
  for (auto& x : xs) x = rng.uniform(-1.0, 1.0);
  const Tensor input({1, channels, size, size}, std::move(xs), true);
  Tape tape;
  TapeScope scope(tape);
  const Tensor y = block_forward(input, block, bank);
  const Tensor loss = mean(mul(y, y));
  tape.backward(loss);
  ParamList params;
  block.collect("block", params);
  double g = 0.0;
  for (const auto& p : params) {
    const double n = l2_norm(p.tensor.grad());
    g += n * n;
  }
  return {loss.item(), std::sqrt(g)};
}

int run_ablate(const std::string& variant_name, bool subsets, std::size_t channels, std::size_t heads,
               std::size_t size, const fs::path& out, std::uint64_t seed) {
  std::vector<AttentionVariant> variants;
  if (variant_name == "all") {
    variants = AttentionVariant::ablation_rows();
  } else {
    variants.push_back(AttentionVariant::from_name(variant_name));
  }
  std::string report = "kind name loss grad_norm\n";
  const GaborBank full_bank = default_bank();
  for (const auto& v : variants) {
    const auto [loss, g] = block_step(v, full_bank, channels, heads, size, seed);
    report += "variant " + v.name() + " " + format_double(loss) + " " + format_double(g) + "\n";
  }
  if (subsets) {
    for (const auto& s : sensitivity_subsets(full_bank.rows(), full_bank.cols())) {
      GaborBank bank = default_bank();
      for (std::size_t i = 0; i < bank.rows(); ++i)
        for (std::size_t j = 0; j < bank.cols(); ++j) bank.set_enabled(i, j, s.mask[i * bank.cols() + j]);
      const auto [loss, g] = block_step(AttentionVariant{}, bank, channels, heads, size, seed);
      report += "subset " + s.name + " " + format_double(loss) + " " + format_double(g) + "\n";
    }
  }
  std::cout << report;
  if (!out.empty()) {
    fs::create_directories(out);
    write_text(out / "ablation.txt", report);
    KeyValues kv;
    kv.set("ablate.variant", variant_name);
    kv.set("ablate.subsets", subsets ? "1" : "0");
    kv.set("ablate.channels", std::to_string(channels));
    kv.set("ablate.heads", std::to_string(heads));
    kv.set("ablate.size", std::to_string(size));
    write_manifest(out / "manifest.txt", "ablate", seed, kv);
  }
  return 0;
}

int run_param_count(const ModelFlags& model_flags, bool breakdown, std::uint64_t seed) {
  const GabformerModel model = GabformerModel::build(model_flags.resolve(), seed);
  std::cout << model.param_count() << "\n";
  if (breakdown) {
    for (const auto& [name, n] : model.param_breakdown()) std::cout << "  " << name << " " << n << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gabor-guided transformer for single-image deraining"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", kVersion);
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "Seed for every random choice")->capture_default_str();

  BankFlags bank_flags;
  ModelFlags model_flags;
  TrainFlags train_flags;
  RainFlags rain_flags;
  fs::path out, in, ckpt, data, clean;
  std::size_t scale = 16, size = 64, channels = 8, heads = 2;
  std::string variant_name = "all", color_space = "luminance";
  bool identity = false, subsets = false, breakdown = false;

  auto* kernels = app.add_subcommand("kernels", "Export the Gabor bank as images, raw sidecars and an index");
  kernels->add_option("--out", out, "Output directory")->required();
  kernels->add_option("--scale", scale, "Enlargement factor of the PNG previews")->capture_default_str();
  bank_flags.add(kernels);

  auto* filter = app.add_subcommand("filter", "Write the summed bank response of an image");
  filter->add_option("--in", in, "Input image (.png or .gft)")->required();
  filter->add_option("--out", out, "Output image; a raw .gft sidecar is written next to it")->required();
  bank_flags.add(filter);

  auto* derain = app.add_subcommand("derain", "Restore an image with a trained checkpoint");
  derain->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  derain->add_option("--in", in, "Rainy image")->required();
  derain->add_option("--out", out, "Restored image")->required();

  auto* train_toy = app.add_subcommand("train-toy", "Overfit one synthetic rainy/clean pair");
  train_toy->add_option("--clean", clean, "Clean image; a seeded synthetic scene when omitted");
  train_toy->add_option("--size", size, "Synthetic scene size, multiple of 8")->capture_default_str();
  train_toy->add_option("--out", out, "Output directory")->required();
  model_flags.add(train_toy);
  train_flags.add(train_toy);
  rain_flags.add(train_toy);

  auto* eval = app.add_subcommand("eval", "PSNR/SSIM of a checkpoint over a paired dataset");
  eval->add_option("--ckpt", ckpt, "Checkpoint file");
  eval->add_flag("--identity", identity, "Score the rainy inputs themselves");
  eval->add_option("--data", data, "Dataset root with rainy/ and clean/")->required();
  eval->add_option("--color-space", color_space, "luminance or rgb_mean")->capture_default_str();
  eval->add_option("--out", out, "Directory for report.txt, report.kv and manifest");

  auto* ablate = app.add_subcommand("ablate", "Forward and backward through block variants and bank subsets");
  ablate->add_option("--variant", variant_name, "Variant name or 'all'")->capture_default_str();
  ablate->add_flag("--bank-subsets", subsets, "Also run every wavelength/orientation subset");
  ablate->add_option("--channels", channels, "Block width")->capture_default_str();
  ablate->add_option("--heads", heads, "Attention heads")->capture_default_str();
  ablate->add_option("--size", size, "Input height and width")->capture_default_str();
  ablate->add_option("--out", out, "Directory for ablation.txt and manifest");

  auto* param_count = app.add_subcommand("param-count", "Print the parameter count of a configuration");
  model_flags.add(param_count);
  param_count->add_flag("--breakdown", breakdown, "Per-component totals");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*kernels) return run_kernels(bank_flags, out, scale, seed);
    if (*filter) return run_filter(bank_flags, in, out, seed);
    if (*derain) return run_derain(ckpt, in, out);
    if (*train_toy) return run_train_toy(model_flags, train_flags, rain_flags.params, clean, size, out, seed);
    if (*eval) return run_eval(ckpt, identity, data, color_space, out, seed);
    if (*ablate) return run_ablate(variant_name, subsets, channels, heads, size, out, seed);
    if (*param_count) return run_param_count(model_flags, breakdown, seed);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
