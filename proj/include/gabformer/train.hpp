#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gabformer/data.hpp"
#include "gabformer/keyvalue.hpp"
#include "gabformer/layers.hpp"
#include "gabformer/metrics.hpp"
#include "gabformer/model.hpp"

namespace gabformer {

struct TrainConfig {
  double lr_init = 3e-4;
  double lr_min = 1e-6;
  std::size_t total_steps = 1000;
  std::size_t warm_steps = 0;
  std::size_t batch = 1;
  std::size_t patch = 64;
  std::uint64_t seed = 0;
  std::string loss = "l1";
  // 0 writes only the final checkpoint.
  std::size_t checkpoint_every = 0;

  void validate() const;
  KeyValues to_keyvalues() const;
  // Keys not present keep their defaults.
  static TrainConfig from_keyvalues(const KeyValues& kv);
};

// Linear warmup over warm_steps, then
//   lr_min + (lr_init - lr_min) (1 + cos(pi (step - warm) / (total - warm))) / 2
// for step in [0, total_steps].
double lr_at(std::size_t step, const TrainConfig& cfg);

// mean |pred - target|, with sign(0) = 0 in the gradient.
Tensor l1_loss(const Tensor& pred, const Tensor& target);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Parameters without a gradient are treated as
// having a zero gradient.
class Adam {
 public:
  explicit Adam(ParamList params, AdamOptions options = {});

  void step(double lr);
  void zero_grad();
  std::size_t steps() const { return step_; }
  const AdamOptions& options() const { return options_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  ParamList params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t step_ = 0;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainOptions {
  // When set: loss.csv, resolved configs and checkpoints are written here.
  std::filesystem::path out_dir;
  std::function<void(const LossRecord&)> on_step;
};

// Trains model in place on random aligned crops; deterministic per seed.
std::vector<LossRecord> train_loop(GabformerModel& model, const std::vector<ImagePair>& data,
                                   const TrainConfig& cfg, const TrainOptions& options = {});

std::string loss_curve_csv(const std::vector<LossRecord>& curve);

// Reflect-pads H and W up to multiples of 8, runs the model and crops back.
Tensor forward_padded(const GabformerModel& model, const Tensor& image);

struct EvalResult {
  std::vector<NamedReport> per_image;
  MetricReport mean;
};

// Mean PSNR/SSIM of clamp(model(rainy), 0, 1) against clean.
EvalResult evaluate(const GabformerModel& model, const std::vector<ImagePair>& dataset,
                    ColorSpace cs = ColorSpace::luminance);

// Same metrics with an arbitrary restoration function in place of the model.
EvalResult evaluate_with(const std::function<Tensor(const Tensor&)>& restore, const std::vector<ImagePair>& dataset,
                         ColorSpace cs = ColorSpace::luminance);

}  // namespace gabformer
