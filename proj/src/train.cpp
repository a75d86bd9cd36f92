#include "gabformer/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "gabformer/ops.hpp"

namespace gabformer {

void TrainConfig::validate() const {
  if (!(lr_min > 0.0 && lr_init > lr_min)) throw std::invalid_argument("train: need lr_init > lr_min > 0");
  if (total_steps == 0) throw std::invalid_argument("train: total_steps must be positive");
  if (warm_steps >= total_steps) throw std::invalid_argument("train: warm_steps must be below total_steps");
  if (batch == 0) throw std::invalid_argument("train: batch must be positive");
  if (patch == 0 || patch % 8 != 0) throw std::invalid_argument("train: patch must be a positive multiple of 8");
  if (loss != "l1") throw std::invalid_argument("train: unsupported loss '" + loss + "' (known: l1)");
}

KeyValues TrainConfig::to_keyvalues() const {
  KeyValues kv;
  kv.set("train.lr_init", format_double(lr_init));
  kv.set("train.lr_min", format_double(lr_min));
  kv.set("train.total_steps", std::to_string(total_steps));
  kv.set("train.warm_steps", std::to_string(warm_steps));
  kv.set("train.batch", std::to_string(batch));
  kv.set("train.patch", std::to_string(patch));
  kv.set("train.seed", std::to_string(seed));
  kv.set("train.loss", loss);
  kv.set("train.checkpoint_every", std::to_string(checkpoint_every));
  return kv;
}

TrainConfig TrainConfig::from_keyvalues(const KeyValues& kv) {
  TrainConfig c;
  if (kv.contains("train.lr_init")) c.lr_init = kv.get_double("train.lr_init");
  if (kv.contains("train.lr_min")) c.lr_min = kv.get_double("train.lr_min");
  if (kv.contains("train.total_steps")) c.total_steps = kv.get_uint("train.total_steps");
  if (kv.contains("train.warm_steps")) c.warm_steps = kv.get_uint("train.warm_steps");
  if (kv.contains("train.batch")) c.batch = kv.get_uint("train.batch");
  if (kv.contains("train.patch")) c.patch = kv.get_uint("train.patch");
  if (kv.contains("train.seed")) c.seed = kv.get_uint("train.seed");
  if (kv.contains("train.loss")) c.loss = kv.get_string("train.loss");
  if (kv.contains("train.checkpoint_every")) c.checkpoint_every = kv.get_uint("train.checkpoint_every");
  c.validate();
  return c;
}

double lr_at(std::size_t step, const TrainConfig& cfg) {
  if (step > cfg.total_steps) {
    throw std::out_of_range("lr_at: step " + std::to_string(step) + " beyond total_steps " +
                            std::to_string(cfg.total_steps));
  }
  if (step < cfg.warm_steps) {
    return cfg.lr_init * static_cast<double>(step + 1) / static_cast<double>(cfg.warm_steps);
  }
  if (step == cfg.total_steps) return cfg.lr_min;
  const double progress =
      static_cast<double>(step - cfg.warm_steps) / static_cast<double>(cfg.total_steps - cfg.warm_steps);
  return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

Tensor l1_loss(const Tensor& pred, const Tensor& target) { return mean(abs(sub(pred, target))); }

Adam::Adam(ParamList params, AdamOptions options) : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  ++step_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& t = params_[k].tensor;
    auto data = t.mutable_data();
    auto grad = t.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = grad.empty() ? 0.0 : grad[i];
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      data[i] -= lr * m_hat / (std::sqrt(v_hat) + options_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

std::string loss_curve_csv(const std::vector<LossRecord>& curve) {
  std::string out = "step,lr,loss\n";
  for (const auto& r : curve) out += std::to_string(r.step) + "," + format_double(r.lr) + "," + format_double(r.loss) + "\n";
  return out;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << text;
}

}  // namespace

std::vector<LossRecord> train_loop(GabformerModel& model, const std::vector<ImagePair>& data, const TrainConfig& cfg,
                                   const TrainOptions& options) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train: no training pairs");
  const bool write = !options.out_dir.empty();
  if (write) {
    std::filesystem::create_directories(options.out_dir);
    KeyValues resolved = model.config().to_keyvalues();
    resolved.set("seed", std::to_string(model.seed()));
    const KeyValues train_keys = cfg.to_keyvalues();
    for (const auto& [k, v] : train_keys.entries()) resolved.set(k, v);
    resolved.save(options.out_dir / "train_config.txt");
  }

  std::vector<PatchSampler> samplers;
  for (std::size_t i = 0; i < data.size(); ++i) samplers.emplace_back(data[i], cfg.patch, cfg.seed + 1 + i);
  Rng pick(cfg.seed);
  Adam adam(model.parameters());
  std::vector<LossRecord> curve;

  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    const double lr = lr_at(step, cfg);
    std::vector<Tensor> inputs, targets;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const ImagePair patch = samplers[pick.below(samplers.size())].next();
      inputs.push_back(patch.rainy);
      targets.push_back(patch.clean);
    }
    const Tensor input = cfg.batch == 1 ? inputs.front() : concat(inputs, 0);
    const Tensor target = cfg.batch == 1 ? targets.front() : concat(targets, 0);

    double loss_value = 0.0;
    try {
      Tape tape;
      TapeScope scope(tape);
      const Tensor loss = l1_loss(model.forward(input), target);
      loss_value = loss.item();
      adam.zero_grad();
      tape.backward(loss);
    } catch (const NonFiniteError& e) {
      throw TrainingError("non-finite value at step " + std::to_string(step) + " (lr " + format_double(lr) +
                          "): " + e.what());
    }
    if (!std::isfinite(loss_value)) {
      throw TrainingError("loss is not finite at step " + std::to_string(step) + " (lr " + format_double(lr) + ")");
    }
    adam.step(lr);
    curve.push_back({step, lr, loss_value});
    if (options.on_step) options.on_step(curve.back());

    if (write && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.total_steps) {
      save_checkpoint(model, options.out_dir / ("checkpoint_step" + std::to_string(step + 1) + ".gfck"));
    }
  }
  adam.zero_grad();
  if (write) {
    save_checkpoint(model, options.out_dir / "model.gfck");
    write_text(options.out_dir / "loss.csv", loss_curve_csv(curve));
  }
  return curve;
}

Tensor forward_padded(const GabformerModel& model, const Tensor& image) {
  if (image.rank() != 4) throw std::invalid_argument("forward_padded: expected B x 3 x H x W");
  const std::size_t h = image.dim(2), w = image.dim(3);
  const std::size_t ph = (h + 7) / 8 * 8, pw = (w + 7) / 8 * 8;
  if (ph == h && pw == w) return model.forward(image);
  const std::size_t bc = image.dim(0) * image.dim(1);
  std::vector<double> padded(bc * ph * pw);
  for (std::size_t c = 0; c < bc; ++c)
    for (std::size_t y = 0; y < ph; ++y)
      for (std::size_t x = 0; x < pw; ++x) {
        padded[(c * ph + y) * pw + x] =
            image[(c * h + reflect_index(static_cast<long long>(y), h)) * w + reflect_index(static_cast<long long>(x), w)];
      }
  const Tensor out = model.forward(Tensor({image.dim(0), image.dim(1), ph, pw}, std::move(padded)));
  return crop(out, 0, 0, h, w);
}

EvalResult evaluate_with(const std::function<Tensor(const Tensor&)>& restore, const std::vector<ImagePair>& dataset,
                         ColorSpace cs) {
  if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
  EvalResult result;
  result.mean.color_space = cs;
  for (const auto& pair : dataset) {
    pair.validate();
    const Tensor restored = restore(pair.rainy);
    std::vector<double> clamped(restored.numel());
    for (std::size_t i = 0; i < clamped.size(); ++i) clamped[i] = std::clamp(restored[i], 0.0, 1.0);
    const MetricReport r = evaluate_images(Tensor(restored.shape(), std::move(clamped)), pair.clean, cs);
    result.per_image.push_back({pair.id, r});
    result.mean.psnr_db += r.psnr_db;
    result.mean.ssim += r.ssim;
  }
  const double n = static_cast<double>(dataset.size());
  result.mean.psnr_db /= n;
  result.mean.ssim /= n;
  return result;
}

EvalResult evaluate(const GabformerModel& model, const std::vector<ImagePair>& dataset, ColorSpace cs) {
  return evaluate_with([&model](const Tensor& x) { return forward_padded(model, x); }, dataset, cs);
}

}  // namespace gabformer
