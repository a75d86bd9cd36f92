#include "gabformer/data.hpp"

#include <png.h>

#include <algorithm>
#include <set>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "gabformer/gabor.hpp"
#include "gabformer/serialize.hpp"

namespace gabformer {

namespace {

bool is_raw(const std::filesystem::path& path) { return path.extension() == ".gft"; }

void require_image(const Tensor& t, const char* what) {
  if (t.rank() != 4 || t.dim(0) != 1 || (t.dim(1) != 3 && t.dim(1) != 1)) {
    throw std::invalid_argument(std::string(what) + ": expected 1 x 3 x H x W image, got " +
                                shape_to_string(t.shape()));
  }
}

}  // namespace

void ImagePair::validate() const {
  if (rainy.shape() != clean.shape()) {
    throw std::invalid_argument("pair '" + id + "': rainy " + shape_to_string(rainy.shape()) + " vs clean " +
                                shape_to_string(clean.shape()));
  }
}

Tensor load_image(const std::filesystem::path& path) {
  if (is_raw(path)) {
    Tensor t = load_tensor(path);
    if (t.rank() == 3) t = Tensor({1, t.dim(0), t.dim(1), t.dim(2)}, std::vector<double>(t.data().begin(), t.data().end()));
    require_image(t, "load_image");
    return t;
  }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw std::runtime_error("cannot read image " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    throw std::runtime_error("cannot decode image " + path.string() + ": " + image.message);
  }
  const std::size_t h = image.height, w = image.width;
  std::vector<double> data(3 * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) data[(c * h + y) * w + x] = buffer[(y * w + x) * 3 + c] / 255.0;
  return Tensor({1, 3, h, w}, std::move(data));
}

void save_image(const Tensor& image, const std::filesystem::path& path) {
  require_image(image, "save_image");
  if (is_raw(path)) {
    save_tensor(path, image);
    return;
  }
  const std::size_t c = image.dim(1), h = image.dim(2), w = image.dim(3);
  std::vector<png_byte> buffer(c * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = std::clamp(image[(ch * h + y) * w + x], 0.0, 1.0);
        buffer[(y * w + x) * c + ch] = static_cast<png_byte>(std::lround(v * 255.0));
      }
  png_image out{};
  out.version = PNG_IMAGE_VERSION;
  out.width = static_cast<png_uint_32>(w);
  out.height = static_cast<png_uint_32>(h);
  out.format = c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&out, path.string().c_str(), 0, buffer.data(), 0, nullptr)) {
    throw std::runtime_error("cannot write image " + path.string() + ": " + out.message);
  }
}

Tensor normalize_for_display(const Tensor& image) {
  const auto [lo, hi] = std::minmax_element(image.data().begin(), image.data().end());
  std::vector<double> out(image.numel());
  const double range = *hi - *lo;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = range > 0.0 ? (image[i] - *lo) / range : 0.5;
  return Tensor(image.shape(), std::move(out));
}

Tensor synthetic_scene(std::size_t height, std::size_t width, std::uint64_t seed) {
  Rng rng(seed);
  const double h = static_cast<double>(height), w = static_cast<double>(width);
  std::vector<double> data(3 * height * width);
  double base[3], slope_x[3], slope_y[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(0.15, 0.45);
    slope_x[c] = rng.uniform(-0.2, 0.2);
    slope_y[c] = rng.uniform(-0.2, 0.2);
  }
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) {
        data[(c * height + y) * width + x] = base[c] + slope_x[c] * (x / w) + slope_y[c] * (y / h);
      }
  // Discs with flat colors.
  for (int d = 0; d < 5; ++d) {
    const double cx = rng.uniform(0, w), cy = rng.uniform(0, h), r = rng.uniform(0.08, 0.25) * std::min(h, w);
    double color[3];
    for (double& v : color) v = rng.uniform(0.1, 0.7);
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) > r * r) continue;
        for (int c = 0; c < 3; ++c) data[(c * height + y) * width + x] = color[c];
      }
  }
  // Oriented stripe texture in one band.
  const double freq = rng.uniform(0.15, 0.35), angle = rng.uniform(0, std::numbers::pi);
  const std::size_t band_top = static_cast<std::size_t>(h * 0.6);
  for (std::size_t y = band_top; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const double t = std::cos(2 * std::numbers::pi * freq * (x * std::cos(angle) + y * std::sin(angle)));
      for (int c = 0; c < 3; ++c) data[(c * height + y) * width + x] += 0.12 * t;
    }
  for (auto& v : data) v = std::clamp(v, 0.0, 1.0);
  return Tensor({1, 3, height, width}, std::move(data));
}

void RainParams::validate() const {
  if (!(density > 0.0 && density <= 1.0)) throw std::invalid_argument("rain: density must be in (0, 1]");
  if (!(intensity >= 0.0 && intensity <= 1.0)) throw std::invalid_argument("rain: intensity must be in [0, 1]");
  if (!(streak_length >= 1.0)) throw std::invalid_argument("rain: streak length must be at least 1 pixel");
}

Tensor streak_layer(std::size_t height, std::size_t width, const RainParams& p) {
  p.validate();
  Rng rng(p.seed);
  // Thresholded noise: pixels above 1 - density seed a streak whose
  // amplitude ramps from 0 to 1 over the kept range.
  std::vector<double> seeds(height * width, 0.0);
  for (auto& s : seeds) {
    const double u = rng.uniform();
    if (u >= 1.0 - p.density) s = (u - (1.0 - p.density)) / p.density;
  }
  auto sample = [&](double y, double x) {
    const double fy = std::floor(y), fx = std::floor(x);
    const double ty = y - fy, tx = x - fx;
    double acc = 0.0;
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const long long yy = static_cast<long long>(fy) + dy, xx = static_cast<long long>(fx) + dx;
        if (yy < 0 || xx < 0 || yy >= static_cast<long long>(height) || xx >= static_cast<long long>(width)) continue;
        const double wgt = (dy ? ty : 1.0 - ty) * (dx ? tx : 1.0 - tx);
        acc += wgt * seeds[static_cast<std::size_t>(yy) * width + static_cast<std::size_t>(xx)];
      }
    return acc;
  };
  // Motion blur with a normalized line kernel, then a fixed levels stretch.
  constexpr double kStretch = 3.0;
  const double a = degrees_to_radians(p.streak_angle_deg);
  const double dir_y = std::cos(a), dir_x = std::sin(a);
  const auto taps = static_cast<std::size_t>(std::lround(p.streak_length));
  const double center = (static_cast<double>(taps) - 1.0) / 2.0;
  std::vector<double> layer(height * width);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      double acc = 0.0;
      for (std::size_t t = 0; t < taps; ++t) {
        const double off = static_cast<double>(t) - center;
        acc += sample(y - off * dir_y, x - off * dir_x);
      }
      acc /= static_cast<double>(taps);
      layer[y * width + x] = p.intensity * std::min(1.0, kStretch * acc);
    }
  return Tensor({1, 1, height, width}, std::move(layer));
}

ImagePair synth_rain(const Tensor& clean, const RainParams& p, const std::string& id) {
  require_image(clean, "synth_rain");
  const std::size_t c = clean.dim(1), h = clean.dim(2), w = clean.dim(3);
  const Tensor streaks = streak_layer(h, w, p);
  std::vector<double> rainy(clean.numel());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h * w; ++i) {
      rainy[ch * h * w + i] = std::clamp(clean[ch * h * w + i] + streaks[i], 0.0, 1.0);
    }
  return ImagePair{Tensor(clean.shape(), std::move(rainy)), clean.detach(), id};
}

Tensor crop(const Tensor& image, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
  if (image.rank() != 4 || top + height > image.dim(2) || left + width > image.dim(3)) {
    throw std::invalid_argument("crop: window out of bounds for " + shape_to_string(image.shape()));
  }
  const std::size_t bc = image.dim(0) * image.dim(1), h = image.dim(2), w = image.dim(3);
  std::vector<double> out(bc * height * width);
  for (std::size_t c = 0; c < bc; ++c)
    for (std::size_t y = 0; y < height; ++y)
      std::copy_n(image.data().begin() + (c * h + top + y) * w + left, width,
                  out.begin() + (c * height + y) * width);
  return Tensor({image.dim(0), image.dim(1), height, width}, std::move(out));
}

PatchSampler::PatchSampler(ImagePair pair, std::size_t size, std::uint64_t seed)
    : pair_(std::move(pair)), size_(size), rng_(seed) {
  pair_.validate();
  const std::size_t h = pair_.clean.dim(2), w = pair_.clean.dim(3);
  if (size_ == 0 || size_ % 8 != 0) throw std::invalid_argument("patch size must be a positive multiple of 8");
  if (size_ > std::min(h, w)) {
    throw std::invalid_argument("patch size " + std::to_string(size_) + " exceeds image " + std::to_string(h) + "x" +
                                std::to_string(w));
  }
}

ImagePair PatchSampler::next() {
  const std::size_t top = rng_.below(pair_.clean.dim(2) - size_ + 1);
  const std::size_t left = rng_.below(pair_.clean.dim(3) - size_ + 1);
  return ImagePair{crop(pair_.rainy, top, left, size_, size_), crop(pair_.clean, top, left, size_, size_),
                   pair_.id + "@" + std::to_string(top) + "," + std::to_string(left)};
}

namespace {

// The lossless tensor format wins when both encodings of an id exist.
std::filesystem::path pair_file(const std::filesystem::path& dir, const std::string& id) {
  const auto raw = dir / (id + ".gft");
  return std::filesystem::exists(raw) ? raw : dir / (id + ".png");
}

}  // namespace

ImagePair load_pair(const std::filesystem::path& root, const std::string& id) {
  ImagePair pair{load_image(pair_file(root / "rainy", id)), load_image(pair_file(root / "clean", id)), id};
  pair.validate();
  return pair;
}

std::vector<ImagePair> load_paired_dataset(const std::filesystem::path& root) {
  const auto rainy_dir = root / "rainy", clean_dir = root / "clean";
  if (!std::filesystem::is_directory(rainy_dir) || !std::filesystem::is_directory(clean_dir)) {
    throw std::runtime_error("dataset " + root.string() + " must contain rainy/ and clean/ directories");
  }
  std::set<std::string> ids;
  for (const auto& entry : std::filesystem::directory_iterator(rainy_dir)) {
    const auto ext = entry.path().extension();
    if (ext != ".png" && ext != ".gft") continue;
    const std::string stem = entry.path().stem().string();
    if (!std::filesystem::exists(clean_dir / (stem + ".png")) && !std::filesystem::exists(clean_dir / (stem + ".gft"))) {
      throw std::runtime_error("dataset: no clean image for rainy/" + entry.path().filename().string());
    }
    ids.insert(stem);
  }
  std::vector<ImagePair> pairs;
  for (const auto& id : ids) pairs.push_back(load_pair(root, id));
  return pairs;
}

}  // namespace gabformer
