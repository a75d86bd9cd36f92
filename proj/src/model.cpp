#include "gabformer/model.hpp"

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "gabformer/ops.hpp"
#include "gabformer/serialize.hpp"

namespace gabformer {

GaborBank GaborSettings::make_bank() const {
  std::vector<double> thetas;
  thetas.reserve(orientations_deg.size());
  for (double deg : orientations_deg) thetas.push_back(degrees_to_radians(deg));
  GaborBank bank(wavelengths, std::move(thetas), psi, sigma, gamma, ksize);
  if (!enabled.empty()) {
    if (enabled.size() != bank.size()) {
      throw std::invalid_argument("gabor enabled mask has " + std::to_string(enabled.size()) + " entries, bank has " +
                                  std::to_string(bank.size()));
    }
    for (std::size_t i = 0; i < bank.rows(); ++i)
      for (std::size_t j = 0; j < bank.cols(); ++j) bank.set_enabled(i, j, enabled[i * bank.cols() + j]);
  }
  return bank;
}

GabformerConfig GabformerConfig::toy() {
  GabformerConfig c;
  c.zero_init_output = true;
  return c;
}

GabformerConfig GabformerConfig::full() {
  GabformerConfig c;
  c.preset = "full";
  c.base_channels = 48;
  c.block_counts = {4, 6, 6, 8};
  c.head_counts = {1, 2, 4, 8};
  c.epsilon = 4.0;
  c.zero_init_output = false;
  return c;
}

GabformerConfig GabformerConfig::from_preset(const std::string& name) {
  if (name == "toy") return toy();
  if (name == "full") return full();
  throw std::invalid_argument("unknown preset '" + name + "' (known: toy, full)");
}

std::array<std::size_t, kLevels> GabformerConfig::level_channels() const {
  return {base_channels, 2 * base_channels, 4 * base_channels, 8 * base_channels};
}

void GabformerConfig::validate() const {
  if (base_channels == 0) throw std::invalid_argument("config: base_channels must be positive");
  const auto widths = level_channels();
  for (std::size_t k = 0; k < kLevels; ++k) {
    if (block_counts[k] == 0) {
      throw std::invalid_argument("config: level " + std::to_string(k + 1) + " needs at least one block");
    }
    if (head_counts[k] == 0 || widths[k] % head_counts[k] != 0) {
      throw std::invalid_argument("config: level " + std::to_string(k + 1) + " has " + std::to_string(widths[k]) +
                                  " channels, not divisible by " + std::to_string(head_counts[k]) + " heads");
    }
    ffn_hidden(widths[k], epsilon);
  }
  gabor.make_bank();
}

namespace {

template <std::size_t N>
std::string join_sizes(const std::array<std::size_t, N>& v) {
  std::string out;
  for (std::size_t i = 0; i < N; ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

template <std::size_t N>
std::array<std::size_t, N> level_array(const KeyValues& kv, const std::string& key) {
  const auto values = kv.get_uints(key);
  if (values.size() != N) {
    throw std::invalid_argument("key '" + key + "': expected " + std::to_string(N) + " values");
  }
  std::array<std::size_t, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = values[i];
  return out;
}

}  // namespace

KeyValues GabformerConfig::to_keyvalues() const {
  KeyValues kv;
  kv.set("preset", preset);
  kv.set("base_channels", std::to_string(base_channels));
  kv.set("block_counts", join_sizes(block_counts));
  kv.set("head_counts", join_sizes(head_counts));
  kv.set("epsilon", format_double(epsilon));
  kv.set("gabor.ksize", std::to_string(gabor.ksize));
  kv.set("gabor.wavelengths", join_doubles(gabor.wavelengths));
  kv.set("gabor.orientations_deg", join_doubles(gabor.orientations_deg));
  kv.set("gabor.sigma", format_double(gabor.sigma));
  kv.set("gabor.psi", format_double(gabor.psi));
  kv.set("gabor.gamma", format_double(gabor.gamma));
  std::string mask;
  for (bool e : gabor.enabled) mask += e ? '1' : '0';
  kv.set("gabor.enabled", mask.empty() ? "all" : mask);
  kv.set("variant.q_gabor", variant.q_gabor ? "true" : "false");
  kv.set("variant.kv_gabor", variant.kv_gabor ? "true" : "false");
  kv.set("variant.attention", variant.attention == AttentionFn::softmax ? "softmax" : "relu");
  kv.set("variant.ffn", variant.ffn == FfnKind::gffn ? "gffn" : "ffn");
  kv.set("variant.normalize_qk", variant.normalize_qk ? "true" : "false");
  kv.set("zero_init_output", zero_init_output ? "true" : "false");
  return kv;
}

GabformerConfig GabformerConfig::from_keyvalues(const KeyValues& kv) {
  GabformerConfig c = from_preset(kv.contains("preset") ? kv.get_string("preset") : "toy");
  if (kv.contains("base_channels")) c.base_channels = kv.get_uint("base_channels");
  if (kv.contains("block_counts")) c.block_counts = level_array<kLevels>(kv, "block_counts");
  if (kv.contains("head_counts")) c.head_counts = level_array<kLevels>(kv, "head_counts");
  if (kv.contains("epsilon")) c.epsilon = kv.get_double("epsilon");
  if (kv.contains("gabor.ksize")) c.gabor.ksize = kv.get_uint("gabor.ksize");
  if (kv.contains("gabor.wavelengths")) c.gabor.wavelengths = kv.get_doubles("gabor.wavelengths");
  if (kv.contains("gabor.orientations_deg")) c.gabor.orientations_deg = kv.get_doubles("gabor.orientations_deg");
  if (kv.contains("gabor.sigma")) c.gabor.sigma = kv.get_double("gabor.sigma");
  if (kv.contains("gabor.psi")) c.gabor.psi = kv.get_double("gabor.psi");
  if (kv.contains("gabor.gamma")) c.gabor.gamma = kv.get_double("gabor.gamma");
  if (kv.contains("gabor.enabled")) {
    const std::string mask = kv.get_string("gabor.enabled");
    c.gabor.enabled.clear();
    if (mask != "all") {
      for (char ch : mask) {
        if (ch != '0' && ch != '1') throw std::invalid_argument("key 'gabor.enabled': expected 0/1 mask or 'all'");
        c.gabor.enabled.push_back(ch == '1');
      }
    }
  }
  if (kv.contains("variant")) c.variant = AttentionVariant::from_name(kv.get_string("variant"));
  if (kv.contains("variant.q_gabor")) c.variant.q_gabor = kv.get_bool("variant.q_gabor");
  if (kv.contains("variant.kv_gabor")) c.variant.kv_gabor = kv.get_bool("variant.kv_gabor");
  if (kv.contains("variant.attention")) {
    const auto a = kv.get_string("variant.attention");
    if (a != "softmax" && a != "relu") throw std::invalid_argument("key 'variant.attention': softmax or relu");
    c.variant.attention = a == "softmax" ? AttentionFn::softmax : AttentionFn::relu;
  }
  if (kv.contains("variant.normalize_qk")) c.variant.normalize_qk = kv.get_bool("variant.normalize_qk");
  if (kv.contains("variant.ffn")) {
    const auto f = kv.get_string("variant.ffn");
    if (f != "gffn" && f != "ffn") throw std::invalid_argument("key 'variant.ffn': gffn or ffn");
    c.variant.ffn = f == "gffn" ? FfnKind::gffn : FfnKind::plain;
  }
  if (kv.contains("zero_init_output")) c.zero_init_output = kv.get_bool("zero_init_output");
  c.validate();
  return c;
}

GabformerModel::GabformerModel(GabformerConfig config, std::uint64_t seed, GaborBank bank)
    : config_(std::move(config)), seed_(seed), bank_(std::move(bank)) {}

GabformerModel GabformerModel::build(const GabformerConfig& config, std::uint64_t seed) {
  config.validate();
  GabformerModel m(config, seed, config.gabor.make_bank());
  Rng rng(seed);
  const auto widths = config.level_channels();

  m.embed_ = Conv2d::make(3, widths[0], 3, 1, rng);
  for (std::size_t k = 0; k < kLevels; ++k) {
    for (std::size_t n = 0; n < config.block_counts[k]; ++n) {
      m.encoders_[k].push_back(BlockParams::make(widths[k], config.head_counts[k], config.epsilon, config.variant, rng));
    }
    if (k + 1 < kLevels) m.downs_[k] = Conv2d::pointwise(4 * widths[k], widths[k + 1], rng);
  }
  for (std::size_t k = kLevels - 1; k-- > 0;) {
    m.ups_[k] = Conv2d::pointwise(widths[k + 1], 2 * widths[k + 1], rng);
    m.fuses_[k] = Conv2d::pointwise(2 * widths[k], widths[k], rng);
    for (std::size_t n = 0; n < config.block_counts[k]; ++n) {
      m.decoders_[k].push_back(BlockParams::make(widths[k], config.head_counts[k], config.epsilon, config.variant, rng));
    }
  }
  m.output_ = Conv2d::make(widths[0], 3, 3, 1, rng);
  if (config.zero_init_output) {
    for (auto& v : m.output_.weight.mutable_data()) v = 0.0;
  }
  return m;
}

Tensor GabformerModel::forward(const Tensor& image, const ForwardOptions& options) const {
  if (image.rank() != 4 || image.dim(1) != 3) {
    throw std::invalid_argument("forward: expected B x 3 x H x W image, got " + shape_to_string(image.shape()));
  }
  const std::size_t h = image.dim(2), w = image.dim(3);
  if (h % 8 != 0 || w % 8 != 0) {
    throw std::invalid_argument("forward: height and width must be multiples of 8, got " + std::to_string(h) + "x" +
                                std::to_string(w) + "; reflect-pad by " + std::to_string((8 - h % 8) % 8) +
                                " rows and " + std::to_string((8 - w % 8) % 8) + " columns");
  }
  auto run = [&](const std::vector<BlockParams>& blocks, Tensor x) {
    for (const auto& b : blocks) x = block_forward(x, b, bank_, options.attention_maps);
    return x;
  };

  std::array<Tensor, kLevels> skips;
  Tensor x = embed_(image);
  for (std::size_t k = 0; k < kLevels; ++k) {
    if (k > 0) x = downs_[k - 1](pixel_unshuffle(x, 2));
    x = run(encoders_[k], x);
    skips[k] = x;
    if (options.encoder_shapes) options.encoder_shapes->push_back(x.shape());
  }
  for (std::size_t k = kLevels - 1; k-- > 0;) {
    const Tensor up = pixel_shuffle(ups_[k](x), 2);
    const Tensor skip = options.drop_skip[k] ? Tensor::zeros(skips[k].shape()) : skips[k];
    x = fuses_[k](concat({up, skip}, 1));
    x = run(decoders_[k], x);
  }
  return add(output_(x), image);
}

ParamList GabformerModel::parameters() const {
  ParamList out;
  embed_.collect("embed", out);
  for (std::size_t k = 0; k < kLevels; ++k) {
    const std::string level = "encoder" + std::to_string(k + 1);
    for (std::size_t n = 0; n < encoders_[k].size(); ++n) {
      encoders_[k][n].collect(level + ".block" + std::to_string(n), out);
    }
    if (k + 1 < kLevels) downs_[k].collect("down" + std::to_string(k + 1), out);
  }
  for (std::size_t k = kLevels - 1; k-- > 0;) {
    ups_[k].collect("up" + std::to_string(k + 2), out);
    fuses_[k].collect("fuse" + std::to_string(k + 1), out);
    const std::string level = "decoder" + std::to_string(k + 1);
    for (std::size_t n = 0; n < decoders_[k].size(); ++n) {
      decoders_[k][n].collect(level + ".block" + std::to_string(n), out);
    }
  }
  output_.collect("output", out);
  return out;
}

std::size_t GabformerModel::param_count() const { return count_params(parameters()); }

std::vector<std::pair<std::string, std::size_t>> GabformerModel::param_breakdown() const {
  std::vector<std::pair<std::string, std::size_t>> groups;
  for (const auto& p : parameters()) {
    const std::string head = p.name.substr(0, p.name.find('.'));
    if (groups.empty() || groups.back().first != head) groups.emplace_back(head, 0);
    groups.back().second += p.tensor.numel();
  }
  return groups;
}

namespace {
constexpr std::uint32_t kCheckpointVersion = 1;
}

void save_checkpoint(const GabformerModel& model, const std::filesystem::path& path) {
  KeyValues kv = model.config().to_keyvalues();
  kv.set("seed", std::to_string(model.seed()));
  const std::string text = kv.to_text();
  const ParamList params = model.parameters();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write("GFCK", 4);
  io::write_u32(os, kCheckpointVersion);
  io::write_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  io::write_u64(os, params.size());
  for (const auto& p : params) {
    io::write_u64(os, p.name.size());
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_tensor(os, p.tensor);
  }
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

GabformerModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  io::expect_magic(is, "GFCK");
  const auto version = io::read_u32(is);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  auto read_string = [&is](std::uint64_t limit) {
    const auto n = io::read_u64(is);
    if (n > limit) throw FormatError("checkpoint string length " + std::to_string(n) + " exceeds limit");
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (is.gcount() != static_cast<std::streamsize>(n)) throw FormatError("unexpected end of stream");
    return s;
  };
  const KeyValues kv = KeyValues::parse(read_string(1 << 20));
  const GabformerConfig config = GabformerConfig::from_keyvalues(kv);
  const std::uint64_t seed = kv.get_uint("seed");

  std::map<std::string, Tensor> records;
  const auto count = io::read_u64(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = read_string(4096);
    records.emplace(std::move(name), read_tensor(is));
  }

  GabformerModel model = GabformerModel::build(config, seed);
  for (const auto& p : model.parameters()) {
    auto it = records.find(p.name);
    if (it == records.end()) throw FormatError("checkpoint is missing parameter '" + p.name + "'");
    if (it->second.shape() != p.tensor.shape()) {
      throw FormatError("checkpoint parameter '" + p.name + "' has shape " + shape_to_string(it->second.shape()) +
                        ", model expects " + shape_to_string(p.tensor.shape()));
    }
    Tensor target = p.tensor;
    std::copy(it->second.data().begin(), it->second.data().end(), target.mutable_data().begin());
  }
  return model;
}

}  // namespace gabformer
