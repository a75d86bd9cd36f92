#include "gabformer/blocks.hpp"

#include <cmath>
#include <stdexcept>

namespace gabformer {

namespace {

struct NamedVariant {
  const char* name;
  AttentionVariant variant;
};

const std::vector<NamedVariant>& variant_table() {
  static const std::vector<NamedVariant> table = {
      {"qkv_gffn", {false, false, AttentionFn::softmax, FfnKind::gffn}},
      {"qkv_gabor_softmax_gffn", {true, true, AttentionFn::softmax, FfnKind::gffn}},
      {"qkv_gabor_relu_gffn", {true, true, AttentionFn::relu, FfnKind::gffn}},
      {"q_gabor_relu_gffn", {true, false, AttentionFn::relu, FfnKind::gffn}},
      {"q_gabor_softmax_ffn", {true, false, AttentionFn::softmax, FfnKind::plain}},
      {"q_gabor_softmax_gffn", {true, false, AttentionFn::softmax, FfnKind::gffn}},
  };
  return table;
}

}  // namespace

std::string AttentionVariant::name() const {
  for (const auto& entry : variant_table()) {
    const auto& e = entry.variant;
    if (e.q_gabor == q_gabor && e.kv_gabor == kv_gabor && e.attention == attention && e.ffn == ffn) return entry.name;
  }
  std::string n = q_gabor ? "q_gabor" : "q";
  n += kv_gabor ? "_kv_gabor" : "_kv";
  n += attention == AttentionFn::softmax ? "_softmax" : "_relu";
  n += ffn == FfnKind::gffn ? "_gffn" : "_ffn";
  return n;
}

AttentionVariant AttentionVariant::from_name(const std::string& name) {
  for (const auto& entry : variant_table()) {
    if (name == entry.name) return entry.variant;
  }
  std::string known;
  for (const auto& entry : variant_table()) known += std::string(known.empty() ? "" : ", ") + entry.name;
  throw std::invalid_argument("unknown attention variant '" + name + "' (known: " + known + ")");
}

const std::vector<AttentionVariant>& AttentionVariant::ablation_rows() {
  static const std::vector<AttentionVariant> rows = [] {
    std::vector<AttentionVariant> r;
    for (const auto& entry : variant_table()) r.push_back(entry.variant);
    return r;
  }();
  return rows;
}

ProjectionPath ProjectionPath::make(std::size_t channels, bool gabor, Rng& rng) {
  ProjectionPath path;
  path.gabor = gabor;
  path.pointwise = Conv2d::pointwise(channels, channels, rng);
  path.mix = gabor ? Conv2d::pointwise(channels, channels, rng) : Conv2d::depthwise(channels, 3, rng);
  return path;
}

Tensor ProjectionPath::operator()(const Tensor& x, const GaborBank& bank) const {
  Tensor y = pointwise(x);
  if (gabor) y = apply_bank(y, bank);
  return mix(y);
}

void ProjectionPath::collect(const std::string& prefix, ParamList& out) const {
  pointwise.collect(prefix + "_conv1", out);
  mix.collect(prefix + (gabor ? "_conv2" : "_dwconv"), out);
}

MgsaParams MgsaParams::make(std::size_t channels, std::size_t heads, const AttentionVariant& v, Rng& rng) {
  if (heads == 0 || channels % heads != 0) {
    throw std::invalid_argument("attention: " + std::to_string(heads) + " heads do not divide " +
                                std::to_string(channels) + " channels");
  }
  MgsaParams p;
  p.channels = channels;
  p.heads = heads;
  p.norm = LayerNormChannel::make(channels);
  p.query = ProjectionPath::make(channels, v.q_gabor, rng);
  p.key = ProjectionPath::make(channels, v.kv_gabor, rng);
  p.value = ProjectionPath::make(channels, v.kv_gabor, rng);
  p.temperature = Tensor::full({heads}, std::sqrt(static_cast<double>(channels / heads)), true);
  p.project_out = Conv2d::pointwise(channels, channels, rng);
  return p;
}

void MgsaParams::collect(const std::string& prefix, ParamList& out) const {
  norm.collect(prefix + ".norm", out);
  query.collect(prefix + ".q", out);
  key.collect(prefix + ".k", out);
  value.collect(prefix + ".v", out);
  out.push_back({prefix + ".temperature", temperature});
  project_out.collect(prefix + ".project_out", out);
}

GffnParams GffnParams::make(std::size_t channels, std::size_t hidden, Rng& rng) {
  GffnParams p;
  p.norm = LayerNormChannel::make(channels);
  p.project_in = Conv2d::pointwise(channels, 2 * hidden, rng);
  p.dw_value = Conv2d::depthwise(hidden, 3, rng);
  p.dw_gate = Conv2d::depthwise(hidden, 3, rng);
  p.project_out = Conv2d::pointwise(hidden, channels, rng);
  return p;
}

void GffnParams::collect(const std::string& prefix, ParamList& out) const {
  norm.collect(prefix + ".norm", out);
  project_in.collect(prefix + ".project_in", out);
  dw_value.collect(prefix + ".dw_value", out);
  dw_gate.collect(prefix + ".dw_gate", out);
  project_out.collect(prefix + ".project_out", out);
}

PlainFfnParams PlainFfnParams::make(std::size_t channels, std::size_t hidden, Rng& rng) {
  PlainFfnParams p;
  p.norm = LayerNormChannel::make(channels);
  p.expand = Conv2d::pointwise(channels, hidden, rng);
  p.project_out = Conv2d::pointwise(hidden, channels, rng);
  return p;
}

void PlainFfnParams::collect(const std::string& prefix, ParamList& out) const {
  norm.collect(prefix + ".norm", out);
  expand.collect(prefix + ".expand", out);
  project_out.collect(prefix + ".project_out", out);
}

std::size_t ffn_hidden(std::size_t channels, double epsilon) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("ffn expansion ratio must be positive");
  const auto hidden = static_cast<std::size_t>(std::llround(epsilon * static_cast<double>(channels)));
  if (hidden == 0) throw std::invalid_argument("ffn expansion ratio yields zero hidden channels");
  return hidden;
}

BlockParams BlockParams::make(std::size_t channels, std::size_t heads, double epsilon, const AttentionVariant& v,
                              Rng& rng) {
  BlockParams p;
  p.variant = v;
  p.mgsa = MgsaParams::make(channels, heads, v, rng);
  const std::size_t hidden = ffn_hidden(channels, epsilon);
  if (v.ffn == FfnKind::gffn) {
    p.ffn = GffnParams::make(channels, hidden, rng);
  } else {
    p.ffn = PlainFfnParams::make(channels, hidden, rng);
  }
  return p;
}

void BlockParams::collect(const std::string& prefix, ParamList& out) const {
  mgsa.collect(prefix + ".mgsa", out);
  if (const auto* g = std::get_if<GffnParams>(&ffn)) {
    g->collect(prefix + ".gffn", out);
  } else {
    std::get<PlainFfnParams>(ffn).collect(prefix + ".ffn", out);
  }
}

Tensor mgsa_forward(const Tensor& x, const MgsaParams& p, const AttentionVariant& v, const GaborBank& bank,
                    std::vector<Tensor>* attention_maps) {
  if (x.rank() != 4 || x.dim(1) != p.channels) {
    throw std::invalid_argument("mgsa: expected B x " + std::to_string(p.channels) + " x H x W, got " +
                                shape_to_string(x.shape()));
  }
  if (p.query.gabor != v.q_gabor || p.key.gabor != v.kv_gabor) {
    throw std::invalid_argument("mgsa: parameters were built for a different variant than " + v.name());
  }
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t heads = p.heads, per_head = c / heads, hw = h * w;

  const Tensor xn = p.norm(x);
  Tensor q = reshape(p.query(xn, bank), {b, heads, per_head, hw});
  Tensor k = reshape(p.key(xn, bank), {b, heads, per_head, hw});
  if (v.normalize_qk) {
    q = l2_normalize_last(q);
    k = l2_normalize_last(k);
  }
  const Tensor val = reshape(p.value(xn, bank), {b, heads, per_head, hw});

  Tensor logits = matmul(q, transpose(k, 2, 3));
  logits = channel_scale(logits, reciprocal(p.temperature));
  const Tensor map = v.attention == AttentionFn::softmax ? softmax(logits, 3) : relu(logits);
  if (attention_maps) attention_maps->push_back(map);

  const Tensor attended = reshape(matmul(map, val), {b, c, h, w});
  return add(p.project_out(attended), x);
}

Tensor gffn_forward(const Tensor& x, const GffnParams& p) {
  const std::size_t hidden = p.hidden();
  const Tensor expanded = p.project_in(p.norm(x));
  const Tensor value = p.dw_value(narrow(expanded, 1, 0, hidden));
  const Tensor gate = p.dw_gate(narrow(expanded, 1, hidden, hidden));
  return add(p.project_out(mul(value, gelu(gate))), x);
}

Tensor plain_ffn_forward(const Tensor& x, const PlainFfnParams& p) {
  return add(p.project_out(gelu(p.expand(p.norm(x)))), x);
}

Tensor block_forward(const Tensor& x, const BlockParams& p, const GaborBank& bank,
                     std::vector<Tensor>* attention_maps) {
  const Tensor attended = mgsa_forward(x, p.mgsa, p.variant, bank, attention_maps);
  if (const auto* g = std::get_if<GffnParams>(&p.ffn)) return gffn_forward(attended, *g);
  return plain_ffn_forward(attended, std::get<PlainFfnParams>(p.ffn));
}

}  // namespace gabformer
