#pragma once

#include <string>
#include <variant>
#include <vector>

#include "gabformer/gabor.hpp"
#include "gabformer/layers.hpp"

namespace gabformer {

enum class AttentionFn { softmax, relu };
enum class FfnKind { gffn, plain };

// Which projections go through the Gabor bank, how the channel attention
// map is normalized, and which feed-forward network follows it.
struct AttentionVariant {
  bool q_gabor = true;
  bool kv_gabor = false;
  AttentionFn attention = AttentionFn::softmax;
  FfnKind ffn = FfnKind::gffn;
  // Unit L2 norm for each query/key channel over spatial positions before
  // the product. Not part of the variant name.
  bool normalize_qk = true;

  bool operator==(const AttentionVariant&) const = default;

  std::string name() const;
  static AttentionVariant from_name(const std::string& name);
  // The six ablation configurations, default last:
  //   qkv_gffn, qkv_gabor_softmax_gffn, qkv_gabor_relu_gffn,
  //   q_gabor_relu_gffn, q_gabor_softmax_ffn, q_gabor_softmax_gffn
  static const std::vector<AttentionVariant>& ablation_rows();
};

// 1x1 conv, then either (Gabor bank -> 1x1 conv) or a 3x3 depthwise conv.
struct ProjectionPath {
  bool gabor = false;
  Conv2d pointwise;
  Conv2d mix;  // 1x1 after the bank, or 3x3 depthwise

  static ProjectionPath make(std::size_t channels, bool gabor, Rng& rng);
  Tensor operator()(const Tensor& x, const GaborBank& bank) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct MgsaParams {
  std::size_t channels = 0;
  std::size_t heads = 0;
  LayerNormChannel norm;
  ProjectionPath query, key, value;
  Tensor temperature;  // one per head, initialized to sqrt(channels / heads)
  Conv2d project_out;

  static MgsaParams make(std::size_t channels, std::size_t heads, const AttentionVariant& v, Rng& rng);
  void collect(const std::string& prefix, ParamList& out) const;
};

struct GffnParams {
  LayerNormChannel norm;
  Conv2d project_in;   // C -> 2 * hidden
  Conv2d dw_value;     // 3x3 depthwise on the first half
  Conv2d dw_gate;      // 3x3 depthwise on the second half, passed through GELU
  Conv2d project_out;  // hidden -> C

  static GffnParams make(std::size_t channels, std::size_t hidden, Rng& rng);
  std::size_t hidden() const { return dw_value.out_channels(); }
  void collect(const std::string& prefix, ParamList& out) const;
};

struct PlainFfnParams {
  LayerNormChannel norm;
  Conv2d expand;       // C -> hidden
  Conv2d project_out;  // hidden -> C

  static PlainFfnParams make(std::size_t channels, std::size_t hidden, Rng& rng);
  void collect(const std::string& prefix, ParamList& out) const;
};

// Expanded width round(epsilon * channels).
std::size_t ffn_hidden(std::size_t channels, double epsilon);

struct BlockParams {
  AttentionVariant variant;
  MgsaParams mgsa;
  std::variant<GffnParams, PlainFfnParams> ffn;

  static BlockParams make(std::size_t channels, std::size_t heads, double epsilon, const AttentionVariant& v,
                          Rng& rng);
  std::size_t channels() const { return mgsa.channels; }
  void collect(const std::string& prefix, ParamList& out) const;
};

// x + proj(Att(Q, K, V)) with Q, K, V projected from norm(x). Per head the
// map has extent (C/h) x (C/h), rows indexed by query channel; logits are
// Q K^T / temperature (Q, K optionally unit-normalized); softmax runs
// along each row and the output channel j is sum_i map[j][i] * V_i. When
// attention_maps is set, each call appends the B x h x (C/h) x (C/h) map.
Tensor mgsa_forward(const Tensor& x, const MgsaParams& p, const AttentionVariant& v, const GaborBank& bank,
                    std::vector<Tensor>* attention_maps = nullptr);

// x + proj(dw_value(X1) * GELU(dw_gate(X2))), [X1, X2] = project_in(norm(x)).
Tensor gffn_forward(const Tensor& x, const GffnParams& p);

// x + proj(GELU(expand(norm(x)))).
Tensor plain_ffn_forward(const Tensor& x, const PlainFfnParams& p);

// X~ = X + MGSA(l(X)); out = X~ + FFN(l(X~)).
Tensor block_forward(const Tensor& x, const BlockParams& p, const GaborBank& bank,
                     std::vector<Tensor>* attention_maps = nullptr);

}  // namespace gabformer
