#include <doctest.h>

#include "gabformer/blocks.hpp"
#include "gabformer/ops.hpp"
#include "oracles.hpp"

using namespace gabformer;

namespace {

std::vector<oracle::Probe> probes_of(const ParamList& params, const Tensor& input) {
  std::vector<oracle::Probe> out{{"input", input}};
  for (const auto& p : params) out.push_back({p.name, p.tensor});
  return out;
}

Tensor projected(const Tensor& y, std::uint64_t seed) { return sum(mul(y, oracle::random_tensor(y.shape(), seed))); }

void zero(Tensor t) {
  for (auto& v : t.mutable_data()) v = 0.0;
}

}  // namespace

TEST_SUITE("blocks") {
  TEST_CASE("variant names round trip") {
    CHECK(AttentionVariant::ablation_rows().size() == 6);
    for (const auto& v : AttentionVariant::ablation_rows()) CHECK(AttentionVariant::from_name(v.name()) == v);
    CHECK(AttentionVariant{}.name() == "q_gabor_softmax_gffn");
    CHECK(AttentionVariant::ablation_rows().back() == AttentionVariant{});
    CHECK_THROWS_AS(AttentionVariant::from_name("nope"), std::invalid_argument);
  }

  TEST_CASE("single channel attention is the identity map") {
    Rng rng(1);
    const AttentionVariant v;
    const MgsaParams p = MgsaParams::make(1, 1, v, rng);
    const GaborBank bank = default_bank();
    Tensor x = oracle::random_tensor({1, 1, 8, 8}, 2);
    std::vector<Tensor> maps;
    Tensor y = mgsa_forward(x, p, v, bank, &maps);
    REQUIRE(maps.size() == 1);
    CHECK(maps[0].shape() == Shape{1, 1, 1, 1});
    CHECK(maps[0][0] == 1.0);
    Tensor expected = add(p.project_out(p.value(p.norm(x), bank)), x);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(expected[i]).epsilon(1e-14));
  }

  TEST_CASE("attention maps are row-normalized and sized by channels only") {
    Rng rng(3);
    const AttentionVariant v;
    const MgsaParams p = MgsaParams::make(32, 4, v, rng);
    const GaborBank bank = default_bank();
    for (std::size_t hw : {8, 12}) {
      std::vector<Tensor> maps;
      mgsa_forward(oracle::random_tensor({2, 32, hw, hw}, 4 + hw), p, v, bank, &maps);
      REQUIRE(maps.size() == 1);
      CHECK(maps[0].shape() == Shape{2, 4, 8, 8});
      for (std::size_t row = 0; row < 2 * 4 * 8; ++row) {
        double s = 0.0;
        for (std::size_t j = 0; j < 8; ++j) s += maps[0][row * 8 + j];
        CHECK(std::abs(s - 1.0) < 1e-12);
      }
    }
  }

  TEST_CASE("relu attention is not renormalized") {
    Rng rng(5);
    AttentionVariant v;
    v.attention = AttentionFn::relu;
    const MgsaParams p = MgsaParams::make(8, 2, v, rng);
    std::vector<Tensor> maps;
    mgsa_forward(oracle::random_tensor({1, 8, 8, 8}, 6), p, v, default_bank(), &maps);
    bool any_off = false;
    for (std::size_t row = 0; row < 2 * 4; ++row) {
      double s = 0.0;
      for (std::size_t j = 0; j < 4; ++j) {
        CHECK(maps[0][row * 4 + j] >= 0.0);
        s += maps[0][row * 4 + j];
      }
      any_off = any_off || std::abs(s - 1.0) > 1e-6;
    }
    CHECK(any_off);
  }

  TEST_CASE("mismatched variant is rejected") {
    Rng rng(7);
    const MgsaParams p = MgsaParams::make(8, 2, AttentionVariant{}, rng);
    AttentionVariant kv;
    kv.kv_gabor = true;
    CHECK_THROWS(mgsa_forward(oracle::random_tensor({1, 8, 8, 8}, 1), p, kv, default_bank()));
    CHECK_THROWS(MgsaParams::make(6, 4, AttentionVariant{}, rng));
  }

  TEST_CASE("gffn zero input gives zero output") {
    Rng rng(8);
    const GffnParams p = GffnParams::make(4, ffn_hidden(4, 2.66), rng);
    Tensor y = gffn_forward(Tensor::zeros({1, 4, 6, 6}), p);
    for (double v : y.data()) CHECK(v == 0.0);
    const PlainFfnParams q = PlainFfnParams::make(4, ffn_hidden(4, 2.66), rng);
    const Tensor z = plain_ffn_forward(Tensor::zeros({1, 4, 6, 6}), q);
    for (double v : z.data()) CHECK(v == 0.0);
  }

  TEST_CASE("shapes are preserved") {
    for (const auto& v : AttentionVariant::ablation_rows()) {
      Rng rng(9);
      const BlockParams b = BlockParams::make(8, 2, 2.66, v, rng);
      for (Shape s : {Shape{1, 8, 8, 8}, Shape{2, 8, 6, 10}}) CHECK(block_forward(oracle::random_tensor(s, 1), b, default_bank()).shape() == s);
    }
  }

  TEST_CASE("plain ffn has fewer parameters than gffn") {
    Rng rng(10);
    ParamList g, f;
    GffnParams::make(16, ffn_hidden(16, 2.66), rng).collect("g", g);
    PlainFfnParams::make(16, ffn_hidden(16, 2.66), rng).collect("f", f);
    CHECK(count_params(f) < count_params(g));
    CHECK(ffn_hidden(48, 2.66) == 128);
  }

  TEST_CASE("zeroed output projections make the block a pure residual") {
    Rng rng(11);
    BlockParams b = BlockParams::make(8, 2, 2.66, AttentionVariant{}, rng);
    zero(b.mgsa.project_out.weight);
    zero(*b.mgsa.project_out.bias);
    auto& g = std::get<GffnParams>(b.ffn);
    zero(g.project_out.weight);
    zero(*g.project_out.bias);
    Tensor x = oracle::random_tensor({1, 8, 8, 8}, 12);
    CHECK(bitwise_equal(block_forward(x, b, default_bank()), x));
  }

  TEST_CASE("mgsa gradient") {
    Rng rng(13);
    const AttentionVariant v;
    const MgsaParams p = MgsaParams::make(4, 2, v, rng);
    ParamList params;
    p.collect("mgsa", params);
    Tensor x = oracle::random_tensor({1, 4, 6, 6}, 14, -1, 1, true);
    const GaborBank bank = default_bank();
    auto r = oracle::grad_check(probes_of(params, x), [&] { return projected(mgsa_forward(x, p, v, bank), 15); },
                                40, 1e-5, 1);
    CHECK_MESSAGE(r.max_rel_error < 1e-5, r.worst);
  }

  TEST_CASE("gffn gradient") {
    Rng rng(16);
    const GffnParams p = GffnParams::make(4, ffn_hidden(4, 2.66), rng);
    ParamList params;
    p.collect("gffn", params);
    Tensor x = oracle::random_tensor({1, 4, 6, 6}, 17, -1, 1, true);
    auto r = oracle::grad_check(probes_of(params, x), [&] { return projected(gffn_forward(x, p), 18); }, 40, 1e-5, 2);
    CHECK_MESSAGE(r.max_rel_error < 1e-5, r.worst);
  }

  TEST_CASE("plain ffn gradient") {
    Rng rng(19);
    const PlainFfnParams p = PlainFfnParams::make(4, ffn_hidden(4, 2.66), rng);
    ParamList params;
    p.collect("ffn", params);
    Tensor x = oracle::random_tensor({1, 4, 6, 6}, 20, -1, 1, true);
    auto r = oracle::grad_check(probes_of(params, x), [&] { return projected(plain_ffn_forward(x, p), 21); }, 30,
                                1e-5, 3);
    CHECK_MESSAGE(r.max_rel_error < 1e-5, r.worst);
  }

  TEST_CASE("block gradient") {
    Rng rng(22);
    const BlockParams b = BlockParams::make(4, 2, 2.66, AttentionVariant{}, rng);
    ParamList params;
    b.collect("block", params);
    Tensor x = oracle::random_tensor({1, 4, 8, 8}, 23, -1, 1, true);
    const GaborBank bank = default_bank();
    auto r = oracle::grad_check(probes_of(params, x), [&] { return projected(block_forward(x, b, bank), 24); }, 40,
                                1e-4, 4);
    CHECK_MESSAGE(r.max_rel_error < 1e-4, r.worst);
  }

  TEST_CASE("every variant runs forward and backward") {
    for (const auto& v : AttentionVariant::ablation_rows()) {
      Rng rng(25);
      const BlockParams b = BlockParams::make(8, 2, 2.66, v, rng);
      Tensor x = oracle::random_tensor({1, 8, 16, 16}, 26, -1, 1, true);
      Tape tape;
      TapeScope scope(tape);
      tape.backward(projected(block_forward(x, b, default_bank()), 27));
      CHECK(x.has_grad());
    }
  }
}
