#include <doctest.h>

#include <chrono>
#include <cmath>
#include <fstream>

#include "gabformer/model.hpp"
#include "gabformer/ops.hpp"
#include "gabformer/train.hpp"
#include "oracles.hpp"

using namespace gabformer;
namespace fs = std::filesystem;

namespace {

// Per-layer parameter arithmetic, written out independently of the model code.
std::size_t conv(std::size_t in, std::size_t out, std::size_t k, std::size_t groups = 1) {
  return out * (in / groups) * k * k + out;
}

std::size_t block_params(std::size_t c, std::size_t heads, double eps, const AttentionVariant& v) {
  const std::size_t hidden = static_cast<std::size_t>(std::llround(eps * static_cast<double>(c)));
  auto path = [&](bool gabor) { return conv(c, c, 1) + (gabor ? conv(c, c, 1) : conv(c, c, 3, c)); };
  std::size_t n = c + path(v.q_gabor) + 2 * path(v.kv_gabor) + heads + conv(c, c, 1);
  if (v.ffn == FfnKind::gffn) {
    n += c + conv(c, 2 * hidden, 1) + 2 * conv(hidden, hidden, 3, hidden) + conv(hidden, c, 1);
  } else {
    n += c + conv(c, hidden, 1) + conv(hidden, c, 1);
  }
  return n;
}

std::size_t model_params(const GabformerConfig& cfg) {
  const auto w = cfg.level_channels();
  std::size_t n = conv(3, w[0], 3) + conv(w[0], 3, 3);
  for (std::size_t k = 0; k < 4; ++k) {
    const std::size_t per_block = block_params(w[k], cfg.head_counts[k], cfg.epsilon, cfg.variant);
    n += cfg.block_counts[k] * per_block * (k < 3 ? 2 : 1);
    if (k < 3) {
      n += conv(4 * w[k], w[k + 1], 1);      // down
      n += conv(w[k + 1], 2 * w[k + 1], 1);  // up
      n += conv(2 * w[k], w[k], 1);          // fuse
    }
  }
  return n;
}

GabformerConfig toy_random_init() {
  GabformerConfig c = GabformerConfig::toy();
  c.zero_init_output = false;
  return c;
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("parameter counts match independent arithmetic") {
    CHECK(model_params(GabformerConfig::toy()) == 186949);
    CHECK(GabformerModel::build(GabformerConfig::toy(), 0).param_count() == 186949);
    const auto full = GabformerConfig::full();
    CHECK(GabformerModel::build(full, 0).param_count() == model_params(full));
    CHECK(model_params(full) == 31445523);
    CHECK(std::abs(static_cast<double>(model_params(full)) - 34.4e6) <= 0.15 * 34.4e6);
    for (const auto& v : AttentionVariant::ablation_rows()) {
      GabformerConfig c = GabformerConfig::toy();
      c.variant = v;
      CHECK(GabformerModel::build(c, 1).param_count() == model_params(c));
    }
  }

  TEST_CASE("breakdown sums to the total") {
    const auto m = GabformerModel::build(GabformerConfig::toy(), 0);
    std::size_t total = 0;
    for (const auto& [name, n] : m.param_breakdown()) total += n;
    CHECK(total == m.param_count());
    CHECK(m.param_breakdown().front().first == "embed");
    CHECK(m.param_breakdown().back().first == "output");
  }

  TEST_CASE("plain ffn variant is smaller and counts ignore the seed") {
    GabformerConfig c = GabformerConfig::toy();
    c.variant = AttentionVariant::from_name("q_gabor_softmax_ffn");
    CHECK(GabformerModel::build(c, 0).param_count() < GabformerModel::build(GabformerConfig::toy(), 0).param_count());
    CHECK(GabformerModel::build(c, 0).param_count() == GabformerModel::build(c, 99).param_count());
  }

  TEST_CASE("equal seeds give bitwise-identical parameters") {
    const auto a = GabformerModel::build(toy_random_init(), 5).parameters();
    const auto b = GabformerModel::build(toy_random_init(), 5).parameters();
    const auto c = GabformerModel::build(toy_random_init(), 6).parameters();
    REQUIRE(a.size() == b.size());
    bool all_same = true;
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].name == b[i].name);
      CHECK(bitwise_equal(a[i].tensor, b[i].tensor));
      all_same = all_same && bitwise_equal(a[i].tensor, c[i].tensor);
    }
    CHECK_FALSE(all_same);
  }

  TEST_CASE("toy forward on 64x64 is shape-preserving and quick") {
    const auto m = GabformerModel::build(toy_random_init(), 1);
    Tensor x = oracle::random_tensor({1, 3, 64, 64}, 2, 0, 1);
    const auto t0 = std::chrono::steady_clock::now();
    Tensor y = m.forward(x);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CHECK(y.shape() == x.shape());
    CHECK(secs < 30.0);
    CHECK(bitwise_equal(m.forward(x), y));
  }

  TEST_CASE("zero-initialized output conv is the identity map") {
    GabformerConfig c = GabformerConfig::toy();
    c.zero_init_output = true;
    const auto m = GabformerModel::build(c, 3);
    Tensor x = oracle::random_tensor({1, 3, 16, 16}, 4, 0, 1);
    CHECK(bitwise_equal(m.forward(x), x));
  }

  TEST_CASE("encoder feature extents") {
    const auto m = GabformerModel::build(toy_random_init(), 1);
    std::vector<Shape> shapes;
    ForwardOptions opt;
    opt.encoder_shapes = &shapes;
    m.forward(oracle::random_tensor({1, 3, 32, 48}, 5, 0, 1), opt);
    REQUIRE(shapes.size() == 4);
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(shapes[k] == Shape{1, std::size_t{8} << k, std::size_t{32} >> k, std::size_t{48} >> k});
    }
  }

  TEST_CASE("indivisible input reports the padding requirement") {
    const auto m = GabformerModel::build(GabformerConfig::toy(), 1);
    try {
      m.forward(oracle::random_tensor({1, 3, 12, 16}, 6, 0, 1));
      FAIL("expected an error");
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find("multiples of 8") != std::string::npos);
    }
  }

  TEST_CASE("every skip connection is wired") {
    const auto m = GabformerModel::build(toy_random_init(), 7);
    Tensor x = oracle::random_tensor({1, 3, 16, 16}, 8, 0, 1);
    const Tensor base = m.forward(x);
    for (std::size_t s = 0; s < 3; ++s) {
      ForwardOptions opt;
      opt.drop_skip[s] = true;
      const Tensor y = m.forward(x, opt);
      double diff = 0.0;
      for (std::size_t i = 0; i < y.numel(); ++i) diff = std::max(diff, std::abs(y[i] - base[i]));
      CHECK(diff > 0.0);
    }
  }

  TEST_CASE("attention maps are collected for every block") {
    const auto m = GabformerModel::build(GabformerConfig::toy(), 1);
    std::vector<Tensor> maps;
    ForwardOptions opt;
    opt.attention_maps = &maps;
    m.forward(oracle::random_tensor({1, 3, 16, 16}, 9, 0, 1), opt);
    // encoder 1+1+1+2, decoder 1+1+1
    CHECK(maps.size() == 8);
  }

  TEST_CASE("config key=value round trip") {
    GabformerConfig c = GabformerConfig::full();
    c.variant = AttentionVariant::from_name("qkv_gabor_relu_gffn");
    c.variant.normalize_qk = false;
    c.gabor.enabled = std::vector<bool>(16, false);
    c.gabor.enabled[5] = true;
    const auto back = GabformerConfig::from_keyvalues(KeyValues::parse(c.to_keyvalues().to_text()));
    CHECK(back.to_keyvalues().to_text() == c.to_keyvalues().to_text());
    CHECK(back.variant == c.variant);
    CHECK(back.block_counts == c.block_counts);
  }

  TEST_CASE("bad configs are rejected") {
    GabformerConfig c = GabformerConfig::toy();
    c.head_counts = {3, 2, 4, 8};
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    CHECK_THROWS_AS(GabformerConfig::from_preset("huge"), std::invalid_argument);
  }

  TEST_CASE("checkpoint round trip") {
    const fs::path dir = fs::temp_directory_path() / "gabformer_ckpt_test";
    fs::create_directories(dir);
    const auto m = GabformerModel::build(toy_random_init(), 11);
    save_checkpoint(m, dir / "m.gfck");
    CHECK(fs::file_size(dir / "m.gfck") < 10u * 1024 * 1024);
    const auto back = load_checkpoint(dir / "m.gfck");
    CHECK(back.seed() == 11);
    Tensor x = oracle::random_tensor({1, 3, 16, 16}, 12, 0, 1);
    CHECK(bitwise_equal(back.forward(x), m.forward(x)));
    const auto pa = m.parameters(), pb = back.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(bitwise_equal(pa[i].tensor, pb[i].tensor));

    SUBCASE("truncated file") {
      std::ifstream is(dir / "m.gfck", std::ios::binary);
      std::string bytes((std::istreambuf_iterator<char>(is)), {});
      std::ofstream(dir / "t.gfck", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
      CHECK_THROWS(load_checkpoint(dir / "t.gfck"));
    }
    SUBCASE("wrong magic and version") {
      std::ifstream is(dir / "m.gfck", std::ios::binary);
      std::string bytes((std::istreambuf_iterator<char>(is)), {});
      std::string bad = bytes;
      bad[0] = 'X';
      std::ofstream(dir / "b.gfck", std::ios::binary) << bad;
      CHECK_THROWS(load_checkpoint(dir / "b.gfck"));
      bad = bytes;
      bad[4] = 9;
      std::ofstream(dir / "v.gfck", std::ios::binary) << bad;
      CHECK_THROWS_WITH(load_checkpoint(dir / "v.gfck"), doctest::Contains("version"));
    }
    SUBCASE("missing parameter is named") {
      // A checkpoint whose config asks for more blocks than it stores.
      GabformerConfig bigger = toy_random_init();
      bigger.block_counts = {2, 1, 1, 2};
      std::ifstream is(dir / "m.gfck", std::ios::binary);
      std::string bytes((std::istreambuf_iterator<char>(is)), {});
      KeyValues kv = bigger.to_keyvalues();
      kv.set("seed", "11");
      const std::string old_text = [&] {
        KeyValues o = toy_random_init().to_keyvalues();
        o.set("seed", "11");
        return o.to_text();
      }();
      const std::string new_text = kv.to_text();
      const auto pos = bytes.find(old_text);
      REQUIRE(pos != std::string::npos);
      std::string patched = bytes.substr(0, pos - 8);
      std::uint64_t len = new_text.size();
      patched.append(reinterpret_cast<const char*>(&len), 8);
      patched += new_text;
      patched += bytes.substr(pos + old_text.size());
      std::ofstream(dir / "k.gfck", std::ios::binary) << patched;
      CHECK_THROWS_WITH(load_checkpoint(dir / "k.gfck"), doctest::Contains("encoder1.block1"));
    }
    fs::remove_all(dir);
  }

  TEST_CASE("toy model gradient") {
    const auto m = GabformerModel::build(toy_random_init(), 13);
    std::vector<oracle::Probe> probes;
    for (const auto& p : m.parameters()) probes.push_back({p.name, p.tensor});
    Tensor x = oracle::random_tensor({1, 3, 8, 8}, 14, 0, 1);
    Tensor target = oracle::random_tensor({1, 3, 8, 8}, 15, 0, 1);
    auto r = oracle::grad_check(probes, [&] { return l1_loss(m.forward(x), target); }, 24, 1e-4, 5);
    CHECK(r.checked >= 20);
    CHECK_MESSAGE(r.max_rel_error < 1e-4, r.worst);
  }
}
