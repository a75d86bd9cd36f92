#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "gabformer/ops.hpp"
#include "gabformer/train.hpp"
#include "oracles.hpp"

using namespace gabformer;
namespace fs = std::filesystem;

namespace {

ImagePair small_pair(std::uint64_t seed, std::size_t size = 16) {
  RainParams p;
  p.seed = seed;
  return synth_rain(synthetic_scene(size, size, seed), p, "p" + std::to_string(seed));
}

TrainConfig short_run(std::size_t steps) {
  TrainConfig c;
  c.total_steps = steps;
  c.patch = 16;
  c.seed = 3;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_SUITE("train") {
  TEST_CASE("cosine schedule endpoints and midpoint") {
    TrainConfig c;
    c.total_steps = 1000;
    CHECK(lr_at(0, c) == 3e-4);
    CHECK(lr_at(1000, c) == 1e-6);
    CHECK(lr_at(500, c) == doctest::Approx((3e-4 + 1e-6) / 2).epsilon(1e-12));
    CHECK(std::abs(lr_at(500, c) - 1.505e-4) < 1e-12);
    double last = INFINITY;
    for (std::size_t s = 0; s <= 1000; ++s) {
      CHECK(lr_at(s, c) <= last);
      last = lr_at(s, c);
    }
    CHECK_THROWS_AS(lr_at(1001, c), std::out_of_range);
  }

  TEST_CASE("config validation") {
    TrainConfig c;
    c.lr_min = 1e-3;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = TrainConfig{};
    c.patch = 20;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = TrainConfig{};
    c.loss = "l2";
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = TrainConfig{};
    c.total_steps = 77;
    c.batch = 2;
    const auto back = TrainConfig::from_keyvalues(KeyValues::parse(c.to_keyvalues().to_text()));
    CHECK(back.total_steps == 77);
    CHECK(back.batch == 2);
    CHECK(back.lr_init == c.lr_init);
  }

  TEST_CASE("l1 loss") {
    Tensor a = oracle::random_tensor({1, 3, 4, 4}, 1, 0, 1, true);
    CHECK(l1_loss(a, a).item() == 0.0);
    Tensor b = add(a.detach(), Tensor::full(a.shape(), 0.25));
    CHECK(l1_loss(a, b).item() == doctest::Approx(0.25).epsilon(1e-14));
    Tape tape;
    TapeScope scope(tape);
    tape.backward(l1_loss(a, b));
    for (double g : a.grad()) CHECK(g == doctest::Approx(-1.0 / 48).epsilon(1e-14));
  }

  TEST_CASE("adam with zero gradient leaves parameters unchanged") {
    Tensor w = oracle::random_tensor({5}, 2, -1, 1, true);
    const Tensor before = w.detach();
    Adam adam({{"w", w}});
    adam.step(1e-2);
    CHECK(bitwise_equal(w, before));
    w.grad_buffer()[0] = 0.0;
    adam.step(1e-2);
    CHECK(bitwise_equal(w, before));
    CHECK(adam.steps() == 2);
    CHECK(adam.first_moments()[0].size() == 5);
  }

  TEST_CASE("adam first step moves by lr against the gradient sign") {
    Tensor w({2}, {1.0, -1.0}, true);
    Adam adam({{"w", w}});
    auto g = w.grad_buffer();
    g[0] = 3.0;
    g[1] = -0.5;
    adam.step(0.1);
    CHECK(w[0] == doctest::Approx(0.9).epsilon(1e-7));
    CHECK(w[1] == doctest::Approx(-0.9).epsilon(1e-7));
  }

  TEST_CASE("one step changes a parameter") {
    auto m = GabformerModel::build(GabformerConfig::toy(), 1);
    const auto before = m.parameters();
    std::vector<Tensor> copies;
    for (const auto& p : before) copies.push_back(p.tensor.detach());
    train_loop(m, {small_pair(1)}, short_run(1));
    bool changed = false;
    const auto after = m.parameters();
    for (std::size_t i = 0; i < after.size(); ++i) changed = changed || !bitwise_equal(after[i].tensor, copies[i]);
    CHECK(changed);
  }

  TEST_CASE("equal seeds give identical loss curves and files") {
    const fs::path a = fs::temp_directory_path() / "gabformer_train_a", b = fs::temp_directory_path() / "gabformer_train_b";
    fs::remove_all(a);
    fs::remove_all(b);
    auto run = [&](const fs::path& out) {
      auto m = GabformerModel::build(GabformerConfig::toy(), 2);
      TrainConfig c = short_run(4);
      c.checkpoint_every = 2;
      c.batch = 2;
      return train_loop(m, {small_pair(1, 24), small_pair(2, 24)}, c, {.out_dir = out, .on_step = {}});
    };
    const auto ca = run(a), cb = run(b);
    REQUIRE(ca.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(std::bit_cast<std::uint64_t>(ca[i].loss) == std::bit_cast<std::uint64_t>(cb[i].loss));
      CHECK(ca[i].lr == lr_at(i, short_run(4)));
    }
    for (const char* f : {"loss.csv", "model.gfck", "checkpoint_step2.gfck", "train_config.txt"}) {
      REQUIRE(fs::exists(a / f));
      CHECK(slurp(a / f) == slurp(b / f));
    }
    const std::string csv = slurp(a / "loss.csv");
    REQUIRE(csv.rfind("step,lr,loss\n0,", 0) == 0);
    CHECK(std::stod(csv.substr(csv.find('\n') + 3)) == 3e-4);
    CHECK(slurp(a / "train_config.txt").find("train.total_steps=4") != std::string::npos);
    fs::remove_all(a);
    fs::remove_all(b);
  }

  TEST_CASE("non-finite loss aborts with a diagnostic") {
    auto m = GabformerModel::build(GabformerConfig::toy(), 1);
    m.parameters().front().tensor.mutable_data()[0] = NAN;
    CHECK_THROWS_WITH_AS(train_loop(m, {small_pair(1)}, short_run(2)), doctest::Contains("step 0"), TrainingError);
  }

  TEST_CASE("training needs data") {
    auto m = GabformerModel::build(GabformerConfig::toy(), 1);
    CHECK_THROWS_AS(train_loop(m, {}, short_run(1)), std::invalid_argument);
  }

  TEST_CASE("evaluation") {
    auto identity = [](const Tensor& x) { return x; };
    CHECK_THROWS_AS(evaluate_with(identity, {}), std::invalid_argument);
    const auto pair = small_pair(4, 24);
    const ImagePair same{pair.clean, pair.clean, "same"};
    CHECK(evaluate_with(identity, {same}).mean.psnr_db == kIdenticalPsnr);
    const auto r = evaluate_with(identity, {pair});
    CHECK(r.mean.psnr_db == evaluate_images(pair.rainy, pair.clean).psnr_db);
    CHECK(r.per_image.size() == 1);
    // Zero-initialized output: the model is the identity too.
    const auto m = GabformerModel::build(GabformerConfig::toy(), 1);
    CHECK(evaluate(m, {pair}).mean.psnr_db == r.mean.psnr_db);
  }

  TEST_CASE("padded forward restores the input size") {
    GabformerConfig c = GabformerConfig::toy();
    c.zero_init_output = false;
    const auto m = GabformerModel::build(c, 1);
    const Tensor x = oracle::random_tensor({1, 3, 13, 21}, 5, 0, 1);
    CHECK(forward_padded(m, x).shape() == x.shape());
    const auto id = GabformerModel::build(GabformerConfig::toy(), 1);
    CHECK(bitwise_equal(forward_padded(id, x), x));
  }
}
