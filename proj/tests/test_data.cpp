#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "gabformer/data.hpp"
#include "gabformer/metrics.hpp"
#include "oracles.hpp"

using namespace gabformer;
namespace fs = std::filesystem;

#ifndef GABFORMER_FIXTURES
#define GABFORMER_FIXTURES "tests/fixtures"
#endif

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("gabformer_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("png round trip within 8-bit quantization") {
    const auto dir = scratch("png");
    Tensor img = oracle::random_tensor({1, 3, 9, 13}, 1, 0, 1);
    save_image(img, dir / "x.png");
    Tensor back = load_image(dir / "x.png");
    REQUIRE(back.shape() == img.shape());
    double worst = 0.0;
    for (std::size_t i = 0; i < img.numel(); ++i) worst = std::max(worst, std::abs(back[i] - img[i]));
    CHECK(worst <= 1.0 / 255.0);
    save_image(img, dir / "x.gft");
    CHECK(bitwise_equal(load_image(dir / "x.gft"), img));
    fs::remove_all(dir);
  }

  TEST_CASE("black png loads as zeros") {
    const auto dir = scratch("black");
    save_image(Tensor::zeros({1, 3, 16, 16}), dir / "k.png");
    Tensor back = load_image(dir / "k.png");
    CHECK(back.shape() == Shape{1, 3, 16, 16});
    for (double v : back.data()) CHECK(v == 0.0);
    CHECK_THROWS(load_image(dir / "missing.png"));
    std::ofstream(dir / "junk.png") << "not a png";
    CHECK_THROWS(load_image(dir / "junk.png"));
    fs::remove_all(dir);
  }

  TEST_CASE("display normalization") {
    const Tensor flat = normalize_for_display(Tensor::full({1, 1, 3, 3}, 4.0));
    for (double v : flat.data()) CHECK(v == 0.5);
    const Tensor n = normalize_for_display(Tensor({1, 1, 1, 3}, {-2.0, 0.0, 2.0}));
    CHECK(n[0] == 0.0);
    CHECK(n[1] == 0.5);
    CHECK(n[2] == 1.0);
  }

  TEST_CASE("fixture dataset pairs have equal shapes") {
    const auto pairs = load_paired_dataset(GABFORMER_FIXTURES "/rain_sample");
    CHECK(pairs.size() == 5);
    for (const auto& p : pairs) {
      CHECK(p.rainy.shape() == p.clean.shape());
      for (double v : p.rainy.data()) CHECK((v >= 0.0 && v <= 1.0));
    }
    CHECK(load_pair(GABFORMER_FIXTURES "/rain_sample", pairs[0].id).rainy.shape() == pairs[0].rainy.shape());
  }

  TEST_CASE("dataset errors") {
    const auto dir = scratch("ds");
    CHECK_THROWS(load_paired_dataset(dir));
    fs::create_directories(dir / "rainy");
    fs::create_directories(dir / "clean");
    save_image(Tensor::zeros({1, 3, 8, 8}), dir / "rainy" / "a.png");
    CHECK_THROWS_WITH(load_paired_dataset(dir), doctest::Contains("a.png"));
    save_image(Tensor::zeros({1, 3, 8, 16}), dir / "clean" / "a.png");
    CHECK_THROWS(load_paired_dataset(dir));
    fs::remove_all(dir);
  }

  TEST_CASE("rain synthesis") {
    const Tensor clean = synthetic_scene(64, 64, 3);
    RainParams p;
    p.seed = 4;
    SUBCASE("zero intensity leaves the image untouched") {
      p.intensity = 0.0;
      CHECK(bitwise_equal(synth_rain(clean, p).rainy, clean));
    }
    SUBCASE("seeded streaks are reproducible") {
      CHECK(bitwise_equal(streak_layer(64, 64, p), streak_layer(64, 64, p)));
      RainParams q = p;
      q.seed = 5;
      CHECK_FALSE(bitwise_equal(streak_layer(64, 64, p), streak_layer(64, 64, q)));
    }
    SUBCASE("default density and intensity land in the PSNR band") {
      for (std::uint64_t s = 0; s < 4; ++s) {
        p.seed = s;
        const auto pair = synth_rain(synthetic_scene(64, 64, s), p);
        const double db = evaluate_images(pair.rainy, pair.clean).psnr_db;
        CHECK(db >= 15.0);
        CHECK(db <= 35.0);
      }
    }
    SUBCASE("values stay in range") {
      const auto pair = synth_rain(clean, p);
      for (double v : pair.rainy.data()) CHECK((v >= 0.0 && v <= 1.0));
      for (double v : pair.rainy.data()) CHECK(std::isfinite(v));
    }
    SUBCASE("invalid parameters") {
      p.density = 0.0;
      CHECK_THROWS_AS(synth_rain(clean, p), std::invalid_argument);
      p.density = 0.05;
      p.intensity = 1.5;
      CHECK_THROWS_AS(synth_rain(clean, p), std::invalid_argument);
    }
  }

  TEST_CASE("patch sampler") {
    const auto pair = synth_rain(synthetic_scene(64, 64, 1), RainParams{});
    SUBCASE("full size is the identity crop") {
      PatchSampler s(pair, 64, 1);
      const auto c = s.next();
      CHECK(bitwise_equal(c.rainy, pair.rainy));
      CHECK(bitwise_equal(c.clean, pair.clean));
    }
    SUBCASE("equal seeds give equal sequences") {
      PatchSampler a(pair, 16, 9), b(pair, 16, 9);
      for (int i = 0; i < 20; ++i) CHECK(a.next().id == b.next().id);
    }
    SUBCASE("size errors") {
      CHECK_THROWS_AS(PatchSampler(pair, 72, 1), std::invalid_argument);
      CHECK_THROWS_AS(PatchSampler(pair, 12, 1), std::invalid_argument);
    }
  }

  TEST_CASE("patch sampler coverage") {
    // 1000 crops of 64 from 256: offsets in [0, 192]. Eight equal-width bins
    // per axis; the 0.1% critical value of chi-square with 7 dof is 24.32.
    const ImagePair pair{Tensor::zeros({1, 3, 256, 256}), Tensor::zeros({1, 3, 256, 256}), "z"};
    PatchSampler s(pair, 64, 2024);
    constexpr std::size_t kBins = 8, kDraws = 1000, kPositions = 193;
    std::vector<double> top(kBins, 0.0), left(kBins, 0.0);
    for (std::size_t i = 0; i < kDraws; ++i) {
      const auto c = s.next();
      const auto at = c.id.find('@'), comma = c.id.find(',');
      const std::size_t t = std::stoul(c.id.substr(at + 1, comma - at - 1)), l = std::stoul(c.id.substr(comma + 1));
      CHECK(t + 64 <= 256);
      CHECK(l + 64 <= 256);
      top[t * kBins / kPositions] += 1;
      left[l * kBins / kPositions] += 1;
    }
    auto chi2 = [&](const std::vector<double>& counts) {
      double x = 0.0;
      for (std::size_t b = 0; b < kBins; ++b) {
        // Positions falling in bin b.
        std::size_t n = 0;
        for (std::size_t p = 0; p < kPositions; ++p) n += (p * kBins / kPositions == b);
        const double expected = kDraws * static_cast<double>(n) / kPositions;
        x += (counts[b] - expected) * (counts[b] - expected) / expected;
      }
      return x;
    };
    CHECK(chi2(top) < 24.32);
    CHECK(chi2(left) < 24.32);
  }
}
