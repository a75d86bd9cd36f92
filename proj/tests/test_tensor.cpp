#include <doctest.h>

#include <cmath>

#include "gabformer/ops.hpp"
#include "gabformer/serialize.hpp"
#include "oracles.hpp"

using namespace gabformer;

TEST_SUITE("tensor") {
  TEST_CASE("shape and data must agree") {
    CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), std::invalid_argument);
    Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.dim(1) == 3);
    CHECK_THROWS_AS(t.dim(2), std::out_of_range);
    CHECK_THROWS_AS(t.item(), std::invalid_argument);
  }

  TEST_CASE("copies alias, detach does not") {
    Tensor a({2}, {1, 2});
    Tensor b = a;
    b.mutable_data()[0] = 5;
    CHECK(a[0] == 5);
    Tensor c = a.detach();
    c.mutable_data()[0] = 7;
    CHECK(a[0] == 5);
  }

  TEST_CASE("grad of sum is all ones") {
    Tensor x = oracle::random_tensor({3, 4}, 1, -1, 1, true);
    Tape tape;
    TapeScope scope(tape);
    backward(sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);
  }

  TEST_CASE("grad of sum of squares is 2x") {
    Tensor x = oracle::random_tensor({5}, 2, -1, 1, true);
    Tape tape;
    TapeScope scope(tape);
    backward(sum(mul(x, x)));
    for (std::size_t i = 0; i < 5; ++i) CHECK(x.grad()[i] == doctest::Approx(2 * x[i]).epsilon(1e-15));
  }

  TEST_CASE("fan-out accumulates") {
    Tensor x = Tensor({1}, {3.0}, true);
    Tape tape;
    TapeScope scope(tape);
    backward(sum(add(mul(x, x), scale(x, 4.0))));
    CHECK(x.grad()[0] == doctest::Approx(10.0));
  }

  TEST_CASE("backward errors") {
    Tensor x = oracle::random_tensor({3}, 3, -1, 1, true);
    SUBCASE("non-scalar loss") {
      Tape tape;
      TapeScope scope(tape);
      CHECK_THROWS_AS(tape.backward(scale(x, 2.0)), std::invalid_argument);
    }
    SUBCASE("twice without reset") {
      Tape tape;
      TapeScope scope(tape);
      Tensor loss = sum(x);
      tape.backward(loss);
      CHECK_THROWS_AS(tape.backward(loss), std::logic_error);
      tape.reset();
      x.zero_grad();
      tape.backward(sum(x));
      CHECK(x.grad()[0] == 1.0);
    }
    SUBCASE("empty tape") {
      Tape tape;
      CHECK_THROWS_AS(tape.backward(Tensor::scalar(1.0, true)), std::logic_error);
    }
  }

  TEST_CASE("no tape, no recording") {
    Tensor x = oracle::random_tensor({3}, 4, -1, 1, true);
    Tensor y = sum(x);
    CHECK(active_tape() == nullptr);
    CHECK(y.numel() == 1);
  }

  TEST_CASE("non-finite results are errors") {
    CHECK(check_finite_enabled());
    Tensor z({2}, {0.0, 1.0});
    CHECK_THROWS_AS(reciprocal(z), NonFiniteError);
    set_check_finite(false);
    CHECK(std::isinf(reciprocal(z)[0]));
    set_check_finite(true);
  }

  TEST_CASE("tensor file round trip is bitwise") {
    Tensor t = oracle::random_tensor({2, 3, 4}, 5, -1e300, 1e300);
    const auto path = std::filesystem::temp_directory_path() / "gabformer_tensor_rt.gft";
    save_tensor(path, t);
    CHECK(bitwise_equal(load_tensor(path), t));
    std::filesystem::remove(path);
  }

  TEST_CASE("tensor file errors") {
    std::stringstream bad("NOPE");
    CHECK_THROWS_AS(read_tensor(bad), FormatError);
    Tensor t = oracle::random_tensor({4}, 6);
    std::stringstream ss;
    write_tensor(ss, t);
    std::string bytes = ss.str();
    std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS(read_tensor(truncated), FormatError);
  }
}
