#include <catch2/catch_amalgamated.hpp>

#include "volmark/grad_check.hpp"
#include "volmark/rng.hpp"
#include "volmark/tensor.hpp"

using namespace volmark;

using Td = Tensor<double>;

namespace {

Td random_tensor(Shape shape, SplitMix64& rng, double lo = -1.0, double hi = 1.0) {
  return Td(shape, uniform_vector<double>(rng, numel(shape), lo, hi));
}

}  // namespace

TEST_CASE("matmul identity returns the operand") {
  SplitMix64 rng(7);
  Td a = random_tensor({3, 3}, rng);
  std::vector<double> eye(9, 0.0);
  eye[0] = eye[4] = eye[8] = 1.0;
  Td out = matmul(a, Td({3, 3}, eye));
  for (std::size_t i = 0; i < 9; ++i) REQUIRE(out.values()[i] == Catch::Approx(a.values()[i]));
}

TEST_CASE("matmul shape errors name the op and both shapes") {
  Td a = Td::zeros({2, 3});
  Td b = Td::zeros({4, 2});
  REQUIRE_THROWS_WITH(matmul(a, b), Catch::Matchers::ContainsSubstring("matmul") &&
                                        Catch::Matchers::ContainsSubstring("2x3") &&
                                        Catch::Matchers::ContainsSubstring("4x2"));
}

TEST_CASE("batched matmul agrees with per-slice 2-D matmul") {
  SplitMix64 rng(21);
  Td a = random_tensor({3, 2, 4}, rng);
  Td b = random_tensor({3, 4, 5}, rng);
  Td out = matmul(a, b);
  for (std::size_t bi = 0; bi < 3; ++bi) {
    Td as(Shape{2, 4}, std::vector<double>(a.values().begin() + bi * 8,
                                           a.values().begin() + (bi + 1) * 8));
    Td bs(Shape{4, 5}, std::vector<double>(b.values().begin() + bi * 20,
                                           b.values().begin() + (bi + 1) * 20));
    Td ref = matmul(as, bs);
    for (std::size_t i = 0; i < 10; ++i)
      REQUIRE(out.values()[bi * 10 + i] == Catch::Approx(ref.values()[i]));
  }
}

TEST_CASE("softmax of a constant row is uniform") {
  Td x = Td::full({3}, 4.2);
  Td y = softmax(x, 0);
  for (double v : y.values()) REQUIRE(v == Catch::Approx(1.0 / 3.0));
}

TEST_CASE("softmax rows are nonnegative and sum to one") {
  SplitMix64 rng(3);
  Td x = random_tensor({4, 7}, rng, -5.0, 5.0);
  Td y = softmax(x, 1);
  for (double v : y.values()) REQUIRE(v >= 0.0);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 7; ++c) s += y.values()[r * 7 + c];
    REQUIRE(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("topk_indices selects the largest entries as a set") {
  Td x(Shape{3}, {0.1, 0.9, 0.5});
  auto idx = topk_indices(x, 0, 2);
  REQUIRE(idx == std::vector<std::size_t>{1, 2});
}

TEST_CASE("topk_indices breaks ties toward the lowest index") {
  Td x(Shape{4}, {0.5, 0.5, 0.5, 0.5});
  auto idx = topk_indices(x, 0, 2);
  REQUIRE(idx == std::vector<std::size_t>{0, 1});
}

TEST_CASE("topk_indices rejects k beyond the axis extent") {
  Td x = Td::zeros({3});
  REQUIRE_THROWS_AS(topk_indices(x, 0, 4), ShapeError);
}

TEST_CASE("backward of sum(x*x) gives 2x") {
  Tape<double> tape;
  Td x = tape.watch(Td({3}, {1.0, 2.0, 3.0}));
  Td loss = reduce_sum(mul(x, x));
  tape.backward(loss);
  auto g = tape.grad(x);
  REQUIRE(g == std::vector<double>{2.0, 4.0, 6.0});
}

TEST_CASE("backward of sigmoid at zero gives a quarter") {
  Tape<double> tape;
  Td x = tape.watch(Td::zeros({1}));
  Td loss = reduce_sum(sigmoid(x));
  tape.backward(loss);
  REQUIRE(tape.grad(x)[0] == Catch::Approx(0.25));
}

TEST_CASE("gradient of unrelated input is zero") {
  Tape<double> tape;
  Td x = tape.watch(Td({2}, {1.0, 2.0}));
  Td y = tape.watch(Td({2}, {3.0, 4.0}));
  Td loss = reduce_sum(mul(x, x));
  tape.backward(loss);
  REQUIRE(tape.grad(y) == std::vector<double>{0.0, 0.0});
}

TEST_CASE("backward requires a scalar loss") {
  Tape<double> tape;
  Td x = tape.watch(Td({2}, {1.0, 2.0}));
  Td y = mul(x, x);
  REQUIRE_THROWS_AS(tape.backward(y), ShapeError);
}

TEST_CASE("non-finite results are rejected") {
  Td x = Td::full({2}, -1.0);
  REQUIRE_THROWS_AS(log(x), NumericError);
}

TEST_CASE("grad_check oracle on sum of squares") {
  SplitMix64 rng(11);
  auto fn = [](const std::vector<Td>& in) { return reduce_sum(mul(in[0], in[0])); };
  auto res = grad_check<double>(fn, {random_tensor({4, 3}, rng)}, 1e-5);
  REQUIRE(res.max_rel_error < 1e-6);
}

TEST_CASE("grad of sum(softmax) vanishes") {
  Tape<double> tape;
  SplitMix64 rng(5);
  Td x = tape.watch(random_tensor({6}, rng));
  tape.backward(reduce_sum(softmax(x, 0)));
  for (double g : tape.grad(x)) REQUIRE(std::abs(g) < 1e-12);
}

TEST_CASE("grad of mean(relu) in the linear region is 1/n") {
  Tape<double> tape;
  SplitMix64 rng(9);
  Td x = tape.watch(random_tensor({5}, rng, 1.5, 3.0));
  tape.backward(reduce_mean(relu(x)));
  for (double g : tape.grad(x)) REQUIRE(g == Catch::Approx(0.2));
}

TEST_CASE("every differentiable op passes grad_check at 64-bit") {
  SplitMix64 rng(1234);
  const double tol = 1e-5;
  // weighted sums make the gradients non-degenerate
  Td w = random_tensor({3, 4}, rng);
  Td wq = random_tensor({2, 3, 4}, rng);

  auto check1 = [&](const char* name, auto body, Td input) {
    auto res = grad_check<double>(body, {input}, 1e-6);
    INFO(name);
    REQUIRE(res.max_rel_error < tol);
  };

  check1("add", [&](const std::vector<Td>& in) {
    return reduce_sum(mul(add(in[0], in[0]), w));
  }, random_tensor({3, 4}, rng));
  check1("sub_scalar", [&](const std::vector<Td>& in) {
    return reduce_sum(mul(sub(in[0], Td::scalar(0.3)), w));
  }, random_tensor({3, 4}, rng));
  check1("mul", [&](const std::vector<Td>& in) {
    return reduce_sum(mul(mul(in[0], in[0]), w));
  }, random_tensor({3, 4}, rng));
  check1("exp", [&](const std::vector<Td>& in) {
    return reduce_sum(mul(volmark::exp(in[0]), w));
  }, random_tensor({3, 4}, rng));
  check1("log", [&](const std::vector<Td>& in) {
    return reduce_sum(mul(volmark::log(in[0]), w));
  }, random_tensor({3, 4}, rng, 0.5, 2.0));
  check1("relu", [&](const std::vector<Td>& in) {
    return reduce_sum(mul(relu(in[0]), w));
  }, random_tensor({3, 4}, rng, 0.1, 1.0));
  check1("gelu", [&](const std::vector<Td>& in) {
    return reduce_sum(mul(gelu(in[0]), w));
  }, random_tensor({3, 4}, rng));
  check1("sigmoid", [&](const std::vector<Td>& in) {
    return reduce_sum(mul(sigmoid(in[0]), w));
  }, random_tensor({3, 4}, rng));
  check1("softmax", [&](const std::vector<Td>& in) {
    return reduce_sum(mul(softmax(in[0], 1), w));
  }, random_tensor({3, 4}, rng));
  check1("reduce_mean_axis", [&](const std::vector<Td>& in) {
    Td m = reduce_mean(in[0], 1);
    return reduce_sum(mul(m, m));
  }, random_tensor({3, 4}, rng));
  check1("reduce_max_axis", [&](const std::vector<Td>& in) {
    Td m = reduce_max(in[0], 0);
    return reduce_sum(mul(m, m));
  }, random_tensor({3, 4}, rng));
  check1("permute", [&](const std::vector<Td>& in) {
    return reduce_sum(mul(permute(in[0], {1, 2, 0}), permute(wq, {1, 2, 0})));
  }, random_tensor({2, 3, 4}, rng));
  check1("reshape", [&](const std::vector<Td>& in) {
    return reduce_sum(mul(reshape(in[0], {4, 3}), transpose(w)));
  }, random_tensor({3, 4}, rng));
  check1("slice", [&](const std::vector<Td>& in) {
    Td s = slice(in[0], 1, 1, 2);
    return reduce_sum(mul(s, s));
  }, random_tensor({3, 4}, rng));
  check1("gather", [&](const std::vector<Td>& in) {
    Td g = gather_rows(in[0], {2, 0, 0, -1});
    return reduce_sum(mul(g, g));
  }, random_tensor({3, 4}, rng));

  {
    Td a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
    auto res = grad_check<double>(
        [](const std::vector<Td>& in) {
          Td y = matmul(in[0], in[1]);
          return reduce_sum(mul(y, y));
        },
        {a, b}, 1e-6);
    REQUIRE(res.max_rel_error < tol);
  }
  {
    std::vector<Td> parts{random_tensor({2, 3}, rng), random_tensor({2, 2}, rng)};
    auto res = grad_check<double>(
        [](const std::vector<Td>& in) {
          Td y = concat(std::vector<Td>{in[0], in[1]}, 1);
          return reduce_sum(mul(y, y));
        },
        parts, 1e-6);
    REQUIRE(res.max_rel_error < tol);
  }
}

TEST_CASE("reshape and permute invert exactly") {
  SplitMix64 rng(77);
  Td x = random_tensor({2, 3, 5}, rng);
  Td rt = reshape(reshape(x, {30}), {2, 3, 5});
  REQUIRE(rt.values() == x.values());
  Td pt = permute(permute(x, {2, 0, 1}), {1, 2, 0});
  REQUIRE(pt.values() == x.values());
}

TEST_CASE("concat then slice recovers the parts") {
  SplitMix64 rng(31);
  Td a = random_tensor({2, 3}, rng);
  Td b = random_tensor({2, 4}, rng);
  Td c = concat(std::vector<Td>{a, b}, 1);
  REQUIRE(slice(c, 1, 0, 3).values() == a.values());
  REQUIRE(slice(c, 1, 3, 4).values() == b.values());
}

TEST_CASE("gather with -1 produces a zero row") {
  Td x(Shape{2, 2}, {1.0, 2.0, 3.0, 4.0});
  Td g = gather_rows(x, {-1, 1});
  REQUIRE(g.values() == std::vector<double>{0.0, 0.0, 3.0, 4.0});
}

TEST_CASE("elementwise ops reject mismatched shapes") {
  REQUIRE_THROWS_WITH(add(Td::zeros({2, 3}), Td::zeros({3, 2})),
                      Catch::Matchers::ContainsSubstring("add") &&
                          Catch::Matchers::ContainsSubstring("2x3") &&
                          Catch::Matchers::ContainsSubstring("3x2"));
}

TEST_CASE("ops are deterministic for identical inputs") {
  auto run = [] {
    SplitMix64 rng(99);
    Td x = random_tensor({4, 4}, rng, -2.0, 2.0);
    Td y = softmax(matmul(x, x), 1);
    return y.values();
  };
  REQUIRE(run() == run());
}
