#include <catch2/catch_amalgamated.hpp>

#include "beal/rng.hpp"
#include "beal/tensor.hpp"

using beal::Rng;
using beal::Tensor;

TEST_CASE("rng determinism and stream independence") {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    auto va = a.next_u64();
    REQUIRE(va == b.next_u64());
  }
  bool differs = false;
  Rng a2(42);
  for (int i = 0; i < 10; ++i)
    if (a2.next_u64() != c.next_u64()) differs = true;
  REQUIRE(differs);
}

TEST_CASE("rng uniform range and normal moments") {
  Rng r(7);
  double sum = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
  }
  for (int i = 0; i < n; ++i) {
    double g = r.normal();
    sum += g;
    sq += g * g;
  }
  REQUIRE(std::abs(sum / n) < 0.05);
  REQUIRE(std::abs(sq / n - 1.0) < 0.05);
}

TEST_CASE("rng state round trip") {
  Rng r(123);
  r.next_u64();
  auto s = r.state();
  std::vector<std::uint64_t> tail;
  for (int i = 0; i < 5; ++i) tail.push_back(r.next_u64());
  Rng r2(0);
  r2.set_state(s);
  for (int i = 0; i < 5; ++i) REQUIRE(r2.next_u64() == tail[i]);
}

TEST_CASE("hash_combine separates streams") {
  REQUIRE(beal::hash_combine(1, 2) != beal::hash_combine(2, 1));
  REQUIRE(beal::hash_combine(1, 2, 3) != beal::hash_combine(1, 2, 4));
}

TEST_CASE("tensor shape accounting and accessors") {
  Tensor<double> t({2, 3, 4, 5});
  REQUIRE(t.numel() == 120);
  t.at(1, 2, 3, 4) = 7.5;
  REQUIRE(t[119] == 7.5);
  REQUIRE(t.all_finite());
  t[0] = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_FALSE(t.all_finite());
}

TEST_CASE("tensor shape mismatch raises") {
  Tensor<double> a({2, 2}), b({2, 3});
  REQUIRE_THROWS_AS(a += b, beal::ValidationError);
}

TEST_CASE("stack_batch layout") {
  Tensor<double> a({1, 2, 2});
  Tensor<double> b({1, 2, 2});
  a.fill(1.0);
  b.fill(2.0);
  auto batch = beal::stack_batch<double>({a, b});
  REQUIRE(batch.shape() == std::vector<std::int64_t>{2, 1, 2, 2});
  REQUIRE(batch.at(0, 0, 1, 1) == 1.0);
  REQUIRE(batch.at(1, 0, 0, 0) == 2.0);
}
