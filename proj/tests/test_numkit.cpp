#include <cmath>
#include <set>
#include <stdexcept>

#include "apfl/numkit.hpp"
#include "doctest.h"

using namespace apfl;

TEST_SUITE_BEGIN("numkit");

TEST_CASE("axpy basics") {
  CHECK(axpy(0.0, {5.0, -7.0}, {1.0, 2.0}) == ParamVector{1.0, 2.0});
  CHECK(axpy(1.0, {1.0, 1.0}, {1.0, 1.0}) == ParamVector{2.0, 2.0});
  CHECK(axpy(-0.5, {2.0, 4.0}, {1.0, 1.0}) == ParamVector{0.0, -1.0});
  CHECK_THROWS_AS(axpy(1.0, {1.0}, {1.0, 2.0}), std::invalid_argument);
  CHECK_THROWS_AS(axpy(std::nan(""), {1.0}, {1.0}), std::invalid_argument);
}

TEST_CASE("dot basics") {
  CHECK(dot({0.0, 0.0}, {3.0, 4.0}) == 0.0);
  CHECK(dot({1.0, 2.0}, {3.0, 4.0}) == 11.0);
  CHECK(dot({3.0, 4.0}, {3.0, 4.0}) == 25.0);
  CHECK_THROWS_AS(dot({1.0}, {1.0, 2.0}), std::invalid_argument);
}

TEST_CASE("dot(x, x) is nonnegative and zero only at zero") {
  RngStream rng(11, 0);
  for (int rep = 0; rep < 50; ++rep) {
    ParamVector x = gaussian_vector(rng, 8, 0.0, 3.0);
    double d = dot(x, x);
    CHECK(d >= 0.0);
    bool zero = true;
    for (double v : x) zero = zero && v == 0.0;
    CHECK(zero == (d == 0.0));
  }
  CHECK(dot(ParamVector(4, 0.0), ParamVector(4, 0.0)) == 0.0);
}

TEST_CASE("stream determinism and golden values") {
  RngStream a(42, 7), b(42, 7);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  // Frozen outputs of this Philox configuration; a change here means the
  // generator algorithm changed and every seeded result in the project moves.
  RngStream g(42, 7);
  CHECK(g.next_u64() == 16524851402832244524ull);
  CHECK(g.next_u64() == 6157433149371370037ull);
  CHECK(g.next_u64() == 6921858453021256000ull);
}

TEST_CASE("distinct streams differ") {
  RngStream a(42, 1), b(42, 2), c(43, 1);
  int equal_ab = 0, equal_ac = 0;
  for (int i = 0; i < 64; ++i) {
    std::uint64_t va = a.next_u64();
    if (va == b.next_u64()) ++equal_ab;
    if (va == c.next_u64()) ++equal_ac;
  }
  CHECK(equal_ab == 0);
  CHECK(equal_ac == 0);
}

TEST_CASE("next_below stays in range and covers small supports") {
  RngStream rng(5, 3);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 200; ++i) {
    std::uint64_t v = rng.next_below(5);
    CHECK(v < 5);
    seen.insert(v);
  }
  CHECK(seen.size() == 5);
  CHECK_THROWS_AS(rng.next_below(0), std::invalid_argument);
}

TEST_CASE("gaussian_vector degenerate and deterministic") {
  RngStream rng(1, 1);
  CHECK(gaussian_vector(rng, 3, 0.0, 0.0) == ParamVector{0.0, 0.0, 0.0});

  RngStream r1(9, 4), r2(9, 4);
  ParamVector v1 = gaussian_vector(r1, 16, 1.0, 2.0);
  ParamVector v2 = gaussian_vector(r2, 16, 1.0, 2.0);
  CHECK(v1 == v2);

  CHECK_THROWS_AS(gaussian_vector(rng, 3, 0.0, -1.0), std::invalid_argument);
}

TEST_CASE("gaussian sample mean obeys the law of large numbers") {
  RngStream rng(2024, 0);
  const std::size_t n = 100000;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += 1.0 + rng.next_gaussian();
  double mean = sum / static_cast<double>(n);
  CHECK(mean == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("gaussian vector mean parameter can be a vector") {
  RngStream rng(3, 3);
  ParamVector mean{1.0, -2.0, 5.0};
  CHECK(gaussian_vector(rng, 3, mean, 0.0) == mean);
  CHECK_THROWS_AS(gaussian_vector(rng, 2, mean, 1.0), std::invalid_argument);
}

TEST_CASE("finite checks") {
  CHECK(all_finite(ParamVector{1.0, -2.0}));
  CHECK_FALSE(all_finite(ParamVector{1.0, std::nan("")}));
  CHECK_THROWS_AS(check_finite(ParamVector{1.0 / 0.0}, "probe"), std::runtime_error);
}

TEST_SUITE_END();
