#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "tvc/rng.hpp"
#include "tvc/tensor.hpp"

#include <numeric>
#include <set>

using namespace tvc;

namespace {

DenseTensorD random_tensor(const Shape& shape, RngStream& rng) {
  DenseTensorD t(shape);
  for (Index v = 0; v < t.size(); ++v) t[v] = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("vec_offset basics and bijection") {
  const Shape shape{8, 8, 8};
  CHECK(vec_offset(Shape{0, 0, 0}, shape) == 0);   // first element
  CHECK(vec_offset(Shape{1, 0, 0}, shape) == 1);   // mode 1 varies fastest
  CHECK(vec_offset(Shape{0, 1, 0}, shape) == 8);

  // brute-force bijection over the whole index space
  std::set<Index> seen;
  for (Index k = 0; k < 8; ++k)
    for (Index j = 0; j < 8; ++j)
      for (Index i = 0; i < 8; ++i) {
        const Index off = vec_offset(Shape{i, j, k}, shape);
        CHECK(off >= 0);
        CHECK(off < 512);
        seen.insert(off);
        const Shape back = unravel_offset(off, shape);
        CHECK(back == Shape{i, j, k});
      }
  CHECK(seen.size() == 512);

  CHECK_THROWS_AS(vec_offset(Shape{8, 0, 0}, shape), std::out_of_range);
  CHECK_THROWS_AS(vec_offset(Shape{-1, 0, 0}, shape), std::out_of_range);
}

TEST_CASE("slice_inner_product against a loop oracle") {
  {
    DenseTensorD a(Shape{2, 2}, 1.0), b(Shape{2, 2}, 1.0);
    CHECK(slice_inner_product(a, b, 0, 0) == doctest::Approx(2.0));
  }
  {
    DenseTensorD a(Shape{3, 3}), b(Shape{3, 3}, 1.0);
    for (Index i = 0; i < 3; ++i) a.at({i, i}) = 1.0;  // identity pattern
    CHECK(slice_inner_product(a, b, 1, 1) == doctest::Approx(1.0));
  }

  RngStream rng(42);
  const Shape shape{4, 4, 4};
  DenseTensorD a = random_tensor(shape, rng);
  DenseTensorD b = random_tensor(shape, rng);
  for (Index d = 0; d < 3; ++d)
    for (Index j = 0; j < 4; ++j) {
      double oracle = 0;
      for (Index z = 0; z < 4; ++z)
        for (Index y = 0; y < 4; ++y)
          for (Index x = 0; x < 4; ++x) {
            const Shape idx{x, y, z};
            if (idx[static_cast<std::size_t>(d)] != j) continue;
            oracle += a.at(std::span<const Index>(idx)) * b.at(std::span<const Index>(idx));
          }
      CHECK(slice_inner_product(a, b, d, j) == doctest::Approx(oracle).epsilon(1e-12));
    }

  DenseTensorD c(Shape{3, 3});
  CHECK_THROWS_AS(slice_inner_product(a, c, 0, 0), std::invalid_argument);
}

TEST_CASE("slice inner products over all indices recover the full inner product") {
  RngStream rng(7);
  const Shape shape{3, 4, 5};
  DenseTensorD a = random_tensor(shape, rng);
  DenseTensorD b = random_tensor(shape, rng);
  const double full = inner_product(a, b);
  for (Index d = 0; d < 3; ++d) {
    double acc = 0;
    for (Index j = 0; j < shape[static_cast<std::size_t>(d)]; ++j)
      acc += slice_inner_product(a, b, d, j);
    CHECK(acc == doctest::Approx(full).epsilon(1e-12));
  }
}

TEST_CASE("cp_compose basics") {
  {
    // R=1, basis margins: a single 1 in the corner
    CPFactorD f(Shape{3, 3, 3}, 1);
    f.mode(0)(0, 0) = 1;
    f.mode(1)(0, 0) = 1;
    f.mode(2)(0, 0) = 1;
    DenseTensorD t = cp_compose(f);
    CHECK(t[0] == 1.0);
    CHECK(t.vec().cwiseAbs().sum() == doctest::Approx(1.0));
  }
  {
    // hand outer product (1,2) x (3,4)
    CPFactorD f(Shape{2, 2}, 1);
    f.mode(0).col(0) << 1, 2;
    f.mode(1).col(0) << 3, 4;
    DenseTensorD t = cp_compose(f);
    CHECK(t.at({0, 0}) == doctest::Approx(3));
    CHECK(t.at({1, 0}) == doctest::Approx(6));
    CHECK(t.at({0, 1}) == doctest::Approx(4));
    CHECK(t.at({1, 1}) == doctest::Approx(8));
  }
}

TEST_CASE("cp_compose matches the naive outer-product oracle at rank 3") {
  RngStream rng(11);
  const Shape shape{3, 4, 2};
  CPFactorD f(shape, 3);
  for (Index d = 0; d < 3; ++d)
    for (Index r = 0; r < 3; ++r)
      for (Index j = 0; j < shape[static_cast<std::size_t>(d)]; ++j) f.mode(d)(j, r) = rng.normal();

  DenseTensorD oracle(shape);
  for (Index z = 0; z < 2; ++z)
    for (Index y = 0; y < 4; ++y)
      for (Index x = 0; x < 3; ++x) {
        double acc = 0;
        for (Index r = 0; r < 3; ++r) acc += f.mode(0)(x, r) * f.mode(1)(y, r) * f.mode(2)(z, r);
        oracle.at({x, y, z}) = acc;
      }

  DenseTensorD got = cp_compose(f);
  CHECK((got.vec() - oracle.vec()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("cp_compose is multilinear in each margin") {
  RngStream rng(13);
  const Shape shape{3, 3};
  CPFactorD f(shape, 2);
  for (Index d = 0; d < 2; ++d)
    for (Index r = 0; r < 2; ++r)
      for (Index j = 0; j < 3; ++j) f.mode(d)(j, r) = rng.normal();

  DenseTensorD base = cp_compose(f);
  CPFactorD g = f;
  const double c = 2.5;
  g.mode(1).col(0) *= c;

  // scaling margin (d=1, r=0) scales only the rank-0 contribution
  CPFactorD rank0(shape, 1), rank1(shape, 1);
  rank0.mode(0).col(0) = f.mode(0).col(0);
  rank0.mode(1).col(0) = f.mode(1).col(0);
  rank1.mode(0).col(0) = f.mode(0).col(1);
  rank1.mode(1).col(0) = f.mode(1).col(1);
  DenseTensorD expect(shape);
  expect.vec() = c * cp_compose(rank0).vec() + cp_compose(rank1).vec();
  CHECK((cp_compose(g).vec() - expect.vec()).cwiseAbs().maxCoeff() < 1e-12);
  (void)base;
}

TEST_CASE("extract_patch zero padding and ordering") {
  {
    DenseTensorD x(Shape{5, 5, 5}, 7.0);
    const Index center = vec_offset(Shape{2, 2, 2}, x.shape());
    Patch<double> p = extract_patch(x, center, 3);
    CHECK(p.values.size() == 27);
    for (Index i = 0; i < 27; ++i) CHECK(p.values[i] == 7.0);
  }
  {
    // corner voxel of a 5^3 image: 8 in-bounds offsets, 19 zero-padded
    DenseTensorD x(Shape{5, 5, 5}, 1.0);
    Patch<double> p = extract_patch(x, 0, 3);
    Index nonzero = 0;
    for (Index i = 0; i < 27; ++i) nonzero += (p.values[i] != 0.0) ? 1 : 0;
    CHECK(nonzero == 8);
  }
  {
    // h=1 is the identity
    RngStream rng(3);
    DenseTensorD x = random_tensor(Shape{4, 4}, rng);
    for (Index v = 0; v < x.size(); ++v) {
      Patch<double> p = extract_patch(x, v, 1);
      CHECK(p.values.size() == 1);
      CHECK(p.values[0] == x[v]);
    }
  }
  {
    // center entry of the patch returns x(v) for every voxel
    RngStream rng(4);
    DenseTensorD x = random_tensor(Shape{4, 3, 5}, rng);
    for (Index v = 0; v < x.size(); ++v) {
      Patch<double> p = extract_patch(x, v, 3);
      CHECK(p.values[13] == x[v]);  // offset (0,0,0) sits at 1 + 3*1 + 9*1
    }
  }
  DenseTensorD x(Shape{4, 4}, 0.0);
  CHECK_THROWS_AS(extract_patch(x, 0, 2), std::invalid_argument);
  CHECK_THROWS_AS(extract_patch(x, 0, -3), std::invalid_argument);
  CHECK_THROWS_AS(extract_patch(x, 99, 3), std::out_of_range);
}

TEST_CASE("frobenius_norm") {
  DenseTensorD z(Shape{3, 3});
  CHECK(frobenius_norm(z) == 0.0);
  DenseTensorD s(Shape{1});
  s[0] = 3.0;
  CHECK(frobenius_norm(s) == 3.0);

  RngStream rng(5);
  DenseTensorD x = random_tensor(Shape{8, 8, 8}, rng);
  double acc = 0;
  for (Index v = 0; v < x.size(); ++v) acc += x[v] * x[v];
  CHECK(frobenius_norm(x) == doctest::Approx(std::sqrt(acc)).epsilon(1e-12));
}
