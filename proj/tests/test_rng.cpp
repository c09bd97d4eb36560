#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "tvc/rng.hpp"

#include <vector>

using namespace tvc;

namespace {

constexpr int kDraws = 100000;

std::vector<double> draws_of(const std::function<double(RngStream&)>& f, std::uint64_t seed) {
  RngStream rng(seed);
  std::vector<double> out(kDraws);
  for (double& v : out) v = f(rng);
  return out;
}

void check_mean_within_3se(std::span<const double> draws, double expected) {
  const double m = oracle::mean_of(draws);
  const double se = oracle::mc_se(draws);
  CHECK(std::abs(m - expected) < 3.0 * se);
}

}  // namespace

TEST_CASE("substreams: same label identical, different labels differ") {
  RngStream master(123);
  RngStream a = master.substream({1, 5});
  RngStream b = master.substream({1, 5});
  RngStream c = master.substream({1, 6});
  bool all_equal = true, any_equal_c = false;
  for (int i = 0; i < 1000; ++i) {
    const double va = a.uniform(), vb = b.uniform(), vc = c.uniform();
    all_equal = all_equal && (va == vb);
    any_equal_c = any_equal_c || (va == vc);
  }
  CHECK(all_equal);
  CHECK_FALSE(any_equal_c);  // streams differ somewhere in the first 1000
}

TEST_CASE("normal moments") {
  auto d = draws_of([](RngStream& r) { return r.normal(); }, 1);
  check_mean_within_3se(d, 0.0);
  CHECK(oracle::var_of(d) == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("gamma and inverse-gamma moments") {
  auto g = draws_of([](RngStream& r) { return r.gamma(3.0, 2.0); }, 2);
  check_mean_within_3se(g, 1.5);
  auto g_small = draws_of([](RngStream& r) { return r.gamma(0.5, 1.0); }, 3);
  check_mean_within_3se(g_small, 0.5);
  auto ig = draws_of([](RngStream& r) { return r.inv_gamma(4.0, 2.0); }, 4);
  check_mean_within_3se(ig, 2.0 / 3.0);
  auto ex = draws_of([](RngStream& r) { return r.exponential(2.5); }, 6);
  check_mean_within_3se(ex, 0.4);
}

TEST_CASE("gig limiting cases") {
  // psi = 0 reduces to inverse-gamma(a, chi/2)
  {
    const double a = 3.0, chi = 4.0;
    auto d = draws_of([&](RngStream& r) { return sample_gig({-a, chi, 0.0}, r); }, 6);
    check_mean_within_3se(d, chi / (2.0 * (a - 1.0)));
  }
  // chi = 0 reduces to gamma(a, rate psi/2)
  {
    const double a = 2.5, psi = 3.0;
    auto d = draws_of([&](RngStream& r) { return sample_gig({a, 0.0, psi}, r); }, 7);
    check_mean_within_3se(d, 2.0 * a / psi);
  }
}

TEST_CASE("gig moments match quadrature across all internal regimes") {
  struct Case { double mu, chi, psi; };
  const Case cases[] = {
      {0.5, 2.0, 3.0},    // ratio-of-uniforms without shift
      {5.0, 2.0, 3.0},    // mode-shifted (large order)
      {-35.0, 6.0, 2.0},  // large negative order, as in global-scale updates
      {0.1, 0.01, 1.0},   // small omega, three-piece hat
      {0.0, 1.0, 1.0},    // boundary order
      {-0.5, 2.0, 0.5},
  };
  int idx = 0;
  for (const auto& c : cases) {
    CAPTURE(c.mu);
    CAPTURE(c.chi);
    CAPTURE(c.psi);
    auto dens = oracle::gig_density(c.mu, c.chi, c.psi);
    const double m1 = dens.moment(1);
    const double m2 = dens.moment(2);
    auto d = draws_of([&](RngStream& r) { return sample_gig({c.mu, c.chi, c.psi}, r); },
                      100 + idx++);
    check_mean_within_3se(d, m1);
    CHECK(oracle::var_of(d) == doctest::Approx(m2 - m1 * m1).epsilon(0.05));
  }
}

TEST_CASE("gig rejects inadmissible parameters") {
  RngStream rng(9);
  CHECK_THROWS_AS(sample_gig({-1.0, 0.0, 1.0}, rng), DistributionError);  // chi=0 needs mu>0
  CHECK_THROWS_AS(sample_gig({1.0, 1.0, -1.0}, rng), DistributionError);
  CHECK_THROWS_AS(sample_gig({0.0, 0.0, 0.0}, rng), DistributionError);
}

TEST_CASE("mvn_sample") {
  RngStream rng(10);
  // zero covariance returns the mean exactly
  Eigen::VectorXd mean(3);
  mean << 1.0, -2.0, 0.5;
  Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(3, 3);
  CHECK((mvn_sample(mean, zero, rng) - mean).norm() == 0.0);

  // 1-D variance 4
  {
    Eigen::VectorXd m(1);
    m << 0.0;
    Eigen::MatrixXd c(1, 1);
    c << 4.0;
    std::vector<double> d(kDraws);
    for (double& v : d) v = mvn_sample(m, c, rng)[0];
    CHECK(std::sqrt(oracle::var_of(d)) == doctest::Approx(2.0).epsilon(0.02));
    check_mean_within_3se(d, 0.0);
  }

  // 3-D with a known Cholesky factor: empirical covariance entrywise
  {
    Eigen::MatrixXd l(3, 3);
    l << 1.0, 0.0, 0.0,
         0.5, 1.2, 0.0,
        -0.3, 0.4, 0.8;
    const Eigen::MatrixXd cov = l * l.transpose();
    Eigen::VectorXd m = Eigen::VectorXd::Zero(3);
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(3, 3);
    const int n = 100000;
    std::vector<Eigen::VectorXd> xs;
    xs.reserve(n);
    for (int i = 0; i < n; ++i) xs.push_back(mvn_sample(m, cov, rng));
    for (const auto& x : xs) acc += x * x.transpose();
    acc /= static_cast<double>(n);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        // moment-based standard error for a covariance entry
        const double se = std::sqrt((cov(i, i) * cov(j, j) + cov(i, j) * cov(i, j)) / n);
        CHECK(std::abs(acc(i, j) - cov(i, j)) < 3.5 * se);
      }
  }

  // non-PSD beyond the jitter budget
  Eigen::MatrixXd bad(2, 2);
  bad << 1.0, 0.0, 0.0, -1.0;
  CHECK_THROWS_AS(mvn_sample(Eigen::VectorXd::Zero(2), bad, rng), NumericalError);
}

TEST_CASE("llt_with_jitter recovers near-singular matrices") {
  Eigen::MatrixXd ones = Eigen::MatrixXd::Ones(4, 4);  // rank 1, PSD
  const auto ch = llt_with_jitter(ones);
  CHECK(ch.jitter > 0);
  const Eigen::MatrixXd back = ch.factor * ch.factor.transpose();
  CHECK((back - ones).cwiseAbs().maxCoeff() < 1e-5);
}
