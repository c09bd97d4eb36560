#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "tvc/predict.hpp"
#include "tvc/simgen.hpp"

using namespace tvc;

namespace {

// random correlation matrix from synthetic patch rows
Eigen::MatrixXd random_corr(Index n, Index p, double phi2, std::uint64_t seed) {
  RngStream rng(seed);
  Eigen::MatrixXd pts(n, p);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < p; ++j) pts(i, j) = rng.normal();
  return (-phi2 * pairwise_sqdist(pts).array()).exp().matrix();
}

// oracle: condition the joint over (train, test) outcomes directly
void oracle_kriging(const Eigen::MatrixXd& corr, Index n_train, double phi1, double theta_v,
                    double sigma2, const Eigen::VectorXd& m_train, const Eigen::VectorXd& m_test,
                    const Eigen::VectorXd& y_train, Eigen::VectorXd& mean_out,
                    Eigen::MatrixXd& cov_out) {
  const Index n = corr.rows();
  const Index n_test = n - n_train;
  Eigen::VectorXd mean(n);
  mean << m_train, m_test;
  Eigen::MatrixXd cov = theta_v * theta_v * phi1 * corr;
  for (Index i = 0; i < n_train; ++i) cov(i, i) += sigma2;  // training rows carry noise

  std::vector<int> idx_obs, idx_out;
  for (Index i = 0; i < n_train; ++i) idx_obs.push_back(static_cast<int>(i));
  for (Index i = n_train; i < n; ++i) idx_out.push_back(static_cast<int>(i));
  auto [m, c] = oracle::condition_gaussian(mean, cov, idx_obs, idx_out, y_train);
  mean_out = m;
  cov_out = c;
}

}  // namespace

TEST_CASE("kriging equals the generic Gaussian-conditioning oracle") {
  RngStream rng(111);
  for (int rep = 0; rep < 12; ++rep) {
    const Index n_train = 2 + static_cast<Index>(rng.uniform() * 5);  // <= 6
    const Index n_test = 1 + static_cast<Index>(rng.uniform() * 3);   // <= 3
    const Eigen::MatrixXd corr = random_corr(n_train + n_test, 4, 0.3, 200 + rep);
    const double phi1 = 0.5 + rng.uniform();
    const double theta_v = rng.normal();
    const double sigma2 = 0.05 + rng.uniform();
    Eigen::VectorXd m_train(n_train), m_test(n_test), y_train(n_train);
    for (Index i = 0; i < n_train; ++i) {
      m_train[i] = rng.normal();
      y_train[i] = rng.normal();
    }
    for (Index i = 0; i < n_test; ++i) m_test[i] = rng.normal();

    Eigen::VectorXd got_m, want_m;
    Eigen::MatrixXd got_c, want_c;
    kriging_conditional(corr, n_train, phi1, theta_v, sigma2, m_train, m_test, y_train, got_m, got_c);
    oracle_kriging(corr, n_train, phi1, theta_v, sigma2, m_train, m_test, y_train, want_m, want_c);
    CHECK((got_m - want_m).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((got_c - want_c).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("zero slope predicts the linear mean exactly") {
  const Eigen::MatrixXd corr = random_corr(5, 3, 0.4, 112);
  Eigen::VectorXd m_train(3), m_test(2), y_train(3);
  m_train << 1.0, -0.5, 0.3;
  m_test << 0.7, -0.2;
  y_train << 2.0, 0.0, 1.0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  kriging_conditional(corr, 3, 1.0, 0.0, 0.4, m_train, m_test, y_train, mean, cov);
  CHECK((mean - m_test).cwiseAbs().maxCoeff() == 0.0);
  CHECK(cov.cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("a test patch identical to a training patch interpolates as noise vanishes") {
  // rows 0..2 train, row 3 test; test patch == training patch 1
  RngStream rng(113);
  Eigen::MatrixXd pts(4, 3);
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 3; ++j) pts(i, j) = rng.normal();
  pts.row(3) = pts.row(1);
  const Eigen::MatrixXd corr = (-0.5 * pairwise_sqdist(pts).array()).exp().matrix();

  Eigen::VectorXd m_train = Eigen::VectorXd::Zero(3);
  Eigen::VectorXd m_test = Eigen::VectorXd::Zero(1);
  Eigen::VectorXd y_train(3);
  y_train << 0.4, -1.2, 0.9;
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  kriging_conditional(corr, 3, 1.3, 1.0, 1e-12, m_train, m_test, y_train, mean, cov);
  CHECK(mean[0] == doctest::Approx(y_train[1]).epsilon(1e-6));
  CHECK(cov(0, 0) < 1e-6);
}

TEST_CASE("kriging reduces to standard GP regression at unit slope and zero mean") {
  const Index n_train = 5, n_test = 2;
  const Eigen::MatrixXd corr = random_corr(n_train + n_test, 4, 0.25, 114);
  RngStream rng(115);
  Eigen::VectorXd y(n_train);
  for (Index i = 0; i < n_train; ++i) y[i] = rng.normal();
  const double phi1 = 1.7, sigma2 = 0.3;

  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  kriging_conditional(corr, n_train, phi1, 1.0, sigma2, Eigen::VectorXd::Zero(n_train),
                      Eigen::VectorXd::Zero(n_test), y, mean, cov);

  const Eigen::MatrixXd k = phi1 * corr;
  Eigen::MatrixXd kvv = k.topLeftCorner(n_train, n_train);
  kvv.diagonal().array() += sigma2;
  const Eigen::VectorXd direct =
      k.bottomLeftCorner(n_test, n_train) * kvv.llt().solve(y);
  CHECK((mean - direct).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("predictive mean shifts with a common intercept/outcome shift") {
  const Eigen::MatrixXd corr = random_corr(6, 3, 0.3, 116);
  RngStream rng(117);
  Eigen::VectorXd m_train(4), m_test(2), y_train(4);
  for (Index i = 0; i < 4; ++i) {
    m_train[i] = rng.normal();
    y_train[i] = rng.normal();
  }
  for (Index i = 0; i < 2; ++i) m_test[i] = rng.normal();

  Eigen::VectorXd mean0, mean1;
  Eigen::MatrixXd cov0, cov1;
  kriging_conditional(corr, 4, 1.0, 0.8, 0.2, m_train, m_test, y_train, mean0, cov0);
  const double c = 2.9;
  kriging_conditional(corr, 4, 1.0, 0.8, 0.2,
                      Eigen::VectorXd(m_train.array() + c), Eigen::VectorXd(m_test.array() + c),
                      Eigen::VectorXd(y_train.array() + c), mean1, cov1);
  CHECK((mean1.array() - mean0.array() - c).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((cov1 - cov0).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("prediction over a chain: single retained state equals its own kriging") {
  SimDesign d;
  d.scenario = Scenario::Linear;
  d.strategy = 'a';
  d.shape = {3, 3};
  d.n_train = 5;
  d.n_test = 2;
  d.seed = 118;
  SimDataset sim = generate(d);

  ModelConfig cfg;
  cfg.rank = 1;
  cfg.iterations = 2;  // one retained state
  cfg.threads = 1;
  const Chain chain = run_chain(cfg, sim.data, 119);
  REQUIRE(chain.n_retained() == 1);

  const PredictionResult pred = kriging_predict(chain, sim.data);
  REQUIRE(pred.mean.size() == 2);

  // recompute voxel 4 by hand from the same state
  const ModelState& st = chain.states.front().state;
  const Index v = 4;
  const Index h = cfg.patch_size;
  Eigen::MatrixXd pts(7, 9);
  std::vector<double> buf(9);
  for (Index i = 0; i < 7; ++i) {
    extract_patch_into(sim.data.x[static_cast<std::size_t>(i)], v, h, std::span<double>(buf));
    for (Index p = 0; p < 9; ++p) pts(i, p) = buf[static_cast<std::size_t>(p)];
  }
  const Eigen::MatrixXd corr = (-st.gp_scale * pairwise_sqdist(pts).array()).exp().matrix();
  const DenseTensorD gamma = cp_compose(st.intercept);
  const DenseTensorD theta = cp_compose(st.slope);
  Eigen::VectorXd y_train(5);
  for (Index i = 0; i < 5; ++i) y_train[i] = sim.data.y[static_cast<std::size_t>(i)][v];
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  kriging_conditional(corr, 5, st.gp_var, theta[v], st.noise_var,
                      Eigen::VectorXd::Constant(5, gamma[v]), Eigen::VectorXd::Constant(2, gamma[v]),
                      y_train, mean, cov);
  CHECK(pred.mean[0][v] == doctest::Approx(mean[0]).epsilon(1e-10));
  CHECK(pred.mean[1][v] == doctest::Approx(mean[1]).epsilon(1e-10));
  CHECK(pred.variance[0][v] == doctest::Approx(cov(0, 0)).epsilon(1e-8));

  // intervals bracket the mean symmetrically
  CHECK(pred.upper[0][v] - pred.mean[0][v] ==
        doctest::Approx(pred.mean[0][v] - pred.lower[0][v]).epsilon(1e-10));
}

TEST_CASE("fringe voxels are predicted by the linear map and masked voxels stay zero") {
  SimDesign d;
  d.scenario = Scenario::Linear;
  d.strategy = 'a';
  d.shape = {3, 3};
  d.n_train = 8;
  d.n_test = 2;
  d.seed = 120;
  SimDataset sim = generate(d);
  Dataset ds = sim.data;
  // voxel 2: missing for 4 of 10 subjects -> fringe at tau=0.8
  for (Index i = 0; i < 4; ++i) ds.x[static_cast<std::size_t>(i)][2] = 0.0;
  // voxel 7: missing for test subject 9 only -> group voxel, masked for that subject
  ds.x[9][7] = 0.0;
  ds.subject_mask.clear();
  ds.finalize();

  ModelConfig cfg;
  cfg.rank = 1;
  cfg.iterations = 4;
  cfg.threads = 1;
  const Chain chain = run_chain(cfg, ds, 121);
  const PredictionResult pred = kriging_predict(chain, ds);

  // fringe voxel prediction: average over states of gamma + theta * x
  double want = 0;
  for (const auto& snap : chain.states) {
    const DenseTensorD g = cp_compose(snap.state.intercept);
    const DenseTensorD t = cp_compose(snap.state.slope);
    want += g[2] + t[2] * ds.x[8][2];
  }
  want /= static_cast<double>(chain.n_retained());
  CHECK(pred.mean[0][2] == doctest::Approx(want).epsilon(1e-10));

  // out-of-mask voxel for test subject 9 (index 1 in the test set)
  CHECK(pred.mean[1][7] == 0.0);
  CHECK(pred.variance[1][7] == 0.0);
}
