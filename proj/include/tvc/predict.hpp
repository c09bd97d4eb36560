#pragma once

// Held-out prediction: per-voxel Gaussian conditioning of test outcomes on
// training outcomes with the GP atoms integrated out, repeated over retained
// states and mixed into posterior predictive summaries.

#include "tvc/model.hpp"
#include "tvc/sampler.hpp"

#include <vector>

namespace tvc {

struct PredictOptions {
  double interval_level = 0.95;
  int threads = 0;
};

struct PredictionResult {
  std::vector<DenseTensorD> mean;      // per test subject
  std::vector<DenseTensorD> variance;  // mixture variance
  std::vector<DenseTensorD> lower, upper;
  std::uint64_t kriging_fallbacks = 0;  // voxels predicted by the prior mean after a solver failure
};

// Conditional of the test outcomes given training outcomes at one voxel for
// one parameter draw.  `corr` is the patch correlation over train then test
// rows (unit diagonal), `y_train` the observed training outcomes at the
// voxel, and m_* the linear predictor means.  Training rows carry noise,
// test rows are noiseless.
void kriging_conditional(const Eigen::MatrixXd& corr, Index n_train, double phi1, double theta_v,
                         double sigma2, const Eigen::VectorXd& m_train,
                         const Eigen::VectorXd& m_test, const Eigen::VectorXd& y_train,
                         Eigen::VectorXd& mean_out, Eigen::MatrixXd& cov_out);

PredictionResult kriging_predict(const Chain& chain, const Dataset& ds,
                                 const PredictOptions& opts = {});

// Coefficient-estimation score: per-voxel-averaged RPE of the posterior-mean
// identifiable product slope(v) * map(n, v) over training subjects against
// the generating ground truth.  Requires retained atoms.
double effect_estimation_rpe(const Chain& chain, const Dataset& ds,
                             std::span<const DenseTensorD> effect_true);

}  // namespace tvc
