#pragma once

// Model configuration, parameter state, margin prior covariances, GP kernel
// assembly and the group/subject mask machinery for sparse inputs.

#include "tvc/rng.hpp"
#include "tvc/tensor.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace tvc {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  Index rank = 1;           // shared CP rank across intercept, slope and covariate tensors
  Index patch_size = 3;     // odd patch edge h

  // hyperpriors
  double a_tau = 1.0, b_tau = 1.0;
  double a_lambda = 1.0, b_lambda = 1.0;
  double a_alpha = 1.0, b_alpha = 1.0;
  double a_phi1 = 1.0, b_phi1 = 1.0;
  double a_e = 0.01, b_e = 0.01;

  // chain control
  Index iterations = 10000;
  double burnin_fraction = 0.5;
  Index thinning = 1;

  // Metropolis-Hastings proposals: margin lengthscale proposals use a fixed
  // log-normal variance; the GP lengthscale proposal starts at sigma2_phi2
  // and is tuned during burn-in only.
  double sigma2_alpha = 0.25;
  double sigma2_phi2 = 0.25;

  double mask_threshold = 0.8;  // group-mask fraction tau in (0,1]
  Index covariate_count = 0;    // S

  int threads = 0;              // 0 = hardware concurrency
  Index trace_subject = 0;      // training subject whose slope*atom product is traced
  Index max_trace_voxels = 1024;
  bool retain_atoms = true;

  Index burnin_iterations() const {
    return static_cast<Index>(static_cast<double>(iterations) * burnin_fraction);
  }

  void validate() const;
};

// Elementwise scale w, lengthscale alpha and rate lambda for every (mode,
// rank) margin of one coefficient tensor; all D x R.
struct MarginHypers {
  Eigen::MatrixXd w, alpha, lambda;

  MarginHypers() = default;
  MarginHypers(Index modes, Index rank)
      : w(Eigen::MatrixXd::Ones(modes, rank)),
        alpha(Eigen::MatrixXd::Ones(modes, rank)),
        lambda(Eigen::MatrixXd::Ones(modes, rank)) {}
};

struct ModelState {
  CPFactorD intercept;                // Γ margins
  CPFactorD slope;                    // Θ margins
  std::vector<CPFactorD> covariate;   // D_s margins, s = 0..S-1

  MarginHypers intercept_hyp, slope_hyp;
  std::vector<MarginHypers> covariate_hyp;

  double tau_intercept = 1.0, tau_slope = 1.0;
  std::vector<double> tau_covariate;

  double gp_var = 1.0;     // kernel variance
  double gp_scale = 1.0;   // kernel inverse-lengthscale
  double noise_var = 1.0;  // residual variance

  // GP atoms: n_train x |group mask|; column k holds the latent values at the
  // k-th group-mask voxel across training subjects.  Fringe voxels carry the
  // fixed linear map and are not stored.
  Eigen::MatrixXd atoms;
};

struct Dataset {
  Shape shape;
  std::vector<DenseTensorD> x, y;                       // per subject
  Eigen::MatrixXd z;                                    // N x S, S may be 0
  std::vector<DenseTensor<std::uint8_t>> subject_mask;  // per subject; filled by finalize()
  std::vector<Index> train_idx, test_idx;

  Index n_subjects() const { return static_cast<Index>(x.size()); }
  Index n_train() const { return static_cast<Index>(train_idx.size()); }
  Index n_test() const { return static_cast<Index>(test_idx.size()); }
  Index n_voxels() const { return shape_size(shape); }
  Index n_covariates() const { return z.cols(); }

  bool in_mask(Index subject, Index voxel) const {
    return subject_mask[static_cast<std::size_t>(subject)][voxel] != 0;
  }

  // Derives missing subject masks from the zero pattern of x, zeroes the
  // response outside each subject mask, and validates invariants.
  void finalize();
  void validate() const;
};

struct MaskSet {
  DenseTensor<std::uint8_t> group;   // group-mask indicator over voxels
  std::vector<Index> group_voxels;   // ascending flat offsets with group == 1
  std::vector<Index> fringe_voxels;  // union of subject masks minus the group mask
  std::vector<Index> voxel_slot;     // voxel -> column in ModelState::atoms, -1 outside

  Index n_group() const { return static_cast<Index>(group_voxels.size()); }
  bool empty() const { return group_voxels.empty(); }
};

// p x p covariance with entries w * exp(-alpha |k1-k2|); positive definite
// for all alpha > 0.
Eigen::MatrixXd ar1_cov(double w, double alpha, Index p);

// Quadratic form x' (w Lambda(alpha))^{-1} x evaluated through the closed
// tridiagonal inverse of the exponential correlation matrix.
double ar1_quadratic_form(const Eigen::VectorXd& x, double w, double alpha);

// log det of w * Lambda(alpha), same closed form.
double ar1_log_det(Index p, double w, double alpha);

// Pairwise squared Euclidean distances between the rows of `points`,
// with an exactly zero diagonal.
Eigen::MatrixXd pairwise_sqdist(const Eigen::MatrixXd& points);

// K(i,j) = phi1 * exp(-phi2 * sqdist(i,j)); diagonal exactly phi1.
Eigen::MatrixXd kernel_from_sqdist(const Eigen::MatrixXd& sqdist, double phi1, double phi2);

// Kernel matrix for one voxel: rows of `patches` are the per-subject patch
// vectors at that voxel.
Eigen::MatrixXd gp_kernel_matrix(const Eigen::MatrixXd& patches, double phi1, double phi2);

// Group mask: voxels with nonzero input for at least a tau fraction of
// subjects.  An empty group mask degenerates the model to the linear fringe
// map and is reported, not rejected.
MaskSet build_group_mask(const Dataset& ds, double tau_mask);

// Weakly informative starting point: margins ~ N(0, 0.1^2), unit scales, and
// atoms at the center input value.
ModelState init_state(const ModelConfig& cfg, const Dataset& ds, const MaskSet& masks,
                      RngStream& rng);

}  // namespace tvc
