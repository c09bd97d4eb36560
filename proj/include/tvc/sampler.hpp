#pragma once

// The MCMC engine: per-element Gibbs sweeps over CP margins with AR(1)
// priors, generalized-inverse-Gaussian scale updates, Metropolis steps for
// the margin and kernel lengthscales, parallel per-voxel GP-atom draws, and
// the residual-variance update.  Every conditional is exposed individually
// so tests can pit it against an independent oracle.

#include "tvc/model.hpp"
#include "tvc/rng.hpp"
#include "tvc/tensor.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace tvc {

enum class Target { Intercept, Covariate, Slope };

struct AcceptCounter {
  std::uint64_t proposals = 0;
  std::uint64_t accepts = 0;
  double rate() const { return proposals == 0 ? 0.0 : static_cast<double>(accepts) / static_cast<double>(proposals); }
};

struct ChainSnapshot {
  Index iteration = 0;
  ModelState state;
};

struct Chain {
  ModelConfig config;
  Shape shape;
  std::uint64_t seed = 0;

  std::vector<ChainSnapshot> states;

  // Identifiable-product traces: one row per post-burn-in iteration, one
  // column per traced group-mask voxel, value slope(v) * atom(subject, v).
  std::vector<Index> trace_voxels;
  Eigen::MatrixXd traces;

  std::vector<AcceptCounter> alpha_accept;  // flattened over (target, s, d, r)
  AcceptCounter phi2_accept;
  double sigma2_phi2_final = 0;
  std::uint64_t atom_fallbacks = 0;
  std::vector<double> iter_seconds;

  Index n_retained() const { return static_cast<Index>(states.size()); }
};

struct RunOptions {
  Index checkpoint_every = 0;  // 0 = never
  std::string checkpoint_path;
};

// Serializable mid-run snapshot; resuming reproduces the uninterrupted run
// bit for bit because all randomness is keyed by (seed, iteration, site).
struct SamplerCheckpoint {
  ModelConfig config;
  std::uint64_t seed = 0;
  Index next_iteration = 0;
  ModelState state;
  double sigma2_phi2 = 0;
  Chain partial;
};

class GibbsEngine {
 public:
  GibbsEngine(const ModelConfig& cfg, const Dataset& ds, std::uint64_t seed);

  // One full sweep at iteration `iter` (0-based).
  void sweep(Index iter);

  // ---- individual updates (sequenced by sweep(), callable directly in tests)
  void update_margin(Target t, Index s, Index d, Index r, RngStream& rng);
  void update_scale_w(Target t, Index s, Index d, Index r, RngStream& rng);
  void update_rate_lambda(Target t, Index s, Index d, Index r, RngStream& rng);
  void update_tau(Target t, Index s, RngStream& rng);
  bool update_alpha_mh(Target t, Index s, Index d, Index r, RngStream& rng);
  void update_phi1(RngStream& rng);
  bool update_phi2_mh(Index iter, RngStream& rng);
  void update_atoms(Index iter);
  void update_noise(RngStream& rng);

  // ---- conditional/posterior accessors for oracle comparison
  // Normal conditional (mean, var) of margin element j given everything else.
  std::pair<double, double> margin_conditional(Target t, Index s, Index d, Index r, Index j) const;
  GigParams scale_w_posterior(Target t, Index s, Index d, Index r) const;
  std::pair<double, double> rate_lambda_posterior(Target t, Index s, Index d, Index r) const;  // shape, rate
  GigParams tau_posterior(Target t, Index s) const;
  double alpha_log_target(Target t, Index s, Index d, Index r, double alpha) const;
  std::pair<double, double> phi1_posterior() const;  // shape, rate (inverse-gamma)
  double phi2_log_target(double phi2) const;         // marginal GP log-likelihood of the atoms
  void atom_posterior(Index voxel, Eigen::VectorXd& mean, Eigen::MatrixXd& cov) const;
  std::pair<double, double> noise_posterior() const;  // shape, rate (inverse-gamma)

  ModelState& state() { return state_; }
  const ModelState& state() const { return state_; }
  const MaskSet& masks() const { return masks_; }
  const Dataset& dataset() const { return *ds_; }
  const ModelConfig& config() const { return cfg_; }
  double sigma2_phi2() const { return sigma2_phi2_; }
  void set_sigma2_phi2(double v) { sigma2_phi2_ = v; }

  // Value of the nonlinear map for training subject t at voxel v: the GP atom
  // inside the group mask, the input itself on the fringe.
  double atom_value(Index t, Index v) const;

  // Rebuild the residual tensors from the current state (also used to bound
  // incremental drift).
  void refresh_residual();

  // Residual for training subject t (training order), current state.
  const DenseTensorD& residual(Index t) const { return resid_[static_cast<std::size_t>(t)]; }

  void restore(const ModelState& st, double sigma2_phi2);

  std::vector<AcceptCounter>& alpha_accept() { return alpha_accept_; }
  AcceptCounter& phi2_accept() { return phi2_accept_; }
  std::uint64_t atom_fallbacks() const { return atom_fallbacks_; }
  Index alpha_counter_index(Target t, Index s, Index d, Index r) const;

 private:
  struct MarginStats;  // likelihood statistics for one margin sweep

  const CPFactorD& factor(Target t, Index s) const;
  CPFactorD& factor(Target t, Index s);
  const MarginHypers& hypers(Target t, Index s) const;
  MarginHypers& hypers(Target t, Index s);
  double tau_of(Target t, Index s) const;
  double weight(Target t, Index s, Index trainpos, Index voxel) const;
  void build_rank_profile(Target t, Index s, Index d, Index r, std::vector<double>& g) const;
  void add_rank_term(Target t, Index s, Index d, Index r, const std::vector<double>& g, double sign);
  MarginStats margin_stats(Target t, Index s, Index d, Index r, const std::vector<double>& g) const;
  void refresh_kernel_cache();
  double gp_loglik(double phi2, std::vector<Eigen::MatrixXd>& corr_out,
                   std::vector<Eigen::MatrixXd>& chol_out, std::vector<double>& logdet_out,
                   std::vector<double>& quad_out, std::vector<double>& jitter_out) const;

  ModelConfig cfg_;
  const Dataset* ds_ = nullptr;
  MaskSet masks_;
  ModelState state_;
  std::uint64_t seed_ = 0;

  Index dims_ = 0;
  Index n_train_ = 0;
  std::vector<std::vector<Index>> coord_;      // per mode: voxel -> coordinate
  std::vector<DenseTensorD> resid_;            // per training subject
  std::vector<const std::uint8_t*> mask_ptr_;  // per training subject (always set)

  // per group voxel caches
  std::vector<Eigen::MatrixXd> sqdist_;        // training patch squared distances
  std::vector<Eigen::MatrixXd> corr_;          // current patch correlation (no jitter)
  std::vector<Eigen::MatrixXd> chol_corr_;     // lower Cholesky of current correlation
  std::vector<double> chol_jitter_;            // jitter applied to the factor
  std::vector<double> logdet_half_;            // sum log diag of the factor
  std::vector<double> quad_;                   // atom quadratic forms at current kernel
  std::vector<std::vector<Index>> obs_subjects_;  // training positions with voxel in-mask

  double sigma2_phi2_ = 0.25;
  std::vector<AcceptCounter> alpha_accept_;
  AcceptCounter phi2_accept_;
  std::uint64_t atom_fallbacks_ = 0;
};

Chain run_chain(const ModelConfig& cfg, const Dataset& ds, std::uint64_t seed,
                const RunOptions& opts = {});

// Continue a checkpointed run to completion.
Chain resume_chain(const SamplerCheckpoint& ckpt, const Dataset& ds, const RunOptions& opts = {});

}  // namespace tvc
