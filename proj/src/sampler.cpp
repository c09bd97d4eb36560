#include "tvc/sampler.hpp"

#include "tvc/io.hpp"
#include "tvc/parallel.hpp"

#include <chrono>
#include <cmath>
#include <iostream>
#include <limits>

namespace tvc {

namespace {

// substream kinds
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kSweepStream = 2;
constexpr std::uint64_t kAtomStream = 3;

constexpr double kLogTwoPi = 1.8378770664093453;

double cp_value_at(const CPFactorD& f, const std::vector<std::vector<Index>>& coord, Index v) {
  double acc = 0;
  for (Index r = 0; r < f.rank(); ++r) {
    double term = 1;
    for (Index d = 0; d < f.order(); ++d)
      term *= f.mode(d)(coord[static_cast<std::size_t>(d)][static_cast<std::size_t>(v)], r);
    acc += term;
  }
  return acc;
}

}  // namespace

struct GibbsEngine::MarginStats {
  // mm[j] = sum of squared weighted profiles over the slice, nnr[j] = the
  // residual cross term with the current margin element removed.
  std::vector<double> mm, nnr;
};

GibbsEngine::GibbsEngine(const ModelConfig& cfg, const Dataset& ds, std::uint64_t seed)
    : cfg_(cfg), ds_(&ds), seed_(seed) {
  cfg_.covariate_count = ds.n_covariates();
  cfg_.validate();
  ds.validate();

  dims_ = static_cast<Index>(ds.shape.size());
  n_train_ = ds.n_train();
  if (n_train_ == 0) throw DataError("GibbsEngine: empty training split");

  masks_ = build_group_mask(ds, cfg_.mask_threshold);

  const Index v_total = ds.n_voxels();
  coord_.resize(static_cast<std::size_t>(dims_));
  for (Index d = 0; d < dims_; ++d) {
    coord_[static_cast<std::size_t>(d)].resize(static_cast<std::size_t>(v_total));
    for (Index v = 0; v < v_total; ++v)
      coord_[static_cast<std::size_t>(d)][static_cast<std::size_t>(v)] = mode_coordinate(v, ds.shape, d);
  }

  mask_ptr_.resize(static_cast<std::size_t>(n_train_));
  for (Index t = 0; t < n_train_; ++t)
    mask_ptr_[static_cast<std::size_t>(t)] =
        ds.subject_mask[static_cast<std::size_t>(ds.train_idx[static_cast<std::size_t>(t)])].data();

  // patch squared-distance cache and per-voxel observed-subject lists
  const Index n_group = masks_.n_group();
  sqdist_.resize(static_cast<std::size_t>(n_group));
  obs_subjects_.resize(static_cast<std::size_t>(n_group));
  Index patch_len = 1;
  for (Index d = 0; d < dims_; ++d) patch_len *= cfg_.patch_size;
  parallel_for(n_group, cfg_.threads, [&](Index k) {
    const Index v = masks_.group_voxels[static_cast<std::size_t>(k)];
    Eigen::MatrixXd patches(n_train_, patch_len);
    std::vector<double> buf(static_cast<std::size_t>(patch_len));
    for (Index t = 0; t < n_train_; ++t) {
      const auto& xn = ds.x[static_cast<std::size_t>(ds.train_idx[static_cast<std::size_t>(t)])];
      extract_patch_into(xn, v, cfg_.patch_size, std::span<double>(buf));
      for (Index p = 0; p < patch_len; ++p) patches(t, p) = buf[static_cast<std::size_t>(p)];
    }
    sqdist_[static_cast<std::size_t>(k)] = pairwise_sqdist(patches);
    auto& obs = obs_subjects_[static_cast<std::size_t>(k)];
    for (Index t = 0; t < n_train_; ++t)
      if (mask_ptr_[static_cast<std::size_t>(t)][v]) obs.push_back(t);
  });

  RngStream root(seed_);
  RngStream init_rng = root.substream({kInitStream});
  state_ = init_state(cfg_, ds, masks_, init_rng);
  sigma2_phi2_ = cfg_.sigma2_phi2;

  const Index blocks = (2 + cfg_.covariate_count) * dims_ * cfg_.rank;
  alpha_accept_.assign(static_cast<std::size_t>(blocks), AcceptCounter{});

  refresh_residual();
  refresh_kernel_cache();
}

Index GibbsEngine::alpha_counter_index(Target t, Index s, Index d, Index r) const {
  Index block = 0;
  if (t == Target::Covariate) block = 1 + s;
  else if (t == Target::Slope) block = 1 + cfg_.covariate_count;
  return (block * dims_ + d) * cfg_.rank + r;
}

const CPFactorD& GibbsEngine::factor(Target t, Index s) const {
  switch (t) {
    case Target::Intercept: return state_.intercept;
    case Target::Slope: return state_.slope;
    default: return state_.covariate[static_cast<std::size_t>(s)];
  }
}

CPFactorD& GibbsEngine::factor(Target t, Index s) {
  return const_cast<CPFactorD&>(static_cast<const GibbsEngine*>(this)->factor(t, s));
}

const MarginHypers& GibbsEngine::hypers(Target t, Index s) const {
  switch (t) {
    case Target::Intercept: return state_.intercept_hyp;
    case Target::Slope: return state_.slope_hyp;
    default: return state_.covariate_hyp[static_cast<std::size_t>(s)];
  }
}

MarginHypers& GibbsEngine::hypers(Target t, Index s) {
  return const_cast<MarginHypers&>(static_cast<const GibbsEngine*>(this)->hypers(t, s));
}

double GibbsEngine::tau_of(Target t, Index s) const {
  switch (t) {
    case Target::Intercept: return state_.tau_intercept;
    case Target::Slope: return state_.tau_slope;
    default: return state_.tau_covariate[static_cast<std::size_t>(s)];
  }
}

double GibbsEngine::atom_value(Index t, Index v) const {
  const Index slot = masks_.voxel_slot[static_cast<std::size_t>(v)];
  if (slot >= 0) return state_.atoms(t, slot);
  return ds_->x[static_cast<std::size_t>(ds_->train_idx[static_cast<std::size_t>(t)])][v];
}

double GibbsEngine::weight(Target t, Index s, Index trainpos, Index voxel) const {
  switch (t) {
    case Target::Intercept: return 1.0;
    case Target::Covariate:
      return ds_->z(ds_->train_idx[static_cast<std::size_t>(trainpos)], s);
    default: return atom_value(trainpos, voxel);
  }
}

void GibbsEngine::refresh_residual() {
  const Index v_total = ds_->n_voxels();
  DenseTensorD intercept_full = cp_compose(state_.intercept);
  DenseTensorD slope_full = cp_compose(state_.slope);
  std::vector<DenseTensorD> cov_full;
  for (const auto& f : state_.covariate) cov_full.push_back(cp_compose(f));

  resid_.assign(static_cast<std::size_t>(n_train_), DenseTensorD(ds_->shape));
  for (Index t = 0; t < n_train_; ++t) {
    const Index n = ds_->train_idx[static_cast<std::size_t>(t)];
    const auto& yn = ds_->y[static_cast<std::size_t>(n)];
    auto& e = resid_[static_cast<std::size_t>(t)];
    for (Index v = 0; v < v_total; ++v) {
      double pred = intercept_full[v] + slope_full[v] * atom_value(t, v);
      for (Index s = 0; s < cfg_.covariate_count; ++s) pred += cov_full[static_cast<std::size_t>(s)][v] * ds_->z(n, s);
      e[v] = yn[v] - pred;
    }
  }
}

// g(v) = product of the other-mode margins of rank term r.
void GibbsEngine::build_rank_profile(Target t, Index s, Index d, Index r,
                                     std::vector<double>& g) const {
  const auto& f = factor(t, s);
  const Index v_total = ds_->n_voxels();
  g.assign(static_cast<std::size_t>(v_total), 1.0);
  for (Index dd = 0; dd < dims_; ++dd) {
    if (dd == d) continue;
    const auto& m = f.mode(dd);
    const auto& cc = coord_[static_cast<std::size_t>(dd)];
    for (Index v = 0; v < v_total; ++v) g[static_cast<std::size_t>(v)] *= m(cc[static_cast<std::size_t>(v)], r);
  }
}

GibbsEngine::MarginStats GibbsEngine::margin_stats(Target t, Index s, Index d, Index r,
                                                   const std::vector<double>& g) const {
  const Index pd = ds_->shape[static_cast<std::size_t>(d)];
  const Index v_total = ds_->n_voxels();
  const auto& cd = coord_[static_cast<std::size_t>(d)];
  const auto& margin = factor(t, s).mode(d);
  MarginStats st;
  st.mm.assign(static_cast<std::size_t>(pd), 0.0);
  st.nnr.assign(static_cast<std::size_t>(pd), 0.0);

  for (Index tp = 0; tp < n_train_; ++tp) {
    const std::uint8_t* msk = mask_ptr_[static_cast<std::size_t>(tp)];
    const double* e = resid_[static_cast<std::size_t>(tp)].data();
    if (t == Target::Slope) {
      for (Index v = 0; v < v_total; ++v) {
        if (!msk[v]) continue;
        const double wg = atom_value(tp, v) * g[static_cast<std::size_t>(v)];
        const Index j = cd[static_cast<std::size_t>(v)];
        st.mm[static_cast<std::size_t>(j)] += wg * wg;
        st.nnr[static_cast<std::size_t>(j)] += e[v] * wg;
      }
    } else {
      const double zw = (t == Target::Covariate)
                            ? ds_->z(ds_->train_idx[static_cast<std::size_t>(tp)], s)
                            : 1.0;
      for (Index v = 0; v < v_total; ++v) {
        if (!msk[v]) continue;
        const double wg = zw * g[static_cast<std::size_t>(v)];
        const Index j = cd[static_cast<std::size_t>(v)];
        st.mm[static_cast<std::size_t>(j)] += wg * wg;
        st.nnr[static_cast<std::size_t>(j)] += e[v] * wg;
      }
    }
  }
  // nnr currently includes the rank-r contribution of the margin itself;
  // add it back so nnr matches the residual with this margin element zeroed.
  for (Index j = 0; j < pd; ++j)
    st.nnr[static_cast<std::size_t>(j)] += margin(j, r) * st.mm[static_cast<std::size_t>(j)];
  return st;
}

std::pair<double, double> GibbsEngine::margin_conditional(Target t, Index s, Index d, Index r,
                                                          Index j) const {
  std::vector<double> g;
  build_rank_profile(t, s, d, r, g);
  const MarginStats st = margin_stats(t, s, d, r, g);
  const auto& hyp = hypers(t, s);
  const double tau = tau_of(t, s);
  const double w = hyp.w(d, r);
  const double rho = std::exp(-hyp.alpha(d, r));
  const double sigma2 = state_.noise_var;
  const auto& margin = factor(t, s).mode(d);
  const Index pd = ds_->shape[static_cast<std::size_t>(d)];

  const double m = st.mm[static_cast<std::size_t>(j)] / sigma2;
  const double nn = st.nnr[static_cast<std::size_t>(j)] / sigma2;
  const double tw = tau * w;

  double denom, num;
  if (pd == 1) {
    denom = m * tw + 1.0;
    num = nn * tw;
  } else if (j == 0) {
    denom = m * tw + 1.0;
    num = nn * tw + rho * margin(1, r);
  } else if (j == pd - 1) {
    denom = m * tw + 1.0;
    num = nn * tw + rho * margin(pd - 2, r);
  } else {
    denom = m * tw + 1.0 + rho * rho;
    num = nn * tw + rho * (margin(j - 1, r) + margin(j + 1, r));
  }
  return {num / denom, tw / denom};
}

void GibbsEngine::update_margin(Target t, Index s, Index d, Index r, RngStream& rng) {
  auto& hyp = hypers(t, s);
  const double tau = tau_of(t, s);
  // prior variance underflow guard: resample the elementwise scale
  if (tau * hyp.w(d, r) < 1e-300)
    hyp.w(d, r) = rng.exponential(hyp.lambda(d, r) / 2.0);

  std::vector<double> g;
  build_rank_profile(t, s, d, r, g);
  const MarginStats st = margin_stats(t, s, d, r, g);

  auto& margin = factor(t, s).mode(d);
  const Index pd = ds_->shape[static_cast<std::size_t>(d)];
  const double rho = std::exp(-hyp.alpha(d, r));
  const double sigma2 = state_.noise_var;
  const double tw = tau * hyp.w(d, r);

  Eigen::VectorXd old = margin.col(r);
  for (Index j = 0; j < pd; ++j) {
    const double m = st.mm[static_cast<std::size_t>(j)] / sigma2;
    const double nn = st.nnr[static_cast<std::size_t>(j)] / sigma2;
    double denom, num;
    if (pd == 1) {
      denom = m * tw + 1.0;
      num = nn * tw;
    } else if (j == 0) {
      denom = m * tw + 1.0;
      num = nn * tw + rho * margin(1, r);
    } else if (j == pd - 1) {
      denom = m * tw + 1.0;
      num = nn * tw + rho * margin(pd - 2, r);
    } else {
      denom = m * tw + 1.0 + rho * rho;
      num = nn * tw + rho * (margin(j - 1, r) + margin(j + 1, r));
    }
    const double draw = rng.normal(num / denom, std::sqrt(tw / denom));
    if (!std::isfinite(draw))
      throw NumericalError("margin update produced a non-finite draw (mode " + std::to_string(d) +
                           ", rank " + std::to_string(r) + ", element " + std::to_string(j) + ")");
    margin(j, r) = draw;
  }

  // fold the margin change back into the residuals
  const Index v_total = ds_->n_voxels();
  const auto& cd = coord_[static_cast<std::size_t>(d)];
  for (Index tp = 0; tp < n_train_; ++tp) {
    double* e = resid_[static_cast<std::size_t>(tp)].data();
    if (t == Target::Slope) {
      for (Index v = 0; v < v_total; ++v) {
        const Index j = cd[static_cast<std::size_t>(v)];
        e[v] += atom_value(tp, v) * g[static_cast<std::size_t>(v)] * (old[j] - margin(j, r));
      }
    } else {
      const double zw = (t == Target::Covariate)
                            ? ds_->z(ds_->train_idx[static_cast<std::size_t>(tp)], s)
                            : 1.0;
      for (Index v = 0; v < v_total; ++v) {
        const Index j = cd[static_cast<std::size_t>(v)];
        e[v] += zw * g[static_cast<std::size_t>(v)] * (old[j] - margin(j, r));
      }
    }
  }
}

GigParams GibbsEngine::scale_w_posterior(Target t, Index s, Index d, Index r) const {
  const auto& hyp = hypers(t, s);
  const auto x = factor(t, s).mode(d).col(r);
  const Index pd = x.size();
  const double rho = std::exp(-hyp.alpha(d, r));
  const double tau = tau_of(t, s);

  double bracket = x[0] * x[0] + x[pd - 1] * x[pd - 1];
  for (Index j = 1; j + 1 < pd; ++j) bracket += (1.0 + rho * rho) * x[j] * x[j];
  double cross = 0;
  for (Index j = 0; j + 1 < pd; ++j) cross += x[j] * x[j + 1];
  bracket -= 2.0 * rho * cross;
  const double c = bracket / tau;

  GigParams p;
  p.mu = 1.0 - static_cast<double>(pd) / 2.0;
  p.chi = (pd == 1) ? x[0] * x[0] / tau : c / (1.0 - rho * rho);
  p.psi = hyp.lambda(d, r);
  if (p.chi <= 0) {
    std::cerr << "[tvc] warning: nonpositive gIG chi statistic clamped\n";
    p.chi = 1e-12;
  }
  return p;
}

void GibbsEngine::update_scale_w(Target t, Index s, Index d, Index r, RngStream& rng) {
  hypers(t, s).w(d, r) = sample_gig(scale_w_posterior(t, s, d, r), rng);
}

std::pair<double, double> GibbsEngine::rate_lambda_posterior(Target t, Index s, Index d, Index r) const {
  const double pd = static_cast<double>(ds_->shape[static_cast<std::size_t>(d)]);
  return {cfg_.a_lambda + pd, cfg_.b_lambda + pd * hypers(t, s).w(d, r) / 2.0};
}

void GibbsEngine::update_rate_lambda(Target t, Index s, Index d, Index r, RngStream& rng) {
  const auto [shape, rate] = rate_lambda_posterior(t, s, d, r);
  hypers(t, s).lambda(d, r) = rng.gamma(shape, rate);
}

GigParams GibbsEngine::tau_posterior(Target t, Index s) const {
  const auto& f = factor(t, s);
  const auto& hyp = hypers(t, s);
  double chi = 0;
  double p_sum = 0;
  for (Index d = 0; d < dims_; ++d) {
    p_sum += static_cast<double>(ds_->shape[static_cast<std::size_t>(d)]);
    for (Index r = 0; r < cfg_.rank; ++r)
      chi += ar1_quadratic_form(f.mode(d).col(r), hyp.w(d, r), hyp.alpha(d, r));
  }
  GigParams p;
  p.mu = cfg_.a_tau - static_cast<double>(cfg_.rank) * p_sum / 2.0;
  p.chi = chi;
  p.psi = 2.0 * cfg_.b_tau;
  return p;
}

void GibbsEngine::update_tau(Target t, Index s, RngStream& rng) {
  const double draw = sample_gig(tau_posterior(t, s), rng);
  switch (t) {
    case Target::Intercept: state_.tau_intercept = draw; break;
    case Target::Slope: state_.tau_slope = draw; break;
    default: state_.tau_covariate[static_cast<std::size_t>(s)] = draw; break;
  }
}

double GibbsEngine::alpha_log_target(Target t, Index s, Index d, Index r, double alpha) const {
  if (!(alpha > 0)) return -std::numeric_limits<double>::infinity();
  const auto x = factor(t, s).mode(d).col(r);
  const Index pd = x.size();
  const double rho2 = std::exp(-2.0 * alpha);
  const double quad = ar1_quadratic_form(x, hypers(t, s).w(d, r), alpha);
  return (cfg_.a_alpha - 1.0) * std::log(alpha) -
         0.5 * static_cast<double>(pd - 1) * std::log1p(-rho2) -
         0.5 * (quad + 2.0 * cfg_.b_alpha * alpha);
}

bool GibbsEngine::update_alpha_mh(Target t, Index s, Index d, Index r, RngStream& rng) {
  auto& hyp = hypers(t, s);
  const double cur = hyp.alpha(d, r);
  const double prop = rng.log_normal(cur, std::sqrt(cfg_.sigma2_alpha));
  const double log_acc = alpha_log_target(t, s, d, r, prop) - alpha_log_target(t, s, d, r, cur) +
                         std::log(prop / cur);
  auto& counter = alpha_accept_[static_cast<std::size_t>(alpha_counter_index(t, s, d, r))];
  ++counter.proposals;
  const bool accept = std::log(rng.uniform_pos()) < log_acc;
  if (accept) {
    hyp.alpha(d, r) = prop;
    ++counter.accepts;
  }
  return accept;
}

void GibbsEngine::refresh_kernel_cache() {
  const Index n_group = masks_.n_group();
  corr_.resize(static_cast<std::size_t>(n_group));
  chol_corr_.resize(static_cast<std::size_t>(n_group));
  chol_jitter_.assign(static_cast<std::size_t>(n_group), 0.0);
  logdet_half_.assign(static_cast<std::size_t>(n_group), 0.0);
  quad_.assign(static_cast<std::size_t>(n_group), 0.0);
  parallel_for(n_group, cfg_.threads, [&](Index k) {
    Eigen::MatrixXd corr =
        (-state_.gp_scale * sqdist_[static_cast<std::size_t>(k)].array()).exp().matrix();
    JitteredChol ch = llt_with_jitter(corr);
    logdet_half_[static_cast<std::size_t>(k)] = ch.factor.diagonal().array().log().sum();
    chol_jitter_[static_cast<std::size_t>(k)] = ch.jitter;
    chol_corr_[static_cast<std::size_t>(k)] = std::move(ch.factor);
    corr_[static_cast<std::size_t>(k)] = std::move(corr);
  });
}

std::pair<double, double> GibbsEngine::phi1_posterior() const {
  const Index n_group = masks_.n_group();
  double quad_sum = 0;
  for (Index k = 0; k < n_group; ++k) {
    const Eigen::VectorXd y = chol_corr_[static_cast<std::size_t>(k)]
                                  .triangularView<Eigen::Lower>()
                                  .solve(state_.atoms.col(k));
    quad_sum += y.squaredNorm();
  }
  const double shape = cfg_.a_phi1 + static_cast<double>(n_train_ * n_group) / 2.0;
  const double rate = cfg_.b_phi1 + 0.5 * quad_sum;
  return {shape, rate};
}

void GibbsEngine::update_phi1(RngStream& rng) {
  const Index n_group = masks_.n_group();
  parallel_for(n_group, cfg_.threads, [&](Index k) {
    const Eigen::VectorXd y = chol_corr_[static_cast<std::size_t>(k)]
                                  .triangularView<Eigen::Lower>()
                                  .solve(state_.atoms.col(k));
    quad_[static_cast<std::size_t>(k)] = y.squaredNorm();
  });
  double quad_sum = 0;
  for (Index k = 0; k < n_group; ++k) quad_sum += quad_[static_cast<std::size_t>(k)];
  const double shape = cfg_.a_phi1 + static_cast<double>(n_train_ * n_group) / 2.0;
  state_.gp_var = rng.inv_gamma(shape, cfg_.b_phi1 + 0.5 * quad_sum);
}

double GibbsEngine::gp_loglik(double phi2, std::vector<Eigen::MatrixXd>& corr_out,
                              std::vector<Eigen::MatrixXd>& chol_out, std::vector<double>& logdet_out,
                              std::vector<double>& quad_out, std::vector<double>& jitter_out) const {
  const Index n_group = masks_.n_group();
  corr_out.resize(static_cast<std::size_t>(n_group));
  chol_out.resize(static_cast<std::size_t>(n_group));
  logdet_out.assign(static_cast<std::size_t>(n_group), 0.0);
  quad_out.assign(static_cast<std::size_t>(n_group), 0.0);
  jitter_out.assign(static_cast<std::size_t>(n_group), 0.0);
  parallel_for(n_group, cfg_.threads, [&](Index k) {
    Eigen::MatrixXd corr =
        (-phi2 * sqdist_[static_cast<std::size_t>(k)].array()).exp().matrix();
    JitteredChol ch = llt_with_jitter(corr);
    logdet_out[static_cast<std::size_t>(k)] = ch.factor.diagonal().array().log().sum();
    jitter_out[static_cast<std::size_t>(k)] = ch.jitter;
    const Eigen::VectorXd y =
        ch.factor.triangularView<Eigen::Lower>().solve(state_.atoms.col(k));
    quad_out[static_cast<std::size_t>(k)] = y.squaredNorm();
    chol_out[static_cast<std::size_t>(k)] = std::move(ch.factor);
    corr_out[static_cast<std::size_t>(k)] = std::move(corr);
  });
  double ll = 0;
  const double phi1 = state_.gp_var;
  for (Index k = 0; k < n_group; ++k)
    ll += -0.5 * (quad_out[static_cast<std::size_t>(k)] / phi1 +
                  static_cast<double>(n_train_) * (std::log(phi1) + kLogTwoPi)) -
          logdet_out[static_cast<std::size_t>(k)];
  return ll;
}

double GibbsEngine::phi2_log_target(double phi2) const {
  if (!(phi2 > 0)) return -std::numeric_limits<double>::infinity();
  std::vector<Eigen::MatrixXd> corr_tmp, chol_tmp;
  std::vector<double> logdet_tmp, quad_tmp, jitter_tmp;
  return gp_loglik(phi2, corr_tmp, chol_tmp, logdet_tmp, quad_tmp, jitter_tmp);
}

bool GibbsEngine::update_phi2_mh(Index iter, RngStream& rng) {
  const Index n_group = masks_.n_group();
  const double phi1 = state_.gp_var;

  // refresh the atom quadratic forms against the cached factorizations
  parallel_for(n_group, cfg_.threads, [&](Index k) {
    const Eigen::VectorXd y = chol_corr_[static_cast<std::size_t>(k)]
                                  .triangularView<Eigen::Lower>()
                                  .solve(state_.atoms.col(k));
    quad_[static_cast<std::size_t>(k)] = y.squaredNorm();
  });

  double ll_cur = 0;
  for (Index k = 0; k < n_group; ++k)
    ll_cur += -0.5 * (quad_[static_cast<std::size_t>(k)] / phi1 +
                      static_cast<double>(n_train_) * (std::log(phi1) + kLogTwoPi)) -
              logdet_half_[static_cast<std::size_t>(k)];

  const double cur = state_.gp_scale;
  const double prop = rng.log_normal(cur, std::sqrt(sigma2_phi2_));

  std::vector<Eigen::MatrixXd> corr_prop, chol_prop;
  std::vector<double> logdet_prop, quad_prop, jitter_prop;
  const double ll_prop = gp_loglik(prop, corr_prop, chol_prop, logdet_prop, quad_prop, jitter_prop);

  const double log_acc = ll_prop - ll_cur + std::log(prop / cur);
  ++phi2_accept_.proposals;
  const bool accept = std::log(rng.uniform_pos()) < log_acc;
  if (accept) {
    state_.gp_scale = prop;
    corr_.swap(corr_prop);
    chol_corr_.swap(chol_prop);
    logdet_half_.swap(logdet_prop);
    quad_.swap(quad_prop);
    chol_jitter_.swap(jitter_prop);
    ++phi2_accept_.accepts;
  }

  // diminishing adaptation toward 0.44 acceptance, burn-in only
  if (iter < cfg_.burnin_iterations()) {
    const double step = 1.0 / std::pow(static_cast<double>(iter + 1), 0.6);
    const double a = accept ? 1.0 : 0.0;
    sigma2_phi2_ = std::exp(std::log(sigma2_phi2_) + step * (a - 0.44));
    sigma2_phi2_ = std::min(std::max(sigma2_phi2_, 1e-6), 1e4);
  }
  return accept;
}

void GibbsEngine::atom_posterior(Index voxel, Eigen::VectorXd& mean, Eigen::MatrixXd& cov) const {
  const Index slot = masks_.voxel_slot[static_cast<std::size_t>(voxel)];
  if (slot < 0) throw std::invalid_argument("atom_posterior: voxel outside the group mask");
  const auto& obs = obs_subjects_[static_cast<std::size_t>(slot)];
  const double theta_v = cp_value_at(state_.slope, coord_, voxel);
  const double sigma2 = state_.noise_var;

  Eigen::MatrixXd kern = state_.gp_var * corr_[static_cast<std::size_t>(slot)];
  kern.diagonal().array() += state_.gp_var * chol_jitter_[static_cast<std::size_t>(slot)];

  const Index m = static_cast<Index>(obs.size());
  if (m == 0) {
    mean = Eigen::VectorXd::Zero(n_train_);
    cov = kern;
    return;
  }
  Eigen::VectorXd resid_obs(m);
  Eigen::MatrixXd k_obs(n_train_, m);
  for (Index i = 0; i < m; ++i) {
    const Index tp = obs[static_cast<std::size_t>(i)];
    resid_obs[i] = resid_[static_cast<std::size_t>(tp)][voxel] + theta_v * state_.atoms(tp, slot);
    k_obs.col(i) = kern.col(tp);
  }
  Eigen::MatrixXd b(m, m);
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < m; ++j) b(i, j) = theta_v * theta_v * kern(obs[static_cast<std::size_t>(i)], obs[static_cast<std::size_t>(j)]);
  b.diagonal().array() += sigma2;
  Eigen::LLT<Eigen::MatrixXd> llt(b);
  if (llt.info() != Eigen::Success) throw NumericalError("atom_posterior: observation matrix not PD");
  mean = theta_v * (k_obs * llt.solve(resid_obs));
  cov = kern - theta_v * theta_v * (k_obs * llt.solve(k_obs.transpose()));
}

void GibbsEngine::update_atoms(Index iter) {
  const Index n_group = masks_.n_group();
  const RngStream root(seed_);
  std::vector<std::uint64_t> fallback_slots(static_cast<std::size_t>(n_group), 0);

  parallel_for(n_group, cfg_.threads, [&](Index k) {
    RngStream rng = root.substream({kAtomStream, static_cast<std::uint64_t>(iter),
                                    static_cast<std::uint64_t>(k)});
    const Index v = masks_.group_voxels[static_cast<std::size_t>(k)];
    const double theta_v = cp_value_at(state_.slope, coord_, v);
    const double sigma2 = state_.noise_var;
    const double phi1 = state_.gp_var;
    const auto& obs = obs_subjects_[static_cast<std::size_t>(k)];
    const Index m = static_cast<Index>(obs.size());

    // prior draw via the cached correlation factor: f0 ~ N(0, phi1 * C)
    Eigen::VectorXd z(n_train_);
    for (Index i = 0; i < n_train_; ++i) z[i] = rng.normal();
    Eigen::VectorXd f0 = std::sqrt(phi1) * (chol_corr_[static_cast<std::size_t>(k)] * z);

    Eigen::VectorXd draw;
    if (m == 0) {
      draw = f0;
    } else {
      Eigen::VectorXd eps(m), resid_obs(m);
      for (Index i = 0; i < m; ++i) eps[i] = rng.normal(0.0, std::sqrt(sigma2));

      Eigen::MatrixXd kern = phi1 * corr_[static_cast<std::size_t>(k)];
      kern.diagonal().array() += phi1 * chol_jitter_[static_cast<std::size_t>(k)];

      Eigen::MatrixXd b(m, m);
      Eigen::MatrixXd k_obs(n_train_, m);
      for (Index i = 0; i < m; ++i) {
        const Index tp = obs[static_cast<std::size_t>(i)];
        resid_obs[i] = resid_[static_cast<std::size_t>(tp)][v] + theta_v * state_.atoms(tp, k);
        k_obs.col(i) = kern.col(tp);
        for (Index j = 0; j < m; ++j)
          b(i, j) = theta_v * theta_v * kern(obs[static_cast<std::size_t>(i)], obs[static_cast<std::size_t>(j)]);
      }
      b.diagonal().array() += sigma2;

      Eigen::LLT<Eigen::MatrixXd> llt(b);
      if (llt.info() != Eigen::Success) {
        fallback_slots[static_cast<std::size_t>(k)] = 1;
        return;  // sticky fallback: atom keeps its previous value
      }
      Eigen::VectorXd innovation(m);
      for (Index i = 0; i < m; ++i) innovation[i] = resid_obs[i] - theta_v * f0[obs[static_cast<std::size_t>(i)]] - eps[i];
      draw = f0 + theta_v * (k_obs * llt.solve(innovation));
    }

    // fold the atom change into the residuals (disjoint voxel per worker)
    for (Index tp = 0; tp < n_train_; ++tp) {
      resid_[static_cast<std::size_t>(tp)][v] += theta_v * (state_.atoms(tp, k) - draw[tp]);
      state_.atoms(tp, k) = draw[tp];
    }
  });

  for (Index k = 0; k < n_group; ++k) atom_fallbacks_ += fallback_slots[static_cast<std::size_t>(k)];
}

std::pair<double, double> GibbsEngine::noise_posterior() const {
  double ss = 0;
  double count = 0;
  for (Index tp = 0; tp < n_train_; ++tp) {
    const std::uint8_t* msk = mask_ptr_[static_cast<std::size_t>(tp)];
    const double* e = resid_[static_cast<std::size_t>(tp)].data();
    for (Index v = 0; v < ds_->n_voxels(); ++v) {
      if (!msk[v]) continue;
      ss += e[v] * e[v];
      count += 1.0;
    }
  }
  return {cfg_.a_e + count / 2.0, cfg_.b_e + 0.5 * ss};
}

void GibbsEngine::update_noise(RngStream& rng) {
  const auto [shape, rate] = noise_posterior();
  state_.noise_var = rng.inv_gamma(shape, rate);
}

void GibbsEngine::sweep(Index iter) {
  RngStream root(seed_);
  RngStream rng = root.substream({kSweepStream, static_cast<std::uint64_t>(iter)});

  auto sweep_target = [&](Target t, Index s) {
    for (Index d = 0; d < dims_; ++d)
      for (Index r = 0; r < cfg_.rank; ++r) update_margin(t, s, d, r, rng);
    for (Index d = 0; d < dims_; ++d)
      for (Index r = 0; r < cfg_.rank; ++r) update_scale_w(t, s, d, r, rng);
    for (Index d = 0; d < dims_; ++d)
      for (Index r = 0; r < cfg_.rank; ++r) update_rate_lambda(t, s, d, r, rng);
    update_tau(t, s, rng);
    for (Index d = 0; d < dims_; ++d)
      for (Index r = 0; r < cfg_.rank; ++r) update_alpha_mh(t, s, d, r, rng);
  };

  try {
    // recompute the residual from the state: iterations then depend only on
    // (state, data, iteration), which makes checkpoint resume exact and
    // bounds incremental drift
    refresh_residual();

    sweep_target(Target::Intercept, 0);
    for (Index s = 0; s < cfg_.covariate_count; ++s) sweep_target(Target::Covariate, s);
    sweep_target(Target::Slope, 0);

    if (!masks_.empty()) {
      update_phi1(rng);
      update_phi2_mh(iter, rng);
      update_atoms(iter);
    }
    update_noise(rng);
  } catch (const NumericalError& err) {
    throw NumericalError("iteration " + std::to_string(iter) + ": " + err.what());
  }
}

void GibbsEngine::restore(const ModelState& st, double sigma2_phi2) {
  state_ = st;
  sigma2_phi2_ = sigma2_phi2;
  refresh_residual();
  refresh_kernel_cache();
}

namespace {

Chain make_chain_shell(const ModelConfig& cfg, const Dataset& ds, std::uint64_t seed,
                       const MaskSet& masks) {
  Chain chain;
  chain.config = cfg;
  chain.config.covariate_count = ds.n_covariates();
  chain.shape = ds.shape;
  chain.seed = seed;

  const Index n_group = masks.n_group();
  Index n_trace = std::min<Index>(n_group, cfg.max_trace_voxels);
  if (n_trace > 0) {
    const Index stride = (n_group + n_trace - 1) / n_trace;
    for (Index k = 0; k < n_group; k += stride)
      chain.trace_voxels.push_back(masks.group_voxels[static_cast<std::size_t>(k)]);
  }
  const Index kept = cfg.iterations - cfg.burnin_iterations();
  chain.traces.resize(kept, static_cast<Index>(chain.trace_voxels.size()));
  return chain;
}

void record_iteration(Chain& chain, GibbsEngine& engine, Index iter, double seconds) {
  const ModelConfig& cfg = chain.config;
  const Index burnin = cfg.burnin_iterations();
  chain.iter_seconds.push_back(seconds);
  if (iter < burnin) return;

  const Index row = iter - burnin;
  const ModelState& st = engine.state();
  const MaskSet& masks = engine.masks();
  const Index tsub = std::min<Index>(cfg.trace_subject, engine.dataset().n_train() - 1);
  for (std::size_t c = 0; c < chain.trace_voxels.size(); ++c) {
    const Index v = chain.trace_voxels[c];
    const Index slot = masks.voxel_slot[static_cast<std::size_t>(v)];
    double theta_v = 0;
    {
      // slope value at v from the margins
      double acc = 0;
      for (Index r = 0; r < st.slope.rank(); ++r) {
        double term = 1;
        for (Index d = 0; d < st.slope.order(); ++d)
          term *= st.slope.mode(d)(mode_coordinate(v, chain.shape, d), r);
        acc += term;
      }
      theta_v = acc;
    }
    chain.traces(row, static_cast<Index>(c)) = theta_v * st.atoms(tsub, slot);
  }

  if (row % cfg.thinning == 0) {
    ChainSnapshot snap;
    snap.iteration = iter;
    snap.state = st;
    if (!cfg.retain_atoms) snap.state.atoms.resize(0, 0);
    chain.states.push_back(std::move(snap));
  }
}

void finish_chain(Chain& chain, GibbsEngine& engine) {
  chain.alpha_accept = engine.alpha_accept();
  chain.phi2_accept = engine.phi2_accept();
  chain.sigma2_phi2_final = engine.sigma2_phi2();
  chain.atom_fallbacks = engine.atom_fallbacks();
}

Chain run_loop(GibbsEngine& engine, Chain chain, Index first_iter, const RunOptions& opts) {
  const ModelConfig& cfg = chain.config;
  for (Index iter = first_iter; iter < cfg.iterations; ++iter) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      engine.sweep(iter);
    } catch (const std::exception& err) {
      if (!opts.checkpoint_path.empty()) {
        finish_chain(chain, engine);
        SamplerCheckpoint ckpt{cfg, chain.seed, iter, engine.state(), engine.sigma2_phi2(), chain};
        save_checkpoint(opts.checkpoint_path, ckpt);
        throw NumericalError(std::string(err.what()) + " (checkpoint written to " +
                             opts.checkpoint_path + ")");
      }
      throw;
    }
    const auto t1 = std::chrono::steady_clock::now();
    record_iteration(chain, engine, iter, std::chrono::duration<double>(t1 - t0).count());

    if (opts.checkpoint_every > 0 && !opts.checkpoint_path.empty() &&
        (iter + 1) % opts.checkpoint_every == 0 && iter + 1 < cfg.iterations) {
      finish_chain(chain, engine);
      SamplerCheckpoint ckpt{cfg, chain.seed, iter + 1, engine.state(), engine.sigma2_phi2(), chain};
      save_checkpoint(opts.checkpoint_path, ckpt);
    }
  }
  finish_chain(chain, engine);
  return chain;
}

}  // namespace

Chain run_chain(const ModelConfig& cfg, const Dataset& ds, std::uint64_t seed,
                const RunOptions& opts) {
  GibbsEngine engine(cfg, ds, seed);
  Chain chain = make_chain_shell(engine.config(), ds, seed, engine.masks());
  return run_loop(engine, std::move(chain), 0, opts);
}

Chain resume_chain(const SamplerCheckpoint& ckpt, const Dataset& ds, const RunOptions& opts) {
  GibbsEngine engine(ckpt.config, ds, ckpt.seed);
  engine.restore(ckpt.state, ckpt.sigma2_phi2);
  engine.alpha_accept() = ckpt.partial.alpha_accept;
  engine.phi2_accept() = ckpt.partial.phi2_accept;
  Chain chain = ckpt.partial;
  return run_loop(engine, std::move(chain), ckpt.next_iteration, opts);
}

}  // namespace tvc
