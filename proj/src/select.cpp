#include "tvc/select.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace tvc {

namespace {

constexpr double kLogTwoPi = 1.8378770664093453;

struct ComposedParams {
  DenseTensorD intercept, slope;
  std::vector<DenseTensorD> covariate;
  Eigen::MatrixXd atoms;
  double sigma_e = 0;
};

double deviance(const ComposedParams& p, const Dataset& ds, const MaskSet& masks) {
  const double log_sigma = std::log(p.sigma_e);
  const double inv_var = 1.0 / (p.sigma_e * p.sigma_e);
  double dev = 0;
  for (Index t = 0; t < ds.n_train(); ++t) {
    const Index n = ds.train_idx[static_cast<std::size_t>(t)];
    const auto& yn = ds.y[static_cast<std::size_t>(n)];
    const auto& xn = ds.x[static_cast<std::size_t>(n)];
    const auto& msk = ds.subject_mask[static_cast<std::size_t>(n)];
    for (Index v = 0; v < ds.n_voxels(); ++v) {
      if (!msk[v]) continue;
      const Index slot = masks.voxel_slot[static_cast<std::size_t>(v)];
      const double map_val = (slot >= 0) ? p.atoms(t, slot) : xn[v];
      double pred = p.intercept[v] + p.slope[v] * map_val;
      for (Index s = 0; s < ds.n_covariates(); ++s)
        pred += p.covariate[static_cast<std::size_t>(s)][v] * ds.z(n, s);
      const double r = yn[v] - pred;
      dev += r * r * inv_var + 2.0 * log_sigma + kLogTwoPi;
    }
  }
  return dev;
}

}  // namespace

DicResult compute_dic(const Chain& chain, const Dataset& ds) {
  if (chain.states.empty()) throw std::invalid_argument("compute_dic: chain has no retained states");
  const MaskSet masks = build_group_mask(ds, chain.config.mask_threshold);
  if (masks.n_group() > 0 && chain.states.front().state.atoms.size() == 0)
    throw std::invalid_argument("compute_dic: retained states carry no GP atoms");

  const Index n_states = static_cast<Index>(chain.states.size());
  ComposedParams mean;
  mean.intercept = DenseTensorD(ds.shape);
  mean.slope = DenseTensorD(ds.shape);
  mean.covariate.assign(static_cast<std::size_t>(ds.n_covariates()), DenseTensorD(ds.shape));
  mean.atoms = Eigen::MatrixXd::Zero(ds.n_train(), masks.n_group());

  double d_bar = 0;
  for (const auto& snap : chain.states) {
    ComposedParams p;
    p.intercept = cp_compose(snap.state.intercept);
    p.slope = cp_compose(snap.state.slope);
    for (const auto& f : snap.state.covariate) p.covariate.push_back(cp_compose(f));
    p.atoms = snap.state.atoms;
    p.sigma_e = std::sqrt(snap.state.noise_var);

    d_bar += deviance(p, ds, masks);

    mean.intercept.vec() += p.intercept.vec();
    mean.slope.vec() += p.slope.vec();
    for (Index s = 0; s < ds.n_covariates(); ++s)
      mean.covariate[static_cast<std::size_t>(s)].vec() += p.covariate[static_cast<std::size_t>(s)].vec();
    mean.atoms += p.atoms;
    mean.sigma_e += p.sigma_e;
  }
  d_bar /= static_cast<double>(n_states);

  const double inv_n = 1.0 / static_cast<double>(n_states);
  mean.intercept.vec() *= inv_n;
  mean.slope.vec() *= inv_n;
  for (auto& c : mean.covariate) c.vec() *= inv_n;
  mean.atoms *= inv_n;
  mean.sigma_e *= inv_n;

  DicResult out;
  out.d_bar = d_bar;
  out.p_d = d_bar - deviance(mean, ds, masks);
  out.dic = d_bar + out.p_d;
  return out;
}

RankSweepResult rank_sweep(const ModelConfig& base, const Dataset& ds,
                           std::span<const Index> ranks, std::uint64_t seed) {
  if (ranks.empty()) throw std::invalid_argument("rank_sweep: no candidate ranks");
  std::vector<Index> order(ranks.begin(), ranks.end());
  std::sort(order.begin(), order.end());
  order.erase(std::unique(order.begin(), order.end()), order.end());

  RankSweepResult out;
  double best = std::numeric_limits<double>::infinity();
  for (Index r : order) {
    ModelConfig cfg = base;
    cfg.rank = r;
    const auto t0 = std::chrono::steady_clock::now();
    Chain chain;
    try {
      chain = run_chain(cfg, ds, seed);
    } catch (const std::exception& err) {
      throw NumericalError("rank " + std::to_string(r) + ": " + err.what());
    }
    const auto t1 = std::chrono::steady_clock::now();
    const DicResult dic = compute_dic(chain, ds);
    out.rows.push_back({r, dic.d_bar, dic.p_d, dic.dic,
                        std::chrono::duration<double>(t1 - t0).count()});
    if (dic.dic < best) {  // strict: ties stay with the smaller rank
      best = dic.dic;
      out.selected_rank = r;
    }
  }
  return out;
}

}  // namespace tvc
