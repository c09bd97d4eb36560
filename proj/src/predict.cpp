#include "tvc/predict.hpp"

#include "tvc/metrics.hpp"
#include "tvc/parallel.hpp"

#include <atomic>
#include <cmath>

namespace tvc {

namespace {

double normal_quantile(double p) {
  // bisection on the normal CDF; plenty for interval bounds
  double lo = -10, hi = 10;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double cdf = 0.5 * std::erfc(-mid / std::sqrt(2.0));
    (cdf < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

double cp_value(const CPFactorD& f, const Shape& shape, Index v) {
  double acc = 0;
  for (Index r = 0; r < f.rank(); ++r) {
    double term = 1;
    for (Index d = 0; d < f.order(); ++d) term *= f.mode(d)(mode_coordinate(v, shape, d), r);
    acc += term;
  }
  return acc;
}

}  // namespace

void kriging_conditional(const Eigen::MatrixXd& corr, Index n_train, double phi1, double theta_v,
                         double sigma2, const Eigen::VectorXd& m_train,
                         const Eigen::VectorXd& m_test, const Eigen::VectorXd& y_train,
                         Eigen::VectorXd& mean_out, Eigen::MatrixXd& cov_out) {
  const Index n_total = corr.rows();
  const Index n_test = n_total - n_train;
  const double t2 = theta_v * theta_v;

  const Eigen::MatrixXd k_tt = phi1 * corr.topLeftCorner(n_train, n_train);
  const Eigen::MatrixXd k_to = phi1 * corr.topRightCorner(n_train, n_test);
  const Eigen::MatrixXd k_oo = phi1 * corr.bottomRightCorner(n_test, n_test);

  Eigen::MatrixXd kvv = t2 * k_tt;
  kvv.diagonal().array() += sigma2;
  const JitteredChol ch = llt_with_jitter(kvv);
  const auto l = ch.factor.triangularView<Eigen::Lower>();

  const Eigen::MatrixXd kvo = t2 * k_to;
  const Eigen::MatrixXd w = l.solve(kvo);                     // L^{-1} Kvo
  const Eigen::VectorXd u = l.solve(y_train - m_train);       // L^{-1} (y - m)
  mean_out = m_test + w.transpose() * u;
  cov_out = t2 * k_oo - w.transpose() * w;
}

PredictionResult kriging_predict(const Chain& chain, const Dataset& ds, const PredictOptions& opts) {
  if (chain.states.empty()) throw std::invalid_argument("kriging_predict: empty chain");
  if (ds.shape != chain.shape) throw std::invalid_argument("kriging_predict: dataset/chain shape mismatch");
  const MaskSet masks = build_group_mask(ds, chain.config.mask_threshold);

  const Index n_test = ds.n_test();
  const Index n_states = static_cast<Index>(chain.states.size());
  const Index v_total = ds.n_voxels();
  const Index h = chain.config.patch_size;
  Index plen = 1;
  for (std::size_t d = 0; d < ds.shape.size(); ++d) plen *= h;

  PredictionResult out;
  out.mean.assign(static_cast<std::size_t>(n_test), DenseTensorD(ds.shape));
  out.variance.assign(static_cast<std::size_t>(n_test), DenseTensorD(ds.shape));
  out.lower.assign(static_cast<std::size_t>(n_test), DenseTensorD(ds.shape));
  out.upper.assign(static_cast<std::size_t>(n_test), DenseTensorD(ds.shape));

  const double zq = normal_quantile(0.5 + opts.interval_level / 2.0);
  std::atomic<std::uint64_t> fallbacks{0};

  // ---- group-mask voxels: Gaussian conditioning per retained state
  parallel_for(masks.n_group(), opts.threads, [&](Index k) {
    const Index v = masks.group_voxels[static_cast<std::size_t>(k)];

    // observed training rows at this voxel, then all test rows
    std::vector<Index> rows;  // subject ids
    for (Index t = 0; t < ds.n_train(); ++t) {
      const Index n = ds.train_idx[static_cast<std::size_t>(t)];
      if (ds.in_mask(n, v)) rows.push_back(n);
    }
    const Index m = static_cast<Index>(rows.size());
    for (Index j = 0; j < n_test; ++j) rows.push_back(ds.test_idx[static_cast<std::size_t>(j)]);
    const Index total = static_cast<Index>(rows.size());

    Eigen::MatrixXd patches(total, plen);
    std::vector<double> buf(static_cast<std::size_t>(plen));
    for (Index i = 0; i < total; ++i) {
      extract_patch_into(ds.x[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)])], v, h,
                         std::span<double>(buf));
      for (Index p = 0; p < plen; ++p) patches(i, p) = buf[static_cast<std::size_t>(p)];
    }
    const Eigen::MatrixXd sqd = pairwise_sqdist(patches);

    Eigen::VectorXd y_train(m);
    for (Index i = 0; i < m; ++i) y_train[i] = ds.y[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)])][v];

    Eigen::VectorXd s1 = Eigen::VectorXd::Zero(n_test);
    Eigen::VectorXd s2 = Eigen::VectorXd::Zero(n_test);
    Eigen::VectorXd mean_k;
    Eigen::MatrixXd cov_k;
    for (const auto& snap : chain.states) {
      const ModelState& st = snap.state;
      const double gamma_v = cp_value(st.intercept, ds.shape, v);
      const double theta_v = cp_value(st.slope, ds.shape, v);
      Eigen::VectorXd m_train(m), m_test(n_test);
      for (Index i = 0; i < m; ++i) {
        double mm = gamma_v;
        for (Index s = 0; s < ds.n_covariates(); ++s)
          mm += cp_value(st.covariate[static_cast<std::size_t>(s)], ds.shape, v) *
                ds.z(rows[static_cast<std::size_t>(i)], s);
        m_train[i] = mm;
      }
      for (Index j = 0; j < n_test; ++j) {
        double mm = gamma_v;
        for (Index s = 0; s < ds.n_covariates(); ++s)
          mm += cp_value(st.covariate[static_cast<std::size_t>(s)], ds.shape, v) *
                ds.z(rows[static_cast<std::size_t>(m + j)], s);
        m_test[j] = mm;
      }

      const Eigen::MatrixXd corr = (-st.gp_scale * sqd.array()).exp().matrix();
      try {
        kriging_conditional(corr, m, st.gp_var, theta_v, st.noise_var, m_train, m_test, y_train,
                            mean_k, cov_k);
        for (Index j = 0; j < n_test; ++j) {
          s1[j] += mean_k[j];
          s2[j] += cov_k(j, j) + mean_k[j] * mean_k[j];
        }
      } catch (const NumericalError&) {
        fallbacks.fetch_add(1, std::memory_order_relaxed);
        for (Index j = 0; j < n_test; ++j) {
          const double t2 = theta_v * theta_v;
          s1[j] += m_test[j];
          s2[j] += t2 * st.gp_var + m_test[j] * m_test[j];
        }
      }
    }

    for (Index j = 0; j < n_test; ++j) {
      const Index n = ds.test_idx[static_cast<std::size_t>(j)];
      if (!ds.in_mask(n, v)) continue;  // outside the subject's own mask: stays 0
      const double mixm = s1[j] / static_cast<double>(n_states);
      const double mixv = std::max(0.0, s2[j] / static_cast<double>(n_states) - mixm * mixm);
      out.mean[static_cast<std::size_t>(j)][v] = mixm;
      out.variance[static_cast<std::size_t>(j)][v] = mixv;
      out.lower[static_cast<std::size_t>(j)][v] = mixm - zq * std::sqrt(mixv);
      out.upper[static_cast<std::size_t>(j)][v] = mixm + zq * std::sqrt(mixv);
    }
  });

  // ---- fringe voxels: fixed linear map, parameter uncertainty only
  parallel_for(static_cast<Index>(masks.fringe_voxels.size()), opts.threads, [&](Index fk) {
    const Index v = masks.fringe_voxels[static_cast<std::size_t>(fk)];
    for (Index j = 0; j < n_test; ++j) {
      const Index n = ds.test_idx[static_cast<std::size_t>(j)];
      if (!ds.in_mask(n, v)) continue;
      double s1 = 0, s2 = 0;
      for (const auto& snap : chain.states) {
        const ModelState& st = snap.state;
        double mm = cp_value(st.intercept, ds.shape, v) +
                    cp_value(st.slope, ds.shape, v) * ds.x[static_cast<std::size_t>(n)][v];
        for (Index s = 0; s < ds.n_covariates(); ++s)
          mm += cp_value(st.covariate[static_cast<std::size_t>(s)], ds.shape, v) * ds.z(n, s);
        s1 += mm;
        s2 += mm * mm;
      }
      const double mixm = s1 / static_cast<double>(n_states);
      const double mixv = std::max(0.0, s2 / static_cast<double>(n_states) - mixm * mixm);
      out.mean[static_cast<std::size_t>(j)][v] = mixm;
      out.variance[static_cast<std::size_t>(j)][v] = mixv;
      out.lower[static_cast<std::size_t>(j)][v] = mixm - zq * std::sqrt(mixv);
      out.upper[static_cast<std::size_t>(j)][v] = mixm + zq * std::sqrt(mixv);
    }
  });

  out.kriging_fallbacks = fallbacks.load();
  (void)v_total;
  return out;
}

double effect_estimation_rpe(const Chain& chain, const Dataset& ds,
                             std::span<const DenseTensorD> effect_true) {
  if (chain.states.empty()) throw std::invalid_argument("effect_estimation_rpe: empty chain");
  const MaskSet masks = build_group_mask(ds, chain.config.mask_threshold);
  if (masks.n_group() > 0 && chain.states.front().state.atoms.size() == 0)
    throw std::invalid_argument("effect_estimation_rpe: retained states carry no atoms");
  if (static_cast<Index>(effect_true.size()) != ds.n_subjects())
    throw std::invalid_argument("effect_estimation_rpe: ground truth subject count mismatch");

  const Index n_train = ds.n_train();
  const Index v_total = ds.n_voxels();
  std::vector<DenseTensorD> post(static_cast<std::size_t>(n_train), DenseTensorD(ds.shape));
  for (const auto& snap : chain.states) {
    const DenseTensorD slope = cp_compose(snap.state.slope);
    for (Index t = 0; t < n_train; ++t) {
      const Index subj = ds.train_idx[static_cast<std::size_t>(t)];
      auto& p = post[static_cast<std::size_t>(t)];
      for (Index v = 0; v < v_total; ++v) {
        const Index slot = masks.voxel_slot[static_cast<std::size_t>(v)];
        const double m = (slot >= 0) ? snap.state.atoms(t, slot)
                                     : ds.x[static_cast<std::size_t>(subj)][v];
        p[v] += slope[v] * m;
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(chain.states.size());
  for (auto& p : post) p.vec() *= inv;

  std::vector<DenseTensorD> truth;
  for (Index t = 0; t < n_train; ++t)
    truth.push_back(effect_true[static_cast<std::size_t>(ds.train_idx[static_cast<std::size_t>(t)])]);
  return rpe_per_voxel_avg(truth, post);
}

}  // namespace tvc
