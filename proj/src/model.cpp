#include "tvc/model.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

namespace tvc {

void ModelConfig::validate() const {
  auto pos = [](double v, const char* name) {
    if (!(v > 0)) throw std::invalid_argument(std::string("ModelConfig: ") + name + " must be positive");
  };
  if (rank <= 0) throw std::invalid_argument("ModelConfig: rank must be positive");
  if (patch_size <= 0 || patch_size % 2 == 0)
    throw std::invalid_argument("ModelConfig: patch size must be odd and positive");
  pos(a_tau, "a_tau"); pos(b_tau, "b_tau");
  pos(a_lambda, "a_lambda"); pos(b_lambda, "b_lambda");
  pos(a_alpha, "a_alpha"); pos(b_alpha, "b_alpha");
  pos(a_phi1, "a_phi1"); pos(b_phi1, "b_phi1");
  pos(a_e, "a_e"); pos(b_e, "b_e");
  if (iterations <= 0) throw std::invalid_argument("ModelConfig: iterations must be positive");
  if (!(burnin_fraction > 0 && burnin_fraction < 1))
    throw std::invalid_argument("ModelConfig: burn-in fraction must lie in (0,1)");
  if (thinning <= 0) throw std::invalid_argument("ModelConfig: thinning must be positive");
  pos(sigma2_alpha, "sigma2_alpha");
  pos(sigma2_phi2, "sigma2_phi2");
  if (!(mask_threshold > 0 && mask_threshold <= 1))
    throw std::invalid_argument("ModelConfig: mask threshold must lie in (0,1]");
  if (covariate_count < 0) throw std::invalid_argument("ModelConfig: covariate count must be nonnegative");
}

void Dataset::finalize() {
  if (subject_mask.empty()) {
    subject_mask.reserve(x.size());
    for (const auto& xn : x) {
      DenseTensor<std::uint8_t> m(shape);
      for (Index v = 0; v < xn.size(); ++v) m[v] = (xn[v] != 0.0) ? 1 : 0;
      subject_mask.push_back(std::move(m));
    }
  }
  // The response outside a subject's mask carries no information; zero it so
  // no masked value can leak into any statistic.
  for (std::size_t n = 0; n < y.size(); ++n)
    for (Index v = 0; v < y[n].size(); ++v)
      if (subject_mask[n][v] == 0) y[n][v] = 0.0;
  validate();
}

void Dataset::validate() const {
  const Index n = n_subjects();
  if (n == 0) throw DataError("Dataset: no subjects");
  if (static_cast<Index>(y.size()) != n) throw DataError("Dataset: input/output subject counts differ");
  const Index v = shape_size(shape);
  for (Index i = 0; i < n; ++i) {
    if (x[static_cast<std::size_t>(i)].shape() != shape || y[static_cast<std::size_t>(i)].shape() != shape)
      throw DataError("Dataset: tensor shape mismatch for subject " + std::to_string(i));
    for (Index k = 0; k < v; ++k) {
      if (!std::isfinite(x[static_cast<std::size_t>(i)][k]) || !std::isfinite(y[static_cast<std::size_t>(i)][k]))
        throw DataError("Dataset: non-finite payload for subject " + std::to_string(i));
    }
  }
  if (z.rows() != 0 && z.rows() != n) throw DataError("Dataset: covariate row count mismatch");
  if (static_cast<Index>(subject_mask.size()) != n) throw DataError("Dataset: missing subject masks");
  for (Index i = 0; i < n; ++i) {
    if (subject_mask[static_cast<std::size_t>(i)].shape() != shape)
      throw DataError("Dataset: mask shape mismatch for subject " + std::to_string(i));
    for (Index k = 0; k < v; ++k) {
      const auto m = subject_mask[static_cast<std::size_t>(i)][k];
      if (m != 0 && m != 1) throw DataError("Dataset: mask entries must be 0 or 1");
    }
  }
  std::vector<char> seen(static_cast<std::size_t>(n), 0);
  for (Index i : train_idx) {
    if (i < 0 || i >= n || seen[static_cast<std::size_t>(i)]) throw DataError("Dataset: bad train split");
    seen[static_cast<std::size_t>(i)] = 1;
  }
  for (Index i : test_idx) {
    if (i < 0 || i >= n || seen[static_cast<std::size_t>(i)]) throw DataError("Dataset: bad test split");
    seen[static_cast<std::size_t>(i)] = 1;
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end())
    throw DataError("Dataset: split does not cover all subjects");
}

Eigen::MatrixXd ar1_cov(double w, double alpha, Index p) {
  if (!(w > 0) || !(alpha > 0)) throw std::invalid_argument("ar1_cov: parameters must be positive");
  if (p <= 0) throw std::invalid_argument("ar1_cov: length must be positive");
  Eigen::MatrixXd c(p, p);
  for (Index i = 0; i < p; ++i)
    for (Index j = 0; j <= i; ++j) {
      const double v = w * std::exp(-alpha * static_cast<double>(i - j));
      c(i, j) = v;
      c(j, i) = v;
    }
  return c;
}

double ar1_quadratic_form(const Eigen::VectorXd& x, double w, double alpha) {
  const Index p = x.size();
  if (p == 1) return x[0] * x[0] / w;
  const double rho = std::exp(-alpha);
  double bracket = x[0] * x[0] + x[p - 1] * x[p - 1];
  for (Index j = 1; j + 1 < p; ++j) bracket += (1.0 + rho * rho) * x[j] * x[j];
  double cross = 0;
  for (Index j = 0; j + 1 < p; ++j) cross += x[j] * x[j + 1];
  bracket -= 2.0 * rho * cross;
  return bracket / (w * (1.0 - rho * rho));
}

double ar1_log_det(Index p, double w, double alpha) {
  const double rho = std::exp(-alpha);
  return static_cast<double>(p) * std::log(w) +
         static_cast<double>(p - 1) * std::log1p(-rho * rho);
}

Eigen::MatrixXd pairwise_sqdist(const Eigen::MatrixXd& points) {
  const Index n = points.rows();
  const Eigen::VectorXd sq = points.rowwise().squaredNorm();
  Eigen::MatrixXd d = sq.replicate(1, n) + sq.transpose().replicate(n, 1) -
                      2.0 * points * points.transpose();
  d = d.cwiseMax(0.0);
  d.diagonal().setZero();
  return d;
}

Eigen::MatrixXd kernel_from_sqdist(const Eigen::MatrixXd& sqdist, double phi1, double phi2) {
  if (!(phi1 > 0) || !(phi2 > 0))
    throw std::invalid_argument("kernel_from_sqdist: kernel parameters must be positive");
  return phi1 * (-phi2 * sqdist.array()).exp().matrix();
}

Eigen::MatrixXd gp_kernel_matrix(const Eigen::MatrixXd& patches, double phi1, double phi2) {
  return kernel_from_sqdist(pairwise_sqdist(patches), phi1, phi2);
}

MaskSet build_group_mask(const Dataset& ds, double tau_mask) {
  if (!(tau_mask > 0 && tau_mask <= 1))
    throw std::invalid_argument("build_group_mask: threshold must lie in (0,1]");
  const Index v = ds.n_voxels();
  const Index n = ds.n_subjects();
  MaskSet out;
  out.group = DenseTensor<std::uint8_t>(ds.shape);
  out.voxel_slot.assign(static_cast<std::size_t>(v), -1);

  for (Index k = 0; k < v; ++k) {
    Index cnt = 0;
    for (Index i = 0; i < n; ++i) cnt += ds.in_mask(i, k) ? 1 : 0;
    const bool in_group =
        static_cast<double>(cnt) >= tau_mask * static_cast<double>(n) && cnt > 0;
    if (in_group) {
      out.group[k] = 1;
      out.voxel_slot[static_cast<std::size_t>(k)] = static_cast<Index>(out.group_voxels.size());
      out.group_voxels.push_back(k);
    } else if (cnt > 0) {
      out.fringe_voxels.push_back(k);
    }
  }
  if (out.group_voxels.empty())
    std::cerr << "[tvc] warning: empty group mask; model degenerates to the linear fringe map\n";
  return out;
}

ModelState init_state(const ModelConfig& cfg, const Dataset& ds, const MaskSet& masks,
                      RngStream& rng) {
  const Index dims = static_cast<Index>(ds.shape.size());
  ModelState st;
  st.intercept = CPFactorD(ds.shape, cfg.rank);
  st.slope = CPFactorD(ds.shape, cfg.rank);
  st.intercept_hyp = MarginHypers(dims, cfg.rank);
  st.slope_hyp = MarginHypers(dims, cfg.rank);
  const Index s_count = cfg.covariate_count;
  st.covariate.assign(static_cast<std::size_t>(s_count), CPFactorD(ds.shape, cfg.rank));
  st.covariate_hyp.assign(static_cast<std::size_t>(s_count), MarginHypers(dims, cfg.rank));
  st.tau_covariate.assign(static_cast<std::size_t>(s_count), 1.0);

  auto fill_margins = [&](CPFactorD& f) {
    for (Index d = 0; d < dims; ++d)
      for (Index r = 0; r < cfg.rank; ++r)
        for (Index j = 0; j < ds.shape[static_cast<std::size_t>(d)]; ++j)
          f.mode(d)(j, r) = rng.normal(0.0, 0.1);
  };
  fill_margins(st.intercept);
  fill_margins(st.slope);
  for (auto& f : st.covariate) fill_margins(f);

  st.atoms.resize(ds.n_train(), masks.n_group());
  for (Index t = 0; t < ds.n_train(); ++t) {
    const auto& xn = ds.x[static_cast<std::size_t>(ds.train_idx[static_cast<std::size_t>(t)])];
    for (Index k = 0; k < masks.n_group(); ++k)
      st.atoms(t, k) = xn[masks.group_voxels[static_cast<std::size_t>(k)]];
  }
  return st;
}

}  // namespace tvc
