#include "tvc/simgen.hpp"

#include "tvc/parallel.hpp"
#include "tvc/rng.hpp"
#include "tvc/wavelet.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace tvc {

namespace {

constexpr std::uint64_t kInputStream = 11;
constexpr std::uint64_t kCoefStream = 12;
constexpr std::uint64_t kMapStream = 13;
constexpr std::uint64_t kNoiseStream = 14;

// multiply along one axis by a dense matrix: lines x_axis <- m * x_axis
void apply_axis_matrix(DenseTensorD& x, Index axis, const Eigen::MatrixXd& m) {
  const auto& shape = x.shape();
  const Shape strides = shape_strides(shape);
  const Index n = shape[static_cast<std::size_t>(axis)];
  const Index dims = x.order();
  Shape idx(static_cast<std::size_t>(dims), 0);
  Eigen::VectorXd buf(n);
  for (;;) {
    Index base = 0;
    for (Index d = 0; d < dims; ++d) base += strides[static_cast<std::size_t>(d)] * idx[static_cast<std::size_t>(d)];
    const Index step = strides[static_cast<std::size_t>(axis)];
    for (Index i = 0; i < n; ++i) buf[i] = x[base + i * step];
    buf = m * buf;
    for (Index i = 0; i < n; ++i) x[base + i * step] = buf[i];
    Index d = 0;
    for (; d < dims; ++d) {
      if (d == axis) continue;
      if (++idx[static_cast<std::size_t>(d)] < shape[static_cast<std::size_t>(d)]) break;
      idx[static_cast<std::size_t>(d)] = 0;
    }
    if (d == dims) break;
  }
}

CPFactorD random_cp(const Shape& shape, Index rank, double sd, RngStream& rng) {
  CPFactorD f(shape, rank);
  for (Index d = 0; d < f.order(); ++d)
    for (Index r = 0; r < rank; ++r)
      for (Index j = 0; j < shape[static_cast<std::size_t>(d)]; ++j)
        f.mode(d)(j, r) = rng.normal(0.0, sd);
  return f;
}

}  // namespace

Scenario scenario_from_string(const std::string& s) {
  if (s == "1") return Scenario::PatchGP;
  if (s == "2") return Scenario::VoxelGP;
  if (s == "3") return Scenario::LogMap;
  if (s == "4") return Scenario::Linear;
  if (s == "3alt") return Scenario::PatchSumSine;
  throw std::invalid_argument("unknown scenario '" + s + "' (expected 1, 2, 3, 3alt or 4)");
}

std::string scenario_to_string(Scenario s) {
  switch (s) {
    case Scenario::PatchGP: return "1";
    case Scenario::VoxelGP: return "2";
    case Scenario::LogMap: return "3";
    case Scenario::Linear: return "4";
    case Scenario::PatchSumSine: return "3alt";
  }
  return "?";
}

void SimDesign::validate() const {
  if (shape.empty()) throw std::invalid_argument("SimDesign: empty shape");
  for (Index p : shape)
    if (p <= 0) throw std::invalid_argument("SimDesign: nonpositive extent");
  if (strategy < 'a' || strategy > 'd') throw std::invalid_argument("SimDesign: strategy must be a-d");
  if (construction != 1 && construction != 2)
    throw std::invalid_argument("SimDesign: construction must be 1 (CP) or 2 (pyramid)");
  if (n_train <= 0 || n_test < 0) throw std::invalid_argument("SimDesign: bad sample sizes");
  if (gen_rank <= 0) throw std::invalid_argument("SimDesign: generator rank must be positive");
  if (patch <= 0 || patch % 2 == 0) throw std::invalid_argument("SimDesign: patch must be odd");
  if (!(noise_sd >= 0)) throw std::invalid_argument("SimDesign: noise sd must be nonnegative");
  if (strategy == 'c')
    for (Index p : shape)
      if (p % 8 != 0)
        throw std::invalid_argument("SimDesign: wavelet inputs need every extent divisible by 8");
}

std::vector<DenseTensorD> gen_inputs(char strategy, const Shape& shape, Index n,
                                     Index /*patch_for_wavelet_check*/, std::uint64_t seed) {
  const Index v_total = shape_size(shape);
  std::vector<DenseTensorD> out(static_cast<std::size_t>(n), DenseTensorD(shape));
  RngStream root(seed);

  switch (strategy) {
    case 'a':
      parallel_for(n, 0, [&](Index i) {
        RngStream rng = root.substream({kInputStream, static_cast<std::uint64_t>(i)});
        auto& x = out[static_cast<std::size_t>(i)];
        for (Index v = 0; v < v_total; ++v) x[v] = rng.normal();
      });
      break;
    case 'b':
      parallel_for(n, 0, [&](Index i) {
        RngStream rng = root.substream({kInputStream, static_cast<std::uint64_t>(i)});
        auto& x = out[static_cast<std::size_t>(i)];
        for (Index v = 0; v < v_total; ++v) x[v] = rng.uniform();
      });
      break;
    case 'c': {
      for (Index p : shape)
        if (p % 8 != 0) throw std::invalid_argument("gen_inputs: wavelet strategy needs extents divisible by 8");
      parallel_for(n, 0, [&](Index i) {
        RngStream rng = root.substream({kInputStream, static_cast<std::uint64_t>(i)});
        auto& x = out[static_cast<std::size_t>(i)];
        for (Index v = 0; v < v_total; ++v) x[v] = rng.normal();
        dwt_inverse(x, 3);
      });
      break;
    }
    case 'd': {
      // separable squared-exponential field over normalized voxel coordinates:
      // cov = 0.01 exp(-15 ||u - u'||^2) factorizes across axes
      std::vector<Eigen::MatrixXd> axis_chol;
      for (Index p : shape) {
        Eigen::MatrixXd c(p, p);
        for (Index i = 0; i < p; ++i)
          for (Index j = 0; j < p; ++j) {
            const double ui = (p == 1) ? 0.0 : static_cast<double>(i) / static_cast<double>(p - 1);
            const double uj = (p == 1) ? 0.0 : static_cast<double>(j) / static_cast<double>(p - 1);
            c(i, j) = std::exp(-15.0 * (ui - uj) * (ui - uj));
          }
        axis_chol.push_back(llt_with_jitter(c, 1e-10).factor);
      }
      parallel_for(n, 0, [&](Index i) {
        RngStream rng = root.substream({kInputStream, static_cast<std::uint64_t>(i)});
        auto& x = out[static_cast<std::size_t>(i)];
        for (Index v = 0; v < v_total; ++v) x[v] = rng.normal();
        for (Index axis = 0; axis < x.order(); ++axis)
          apply_axis_matrix(x, axis, axis_chol[static_cast<std::size_t>(axis)]);
        x.vec() *= 0.1;  // sqrt of the 0.01 field variance
      });
      break;
    }
    default:
      throw std::invalid_argument("gen_inputs: strategy must be one of a, b, c, d");
  }
  return out;
}

Index pyramid_voxel_count(Index base, Index dims) {
  // C(base + dims - 1, dims)
  Index num = 1, den = 1;
  for (Index k = 1; k <= dims; ++k) {
    num *= base + k - 1;
    den *= k;
  }
  return num / den;
}

DenseTensorD pyramid_coefficients(const Shape& shape, double value) {
  const Index dims = static_cast<Index>(shape.size());
  const Index p_min = *std::min_element(shape.begin(), shape.end());
  const Index base = (p_min + 1) / 2;
  const bool two = p_min >= 16;
  DenseTensorD out(shape);

  const Index v_total = out.size();
  for (Index v = 0; v < v_total; ++v) {
    const Shape idx = unravel_offset(v, shape);
    if (!two) {
      // one simplex, anchored near the center of the bottom face
      Index sum = 0;
      bool ok = true;
      for (Index d = 0; d < dims; ++d) {
        const Index anchor = (shape[static_cast<std::size_t>(d)] - base) / 2;
        const Index rel = idx[static_cast<std::size_t>(d)] - anchor;
        if (rel < 0) { ok = false; break; }
        sum += rel;
      }
      if (ok && sum <= base - 1) out[v] = value;
    } else {
      // two disjoint simplexes in opposite corners
      Index s_low = 0, s_high = 0;
      for (Index d = 0; d < dims; ++d) {
        s_low += idx[static_cast<std::size_t>(d)];
        s_high += shape[static_cast<std::size_t>(d)] - 1 - idx[static_cast<std::size_t>(d)];
      }
      if (s_low <= base - 1 || s_high <= base - 1) out[v] = value;
    }
  }
  return out;
}

Eigen::MatrixXd map_values(const SimDesign& d, const std::vector<DenseTensorD>& inputs,
                           double& phi2_out) {
  const Index n_all = static_cast<Index>(inputs.size());
  const Index v_total = shape_size(d.shape);
  RngStream root(d.seed);
  Eigen::MatrixXd map_vals(n_all, v_total);
  phi2_out = 0;
  const bool gp_map = d.scenario == Scenario::PatchGP || d.scenario == Scenario::VoxelGP;
  const Index h = (d.scenario == Scenario::PatchGP || d.scenario == Scenario::PatchSumSine) ? d.patch : 1;

  if (gp_map) {
    const Index plen = [&] {
      Index l = 1;
      for (Index k = 0; k < static_cast<Index>(d.shape.size()); ++k) l *= h;
      return l;
    }();

    // one global inverse-lengthscale, scaled to the typical patch distance
    double mean_sq = 0;
    {
      Index pairs = 0;
      const Index probe = std::min<Index>(v_total, 32);
      std::vector<double> pi(static_cast<std::size_t>(plen)), pj(static_cast<std::size_t>(plen));
      for (Index q = 0; q < probe; ++q) {
        const Index v = (v_total / probe) * q;
        for (Index i = 0; i + 1 < std::min<Index>(n_all, 24); i += 2) {
          extract_patch_into(inputs[static_cast<std::size_t>(i)], v, h, std::span<double>(pi));
          extract_patch_into(inputs[static_cast<std::size_t>(i + 1)], v, h, std::span<double>(pj));
          double s = 0;
          for (Index p = 0; p < plen; ++p) s += (pi[static_cast<std::size_t>(p)] - pj[static_cast<std::size_t>(p)]) *
                                               (pi[static_cast<std::size_t>(p)] - pj[static_cast<std::size_t>(p)]);
          mean_sq += s;
          ++pairs;
        }
      }
      mean_sq = (pairs > 0) ? mean_sq / static_cast<double>(pairs) : 0.0;
    }
    phi2_out = (mean_sq > 0) ? d.lengthscale_factor / mean_sq : 1.0;

    parallel_for(v_total, 0, [&](Index v) {
      RngStream rng = root.substream({kMapStream, static_cast<std::uint64_t>(v)});
      // group exactly identical patches so they receive identical map values
      Eigen::MatrixXd patches(n_all, plen);
      std::vector<double> buf(static_cast<std::size_t>(plen));
      for (Index i = 0; i < n_all; ++i) {
        extract_patch_into(inputs[static_cast<std::size_t>(i)], v, h, std::span<double>(buf));
        for (Index p = 0; p < plen; ++p) patches(i, p) = buf[static_cast<std::size_t>(p)];
      }
      std::map<std::vector<double>, Index> groups;
      std::vector<Index> group_of(static_cast<std::size_t>(n_all));
      std::vector<Index> rep;  // representative row per group
      for (Index i = 0; i < n_all; ++i) {
        std::vector<double> key(patches.row(i).begin(), patches.row(i).end());
        auto [it, inserted] = groups.try_emplace(std::move(key), static_cast<Index>(rep.size()));
        if (inserted) rep.push_back(i);
        group_of[static_cast<std::size_t>(i)] = it->second;
      }
      const Index g = static_cast<Index>(rep.size());
      Eigen::MatrixXd up(g, plen);
      for (Index k = 0; k < g; ++k) up.row(k) = patches.row(rep[static_cast<std::size_t>(k)]);
      Eigen::MatrixXd kern = kernel_from_sqdist(pairwise_sqdist(up), d.map_gp_var, phi2_out);
      kern.diagonal().array() += 1e-10 * d.map_gp_var;
      const Eigen::MatrixXd l = llt_with_jitter(kern).factor;
      Eigen::VectorXd z(g);
      for (Index k = 0; k < g; ++k) z[k] = rng.normal();
      const Eigen::VectorXd vals = l * z;
      for (Index i = 0; i < n_all; ++i) map_vals(i, v) = vals[group_of[static_cast<std::size_t>(i)]];
    });
  } else {
    parallel_for(v_total, 0, [&](Index v) {
      std::vector<double> buf(static_cast<std::size_t>([&] {
        Index l = 1;
        for (std::size_t k = 0; k < d.shape.size(); ++k) l *= h;
        return l;
      }()));
      for (Index i = 0; i < n_all; ++i) {
        const double x = inputs[static_cast<std::size_t>(i)][v];
        switch (d.scenario) {
          case Scenario::LogMap: map_vals(i, v) = std::log1p(x * x); break;
          case Scenario::Linear: map_vals(i, v) = x; break;
          case Scenario::PatchSumSine: {
            extract_patch_into(inputs[static_cast<std::size_t>(i)], v, h, std::span<double>(buf));
            double s = 0;
            for (double b : buf) s += b;
            map_vals(i, v) = std::sin(s);
            break;
          }
          default: break;
        }
      }
    });
  }
  return map_vals;
}

SimDataset generate(const SimDesign& d) {
  d.validate();
  const Index n_all = d.n_train + d.n_test;
  const Index v_total = shape_size(d.shape);
  RngStream root(d.seed);

  SimDataset out;
  out.data.shape = d.shape;
  out.data.x = gen_inputs(d.strategy, d.shape, n_all, d.patch, d.seed);

  // coefficient tensors
  {
    RngStream rng = root.substream({kCoefStream});
    out.intercept_true = cp_compose(random_cp(d.shape, d.gen_rank, d.intercept_margin_sd, rng));
    if (d.construction == 1)
      out.slope_true = cp_compose(random_cp(d.shape, d.gen_rank, d.slope_margin_sd, rng));
    else
      out.slope_true = pyramid_coefficients(d.shape, d.pyramid_value);
  }

  double map_phi2 = 0;
  const Eigen::MatrixXd map_vals = map_values(d, out.data.x, map_phi2);
  out.map_phi2 = map_phi2;

  // outcomes and ground-truth effects
  out.effect_true.assign(static_cast<std::size_t>(n_all), DenseTensorD(d.shape));
  out.data.y.assign(static_cast<std::size_t>(n_all), DenseTensorD(d.shape));
  parallel_for(n_all, 0, [&](Index i) {
    RngStream rng = root.substream({kNoiseStream, static_cast<std::uint64_t>(i)});
    auto& eff = out.effect_true[static_cast<std::size_t>(i)];
    auto& y = out.data.y[static_cast<std::size_t>(i)];
    for (Index v = 0; v < v_total; ++v) {
      eff[v] = out.slope_true[v] * map_vals(i, v);
      y[v] = out.intercept_true[v] + eff[v] + rng.normal(0.0, d.noise_sd);
    }
  });

  out.data.z.resize(n_all, 0);
  for (Index i = 0; i < d.n_train; ++i) out.data.train_idx.push_back(i);
  for (Index i = d.n_train; i < n_all; ++i) out.data.test_idx.push_back(i);
  out.data.finalize();
  return out;
}

}  // namespace tvc
