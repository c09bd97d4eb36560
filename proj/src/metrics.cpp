#include "tvc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tvc {

namespace {

void check_paired(std::span<const DenseTensorD> truth, std::span<const DenseTensorD> pred) {
  if (truth.size() != pred.size() || truth.empty())
    throw std::invalid_argument("metrics: need matching nonempty tensor sets");
  for (std::size_t i = 0; i < truth.size(); ++i)
    if (!truth[i].same_shape(pred[i])) throw std::invalid_argument("metrics: shape mismatch");
}

}  // namespace

double rpe(std::span<const DenseTensorD> truth, std::span<const DenseTensorD> pred) {
  check_paired(truth, pred);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    num += (truth[i].vec() - pred[i].vec()).squaredNorm();
    den += truth[i].vec().squaredNorm();
  }
  if (den == 0) throw std::invalid_argument("rpe: truth has zero norm");
  return std::sqrt(num / den);
}

double rpe(const DenseTensorD& truth, const DenseTensorD& pred) {
  return rpe(std::span<const DenseTensorD>(&truth, 1), std::span<const DenseTensorD>(&pred, 1));
}

double rpe_per_voxel_avg(std::span<const DenseTensorD> truth, std::span<const DenseTensorD> pred) {
  check_paired(truth, pred);
  const Index v = truth[0].size();
  const Index n = static_cast<Index>(truth.size());
  double acc = 0;
  Index used = 0;
  for (Index k = 0; k < v; ++k) {
    double num = 0, den = 0;
    for (Index i = 0; i < n; ++i) {
      const double t = truth[static_cast<std::size_t>(i)][k];
      const double p = pred[static_cast<std::size_t>(i)][k];
      num += (t - p) * (t - p);
      den += t * t;
    }
    if (den > 0) {
      acc += std::sqrt(num / den);
      ++used;
    }
  }
  if (used == 0) throw std::invalid_argument("rpe_per_voxel_avg: truth is zero at every voxel");
  return acc / static_cast<double>(used);
}

double pearson_pair(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2)
    throw std::invalid_argument("pearson: need >= 2 paired values");
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0 || sbb == 0) throw std::invalid_argument("pearson: zero variance");
  return sab / std::sqrt(saa * sbb);
}

PearsonResult pearson(std::span<const DenseTensorD> truth, std::span<const DenseTensorD> pred,
                      PearsonMode mode) {
  check_paired(truth, pred);
  const Index v = truth[0].size();
  const Index n = static_cast<Index>(truth.size());
  PearsonResult out;

  if (mode == PearsonMode::Pooled) {
    std::vector<double> a, b;
    a.reserve(static_cast<std::size_t>(n * v));
    b.reserve(static_cast<std::size_t>(n * v));
    for (Index i = 0; i < n; ++i)
      for (Index k = 0; k < v; ++k) {
        a.push_back(truth[static_cast<std::size_t>(i)][k]);
        b.push_back(pred[static_cast<std::size_t>(i)][k]);
      }
    out.value = pearson_pair(a, b);
    return out;
  }

  double acc = 0;
  Index used = 0;
  std::vector<double> a(static_cast<std::size_t>(n)), b(static_cast<std::size_t>(n));
  for (Index k = 0; k < v; ++k) {
    for (Index i = 0; i < n; ++i) {
      a[static_cast<std::size_t>(i)] = truth[static_cast<std::size_t>(i)][k];
      b[static_cast<std::size_t>(i)] = pred[static_cast<std::size_t>(i)][k];
    }
    try {
      acc += pearson_pair(a, b);
      ++used;
    } catch (const std::invalid_argument&) {
      ++out.skipped_voxels;
    }
  }
  if (used == 0) throw std::invalid_argument("pearson: every voxel degenerate");
  out.value = acc / static_cast<double>(used);
  return out;
}

namespace {

// Spectral density at frequency zero, Bartlett-windowed autocovariances.
double spectral_var0(std::span<const double> x) {
  const Index n = static_cast<Index>(x.size());
  double mean = 0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);

  const Index lag_max = std::max<Index>(1, static_cast<Index>(std::floor(std::sqrt(static_cast<double>(n)))));
  auto autocov = [&](Index lag) {
    double acc = 0;
    for (Index t = 0; t + lag < n; ++t)
      acc += (x[static_cast<std::size_t>(t)] - mean) * (x[static_cast<std::size_t>(t + lag)] - mean);
    return acc / static_cast<double>(n);
  };

  double s = autocov(0);
  for (Index k = 1; k <= lag_max && k < n; ++k)
    s += 2.0 * (1.0 - static_cast<double>(k) / static_cast<double>(lag_max + 1)) * autocov(k);
  return std::max(s, 0.0);
}

}  // namespace

GewekeResult geweke_z(std::span<const double> trace, GewekeOptions opt) {
  const Index n = static_cast<Index>(trace.size());
  if (n < 20) throw std::invalid_argument("geweke_z: trace too short");
  if (!(opt.first > 0 && opt.last > 0 && opt.first + opt.last < 1.0 + 1e-12))
    throw std::invalid_argument("geweke_z: invalid segment fractions");

  const Index n1 = static_cast<Index>(std::floor(opt.first * static_cast<double>(n)));
  const Index n2 = static_cast<Index>(std::floor(opt.last * static_cast<double>(n)));
  if (n1 < 2 || n2 < 2) throw std::invalid_argument("geweke_z: degenerate segments");

  const auto [mn, mx] = std::minmax_element(trace.begin(), trace.end());
  if (*mn == *mx) return {0.0, true};  // constant trace

  auto seg_first = trace.subspan(0, static_cast<std::size_t>(n1));
  auto seg_last = trace.subspan(static_cast<std::size_t>(n - n2), static_cast<std::size_t>(n2));

  auto mean_of = [](std::span<const double> s) {
    double m = 0;
    for (double v : s) m += v;
    return m / static_cast<double>(s.size());
  };

  const double m1 = mean_of(seg_first);
  const double m2 = mean_of(seg_last);
  const double sv1 = spectral_var0(seg_first);
  const double sv2 = spectral_var0(seg_last);
  const double denom = sv1 / static_cast<double>(n1) + sv2 / static_cast<double>(n2);

  GewekeResult out;
  if (denom <= 0) {
    out.z = 0;
    out.degenerate = true;
    return out;
  }
  out.z = (m1 - m2) / std::sqrt(denom);
  return out;
}

}  // namespace tvc
