#pragma once

// Test-side oracles, independent of the library's computation paths:
// quadrature over positive densities, generic Gaussian conditioning, dense
// AR(1) prior assembly, and empirical-distribution distances.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

namespace oracle {

// ---- quadrature on (0, inf) for densities given by a log-kernel.
// Simpson on a log-spaced grid around the mode, wide enough for the tails.
struct PositiveDensity {
  std::function<double(double)> logf;
  double lo = 1e-12, hi = 1e12;
  int n = 200001;  // odd

  double integrate(const std::function<double(double)>& weight) const {
    // substitute x = e^u: integral f(x) w(x) dx = integral f(e^u) w(e^u) e^u du
    const double ulo = std::log(lo), uhi = std::log(hi);
    const double hstep = (uhi - ulo) / (n - 1);
    // stabilize with the max log-kernel over the grid
    double m = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
      const double u = ulo + hstep * i;
      m = std::max(m, logf(std::exp(u)) + u);
    }
    double acc = 0;
    for (int i = 0; i < n; ++i) {
      const double u = ulo + hstep * i;
      const double x = std::exp(u);
      const double val = std::exp(logf(x) + u - m) * weight(x);
      const double coef = (i == 0 || i == n - 1) ? 1.0 : ((i % 2 == 1) ? 4.0 : 2.0);
      acc += coef * val;
    }
    return acc * hstep / 3.0;  // common factor e^m cancels in ratios
  }

  double moment(int k) const {
    const double z = integrate([](double) { return 1.0; });
    const double mk = integrate([k](double x) { return std::pow(x, k); });
    return mk / z;
  }

  // precomputed CDF: cumulative trapezoid on the log grid, interpolated
  struct Cdf {
    std::vector<double> x, c;
    double operator()(double q) const {
      if (q <= x.front()) return 0.0;
      if (q >= x.back()) return 1.0;
      const auto it = std::upper_bound(x.begin(), x.end(), q);
      const std::size_t i = static_cast<std::size_t>(it - x.begin());
      const double t = (q - x[i - 1]) / (x[i] - x[i - 1]);
      return c[i - 1] + t * (c[i] - c[i - 1]);
    }
  };

  Cdf make_cdf() const {
    const double ulo = std::log(lo), uhi = std::log(hi);
    const double hstep = (uhi - ulo) / (n - 1);
    std::vector<double> xs(static_cast<std::size_t>(n)), fs(static_cast<std::size_t>(n));
    double m = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
      const double u = ulo + hstep * i;
      xs[static_cast<std::size_t>(i)] = std::exp(u);
      const double lf = logf(xs[static_cast<std::size_t>(i)]) + u;  // includes the jacobian
      fs[static_cast<std::size_t>(i)] = lf;
      m = std::max(m, lf);
    }
    Cdf out;
    out.x = xs;
    out.c.assign(static_cast<std::size_t>(n), 0.0);
    double acc = 0;
    for (int i = 1; i < n; ++i) {
      acc += 0.5 * (std::exp(fs[static_cast<std::size_t>(i)] - m) +
                    std::exp(fs[static_cast<std::size_t>(i - 1)] - m)) * hstep;
      out.c[static_cast<std::size_t>(i)] = acc;
    }
    for (double& v : out.c) v /= acc;
    return out;
  }

  double cdf(double q) const { return make_cdf()(q); }
};

inline PositiveDensity gig_density(double mu, double chi, double psi) {
  PositiveDensity d;
  d.logf = [=](double x) { return (mu - 1.0) * std::log(x) - 0.5 * (chi / x + psi * x); };
  return d;
}

// ---- generic Gaussian conditioning: condition block b on block a of a joint
// N(mean, cov); returns (mean_b|a, cov_b|a).
inline std::pair<Eigen::VectorXd, Eigen::MatrixXd> condition_gaussian(
    const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov, const std::vector<int>& idx_obs,
    const std::vector<int>& idx_out, const Eigen::VectorXd& obs_values) {
  const int no = static_cast<int>(idx_obs.size());
  const int nu = static_cast<int>(idx_out.size());
  Eigen::MatrixXd c_oo(no, no), c_uo(nu, no), c_uu(nu, nu);
  Eigen::VectorXd m_o(no), m_u(nu);
  for (int i = 0; i < no; ++i) {
    m_o[i] = mean[idx_obs[i]];
    for (int j = 0; j < no; ++j) c_oo(i, j) = cov(idx_obs[i], idx_obs[j]);
  }
  for (int i = 0; i < nu; ++i) {
    m_u[i] = mean[idx_out[i]];
    for (int j = 0; j < no; ++j) c_uo(i, j) = cov(idx_out[i], idx_obs[j]);
    for (int j = 0; j < nu; ++j) c_uu(i, j) = cov(idx_out[i], idx_out[j]);
  }
  const Eigen::MatrixXd sol = c_oo.ldlt().solve(c_uo.transpose());  // C_oo^{-1} C_ou
  Eigen::VectorXd mean_out = m_u + sol.transpose() * (obs_values - m_o);
  Eigen::MatrixXd cov_out = c_uu - c_uo * sol;
  return {mean_out, cov_out};
}

// ---- empirical statistics
inline double mean_of(std::span<const double> x) {
  double m = 0;
  for (double v : x) m += v;
  return m / static_cast<double>(x.size());
}

inline double var_of(std::span<const double> x) {
  const double m = mean_of(x);
  double s = 0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

inline double mc_se(std::span<const double> x) {
  return std::sqrt(var_of(x) / static_cast<double>(x.size()));
}

// one-sample KS distance against a cdf
inline double ks_distance(std::vector<double> draws, const std::function<double(double)>& cdf) {
  std::sort(draws.begin(), draws.end());
  const double n = static_cast<double>(draws.size());
  double d = 0;
  for (std::size_t i = 0; i < draws.size(); ++i) {
    const double c = cdf(draws[i]);
    d = std::max(d, std::abs(c - static_cast<double>(i) / n));
    d = std::max(d, std::abs(c - static_cast<double>(i + 1) / n));
  }
  return d;
}

}  // namespace oracle
