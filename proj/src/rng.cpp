#include "tvc/rng.hpp"

#include <cfloat>
#include <cmath>

namespace tvc {

namespace {

// Mode of the two-parameter density g(x) ∝ x^{lam-1} exp(-omega (x + 1/x)/2).
double gig_mode(double lam, double omega) {
  if (lam >= 1.0)
    return (std::sqrt((lam - 1.0) * (lam - 1.0) + omega * omega) + (lam - 1.0)) / omega;
  return omega / (std::sqrt((1.0 - lam) * (1.0 - lam) + omega * omega) + (1.0 - lam));
}

// Ratio-of-uniforms without mode shift.
double rou_noshift(double lam, double omega, RngStream& rng) {
  const double t = 0.5 * (lam - 1.0);
  const double s = 0.25 * omega;
  const double xm = gig_mode(lam, omega);
  const double nc = t * std::log(xm) - s * (xm + 1.0 / xm);
  const double ym = ((lam + 1.0) + std::sqrt((lam + 1.0) * (lam + 1.0) + omega * omega)) / omega;
  const double um = std::exp(0.5 * (lam + 1.0) * std::log(ym) - s * (ym + 1.0 / ym) - nc);

  for (;;) {
    const double u = um * rng.uniform();
    const double v = rng.uniform_pos();
    const double x = u / v;
    if (x <= 0.0) continue;
    if (std::log(v) <= t * std::log(x) - s * (x + 1.0 / x) - nc) return x;
  }
}

// Ratio-of-uniforms with shift by the mode; the bounding rectangle needs the
// two real roots of a cubic, found by Cardano's rule.
double rou_shift(double lam, double omega, RngStream& rng) {
  const double t = 0.5 * (lam - 1.0);
  const double s = 0.25 * omega;
  const double xm = gig_mode(lam, omega);
  const double nc = t * std::log(xm) - s * (xm + 1.0 / xm);

  const double a = -(2.0 * (lam + 1.0) / omega + xm);
  const double b = (2.0 * (lam - 1.0) * xm / omega - 1.0);
  const double c = xm;

  const double p = b - a * a / 3.0;
  const double q = (2.0 * a * a * a) / 27.0 - (a * b) / 3.0 + c;

  const double fi = std::acos(-q / (2.0 * std::sqrt(-(p * p * p) / 27.0)));
  const double fak = 2.0 * std::sqrt(-p / 3.0);
  const double y1 = fak * std::cos(fi / 3.0) - a / 3.0;
  const double y2 = fak * std::cos(fi / 3.0 + 4.0 / 3.0 * M_PI) - a / 3.0;

  const double uplus = (y1 - xm) * std::exp(t * std::log(y1) - s * (y1 + 1.0 / y1) - nc);
  const double uminus = (y2 - xm) * std::exp(t * std::log(y2) - s * (y2 + 1.0 / y2) - nc);

  for (;;) {
    const double u = uminus + rng.uniform() * (uplus - uminus);
    const double v = rng.uniform_pos();
    const double x = u / v + xm;
    if (x <= 0.0) continue;
    if (std::log(v) <= t * std::log(x) - s * (x + 1.0 / x) - nc) return x;
  }
}

// Rejection with a three-piece hat: constant over the log-concave part,
// power/exponential tails elsewhere.  Covers 0 <= lam < 1 with small omega,
// where ratio-of-uniform rectangles degenerate.
double hat_three_piece(double lam, double omega, RngStream& rng) {
  const double xm = gig_mode(lam, omega);
  const double x0 = omega / (1.0 - lam);

  const double k0 = std::exp((lam - 1.0) * std::log(xm) - 0.5 * omega * (xm + 1.0 / xm));
  double a0 = k0 * x0;
  double k1 = 0.0, a1 = 0.0, k2 = 0.0, a2 = 0.0;

  if (x0 >= 2.0 / omega) {
    k2 = std::pow(x0, lam - 1.0);
    a2 = k2 * 2.0 * std::exp(-omega * x0 / 2.0) / omega;
  } else {
    k1 = std::exp(-omega);
    a1 = (lam == 0.0) ? k1 * std::log(2.0 / (omega * omega))
                      : k1 / lam * (std::pow(2.0 / omega, lam) - std::pow(x0, lam));
    k2 = std::pow(2.0 / omega, lam - 1.0);
    a2 = k2 * 2.0 * std::exp(-1.0) / omega;
  }
  const double atot = a0 + a1 + a2;

  for (;;) {
    double v = atot * rng.uniform();
    double x, hx;
    if (v <= a0) {
      x = x0 * v / a0;
      hx = k0;
    } else {
      v -= a0;
      if (v <= a1) {
        if (lam == 0.0) {
          x = omega * std::exp(std::exp(omega) * v);
          hx = k1 / x;
        } else {
          x = std::pow(std::pow(x0, lam) + (lam / k1 * v), 1.0 / lam);
          hx = k1 * std::pow(x, lam - 1.0);
        }
      } else {
        v -= a1;
        const double lo = (x0 > 2.0 / omega) ? x0 : 2.0 / omega;
        x = -2.0 / omega * std::log(std::exp(-omega / 2.0 * lo) - omega / (2.0 * k2) * v);
        hx = k2 * std::exp(-omega / 2.0 * x);
      }
    }
    if (x <= 0.0) continue;
    const double u = rng.uniform_pos() * hx;
    if (std::log(u) <= (lam - 1.0) * std::log(x) - omega / 2.0 * (x + 1.0 / x)) return x;
  }
}

}  // namespace

double sample_gig(const GigParams& p, RngStream& rng) {
  if (!p.admissible())
    throw DistributionError("sample_gig: inadmissible (mu, chi, psi)");

  constexpr double kZeroTol = 0.8 * DBL_EPSILON;

  // boundary cases collapse to Gamma / Inverse-Gamma
  if (p.chi == 0.0 || (p.psi > 0.0 && std::sqrt(p.chi * p.psi) < kZeroTol && p.mu > 0.0))
    return rng.gamma(p.mu, p.psi / 2.0);
  if (p.psi == 0.0 || (p.chi > 0.0 && std::sqrt(p.chi * p.psi) < kZeroTol && p.mu < 0.0))
    return 1.0 / rng.gamma(-p.mu, p.chi / 2.0);

  const double omega = std::sqrt(p.chi * p.psi);
  const double scale = std::sqrt(p.chi / p.psi);
  const double alam = std::abs(p.mu);

  double x;
  if (alam > 2.0 || omega > 3.0)
    x = rou_shift(alam, omega, rng);
  else if (alam >= 1.0 - 2.25 * omega * omega || omega > 0.2)
    x = rou_noshift(alam, omega, rng);
  else
    x = hat_three_piece(alam, omega, rng);

  // g is the density for |mu|; mu < 0 corresponds to 1/x
  return (p.mu < 0.0) ? scale / x : scale * x;
}

JitteredChol llt_with_jitter(const Eigen::MatrixXd& a, double rel_base, int retries) {
  const double base = rel_base * a.diagonal().mean();
  Eigen::LLT<Eigen::MatrixXd> llt(a);
  if (llt.info() == Eigen::Success) return {Eigen::MatrixXd(llt.matrixL()), 0.0};
  double jitter = base;
  for (int k = 0; k < retries; ++k, jitter *= 10.0) {
    Eigen::MatrixXd aj = a;
    aj.diagonal().array() += jitter;
    llt.compute(aj);
    if (llt.info() == Eigen::Success) return {Eigen::MatrixXd(llt.matrixL()), jitter};
  }
  throw NumericalError("llt_with_jitter: matrix not positive definite within jitter budget");
}

Eigen::VectorXd mvn_sample(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov, RngStream& rng) {
  if (cov.rows() != cov.cols() || cov.rows() != mean.size())
    throw std::invalid_argument("mvn_sample: dimension mismatch");
  if (cov.isZero(0.0)) return mean;
  const JitteredChol ch = llt_with_jitter(cov);
  Eigen::VectorXd z(mean.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
  return mean + ch.factor * z;
}

}  // namespace tvc
