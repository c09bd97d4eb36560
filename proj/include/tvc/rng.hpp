#pragma once

// Reproducible random streams and the distribution samplers used by the
// posterior updates.  Draw sequences depend only on (master seed, stream id):
// the engine is the standardized mt19937_64 and every transform below is
// implemented here rather than taken from <random>, whose distributions are
// implementation-defined.  Child streams are derived by hashing structured
// labels, so any (iteration, voxel) worker can hold a private stream.

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <stdexcept>

namespace tvc {

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DistributionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_key(std::uint64_t h, std::uint64_t field) {
  return splitmix64(h ^ splitmix64(field));
}

class RngStream {
 public:
  explicit RngStream(std::uint64_t master_seed, std::uint64_t stream_id = 0)
      : master_seed_(master_seed), stream_id_(stream_id),
        eng_(mix_key(splitmix64(master_seed), stream_id)) {}

  std::uint64_t master_seed() const { return master_seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

  // Deterministic child stream keyed by a structured label.
  RngStream substream(std::span<const std::uint64_t> label) const {
    std::uint64_t id = stream_id_;
    for (std::uint64_t f : label) id = mix_key(id, f);
    return RngStream(master_seed_, id);
  }
  RngStream substream(std::initializer_list<std::uint64_t> label) const {
    return substream(std::span<const std::uint64_t>(label.begin(), label.size()));
  }

  std::uint64_t raw() { return eng_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // (0, 1)
  double uniform_pos() {
    double u;
    do { u = uniform(); } while (u <= 0.0);
    return u;
  }

  // standard normal, Marsaglia polar (second value discarded)
  double normal() {
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    return u * std::sqrt(-2.0 * std::log(s) / s);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  double exponential(double rate) {
    if (!(rate > 0)) throw DistributionError("exponential: rate must be positive");
    return -std::log(uniform_pos()) / rate;
  }

  // Gamma(shape, rate), Marsaglia–Tsang
  double gamma(double shape, double rate) {
    if (!(shape > 0) || !(rate > 0)) throw DistributionError("gamma: parameters must be positive");
    if (shape < 1.0) {
      const double u = uniform_pos();
      return gamma(shape + 1.0, rate) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform_pos();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v / rate;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v / rate;
    }
  }

  // Inverse-Gamma(shape, scale): density ∝ x^{-shape-1} exp(-scale/x)
  double inv_gamma(double shape, double scale) { return 1.0 / gamma(shape, scale); }

  // log-Normal with median `median` and log-scale sd
  double log_normal(double median, double sd) {
    if (!(median > 0)) throw DistributionError("log_normal: median must be positive");
    return median * std::exp(sd * normal());
  }

 private:
  std::uint64_t master_seed_ = 0;
  std::uint64_t stream_id_ = 0;
  std::mt19937_64 eng_;
};

// Generalized inverse Gaussian parameters: density ∝ x^{mu-1} exp(-(chi/x + psi x)/2).
struct GigParams {
  double mu = 0;
  double chi = 0;
  double psi = 0;

  bool admissible() const {
    if (chi < 0 || psi < 0) return false;
    if (chi > 0 && psi > 0) return true;
    if (chi > 0 && psi == 0) return mu < 0;
    if (chi == 0 && psi > 0) return mu > 0;
    return false;
  }
};

double sample_gig(const GigParams& p, RngStream& rng);

// Cholesky with an escalating diagonal jitter: first attempt is exact, then
// rel_base * mean(diag) escalated 10x per retry.  Returns the factor and the
// jitter actually applied; throws NumericalError past the budget.
struct JitteredChol {
  Eigen::MatrixXd factor;  // lower triangular
  double jitter = 0;
};
JitteredChol llt_with_jitter(const Eigen::MatrixXd& a, double rel_base = 1e-8, int retries = 3);

// Draw from N(mean, cov); cov symmetric PSD up to the jitter budget.
Eigen::VectorXd mvn_sample(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov, RngStream& rng);

}  // namespace tvc
