#pragma once
// Benchmark forward models behind a common interface: draw x ~ p(x | theta).

#include <cmath>
#include <memory>
#include <numbers>
#include <random>
#include <string>

#include "emunet/errors.hpp"
#include "emunet/heads.hpp"
#include "emunet/prior.hpp"
#include "emunet/random.hpp"

namespace emunet {

class Simulator {
 public:
  virtual ~Simulator() = default;
  virtual std::string name() const = 0;
  virtual const BoxPrior& prior() const = 0;
  /// The emulator head matching the simulator's output type.
  virtual HeadSpec head() const = 0;
  virtual DataVector simulate(const ParamVector& theta, Rng& rng) const = 0;

  int param_dim() const { return prior().dim(); }
  int data_dim() const { return head().data_size(); }

 protected:
  void check_theta(const ParamVector& theta) const {
    if (theta.size() != param_dim())
      throw DimensionError(name() + ": theta has " + std::to_string(theta.size()) + " entries, expected " +
                           std::to_string(param_dim()));
  }
};

// ---------------------------------------------------------------------------

/// x_i ~ N(f(theta), diag(noise_var)), i = 1..repeats, f applied pointwise;
/// the simulator returns the sample mean of the repeats.
struct GaussianSimSpec {
  int dim = 1;
  int repeats = 10;
  double noise_var = 0.1;
  double prior_lo = -8.0;
  double prior_hi = 8.0;
  double observed = 2.0;  // every coordinate of the observed sample mean
};

class GaussianSimulator final : public Simulator {
 public:
  explicit GaussianSimulator(GaussianSimSpec spec = {})
      : spec_(spec), prior_(BoxPrior::cube(spec.dim, spec.prior_lo, spec.prior_hi)) {}

  static double f(double t) {
    const double a = 1.5 * t + 0.5;
    return a * a * a / 200.0;
  }
  static Vector f(const Vector& t) { return t.unaryExpr([](double v) { return f(v); }); }

  std::string name() const override { return "gaussian"; }
  const BoxPrior& prior() const override { return prior_; }
  HeadSpec head() const override { return HeadSpec::gaussian(spec_.dim); }
  const GaussianSimSpec& spec() const { return spec_; }

  DataVector simulate(const ParamVector& theta, Rng& rng) const override {
    check_theta(theta);
    std::normal_distribution<double> noise(0.0, std::sqrt(spec_.noise_var));
    Vector mean = f(theta);
    Vector acc = Vector::Zero(spec_.dim);
    for (int r = 0; r < spec_.repeats; ++r)
      for (int i = 0; i < spec_.dim; ++i) acc(i) += mean(i) + noise(rng);
    return acc / spec_.repeats;
  }

  Vector observed() const { return Vector::Constant(spec_.dim, spec_.observed); }

  /// log N(x_bar | f(theta), noise_var / repeats * I), the exact likelihood of the sample mean.
  double log_likelihood(const ParamVector& theta, const DataVector& x_bar) const {
    const double var = spec_.noise_var / spec_.repeats;
    const Vector r = x_bar - f(theta);
    return -0.5 * r.squaredNorm() / var - 0.5 * spec_.dim * std::log(2.0 * std::numbers::pi * var);
  }

 private:
  GaussianSimSpec spec_;
  BoxPrior prior_;
};

// ---------------------------------------------------------------------------

/// 32x32 image of a blob; pixel (row, col) has centre
/// (x, y) = (col - 15.5, row - 15.5) and intensity Bin(255, p_xy) with
///   p_xy = 0.9 - 0.8 exp(-0.5 (r_xy / sigma^2)^gamma),
///   r_xy = (x - x_off)^2 + (y - y_off)^2.
/// theta = (x_off, y_off, gamma).
struct BlobSimSpec {
  int size = 32;
  double sigma = 2.0;
  int trials = 255;
  double offset_lo = -16.0, offset_hi = 16.0;
  double gamma_lo = 0.25, gamma_hi = 5.0;
};

class BlobSimulator final : public Simulator {
 public:
  explicit BlobSimulator(BlobSimSpec spec = {})
      : spec_(spec),
        prior_(Vector{{spec.offset_lo, spec.offset_lo, spec.gamma_lo}},
               Vector{{spec.offset_hi, spec.offset_hi, spec.gamma_hi}}) {}

  std::string name() const override { return "blob"; }
  const BoxPrior& prior() const override { return prior_; }
  HeadSpec head() const override { return HeadSpec::binomial(spec_.size * spec_.size, spec_.trials); }
  const BlobSimSpec& spec() const { return spec_; }

  double pixel_coordinate(int index) const { return index - 0.5 * (spec_.size - 1); }

  /// Per-pixel success probabilities, row-major.
  Vector probabilities(const ParamVector& theta) const {
    check_theta(theta);
    const int s = spec_.size;
    const double s2 = spec_.sigma * spec_.sigma;
    Vector p(s * s);
    for (int row = 0; row < s; ++row) {
      for (int col = 0; col < s; ++col) {
        const double dx = pixel_coordinate(col) - theta(0);
        const double dy = pixel_coordinate(row) - theta(1);
        const double r = dx * dx + dy * dy;
        p(row * s + col) = 0.9 - 0.8 * std::exp(-0.5 * std::pow(r / s2, theta(2)));
      }
    }
    return p;
  }

  DataVector simulate(const ParamVector& theta, Rng& rng) const override {
    const Vector p = probabilities(theta);
    Vector x(p.size());
    for (Eigen::Index i = 0; i < p.size(); ++i) x(i) = std::binomial_distribution<int>(spec_.trials, p(i))(rng);
    return x;
  }

  /// Exact log-likelihood of an image (pixels independent).
  double log_likelihood(const ParamVector& theta, const DataVector& x) const {
    const Vector p = probabilities(theta);
    const Eigen::ArrayXd& lc = cached_log_choose(spec_.trials);
    double lp = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const double k = x(i);
      lp += lc(static_cast<Eigen::Index>(k)) + k * std::log(p(i)) + (spec_.trials - k) * std::log1p(-p(i));
    }
    return lp;
  }

 private:
  BlobSimSpec spec_;
  BoxPrior prior_;
};

}  // namespace emunet
