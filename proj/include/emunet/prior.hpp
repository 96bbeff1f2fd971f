#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "emunet/errors.hpp"
#include "emunet/random.hpp"
#include "emunet/tensor.hpp"

namespace emunet {

using ParamVector = Vector;
using DataVector = Vector;

/// Uniform prior on an axis-aligned box, plus the sigmoid bijection between
/// the box and R^p used by the acquisition optimizer and the HMC sampler:
/// theta = lower + width * sigmoid(u).
struct BoxPrior {
  Vector lower;
  Vector upper;

  BoxPrior() = default;
  BoxPrior(Vector lo, Vector hi) : lower(std::move(lo)), upper(std::move(hi)) {
    if (lower.size() != upper.size() || lower.size() == 0) throw ConfigError("prior: bound dimensions differ");
    for (Eigen::Index i = 0; i < lower.size(); ++i)
      if (!(lower(i) < upper(i))) throw ConfigError("prior: lower bound must be below upper bound");
  }
  static BoxPrior cube(int dim, double lo, double hi) {
    return BoxPrior(Vector::Constant(dim, lo), Vector::Constant(dim, hi));
  }

  int dim() const { return static_cast<int>(lower.size()); }
  Vector width() const { return upper - lower; }
  double log_volume() const { return width().array().log().sum(); }

  bool contains(const Eigen::Ref<const Vector>& theta) const {
    if (theta.size() != lower.size()) return false;
    return (theta.array() >= lower.array()).all() && (theta.array() <= upper.array()).all();
  }

  double log_density(const Eigen::Ref<const Vector>& theta) const {
    return contains(theta) ? -log_volume() : -std::numeric_limits<double>::infinity();
  }

  Vector sample(Rng& rng) const {
    Vector t(dim());
    for (int i = 0; i < dim(); ++i) t(i) = lower(i) + (upper(i) - lower(i)) * uniform01(rng);
    return t;
  }

  Vector from_unconstrained(const Eigen::Ref<const Vector>& u) const {
    return lower + width().cwiseProduct(u.unaryExpr([](double v) { return sigmoid(v); }));
  }

  /// Inverse transform; points on the boundary are nudged inside.
  Vector to_unconstrained(const Eigen::Ref<const Vector>& theta) const {
    Vector u(dim());
    for (int i = 0; i < dim(); ++i) {
      double s = (theta(i) - lower(i)) / (upper(i) - lower(i));
      s = std::clamp(s, 1e-12, 1.0 - 1e-12);
      u(i) = std::log(s) - std::log1p(-s);
    }
    return u;
  }

  /// d theta_i / d u_i.
  Vector dtheta_du(const Eigen::Ref<const Vector>& u) const {
    Vector d(dim());
    for (int i = 0; i < dim(); ++i) {
      const double s = sigmoid(u(i));
      d(i) = (upper(i) - lower(i)) * s * (1.0 - s);
    }
    return d;
  }

  /// log |d theta / d u| and its gradient with respect to u.
  double log_jacobian(const Eigen::Ref<const Vector>& u, Vector* grad = nullptr) const {
    double lj = log_volume();
    if (grad) grad->resize(dim());
    for (int i = 0; i < dim(); ++i) {
      lj += log_sigmoid(u(i)) + log_sigmoid(-u(i));
      if (grad) (*grad)(i) = 1.0 - 2.0 * sigmoid(u(i));
    }
    return lj;
  }

  /// Fixed affine map sending the box onto [-1, 1]^p, used as network input
  /// standardization.
  Matrix standardize_scale() const { return (2.0 * width().cwiseInverse()).asDiagonal(); }
  Matrix standardize_shift() const {
    return (-(upper + lower).cwiseQuotient(width())).eval();
  }
};

}  // namespace emunet
