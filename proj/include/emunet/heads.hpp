#pragma once
// Distribution heads: map the raw output column of a network to a
// conditional density q(x | theta) with log-density, entropy, moments and
// sampling. Gradients are always taken with respect to the raw outputs.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "emunet/errors.hpp"
#include "emunet/random.hpp"
#include "emunet/tensor.hpp"

namespace emunet {

enum class HeadKind { Gaussian, Binomial, Categorical };

inline std::string to_string(HeadKind k) {
  switch (k) {
    case HeadKind::Gaussian: return "gaussian";
    case HeadKind::Binomial: return "binomial";
    case HeadKind::Categorical: return "categorical";
  }
  return "?";
}
inline HeadKind head_kind_from_string(const std::string& s) {
  if (s == "gaussian") return HeadKind::Gaussian;
  if (s == "binomial") return HeadKind::Binomial;
  if (s == "categorical") return HeadKind::Categorical;
  throw ConfigError("unknown head kind '" + s + "'");
}

/// Lower bound added to softplus scale outputs.
inline constexpr double kScaleFloor = 1e-6;

struct HeadSpec {
  HeadKind kind = HeadKind::Gaussian;
  int dim = 1;        // Gaussian/Binomial: data dimension; Categorical: unused
  int trials = 255;   // Binomial total count
  int classes = 6;    // Categorical K

  /// Number of raw network outputs the head consumes.
  int raw_size() const {
    switch (kind) {
      case HeadKind::Gaussian: return dim + dim + dim * (dim - 1) / 2;
      case HeadKind::Binomial: return dim;
      case HeadKind::Categorical: return classes;
    }
    return 0;
  }
  /// Length of a data vector x.
  int data_size() const { return kind == HeadKind::Categorical ? 1 : dim; }
  /// Length of the moment vector (categorical moments are over one-hot indicators).
  int moment_size() const { return kind == HeadKind::Categorical ? classes : dim; }

  static HeadSpec gaussian(int d) { return {HeadKind::Gaussian, d, 255, 6}; }
  static HeadSpec binomial(int d, int n = 255) { return {HeadKind::Binomial, d, n, 6}; }
  static HeadSpec categorical(int k) { return {HeadKind::Categorical, 1, 255, k}; }
};

// ---------------------------------------------------------------------------
// Gaussian: raw = [mean (d), diag (d), strictly-lower entries row-major].

struct GaussianParams {
  Vector mean;
  Matrix chol;  // lower triangular, positive diagonal
};

inline GaussianParams gaussian_params(const HeadSpec& s, const Eigen::Ref<const Vector>& raw) {
  const int d = s.dim;
  GaussianParams g{raw.head(d), Matrix::Zero(d, d)};
  for (int i = 0; i < d; ++i) g.chol(i, i) = softplus(raw(d + i)) + kScaleFloor;
  int k = 2 * d;
  for (int i = 1; i < d; ++i)
    for (int j = 0; j < i; ++j) g.chol(i, j) = raw(k++);
  return g;
}

/// Chain rule from adjoints on (mean, L) back to the raw layout.
inline Vector gaussian_raw_adjoint(const HeadSpec& s, const Eigen::Ref<const Vector>& raw, const Vector& d_mean,
                                   const Matrix& d_chol) {
  const int d = s.dim;
  Vector out(s.raw_size());
  out.head(d) = d_mean;
  for (int i = 0; i < d; ++i) out(d + i) = d_chol(i, i) * sigmoid(raw(d + i));
  int k = 2 * d;
  for (int i = 1; i < d; ++i)
    for (int j = 0; j < i; ++j) out(k++) = d_chol(i, j);
  return out;
}

// ---------------------------------------------------------------------------
// Binomial helpers over a fixed number of trials.

/// log C(n, k) for k = 0..n.
inline Eigen::ArrayXd log_choose_table(int n) {
  Eigen::ArrayXd t(n + 1);
  for (int k = 0; k <= n; ++k)
    t(k) = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
  return t;
}

inline const Eigen::ArrayXd& cached_log_choose(int n) {
  thread_local int cached_n = -1;
  thread_local Eigen::ArrayXd table;
  if (cached_n != n) {
    table = log_choose_table(n);
    cached_n = n;
  }
  return table;
}

inline Eigen::ArrayXd counts_array(int n) { return Eigen::ArrayXd::LinSpaced(n + 1, 0.0, static_cast<double>(n)); }

/// Full log-pmf over k = 0..n for success logit z.
inline Eigen::ArrayXd binomial_log_pmf(int n, double z) {
  const Eigen::ArrayXd& lc = cached_log_choose(n);
  const Eigen::ArrayXd k = counts_array(n);
  return lc + k * log_sigmoid(z) + (n - k) * log_sigmoid(-z);
}

/// Exact entropy of Bin(n, sigmoid(z)) by summing over the whole support.
inline double binomial_entropy(int n, double z, double* d_dz = nullptr) {
  const Eigen::ArrayXd lp = binomial_log_pmf(n, z);
  const Eigen::ArrayXd pmf = lp.exp();
  const Eigen::ArrayXd plogp = (pmf > 0.0).select(pmf * lp, 0.0);
  if (d_dz) {
    const double p = sigmoid(z);
    const Eigen::ArrayXd k = counts_array(n);
    *d_dz = -((k - n * p) * plogp).sum();
  }
  return -plogp.sum();
}

// ---------------------------------------------------------------------------

inline void check_raw(const HeadSpec& s, Eigen::Index n) {
  if (n != s.raw_size())
    throw DimensionError("head: expected " + std::to_string(s.raw_size()) + " raw outputs, got " + std::to_string(n));
}

inline int class_index(const HeadSpec& s, double x) {
  const double r = std::round(x);
  if (r != x || r < 0 || r >= s.classes) throw DomainError("categorical: class " + std::to_string(x) + " outside support");
  return static_cast<int>(r);
}

/// Exact log q(x | raw). If `grad` is given it receives d/d raw.
inline double log_prob(const HeadSpec& s, const Eigen::Ref<const Vector>& raw, const Eigen::Ref<const Vector>& x,
                       Vector* grad = nullptr) {
  check_raw(s, raw.size());
  if (x.size() != s.data_size())
    throw DimensionError("head: data has " + std::to_string(x.size()) + " entries, expected " +
                         std::to_string(s.data_size()));
  switch (s.kind) {
    case HeadKind::Gaussian: {
      const int d = s.dim;
      const GaussianParams g = gaussian_params(s, raw);
      const auto L = g.chol.triangularView<Eigen::Lower>();
      const Vector z = L.solve(x - g.mean);
      double logdet = 0.0;
      for (int i = 0; i < d; ++i) logdet += std::log(g.chol(i, i));
      const double lp = -0.5 * z.squaredNorm() - logdet - 0.5 * d * std::log(2.0 * std::numbers::pi);
      if (grad) {
        const Vector w = L.transpose().solve(z);
        Matrix d_chol = (w * z.transpose()).triangularView<Eigen::Lower>();
        for (int i = 0; i < d; ++i) d_chol(i, i) -= 1.0 / g.chol(i, i);
        *grad = gaussian_raw_adjoint(s, raw, w, d_chol);
      }
      return lp;
    }
    case HeadKind::Binomial: {
      const int n = s.trials;
      const Eigen::ArrayXd& lc = cached_log_choose(n);
      double lp = 0.0;
      if (grad) grad->resize(s.dim);
      for (int i = 0; i < s.dim; ++i) {
        const double k = x(i);
        if (k != std::round(k) || k < 0 || k > n)
          throw DomainError("binomial: count " + std::to_string(k) + " outside 0.." + std::to_string(n));
        const double zi = raw(i);
        lp += lc(static_cast<Eigen::Index>(k)) + k * log_sigmoid(zi) + (n - k) * log_sigmoid(-zi);
        if (grad) (*grad)(i) = k - n * sigmoid(zi);
      }
      return lp;
    }
    case HeadKind::Categorical: {
      const int c = class_index(s, x(0));
      const double lse = log_sum_exp(raw);
      if (grad) {
        *grad = -(raw.array() - lse).exp().matrix();
        (*grad)(c) += 1.0;
      }
      return raw(c) - lse;
    }
  }
  return 0.0;
}

/// Column-wise log-probabilities for a batch. `grad`, if given, is filled
/// with d/d raw per column.
inline Vector log_prob_batch(const HeadSpec& s, const Matrix& raw, const Matrix& x, Matrix* grad = nullptr) {
  if (raw.cols() != x.cols()) throw DimensionError("log_prob_batch: batch size mismatch");
  Vector out(raw.cols());
  if (grad) grad->resize(raw.rows(), raw.cols());
  Vector g;
  for (Eigen::Index j = 0; j < raw.cols(); ++j) {
    out(j) = log_prob(s, raw.col(j), x.col(j), grad ? &g : nullptr);
    if (grad) grad->col(j) = g;
  }
  return out;
}

inline Vector categorical_probs(const Eigen::Ref<const Vector>& raw) {
  Vector p = (raw.array() - raw.maxCoeff()).exp().matrix();
  return p / p.sum();
}

/// Exact entropy. Binomial heads sum the per-dimension entropies.
inline double entropy(const HeadSpec& s, const Eigen::Ref<const Vector>& raw, Vector* grad = nullptr) {
  check_raw(s, raw.size());
  switch (s.kind) {
    case HeadKind::Gaussian: {
      const int d = s.dim;
      double h = 0.5 * d * std::log(2.0 * std::numbers::pi * std::numbers::e);
      if (grad) *grad = Vector::Zero(s.raw_size());
      for (int i = 0; i < d; ++i) {
        const double l = softplus(raw(d + i)) + kScaleFloor;
        h += std::log(l);
        if (grad) (*grad)(d + i) = sigmoid(raw(d + i)) / l;
      }
      return h;
    }
    case HeadKind::Binomial: {
      double h = 0.0;
      if (grad) grad->resize(s.dim);
      for (int i = 0; i < s.dim; ++i) {
        double d = 0.0;
        h += binomial_entropy(s.trials, raw(i), grad ? &d : nullptr);
        if (grad) (*grad)(i) = d;
      }
      return h;
    }
    case HeadKind::Categorical: {
      const Vector p = categorical_probs(raw);
      const Vector logp = raw.array() - log_sum_exp(raw);
      const double h = -(p.array() * logp.array()).sum();
      if (grad) *grad = -(p.array() * (logp.array() + h)).matrix();
      return h;
    }
  }
  return 0.0;
}

struct Moments {
  Vector mean;
  Matrix cov;
};

/// Exact first and second moments. Binomial covariance is diagonal
/// (independent dimensions); categorical moments are those of the one-hot
/// indicator vector.
inline Moments moments(const HeadSpec& s, const Eigen::Ref<const Vector>& raw) {
  check_raw(s, raw.size());
  switch (s.kind) {
    case HeadKind::Gaussian: {
      const GaussianParams g = gaussian_params(s, raw);
      return {g.mean, g.chol * g.chol.transpose()};
    }
    case HeadKind::Binomial: {
      Vector p = raw.unaryExpr([](double z) { return sigmoid(z); });
      Vector var = s.trials * p.array() * (1.0 - p.array());
      return {s.trials * p, var.asDiagonal()};
    }
    case HeadKind::Categorical: {
      const Vector p = categorical_probs(raw);
      Matrix cov = -p * p.transpose();
      cov.diagonal() += p;
      return {p, cov};
    }
  }
  return {};
}

inline Vector sample(const HeadSpec& s, const Eigen::Ref<const Vector>& raw, Rng& rng) {
  check_raw(s, raw.size());
  switch (s.kind) {
    case HeadKind::Gaussian: {
      const GaussianParams g = gaussian_params(s, raw);
      std::normal_distribution<double> n01;
      Vector z(s.dim);
      for (int i = 0; i < s.dim; ++i) z(i) = n01(rng);
      return g.mean + g.chol * z;
    }
    case HeadKind::Binomial: {
      Vector x(s.dim);
      for (int i = 0; i < s.dim; ++i) x(i) = std::binomial_distribution<int>(s.trials, sigmoid(raw(i)))(rng);
      return x;
    }
    case HeadKind::Categorical: {
      const Vector p = categorical_probs(raw);
      std::discrete_distribution<int> d(p.data(), p.data() + p.size());
      Vector x(1);
      x(0) = d(rng);
      return x;
    }
  }
  return {};
}

}  // namespace emunet
