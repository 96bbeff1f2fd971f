#pragma once
// Metrics and measurement protocols: total variation on parameter grids,
// held-out predictive log-likelihood and posterior-predictive checks.

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "emunet/ensemble.hpp"
#include "emunet/errors.hpp"
#include "emunet/prior.hpp"
#include "emunet/random.hpp"
#include "emunet/simulators.hpp"

namespace emunet {

/// Tensor-product grid over a box with trapezoid integration weights.
struct Grid {
  Matrix points;   // p x G, first coordinate varies fastest
  Vector volumes;  // G
  std::vector<int> shape;
};

inline Grid make_grid(const BoxPrior& box, const std::vector<int>& resolution) {
  const int p = box.dim();
  if (static_cast<int>(resolution.size()) != p) throw DimensionError("grid: one resolution per dimension required");
  std::vector<Vector> nodes(static_cast<std::size_t>(p)), weights(static_cast<std::size_t>(p));
  Eigen::Index total = 1;
  for (int d = 0; d < p; ++d) {
    const int n = resolution[static_cast<std::size_t>(d)];
    if (n < 2) throw DimensionError("grid: need at least two points per dimension");
    nodes[static_cast<std::size_t>(d)] = Vector::LinSpaced(n, box.lower(d), box.upper(d));
    const double h = (box.upper(d) - box.lower(d)) / (n - 1);
    Vector w = Vector::Constant(n, h);
    w(0) = w(n - 1) = 0.5 * h;
    weights[static_cast<std::size_t>(d)] = w;
    total *= n;
  }
  Grid g{Matrix(p, total), Vector(total), resolution};
  for (Eigen::Index k = 0; k < total; ++k) {
    Eigen::Index rem = k;
    double vol = 1.0;
    for (int d = 0; d < p; ++d) {
      const int n = resolution[static_cast<std::size_t>(d)];
      const Eigen::Index i = rem % n;
      rem /= n;
      g.points(d, k) = nodes[static_cast<std::size_t>(d)](i);
      vol *= weights[static_cast<std::size_t>(d)](i);
    }
    g.volumes(k) = vol;
  }
  return g;
}

/// Turns unnormalized log-density values into a density that integrates to
/// one under the grid weights.
inline Vector normalize_log_density(const Vector& log_density, const Vector& volumes) {
  const double m = log_density.maxCoeff();
  if (!std::isfinite(m)) throw NumericalError("normalize: density is zero or non-finite everywhere on the grid");
  Vector d = (log_density.array() - m).exp();
  const double z = d.dot(volumes);
  return d / z;
}

/// 1/2 sum |p - q| * volume. Both inputs must integrate to one (within 1e-3).
inline double total_variation(const Vector& p_hat, const Vector& p_true, const Vector& volumes) {
  if (p_hat.size() != p_true.size() || p_hat.size() != volumes.size())
    throw DimensionError("total_variation: grid size mismatch");
  for (const Vector* v : {&p_hat, &p_true}) {
    const double mass = v->dot(volumes);
    if (std::abs(mass - 1.0) > 1e-3)
      throw DomainError("total_variation: density integrates to " + std::to_string(mass) + ", not 1");
  }
  return 0.5 * ((p_hat - p_true).cwiseAbs().array() * volumes.array()).sum();
}

/// Ground-truth posterior of the Gaussian simulator on a grid:
/// N(x_bar_o | f(theta), Sigma / n) p(theta), normalized.
inline Vector gaussian_true_posterior(const GaussianSimulator& sim, const Grid& grid, const Vector& x_obs) {
  Vector logd(grid.points.cols());
  for (Eigen::Index k = 0; k < logd.size(); ++k)
    logd(k) = sim.log_likelihood(grid.points.col(k), x_obs) + sim.prior().log_density(grid.points.col(k));
  return normalize_log_density(logd, grid.volumes);
}

/// Unnormalized log posterior mean_m q(x_o | theta; phi_m) p(theta) at each grid point.
inline Vector emulator_log_posterior(const Ensemble& ens, const Grid& grid, const Vector& x_obs, const BoxPrior& prior,
                                     Eigen::Index chunk = 4096) {
  const Eigen::Index G = grid.points.cols();
  Vector out(G);
  const double log_m = std::log(static_cast<double>(ens.size()));
  for (Eigen::Index start = 0; start < G; start += chunk) {
    const Eigen::Index len = std::min(chunk, G - start);
    const Matrix theta = grid.points.middleCols(start, len);
    const Matrix ll = ens.synthetic_loglik(theta, x_obs, false).values;
    for (Eigen::Index j = 0; j < len; ++j)
      out(start + j) = log_sum_exp(ll.col(j)) - log_m + prior.log_density(theta.col(j));
  }
  return out;
}

inline Vector emulator_posterior_on_grid(const Ensemble& ens, const Grid& grid, const Vector& x_obs,
                                         const BoxPrior& prior) {
  return normalize_log_density(emulator_log_posterior(ens, grid, x_obs, prior), grid.volumes);
}

// ---------------------------------------------------------------------------

/// Independent (theta, x) pairs from prior x simulator.
struct HeldOutSet {
  Matrix theta;
  Matrix x;
  Eigen::Index size() const { return theta.cols(); }
};

inline HeldOutSet make_heldout(const Simulator& sim, int n, std::uint64_t seed) {
  HeldOutSet h{Matrix(sim.param_dim(), n), Matrix(sim.data_dim(), n)};
  for (int i = 0; i < n; ++i) {
    Rng rng = stream(seed, "heldout", {static_cast<std::uint64_t>(i)});
    h.theta.col(i) = sim.prior().sample(rng);
    h.x.col(i) = sim.simulate(h.theta.col(i), rng);
  }
  return h;
}

/// Sum over the held-out pairs of the ensemble's predictive log-probability.
inline double heldout_loglik(const Ensemble& ens, const HeldOutSet& h) {
  return ens.predictive_logprob(h.theta, h.x).sum();
}

// ---------------------------------------------------------------------------

struct PpcReport {
  Eigen::Index n = 0;        // simulations attempted
  Eigen::Index failed = 0;   // simulator errors (recorded, not fatal)
  // Categorical observations.
  double match_fraction = std::numeric_limits<double>::quiet_NaN();
  double within_one_fraction = std::numeric_limits<double>::quiet_NaN();
  // Vector observations.
  Vector mean_prediction;
  double correlation = std::numeric_limits<double>::quiet_NaN();
  double mean_abs_residual = std::numeric_limits<double>::quiet_NaN();
  double rms_residual = std::numeric_limits<double>::quiet_NaN();
};

inline double pearson(const Vector& a, const Vector& b) {
  const Vector da = a.array() - a.mean();
  const Vector db = b.array() - b.mean();
  const double den = std::sqrt(da.squaredNorm() * db.squaredNorm());
  return den > 0 ? da.dot(db) / den : std::numeric_limits<double>::quiet_NaN();
}

/// Simulates at (up to `max_samples`, evenly thinned) posterior samples and
/// compares the predictions with the observation.
inline PpcReport ppc(const Matrix& samples, const Simulator& sim, const Vector& x_obs, std::uint64_t seed,
                     Eigen::Index max_samples = 2000) {
  const Eigen::Index total = samples.cols();
  const Eigen::Index n = std::min(total, max_samples);
  PpcReport r;
  if (n == 0) return r;
  const bool categorical = sim.head().kind == HeadKind::Categorical;
  Eigen::Index matches = 0, near = 0, ok = 0;
  Vector sum = Vector::Zero(sim.data_dim());
  double abs_res = 0.0, sq_res = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index idx = i * total / n;
    Rng rng = stream(seed, "ppc", {static_cast<std::uint64_t>(i)});
    ++r.n;
    Vector x;
    try {
      x = sim.simulate(samples.col(idx), rng);
    } catch (const SimulatorError&) {
      ++r.failed;
      continue;
    }
    ++ok;
    if (categorical) {
      matches += x(0) == x_obs(0) ? 1 : 0;
      near += std::abs(x(0) - x_obs(0)) <= 1.0 ? 1 : 0;
    } else {
      sum += x;
      abs_res += (x - x_obs).cwiseAbs().mean();
      sq_res += (x - x_obs).squaredNorm() / static_cast<double>(x.size());
    }
  }
  if (ok == 0) return r;
  if (categorical) {
    r.match_fraction = static_cast<double>(matches) / ok;
    r.within_one_fraction = static_cast<double>(near) / ok;
  } else {
    r.mean_prediction = sum / ok;
    r.correlation = pearson(r.mean_prediction, x_obs);
    r.mean_abs_residual = abs_res / ok;
    r.rms_residual = std::sqrt(sq_res / ok);
  }
  return r;
}

}  // namespace emunet
