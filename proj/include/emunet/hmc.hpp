#pragma once
// Hamiltonian Monte Carlo on the synthetic-likelihood posterior. Each
// ensemble member gets its own chain on the unconstrained coordinates of the
// prior box; the union of chains is the posterior sample.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "emunet/ensemble.hpp"
#include "emunet/errors.hpp"
#include "emunet/parallel.hpp"
#include "emunet/prior.hpp"
#include "emunet/random.hpp"

namespace emunet {

struct HmcConfig {
  double initial_step = 0.0;  // 0 = pick by doubling/halving heuristic
  int leapfrog_steps = 20;
  int samples = 2000;  // kept per chain
  int burn_in = 500;
  double target_accept = 0.8;
  int init_candidates = 100;  // prior draws scored to pick the starting point
  int threads = 1;

  void validate() const {
    if (initial_step < 0.0) throw ConfigError("hmc: step size must be positive");
    if (leapfrog_steps < 1) throw ConfigError("hmc: leapfrog steps must be >= 1");
    if (samples < 1 || burn_in < 0) throw ConfigError("hmc: invalid chain length");
    if (init_candidates < 1) throw ConfigError("hmc: init_candidates must be >= 1");
  }
};

/// Log density (up to a constant) and its gradient at u.
using LogTarget = std::function<double(const Vector& u, Vector* grad)>;

struct Chain {
  int member = 0;
  Matrix samples;              // p x n, unconstrained coordinates already mapped back to theta
  double accept_rate = 0.0;    // fraction of accepted proposals after burn-in
  double step_size = 0.0;      // adapted, frozen after burn-in
  std::string warning;
};

struct PosteriorSampleSet {
  std::vector<Chain> chains;

  Eigen::Index total() const {
    Eigen::Index n = 0;
    for (const auto& c : chains) n += c.samples.cols();
    return n;
  }
  /// All samples, chain after chain.
  Matrix all() const {
    if (chains.empty()) return {};
    Matrix out(chains[0].samples.rows(), total());
    Eigen::Index off = 0;
    for (const auto& c : chains) {
      out.middleCols(off, c.samples.cols()) = c.samples;
      off += c.samples.cols();
    }
    return out;
  }
};

namespace detail {

/// Step-size adaptation by dual averaging towards a target acceptance rate.
class DualAveraging {
 public:
  DualAveraging(double step, double target) : mu_(std::log(10.0 * step)), target_(target), log_step_(std::log(step)) {}

  void update(double accept_prob) {
    ++m_;
    const double w = 1.0 / (m_ + t0_);
    h_bar_ = (1.0 - w) * h_bar_ + w * (target_ - accept_prob);
    log_step_ = mu_ - std::sqrt(static_cast<double>(m_)) / gamma_ * h_bar_;
    const double eta = std::pow(static_cast<double>(m_), -kappa_);
    log_step_bar_ = eta * log_step_ + (1.0 - eta) * log_step_bar_;
  }
  double step() const { return std::exp(log_step_); }
  double final_step() const { return m_ == 0 ? std::exp(log_step_) : std::exp(log_step_bar_); }

 private:
  double mu_;
  double target_;
  double log_step_;
  double log_step_bar_ = 0.0;
  double h_bar_ = 0.0;
  int m_ = 0;
  static constexpr double gamma_ = 0.05;
  static constexpr double t0_ = 10.0;
  static constexpr double kappa_ = 0.75;
};

struct Trajectory {
  Vector u;
  Vector grad;
  double logp;
  double accept_prob;
};

inline Trajectory leapfrog(const LogTarget& target, const Vector& u0, const Vector& g0, double logp0, const Vector& p0,
                           double eps, int steps) {
  Vector u = u0, g = g0, p = p0;
  double logp = logp0;
  p += 0.5 * eps * g;
  for (int s = 0; s < steps; ++s) {
    u += eps * p;
    logp = target(u, &g);
    if (!std::isfinite(logp) || !g.allFinite()) return {u0, g0, logp0, 0.0};
    if (s + 1 < steps) p += eps * g;
  }
  p += 0.5 * eps * g;
  const double h0 = -logp0 + 0.5 * p0.squaredNorm();
  const double h1 = -logp + 0.5 * p.squaredNorm();
  const double log_ratio = h0 - h1;
  const double a = std::isfinite(log_ratio) ? std::min(1.0, std::exp(log_ratio)) : 0.0;
  return {u, g, logp, a};
}

inline double initial_step_size(const LogTarget& target, const Vector& u, const Vector& g, double logp, Rng& rng) {
  std::normal_distribution<double> n01;
  double eps = 1.0;
  Vector p(u.size());
  for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = n01(rng);
  double a = leapfrog(target, u, g, logp, p, eps, 1).accept_prob;
  const double dir = a > 0.5 ? 1.0 : -1.0;
  for (int it = 0; it < 60; ++it) {
    if (dir > 0 ? !(a > 0.5) : !(a < 0.5)) break;
    eps *= dir > 0 ? 2.0 : 0.5;
    a = leapfrog(target, u, g, logp, p, eps, 1).accept_prob;
  }
  return eps;
}

}  // namespace detail

/// One HMC chain on an unconstrained target with identity mass. Samples are
/// returned in u-coordinates.
inline Chain hmc_chain(const LogTarget& target, const Vector& u_start, const HmcConfig& cfg, Rng& rng) {
  cfg.validate();
  Vector u = u_start, g;
  double logp = target(u, &g);
  if (!std::isfinite(logp)) throw NumericalError("hmc: non-finite log target at the starting point");
  double eps = cfg.initial_step > 0.0 ? cfg.initial_step : detail::initial_step_size(target, u, g, logp, rng);
  detail::DualAveraging adapt(eps, cfg.target_accept);
  std::normal_distribution<double> n01;
  Chain chain;
  chain.samples.resize(u.size(), cfg.samples);
  int accepted = 0;
  Vector p(u.size());
  for (int it = 0; it < cfg.burn_in + cfg.samples; ++it) {
    for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = n01(rng);
    const bool warmup = it < cfg.burn_in;
    const double step = warmup ? adapt.step() : eps;
    const detail::Trajectory t = detail::leapfrog(target, u, g, logp, p, step, cfg.leapfrog_steps);
    const bool accept = uniform01(rng) < t.accept_prob;
    if (accept) {
      u = t.u;
      g = t.grad;
      logp = t.logp;
    }
    if (warmup) {
      adapt.update(t.accept_prob);
      if (it + 1 == cfg.burn_in) eps = adapt.final_step();
    } else {
      accepted += accept ? 1 : 0;
      chain.samples.col(it - cfg.burn_in) = u;
    }
  }
  chain.step_size = eps;
  chain.accept_rate = static_cast<double>(accepted) / cfg.samples;
  if (chain.accept_rate < 0.2) chain.warning = "acceptance rate " + std::to_string(chain.accept_rate) + " below 0.2";
  return chain;
}

/// log q(x_o | theta(u); phi_m) + log p(theta(u)) + log |d theta / d u|.
inline double member_log_target(const Ensemble& ens, int m, const Vector& x_obs, const BoxPrior& prior,
                                const Vector& u, Vector* grad) {
  const Vector theta = prior.from_unconstrained(u);
  Vector g_theta, g_jac;
  const double ll = ens.member_loglik(m, theta, x_obs, grad ? &g_theta : nullptr);
  const double lj = prior.log_jacobian(u, grad ? &g_jac : nullptr);
  if (grad) *grad = g_theta.cwiseProduct(prior.dtheta_du(u)) + g_jac;
  return ll - prior.log_volume() + lj;
}

/// Runs one chain per member on the synthetic likelihood of `x_obs` and
/// returns their union, mapped back to parameter space.
inline PosteriorSampleSet run_hmc(const Ensemble& ens, const Vector& x_obs, const BoxPrior& prior,
                                  const HmcConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (x_obs.size() != ens.head().data_size()) throw DimensionError("run_hmc: observed data has the wrong size");
  PosteriorSampleSet set;
  set.chains.resize(static_cast<std::size_t>(ens.size()));
  parallel_for(ens.size(), cfg.threads, [&](int m) {
    const LogTarget target = [&](const Vector& u, Vector* g) { return member_log_target(ens, m, x_obs, prior, u, g); };
    Rng rng = stream(seed, "hmc", {static_cast<std::uint64_t>(m)});
    Vector best;
    double best_lp = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < cfg.init_candidates; ++c) {
      const Vector u = prior.to_unconstrained(prior.sample(rng));
      const double lp = target(u, nullptr);
      if (best.size() == 0 || lp > best_lp) {
        best = u;
        best_lp = lp;
      }
    }
    Chain chain = hmc_chain(target, best, cfg, rng);
    for (Eigen::Index j = 0; j < chain.samples.cols(); ++j)
      chain.samples.col(j) = prior.from_unconstrained(chain.samples.col(j));
    chain.member = m;
    set.chains[static_cast<std::size_t>(m)] = std::move(chain);
  });
  return set;
}

}  // namespace emunet
