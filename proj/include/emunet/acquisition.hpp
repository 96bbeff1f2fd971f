#pragma once
// Acquisition rules for choosing the next simulation parameter:
//   MaxVar  - log p(theta) + 1/2 log Var_m[ L_m(theta) ], L_m = q(x_o | theta; phi_m)
//   MaxInf  - H[x | theta, D] - mean_m H[x | theta, phi_m]   (mutual information)
//   Uniform - a prior draw
// Both objectives are maximized by Adam on the unconstrained coordinates of
// the prior box from several prior-drawn starting points.

#include <cmath>
#include <functional>
#include <iostream>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "emunet/ensemble.hpp"
#include "emunet/errors.hpp"
#include "emunet/heads.hpp"
#include "emunet/prior.hpp"
#include "emunet/tensor.hpp"

namespace emunet {

enum class Rule { MaxVar, MaxInf, Uniform };

inline std::string to_string(Rule r) {
  switch (r) {
    case Rule::MaxVar: return "maxvar";
    case Rule::MaxInf: return "maxinf";
    case Rule::Uniform: return "uniform";
  }
  return "?";
}
inline Rule rule_from_string(const std::string& s) {
  if (s == "maxvar") return Rule::MaxVar;
  if (s == "maxinf") return Rule::MaxInf;
  if (s == "uniform") return Rule::Uniform;
  throw ConfigError("unknown acquisition rule '" + s + "'");
}

/// How the predictive-entropy term of MaxInf is computed for binomial heads.
enum class EntropyMode { Exact, GaussianBound };

inline std::string to_string(EntropyMode m) { return m == EntropyMode::Exact ? "exact" : "gaussian_bound"; }
inline EntropyMode entropy_mode_from_string(const std::string& s) {
  if (s == "exact") return EntropyMode::Exact;
  if (s == "gaussian_bound") return EntropyMode::GaussianBound;
  throw ConfigError("unknown entropy mode '" + s + "'");
}

/// Returned by MaxVar when every member likelihood is zero or all members agree.
inline constexpr double kZeroVarianceSentinel = -1e300;

/// Objective values and theta-gradients for a batch of parameters (columns).
struct ObjectiveBatch {
  Vector value;
  Matrix grad;                 // p x B
  std::vector<char> sentinel;  // 1 where value is kZeroVarianceSentinel
  int jitter_events = 0;       // MaxInf: covariance needed diagonal jitter
};

using BatchObjective = std::function<ObjectiveBatch(const Matrix& theta)>;

// ---------------------------------------------------------------------------

inline ObjectiveBatch maxvar_objective(const Ensemble& ens, const Matrix& theta, const Vector& x_obs,
                                       const BoxPrior& prior) {
  const int M = ens.size();
  const Eigen::Index B = theta.cols();
  ObjectiveBatch out{Vector(B), Matrix::Zero(theta.rows(), B), std::vector<char>(static_cast<std::size_t>(B), 0)};
  const MemberLogLik ll = ens.synthetic_loglik(theta, x_obs, true);
  for (Eigen::Index b = 0; b < B; ++b) {
    const double log_prior = prior.log_density(theta.col(b));
    if (!std::isfinite(log_prior)) {
      out.value(b) = -std::numeric_limits<double>::infinity();
      continue;
    }
    const Vector l = ll.values.col(b);
    const double c = l.maxCoeff();
    if (M < 2 || !std::isfinite(c)) {
      out.value(b) = kZeroVarianceSentinel;
      out.sentinel[static_cast<std::size_t>(b)] = 1;
      continue;
    }
    // Likelihoods relative to the largest one; the shift cancels in the gradient.
    const Vector rel = (l.array() - c).exp().matrix();
    const double mean = rel.mean();
    const double var = (rel.array() - mean).square().sum() / (M - 1);
    if (!(var > 1e-28 * mean * mean)) {
      out.value(b) = kZeroVarianceSentinel;
      out.sentinel[static_cast<std::size_t>(b)] = 1;
      continue;
    }
    out.value(b) = log_prior + c + 0.5 * std::log(var);
    for (int m = 0; m < M; ++m) {
      const double w = (rel(m) - mean) * rel(m) / ((M - 1) * var);
      out.grad.col(b) += w * ll.grads[static_cast<std::size_t>(m)].col(b);
    }
  }
  return out;
}

/// Mean and covariance of the ensemble's predictive mixture at theta:
/// mean of member covariances plus the (population) covariance of member means.
inline Moments predictive_moments(const Ensemble& ens, const Vector& theta) {
  const int M = ens.size();
  std::vector<Moments> mm;
  Vector mean = Vector::Zero(ens.head().moment_size());
  for (int m = 0; m < M; ++m) {
    mm.push_back(moments(ens.head(), ens.raw(m, theta).col(0)));
    mean += mm.back().mean / M;
  }
  Matrix cov = Matrix::Zero(mean.size(), mean.size());
  for (const auto& x : mm) {
    const Vector d = x.mean - mean;
    cov += (x.cov + d * d.transpose()) / M;
  }
  return {mean, cov};
}

namespace detail {

// Each maxinf_* helper fills value(b) and the per-member raw adjoints.

inline void maxinf_categorical(const std::vector<Matrix>& raws, Vector& value, std::vector<Matrix>& adj) {
  const int M = static_cast<int>(raws.size());
  const Eigen::Index K = raws[0].rows(), B = raws[0].cols();
  const double log_m = std::log(static_cast<double>(M));
  for (Eigen::Index b = 0; b < B; ++b) {
    Matrix logp(K, M);
    for (int m = 0; m < M; ++m) logp.col(m) = raws[static_cast<std::size_t>(m)].col(b).array() - log_sum_exp(raws[static_cast<std::size_t>(m)].col(b));
    Vector log_mix(K);
    for (Eigen::Index k = 0; k < K; ++k) log_mix(k) = log_sum_exp(logp.row(k).transpose()) - log_m;
    const Vector mix = log_mix.array().exp();
    double h_mix = -(mix.array() * log_mix.array()).sum();
    double h_cond = 0.0;
    for (int m = 0; m < M; ++m) {
      const Vector p = logp.col(m).array().exp();
      h_cond -= (p.array() * logp.col(m).array()).sum() / M;
      Vector g = (logp.col(m) - log_mix) / M;  // d I / d pi_mk
      const double dot = g.dot(p);
      adj[static_cast<std::size_t>(m)].col(b) = p.array() * (g.array() - dot);
    }
    value(b) = h_mix - h_cond;
  }
}

// Sums over counts run over the union of the members' windows mean +- (10 sd + 8);
// outside that every pmf is below exp(-40) of its mode.
inline void maxinf_binomial(const std::vector<Matrix>& raws, int trials, EntropyMode mode, Vector& value,
                            std::vector<Matrix>& adj) {
  const int M = static_cast<int>(raws.size());
  const Eigen::Index D = raws[0].rows(), B = raws[0].cols();
  const int n = trials;
  const Eigen::ArrayXd& lc = cached_log_choose(trials);
  const Eigen::ArrayXd counts = counts_array(trials);
  Eigen::ArrayXXd lp(n + 1, M), q(n + 1, M);
  Eigen::ArrayXd p(M), la(M), lb(M), h_member(M);
  for (Eigen::Index b = 0; b < B; ++b) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < D; ++i) {
      int lo = n, hi = 0;
      for (int m = 0; m < M; ++m) {
        const double z = raws[static_cast<std::size_t>(m)](i, b);
        p(m) = sigmoid(z);
        la(m) = log_sigmoid(z);
        lb(m) = log_sigmoid(-z);
        const double mu = n * p(m), w = 10.0 * std::sqrt(n * p(m) * (1.0 - p(m))) + 8.0;
        lo = std::min(lo, static_cast<int>(std::max(0.0, std::floor(mu - w))));
        hi = std::max(hi, static_cast<int>(std::min(static_cast<double>(n), std::ceil(mu + w))));
      }
      const int L = hi - lo + 1;
      const auto k = counts.segment(lo, L);
      for (int m = 0; m < M; ++m) {
        lp.col(m).head(L) = lc.segment(lo, L) + k * la(m) + (n - k) * lb(m);
        q.col(m).head(L) = lp.col(m).head(L).exp();
        h_member(m) = -(q.col(m).head(L) * lp.col(m).head(L)).sum();
      }
      double h_first = 0.0;
      if (mode == EntropyMode::Exact) {
        const Eigen::ArrayXd mix = q.topRows(L).rowwise().mean();
        const Eigen::ArrayXd log_mix = (mix > 0.0).select(mix.log(), 0.0);
        h_first = -(mix * log_mix).sum();
        for (int m = 0; m < M; ++m)
          adj[static_cast<std::size_t>(m)](i, b) =
              (q.col(m).head(L) * (k - n * p(m)) * (lp.col(m).head(L) - log_mix)).sum() / M;
      } else {
        const Eigen::ArrayXd mean = n * p;
        const double mu = mean.mean();
        const double var = (n * p * (1.0 - p)).mean() + (mean - mu).square().mean();
        h_first = 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * var);
        for (int m = 0; m < M; ++m) {
          const double d_var_dp = (n * (1.0 - 2.0 * p(m)) + 2.0 * (mean(m) - mu) * n) / M;
          const double d_first = 0.5 / var * d_var_dp * p(m) * (1.0 - p(m));
          // d H_m / d z = -sum q (k - n p) log q
          const double d_cond = -(q.col(m).head(L) * (k - n * p(m)) * lp.col(m).head(L)).sum();
          adj[static_cast<std::size_t>(m)](i, b) = d_first - d_cond / M;
        }
      }
      total += h_first - h_member.mean();
    }
    value(b) = total;
  }
}

inline int maxinf_gaussian(const HeadSpec& head, const std::vector<Matrix>& raws, Vector& value,
                           std::vector<Matrix>& adj) {
  const int M = static_cast<int>(raws.size());
  const int d = head.dim;
  const Eigen::Index B = raws[0].cols();
  int jitters = 0;
  std::vector<GaussianParams> g(static_cast<std::size_t>(M));
  for (Eigen::Index b = 0; b < B; ++b) {
    Vector mu_bar = Vector::Zero(d);
    for (int m = 0; m < M; ++m) {
      g[static_cast<std::size_t>(m)] = gaussian_params(head, raws[static_cast<std::size_t>(m)].col(b));
      mu_bar += g[static_cast<std::size_t>(m)].mean / M;
    }
    Matrix sigma = Matrix::Zero(d, d);
    double mean_logdet_l = 0.0;
    for (int m = 0; m < M; ++m) {
      const auto& gm = g[static_cast<std::size_t>(m)];
      const Vector dm = gm.mean - mu_bar;
      sigma += (gm.chol * gm.chol.transpose() + dm * dm.transpose()) / M;
      mean_logdet_l += gm.chol.diagonal().array().log().sum() / M;
    }
    Eigen::LLT<Matrix> llt(sigma);
    if (llt.info() != Eigen::Success) {
      ++jitters;
      std::clog << "[emunet] maxinf: total covariance not positive definite, adding 1e-8 jitter\n";
      sigma.diagonal().array() += 1e-8;
      llt.compute(sigma);
    }
    const Matrix L = llt.matrixL();
    const double half_logdet = L.diagonal().array().log().sum();
    value(b) = half_logdet - mean_logdet_l;
    const Matrix sigma_inv = llt.solve(Matrix::Identity(d, d));
    for (int m = 0; m < M; ++m) {
      const auto& gm = g[static_cast<std::size_t>(m)];
      const Vector d_mean = sigma_inv * (gm.mean - mu_bar) / M;
      Matrix d_chol = (sigma_inv * gm.chol / M).triangularView<Eigen::Lower>();
      for (int i = 0; i < d; ++i) d_chol(i, i) -= 1.0 / (M * gm.chol(i, i));
      adj[static_cast<std::size_t>(m)].col(b) =
          gaussian_raw_adjoint(head, raws[static_cast<std::size_t>(m)].col(b), d_mean, d_chol);
    }
  }
  return jitters;
}

}  // namespace detail

/// Mutual information between x and the network weights at each theta.
/// Categorical: exact. Binomial: exact per-dimension mixture entropies summed
/// over dimensions (or the Gaussian bound). Gaussian: the Gaussian entropy
/// bound from the law-of-total-covariance mixture covariance.
inline ObjectiveBatch maxinf_objective(const Ensemble& ens, const Matrix& theta,
                                       EntropyMode binomial_mode = EntropyMode::Exact) {
  const int M = ens.size();
  const Eigen::Index B = theta.cols();
  std::vector<Tape> tapes(static_cast<std::size_t>(M));
  std::vector<NodeId> outs(static_cast<std::size_t>(M));
  std::vector<Matrix> raws(static_cast<std::size_t>(M));
  std::vector<Matrix> adj(static_cast<std::size_t>(M));
  for (int m = 0; m < M; ++m) {
    auto& tape = tapes[static_cast<std::size_t>(m)];
    outs[static_cast<std::size_t>(m)] = ens.net().forward(ens.members()[static_cast<std::size_t>(m)].weights, theta, tape).second;
    raws[static_cast<std::size_t>(m)] = tape.value(outs[static_cast<std::size_t>(m)]);
    adj[static_cast<std::size_t>(m)] = Matrix::Zero(raws[static_cast<std::size_t>(m)].rows(), B);
  }
  ObjectiveBatch out{Vector(B), Matrix::Zero(theta.rows(), B), std::vector<char>(static_cast<std::size_t>(B), 0)};
  const HeadSpec& head = ens.head();
  switch (head.kind) {
    case HeadKind::Categorical: detail::maxinf_categorical(raws, out.value, adj); break;
    case HeadKind::Binomial: detail::maxinf_binomial(raws, head.trials, binomial_mode, out.value, adj); break;
    case HeadKind::Gaussian: out.jitter_events = detail::maxinf_gaussian(head, raws, out.value, adj); break;
  }
  for (int m = 0; m < M; ++m)
    out.grad += tapes[static_cast<std::size_t>(m)].backward(outs[static_cast<std::size_t>(m)], adj[static_cast<std::size_t>(m)]).input;
  return out;
}

// ---------------------------------------------------------------------------

struct AcquisitionConfig {
  Rule rule = Rule::MaxVar;
  int restarts = 20;
  int steps = 200;
  double lr = 0.05;
  EntropyMode binomial_entropy = EntropyMode::Exact;
};

struct RestartTrace {
  Vector start;
  Vector end;
  double value = 0.0;
  bool sentinel = false;
};

struct AcquisitionResult {
  Rule rule = Rule::Uniform;
  ParamVector theta;
  std::optional<double> objective;
  std::vector<RestartTrace> restarts;
  bool fallback = false;
};

/// Multi-restart Adam ascent of a batched objective on the prior box. Each
/// restart is one column; theta = lower + width * sigmoid(u) keeps every
/// iterate feasible. The best final value wins, ties to the lowest index.
inline AcquisitionResult maximize_on_box(const BatchObjective& objective, const BoxPrior& prior,
                                         const AcquisitionConfig& cfg, Rng& rng) {
  if (cfg.restarts < 1) throw ConfigError("acquisition: restarts must be >= 1");
  const int p = prior.dim();
  const int R = cfg.restarts;
  AcquisitionResult res;
  res.rule = cfg.rule;
  Matrix starts(p, R);
  ParameterSet u;
  u.tensors.push_back(Matrix(p, R));
  for (int r = 0; r < R; ++r) {
    starts.col(r) = prior.sample(rng);
    u[0].col(r) = prior.to_unconstrained(starts.col(r));
  }
  auto to_theta = [&](const Matrix& uu) {
    Matrix t(p, R);
    for (int r = 0; r < R; ++r) t.col(r) = prior.from_unconstrained(uu.col(r));
    return t;
  };
  AdamState state = AdamState::for_params(u);
  const AdamConfig adam{.lr = cfg.lr};
  ParameterSet grad = u.zeros_like();
  for (int step = 0; step < cfg.steps; ++step) {
    const ObjectiveBatch f = objective(to_theta(u[0]));
    for (int r = 0; r < R; ++r) {
      const Vector du = prior.dtheta_du(u[0].col(r));
      // Ascent: Adam descends, so feed it the negated gradient.
      grad[0].col(r) = -f.grad.col(r).cwiseProduct(du);
    }
    grad[0] = grad[0].unaryExpr([](double v) { return std::isfinite(v) ? v : 0.0; });
    adam_step(u, grad, state, adam);
  }
  const Matrix final_theta = to_theta(u[0]);
  const ObjectiveBatch f = objective(final_theta);
  int best = -1;
  for (int r = 0; r < R; ++r) {
    const bool sentinel = f.sentinel.empty() ? false : f.sentinel[static_cast<std::size_t>(r)] != 0;
    res.restarts.push_back({starts.col(r), final_theta.col(r), f.value(r), sentinel});
    if (sentinel || !std::isfinite(f.value(r))) continue;
    if (best < 0 || f.value(r) > f.value(best)) best = r;
  }
  if (best < 0) {
    res.fallback = true;
    res.theta = prior.sample(rng);
    return res;
  }
  res.theta = final_theta.col(best);
  res.objective = f.value(best);
  return res;
}

/// Proposes the next simulation parameter. `x_obs` is required for MaxVar.
inline AcquisitionResult propose(const Ensemble& ens, const AcquisitionConfig& cfg, const BoxPrior& prior,
                                 const Vector* x_obs, Rng& rng) {
  switch (cfg.rule) {
    case Rule::Uniform: {
      AcquisitionResult res;
      res.rule = Rule::Uniform;
      res.theta = prior.sample(rng);
      return res;
    }
    case Rule::MaxVar: {
      if (!x_obs) throw ConfigError("maxvar acquisition needs observed data");
      return maximize_on_box([&](const Matrix& t) { return maxvar_objective(ens, t, *x_obs, prior); }, prior, cfg, rng);
    }
    case Rule::MaxInf:
      return maximize_on_box([&](const Matrix& t) { return maxinf_objective(ens, t, cfg.binomial_entropy); }, prior,
                             cfg, rng);
  }
  throw ConfigError("acquisition: unknown rule");
}

}  // namespace emunet
