#pragma once
// Deep ensemble of emulator networks q(x | theta; phi_m): training with
// member-specific initialization and shuffling, the uniform-mixture
// posterior predictive, and synthetic log-likelihoods with theta-gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "emunet/errors.hpp"
#include "emunet/heads.hpp"
#include "emunet/parallel.hpp"
#include "emunet/prior.hpp"
#include "emunet/random.hpp"
#include "emunet/tensor.hpp"

namespace emunet {

struct Record {
  int round = 0;  // 0 = initial prior draw, k >= 1 = k-th acquisition
  ParamVector theta;
  DataVector x;
};

/// Ordered (theta, x) pairs.
class Dataset {
 public:
  Dataset() = default;
  Dataset(int param_dim, int data_dim) : param_dim_(param_dim), data_dim_(data_dim) {}

  void add(Record r) {
    if (records_.empty() && param_dim_ == 0) {
      param_dim_ = static_cast<int>(r.theta.size());
      data_dim_ = static_cast<int>(r.x.size());
    }
    if (r.theta.size() != param_dim_ || r.x.size() != data_dim_) throw DimensionError("dataset: record shape mismatch");
    records_.push_back(std::move(r));
  }

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  int param_dim() const { return param_dim_; }
  int data_dim() const { return data_dim_; }
  const Record& operator[](std::size_t i) const { return records_[i]; }
  const std::vector<Record>& records() const { return records_; }

  Matrix thetas() const { return gather(&Record::theta, param_dim_); }
  Matrix xs() const { return gather(&Record::x, data_dim_); }

 private:
  Matrix gather(Vector Record::*field, int rows) const {
    Matrix m(rows, static_cast<Eigen::Index>(records_.size()));
    for (std::size_t j = 0; j < records_.size(); ++j) m.col(static_cast<Eigen::Index>(j)) = records_[j].*field;
    return m;
  }

  int param_dim_ = 0;
  int data_dim_ = 0;
  std::vector<Record> records_;
};

struct EnsembleConfig {
  int members = 50;
  std::vector<int> hidden{10};
  Activation activation = Activation::Tanh;
  AdamConfig adam{.lr = 0.01};
  int epochs_initial = 500;
  int epochs_per_round = 100;
  int batch_size = 0;  // 0 = full batch
  bool warm_start = true;
  int threads = 1;
};

struct Member {
  ParameterSet weights;
  AdamState optimizer;
};

struct MemberTrace {
  std::vector<double> loss;  // mean negative log-likelihood per epoch
  bool aborted = false;
  std::string diagnostic;
};

struct TrainReport {
  std::vector<MemberTrace> members;
  bool any_aborted() const {
    return std::any_of(members.begin(), members.end(), [](const MemberTrace& t) { return t.aborted; });
  }
};

/// Per-member synthetic log-likelihoods for a batch of parameters.
struct MemberLogLik {
  Matrix values;              // M x B: log q(x_o | theta_b; phi_m)
  std::vector<Matrix> grads;  // M entries of (p x B), empty unless requested
};

class Ensemble {
 public:
  Ensemble() = default;

  Ensemble(const BoxPrior& prior, HeadSpec head, EnsembleConfig cfg, std::uint64_t seed)
      : head_(head), cfg_(std::move(cfg)), seed_(seed) {
    if (cfg_.members < 1) throw ConfigError("ensemble: need at least one member");
    net_ = Mlp(prior.dim(), cfg_.hidden, head_.raw_size(), cfg_.activation);
    net_.input_scale = prior.standardize_scale();
    net_.input_shift = prior.standardize_shift();
    reinitialize();
  }

  /// Builds an ensemble from explicit member weights (deserialization, tests).
  Ensemble(Mlp net, HeadSpec head, EnsembleConfig cfg, std::uint64_t seed, std::vector<Member> members)
      : net_(std::move(net)), head_(head), cfg_(std::move(cfg)), seed_(seed), members_(std::move(members)) {
    if (net_.output_dim != head_.raw_size()) throw DimensionError("ensemble: output width does not match head");
    for (const auto& m : members_)
      if (!net_.matches(m.weights)) throw DimensionError("ensemble: member weights do not match architecture");
    cfg_.members = static_cast<int>(members_.size());
  }

  /// Fresh weights (uniform +-1/sqrt(fan_in), member-specific seed) and optimizer state.
  void reinitialize() {
    members_.assign(static_cast<std::size_t>(cfg_.members), {});
    for (int m = 0; m < cfg_.members; ++m) {
      Rng rng = stream(seed_, "init", {static_cast<std::uint64_t>(m)});
      auto& mem = members_[static_cast<std::size_t>(m)];
      mem.weights = net_.init(rng);
      mem.optimizer = AdamState::for_params(mem.weights);
    }
  }

  int size() const { return static_cast<int>(members_.size()); }
  const Mlp& net() const { return net_; }
  const HeadSpec& head() const { return head_; }
  const EnsembleConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<Member>& members() const { return members_; }
  std::vector<Member>& members() { return members_; }
  int param_dim() const { return net_.input_dim; }

  /// Raw head outputs of member m for a batch of parameters (p x B).
  Matrix raw(int m, const Matrix& theta) const { return net_.evaluate(weights(m), theta); }

  /// Trains every member on `data` for `epochs` epochs. `round` keys the
  /// shuffling streams so a resumed run reproduces an uninterrupted one.
  TrainReport train(const Dataset& data, int epochs, std::uint64_t round) {
    if (data.empty()) throw DimensionError("train: dataset is empty");
    if (data.param_dim() != net_.input_dim || data.data_dim() != head_.data_size())
      throw DimensionError("train: dataset shape does not match the ensemble");
    const Matrix theta = data.thetas();
    const Matrix x = data.xs();
    TrainReport report;
    report.members.resize(members_.size());
    parallel_for(size(), cfg_.threads, [&](int m) {
      report.members[static_cast<std::size_t>(m)] = train_member(m, theta, x, epochs, round);
    });
    return report;
  }

  /// Mean negative log-likelihood of member m on a batch.
  double member_nll(int m, const Matrix& theta, const Matrix& x) const {
    return -log_prob_batch(head_, raw(m, theta), x).mean();
  }

  /// log[(1/M) sum_m q(x | theta; phi_m)] for each column.
  Vector predictive_logprob(const Matrix& theta, const Matrix& x) const {
    Matrix per(size(), theta.cols());
    for (int m = 0; m < size(); ++m) per.row(m) = log_prob_batch(head_, raw(m, theta), x).transpose();
    Vector out(theta.cols());
    const double log_m = std::log(static_cast<double>(size()));
    for (Eigen::Index j = 0; j < theta.cols(); ++j) out(j) = log_sum_exp(per.col(j)) - log_m;
    return out;
  }

  double predictive_logprob(const Vector& theta, const Vector& x) const {
    return predictive_logprob(Matrix(theta), Matrix(x))(0);
  }

  /// log q(x_o | theta; phi_m) for every member and column, optionally with
  /// gradients with respect to theta.
  MemberLogLik synthetic_loglik(const Matrix& theta, const Vector& x_obs, bool with_grad) const {
    MemberLogLik out;
    out.values.resize(size(), theta.cols());
    if (with_grad) out.grads.resize(members_.size());
    const Matrix x = x_obs.replicate(1, theta.cols());
    for (int m = 0; m < size(); ++m) {
      Tape tape;
      auto [in, node] = net_.forward(weights(m), theta, tape);
      Matrix g;
      out.values.row(m) = log_prob_batch(head_, tape.value(node), x, with_grad ? &g : nullptr).transpose();
      if (with_grad) out.grads[static_cast<std::size_t>(m)] = tape.backward(node, g).input;
    }
    return out;
  }

  /// log q(x_o | theta; phi_m) for a single parameter vector and member.
  double member_loglik(int m, const Vector& theta, const Vector& x_obs, Vector* grad = nullptr) const {
    Tape tape;
    auto [in, node] = net_.forward(weights(m), theta, tape);
    Vector g;
    const double lp = log_prob(head_, tape.value(node).col(0), x_obs, grad ? &g : nullptr);
    if (grad) *grad = tape.backward(node, g).input.col(0);
    return lp;
  }

  /// Gradient of sum_b <adjoint_b, raw_m(theta_b)> with respect to theta
  /// (vector-Jacobian product through member m).
  Matrix input_vjp(int m, const Matrix& theta, const Matrix& raw_adjoint) const {
    Tape tape;
    auto [in, node] = net_.forward(weights(m), theta, tape);
    return tape.backward(node, raw_adjoint).input;
  }

 private:
  const ParameterSet& weights(int m) const { return members_[static_cast<std::size_t>(m)].weights; }

  MemberTrace train_member(int m, const Matrix& theta, const Matrix& x, int epochs, std::uint64_t round) {
    MemberTrace trace;
    Member& mem = members_[static_cast<std::size_t>(m)];
    Rng rng = stream(seed_, "shuffle", {round, static_cast<std::uint64_t>(m)});
    const Eigen::Index n = theta.cols();
    const Eigen::Index batch = cfg_.batch_size > 0 ? std::min<Eigen::Index>(cfg_.batch_size, n) : n;
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    Matrix tb, xb;
    for (int epoch = 0; epoch < epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      const Member saved = mem;
      double total = 0.0;
      try {
        for (Eigen::Index start = 0; start < n; start += batch) {
          const Eigen::Index len = std::min(batch, n - start);
          tb.resize(theta.rows(), len);
          xb.resize(x.rows(), len);
          for (Eigen::Index j = 0; j < len; ++j) {
            tb.col(j) = theta.col(order[static_cast<std::size_t>(start + j)]);
            xb.col(j) = x.col(order[static_cast<std::size_t>(start + j)]);
          }
          Tape tape;
          auto [in, node] = net_.forward(mem.weights, tb, tape);
          Matrix g;
          const Vector lp = log_prob_batch(head_, tape.value(node), xb, &g);
          const double loss = -lp.sum();
          if (!std::isfinite(loss)) throw NumericalError("non-finite loss");
          total += loss;
          g *= -1.0 / static_cast<double>(len);
          TapeGradients grads = tape.backward(node, g, &mem.weights);
          adam_step(mem.weights, grads.params, mem.optimizer, cfg_.adam);
        }
      } catch (const NumericalError& e) {
        mem = saved;
        trace.aborted = true;
        trace.diagnostic = "member " + std::to_string(m) + " aborted at epoch " + std::to_string(epoch) + ": " + e.what();
        break;
      }
      trace.loss.push_back(total / static_cast<double>(n));
    }
    return trace;
  }

  Mlp net_;
  HeadSpec head_;
  EnsembleConfig cfg_;
  std::uint64_t seed_ = 0;
  std::vector<Member> members_;
};

}  // namespace emunet
