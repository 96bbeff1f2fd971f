#pragma once
// Dense algebra and reverse-mode differentiation for small MLPs.
//
// Values are column-batched: a node holds a (features x batch) matrix, so a
// single tape can carry a whole training batch or all acquisition restarts.
// Gradients are available for both the trainable parameters and the inputs.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "emunet/errors.hpp"
#include "emunet/random.hpp"

namespace emunet {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Ordered collection of trainable tensors (weights and biases).
struct ParameterSet {
  std::vector<Matrix> tensors;

  std::size_t size() const { return tensors.size(); }
  Matrix& operator[](std::size_t i) { return tensors[i]; }
  const Matrix& operator[](std::size_t i) const { return tensors[i]; }

  Eigen::Index count() const {
    Eigen::Index n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  ParameterSet zeros_like() const {
    ParameterSet z;
    z.tensors.reserve(tensors.size());
    for (const auto& t : tensors) z.tensors.push_back(Matrix::Zero(t.rows(), t.cols()));
    return z;
  }

  bool same_shape(const ParameterSet& o) const {
    if (o.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i)
      if (o[i].rows() != tensors[i].rows() || o[i].cols() != tensors[i].cols()) return false;
    return true;
  }

  bool all_finite() const {
    for (const auto& t : tensors)
      if (!t.allFinite()) return false;
    return true;
  }

  // Flat views in row-major order, used for serialization and finite differences.
  double& flat(Eigen::Index k) {
    for (auto& t : tensors) {
      if (k < t.size()) return t(k / t.cols(), k % t.cols());
      k -= t.size();
    }
    throw DimensionError("ParameterSet::flat: index out of range");
  }
  double flat(Eigen::Index k) const { return const_cast<ParameterSet*>(this)->flat(k); }
};

// ---------------------------------------------------------------------------
// Elementwise helpers shared by the tape and the likelihood heads.

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
inline double log_sigmoid(double x) { return -softplus(-x); }

template <class Derived>
double log_sum_exp(const Eigen::MatrixBase<Derived>& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

// ---------------------------------------------------------------------------

enum class Op { Input, Affine, Tanh, Relu, Softplus, Sigmoid, Softmax, LogSumExp, Add, Mul, Scale };

using NodeId = int;

struct TapeGradients {
  ParameterSet params;  // empty when parameter gradients were not requested
  Matrix input;         // adjoint of the first Input node
};

/// Records primitive ops in creation order; backward() walks them once in
/// reverse. Affine nodes keep non-owning pointers to their weight matrices,
/// so a tape must not outlive the parameters it was built from.
class Tape {
 public:
  NodeId input(Matrix x) {
    check_finite(x, "input");
    return push({.op = Op::Input, .value = std::move(x)});
  }

  /// y = W x + b. Pass parameter indices >= 0 for trainable W/b, -1 for constants.
  NodeId affine(NodeId x, const Matrix& W, const Matrix& b, int w_index = -1, int b_index = -1) {
    const Matrix& xv = value(x);
    if (W.cols() != xv.rows() || b.rows() != W.rows() || b.cols() != 1)
      throw DimensionError("affine: shape mismatch (W " + std::to_string(W.rows()) + "x" +
                           std::to_string(W.cols()) + ", x " + std::to_string(xv.rows()) + "x" +
                           std::to_string(xv.cols()) + ")");
    Matrix y = W * xv;
    y.colwise() += b.col(0);
    return push_checked({.op = Op::Affine, .a = x, .W = &W, .b = &b, .w_index = w_index,
                         .b_index = b_index, .value = std::move(y)});
  }

  NodeId tanh(NodeId x) { return unary(Op::Tanh, x, value(x).array().tanh().matrix()); }
  NodeId relu(NodeId x) { return unary(Op::Relu, x, value(x).cwiseMax(0.0)); }
  NodeId softplus(NodeId x) { return unary(Op::Softplus, x, value(x).unaryExpr([](double v) { return emunet::softplus(v); })); }
  NodeId sigmoid(NodeId x) { return unary(Op::Sigmoid, x, value(x).unaryExpr([](double v) { return emunet::sigmoid(v); })); }

  /// Column-wise softmax.
  NodeId softmax(NodeId x) {
    Matrix y = value(x);
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
      auto c = y.col(j);
      c = (c.array() - c.maxCoeff()).exp().matrix();
      c /= c.sum();
    }
    return unary(Op::Softmax, x, std::move(y));
  }

  /// Column-wise log-sum-exp; output is 1 x batch.
  NodeId log_sum_exp(NodeId x) {
    const Matrix& xv = value(x);
    Matrix y(1, xv.cols());
    for (Eigen::Index j = 0; j < xv.cols(); ++j) y(0, j) = emunet::log_sum_exp(xv.col(j));
    return unary(Op::LogSumExp, x, std::move(y));
  }

  NodeId add(NodeId a, NodeId b) { return binary(Op::Add, a, b, value(a) + value(b)); }
  NodeId mul(NodeId a, NodeId b) { return binary(Op::Mul, a, b, value(a).cwiseProduct(value(b))); }
  NodeId scale(NodeId a, double s) {
    return push_checked({.op = Op::Scale, .a = a, .scalar = s, .value = value(a) * s});
  }

  const Matrix& value(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
  const Matrix& adjoint(NodeId id) const { return adjoints_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return nodes_.size(); }

  /// Propagates `output_adjoint` from `out` back to every earlier node.
  /// `n_params` sizes the parameter-gradient set; pass 0 to skip weight gradients.
  TapeGradients backward(NodeId out, const Matrix& output_adjoint, const ParameterSet* params = nullptr) {
    const Matrix& ov = value(out);
    if (output_adjoint.rows() != ov.rows() || output_adjoint.cols() != ov.cols())
      throw DimensionError("backward: adjoint shape does not match output");
    adjoints_.assign(nodes_.size(), Matrix());
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      adjoints_[i] = Matrix::Zero(nodes_[i].value.rows(), nodes_[i].value.cols());
    adjoints_[static_cast<std::size_t>(out)] = output_adjoint;

    TapeGradients g;
    if (params) g.params = params->zeros_like();

    for (int i = out; i >= 0; --i) {
      const Node& n = nodes_[static_cast<std::size_t>(i)];
      const Matrix& dy = adjoints_[static_cast<std::size_t>(i)];
      switch (n.op) {
        case Op::Input:
          break;
        case Op::Affine: {
          const Matrix& x = value(n.a);
          adj(n.a).noalias() += n.W->transpose() * dy;
          if (params) {
            if (n.w_index >= 0) g.params[static_cast<std::size_t>(n.w_index)].noalias() += dy * x.transpose();
            if (n.b_index >= 0) g.params[static_cast<std::size_t>(n.b_index)] += dy.rowwise().sum();
          }
          break;
        }
        case Op::Tanh:
          adj(n.a).array() += dy.array() * (1.0 - n.value.array().square());
          break;
        case Op::Relu:
          adj(n.a).array() += (value(n.a).array() > 0.0).select(dy.array(), 0.0);
          break;
        case Op::Softplus:
          adj(n.a).array() += dy.array() * value(n.a).unaryExpr([](double v) { return emunet::sigmoid(v); }).array();
          break;
        case Op::Sigmoid:
          adj(n.a).array() += dy.array() * n.value.array() * (1.0 - n.value.array());
          break;
        case Op::Softmax: {
          const Matrix& y = n.value;
          Eigen::RowVectorXd dot = (dy.cwiseProduct(y)).colwise().sum();
          Matrix centered = dy;
          centered.rowwise() -= dot;
          adj(n.a) += y.cwiseProduct(centered);
          break;
        }
        case Op::LogSumExp: {
          const Matrix& x = value(n.a);
          Matrix w = x;
          for (Eigen::Index j = 0; j < x.cols(); ++j)
            w.col(j) = (x.col(j).array() - n.value(0, j)).exp().matrix() * dy(0, j);
          adj(n.a) += w;
          break;
        }
        case Op::Add:
          adj(n.a) += dy;
          adj(n.b2) += dy;
          break;
        case Op::Mul:
          adj(n.a) += dy.cwiseProduct(value(n.b2));
          adj(n.b2) += dy.cwiseProduct(value(n.a));
          break;
        case Op::Scale:
          adj(n.a) += n.scalar * dy;
          break;
      }
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].op == Op::Input) {
        g.input = adjoints_[i];
        break;
      }
    }
    return g;
  }

 private:
  struct Node {
    Op op = Op::Input;
    NodeId a = -1;
    NodeId b2 = -1;
    const Matrix* W = nullptr;
    const Matrix* b = nullptr;
    int w_index = -1;
    int b_index = -1;
    double scalar = 0.0;
    Matrix value;
  };

  static void check_finite(const Matrix& m, const char* what) {
    if (!m.allFinite()) throw NumericalError(std::string("tape: non-finite value produced by ") + what);
  }

  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }
  NodeId push_checked(Node n) {
    check_finite(n.value, "op");
    return push(std::move(n));
  }
  NodeId unary(Op op, NodeId x, Matrix y) { return push_checked({.op = op, .a = x, .value = std::move(y)}); }
  NodeId binary(Op op, NodeId a, NodeId b, Matrix y) {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
      throw DimensionError("elementwise op: shape mismatch");
    return push_checked({.op = op, .a = a, .b2 = b, .value = std::move(y)});
  }
  Matrix& adj(NodeId id) { return adjoints_[static_cast<std::size_t>(id)]; }

  std::vector<Node> nodes_;
  std::vector<Matrix> adjoints_;
};

// ---------------------------------------------------------------------------

enum class Activation { Tanh, Relu };

inline std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "relu"; }
inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::Relu;
  throw ConfigError("unknown activation '" + s + "'");
}

/// Multi-layer perceptron. Parameters are stored as [W0, b0, W1, b1, ...],
/// W_l of shape (out x in). Inputs are first mapped by a fixed affine
/// standardization (scale, shift) that is part of the network, not trained.
struct Mlp {
  int input_dim = 0;
  std::vector<int> hidden;
  int output_dim = 0;
  Activation activation = Activation::Tanh;
  Matrix input_scale;  // diagonal as (in x in)
  Matrix input_shift;  // (in x 1)

  Mlp() = default;
  Mlp(int in, std::vector<int> hidden_sizes, int out, Activation act)
      : input_dim(in), hidden(std::move(hidden_sizes)), output_dim(out), activation(act),
        input_scale(Matrix::Identity(in, in)), input_shift(Matrix::Zero(in, 1)) {}

  std::vector<int> layer_sizes() const {
    std::vector<int> s{input_dim};
    s.insert(s.end(), hidden.begin(), hidden.end());
    s.push_back(output_dim);
    return s;
  }

  /// Uniform in +-1/sqrt(fan_in) for weights and biases.
  ParameterSet init(Rng& rng) const {
    ParameterSet p;
    auto sizes = layer_sizes();
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(sizes[l]));
      std::uniform_real_distribution<double> u(-bound, bound);
      Matrix W(sizes[l + 1], sizes[l]);
      Matrix b(sizes[l + 1], 1);
      for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = u(rng);
      for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = u(rng);
      p.tensors.push_back(std::move(W));
      p.tensors.push_back(std::move(b));
    }
    return p;
  }

  bool matches(const ParameterSet& p) const {
    auto sizes = layer_sizes();
    if (p.size() != 2 * (sizes.size() - 1)) return false;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      if (p[2 * l].rows() != sizes[l + 1] || p[2 * l].cols() != sizes[l]) return false;
      if (p[2 * l + 1].rows() != sizes[l + 1] || p[2 * l + 1].cols() != 1) return false;
    }
    return true;
  }

  /// Records the forward pass on `tape`; returns (input node, output node).
  std::pair<NodeId, NodeId> forward(const ParameterSet& p, const Matrix& x, Tape& tape) const {
    if (x.rows() != input_dim)
      throw DimensionError("mlp: input has " + std::to_string(x.rows()) + " rows, expected " +
                           std::to_string(input_dim));
    if (!matches(p)) throw DimensionError("mlp: parameter shapes do not match architecture");
    const NodeId in = tape.input(x);
    NodeId h = tape.affine(in, input_scale, input_shift);
    const std::size_t n_layers = p.size() / 2;
    for (std::size_t l = 0; l < n_layers; ++l) {
      h = tape.affine(h, p[2 * l], p[2 * l + 1], static_cast<int>(2 * l), static_cast<int>(2 * l + 1));
      if (l + 1 < n_layers) h = activation == Activation::Tanh ? tape.tanh(h) : tape.relu(h);
    }
    return {in, h};
  }

  Matrix evaluate(const ParameterSet& p, const Matrix& x) const {
    Tape t;
    return t.value(forward(p, x, t).second);
  }
};

// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  ParameterSet m;
  ParameterSet v;
  long step = 0;

  static AdamState for_params(const ParameterSet& p) { return {p.zeros_like(), p.zeros_like(), 0}; }
};

/// One bias-corrected Adam descent step. Throws (leaving weights and state
/// untouched) if any gradient entry is non-finite.
inline void adam_step(ParameterSet& weights, const ParameterSet& grads, AdamState& state, const AdamConfig& cfg) {
  if (!weights.same_shape(grads) || !weights.same_shape(state.m) || !weights.same_shape(state.v))
    throw DimensionError("adam_step: shape mismatch between weights, gradients and moments");
  if (!grads.all_finite()) throw NumericalError("adam_step: non-finite gradient");
  state.step += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < weights.size(); ++i) {
    auto m = state.m[i].array();
    auto v = state.v[i].array();
    const auto g = grads[i].array();
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.square();
    weights[i].array() -= cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
  }
}

}  // namespace emunet
