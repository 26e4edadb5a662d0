#pragma once

// Tape-based reverse-mode automatic differentiation over dense double
// matrices. Nodes are appended in evaluation order, so reverse iteration is a
// valid topological order for the backward sweep.

#include "ccrs/tensor.hpp"

#include <functional>
#include <initializer_list>
#include <map>
#include <string>
#include <vector>

namespace ccrs::ag {

class Tape;

class Var {
 public:
  Var() = default;

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Matrix& value() const;
  bool requires_grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

using BackwardFn = std::function<void(Tape&, const Matrix& grad_out)>;

class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Matrix value);
  Var leaf(Matrix value);
  /// Binds a parameter group as a leaf. Repeated calls with the same name
  /// return the same node.
  Var param(const ParamSet& params, const std::string& name);
  bool has_param(const std::string& name) const { return params_.count(name) != 0; }

  Var record(Matrix value, const std::vector<Var>& parents, BackwardFn fn);

  /// Seeds d(root)/d(root) = 1 (root must be 1x1) and sweeps backwards.
  void backward(const Var& root);

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  /// Gradient accumulated at a node; zero matrix of matching shape if none.
  Matrix grad(const Var& v) const;
  void accumulate(const Var& v, const Matrix& g);

  /// Gradients for every group in `like`; unbound or untouched groups are zero.
  ParamSet param_grads(const ParamSet& like) const;

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::map<std::string, int> params_;
};

// Elementwise and linear-algebra ops. Shapes follow Eigen semantics; all
// binary elementwise ops require equal shapes unless stated otherwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
/// a (n x m) + row (1 x m) broadcast over rows.
Var add_row(const Var& a, const Var& row);
/// a + c for a constant matrix c (e.g. attention masks).
Var add_const(const Var& a, const Matrix& c);
Var tanh(const Var& a);
Var gelu(const Var& a);
Var relu(const Var& a);
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
Var gather_rows(const Var& table, const std::vector<int>& rows);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
/// Column vector with entry i = -logp(i, targets[i]), floored so that the
/// implied probability is at least `min_prob`.
Var pick_nll(const Var& logp, const std::vector<int>& targets, double min_prob = 0.0);

/// Exact GELU, x * Phi(x).
double gelu_value(double x);
double gelu_grad(double x);
Matrix gelu_value(const Matrix& x);

}  // namespace ccrs::ag
