#include "ccrs/autograd.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace ccrs::ag {

namespace {

void require_same_tape(const Var& a, const Var& b) {
  if (a.tape() == nullptr || a.tape() != b.tape())
    throw std::invalid_argument("autograd: operands belong to different tapes");
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string("autograd: shape mismatch in ") + op);
}

}  // namespace

const Matrix& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw std::logic_error("autograd: scalar() on non-1x1 value");
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), false, nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::leaf(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), grad_enabled_, nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::param(const ParamSet& params, const std::string& name) {
  auto it = params_.find(name);
  if (it != params_.end()) return Var(this, it->second);
  Var v = leaf(params.at(name));
  params_[name] = v.id();
  return v;
}

Var Tape::record(Matrix value, const std::vector<Var>& parents, BackwardFn fn) {
  bool rg = false;
  if (grad_enabled_)
    for (const Var& p : parents) rg = rg || p.requires_grad();
  nodes_.push_back(Node{std::move(value), Matrix(), rg, rg ? std::move(fn) : nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Matrix Tape::grad(const Var& v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate(const Var& v, const Matrix& g) {
  Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (!n.requires_grad) return;
  if (g.rows() != n.value.rows() || g.cols() != n.value.cols())
    throw std::logic_error("autograd: gradient shape mismatch");
  if (n.grad.size() == 0)
    n.grad = g;
  else
    n.grad += g;
}

void Tape::backward(const Var& root) {
  if (root.tape() != this) throw std::invalid_argument("autograd: root from another tape");
  if (root.value().size() != 1) throw std::invalid_argument("autograd: backward root must be 1x1");
  if (!grad_enabled_) throw std::logic_error("autograd: backward on a no-grad tape");
  nodes_[static_cast<std::size_t>(root.id())].grad = Matrix::Ones(1, 1);
  for (int id = root.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.backward || n.grad.size() == 0) continue;
    // Node storage does not reallocate during the sweep, so the reference is stable.
    n.backward(*this, n.grad);
  }
}

ParamSet Tape::param_grads(const ParamSet& like) const {
  ParamSet out;
  for (const auto& [name, m] : like) {
    auto it = params_.find(name);
    if (it == params_.end()) {
      out.set(name, Matrix::Zero(m.rows(), m.cols()));
      continue;
    }
    const Node& n = nodes_[static_cast<std::size_t>(it->second)];
    out.set(name, n.grad.size() == 0 ? Matrix::Zero(m.rows(), m.cols()) : n.grad);
  }
  return out;
}

Var add(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "add");
  return a.tape()->record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "sub");
  return a.tape()->record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "mul");
  return a.tape()->record(a.value().cwiseProduct(b.value()), {a, b},
                          [a, b](Tape& t, const Matrix& g) {
                            if (a.requires_grad()) t.accumulate(a, g.cwiseProduct(b.value()));
                            if (b.requires_grad()) t.accumulate(b, g.cwiseProduct(a.value()));
                          });
}

Var scale(const Var& a, double s) {
  return a.tape()->record(a.value() * s, {a},
                          [a, s](Tape& t, const Matrix& g) { t.accumulate(a, g * s); });
}

Var matmul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  if (a.cols() != b.rows()) throw std::invalid_argument("autograd: shape mismatch in matmul");
  return a.tape()->record(a.value() * b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (a.requires_grad()) t.accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) t.accumulate(b, a.value().transpose() * g);
  });
}

Var transpose(const Var& a) {
  return a.tape()->record(a.value().transpose(), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, g.transpose());
  });
}

Var add_row(const Var& a, const Var& row) {
  require_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols())
    throw std::invalid_argument("autograd: add_row expects a 1 x cols row");
  Matrix v = a.value().rowwise() + row.value().row(0);
  return a.tape()->record(std::move(v), {a, row}, [a, row](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (row.requires_grad()) t.accumulate(row, g.colwise().sum());
  });
}

Var add_const(const Var& a, const Matrix& c) {
  if (c.rows() != a.rows() || c.cols() != a.cols())
    throw std::invalid_argument("autograd: shape mismatch in add_const");
  return a.tape()->record(a.value() + c, {a}, [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

Var tanh(const Var& a) {
  Matrix y = a.value().array().tanh().matrix();
  return a.tape()->record(y, {a}, [a, y](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Matrix gelu_value(const Matrix& x) { return x.unaryExpr([](double v) { return gelu_value(v); }); }

Var gelu(const Var& a) {
  return a.tape()->record(gelu_value(a.value()), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(a.value().unaryExpr([](double v) { return gelu_grad(v); })));
  });
}

Var relu(const Var& a) {
  return a.tape()->record(a.value().cwiseMax(0.0), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(a.value().unaryExpr([](double v) { return v > 0 ? 1.0 : 0.0; })));
  });
}

Var softmax_rows(const Var& a) {
  Matrix y(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const double mx = a.value().row(r).maxCoeff();
    RowVector e = (a.value().row(r).array() - mx).exp().matrix();
    y.row(r) = e / e.sum();
  }
  return a.tape()->record(y, {a}, [a, y](Tape& t, const Matrix& g) {
    Matrix gi(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = g.row(r).dot(y.row(r));
      gi.row(r) = y.row(r).cwiseProduct((g.row(r).array() - dot).matrix());
    }
    t.accumulate(a, gi);
  });
}

Var log_softmax_rows(const Var& a) {
  Matrix y(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const double mx = a.value().row(r).maxCoeff();
    const double lse = mx + std::log((a.value().row(r).array() - mx).exp().sum());
    y.row(r) = (a.value().row(r).array() - lse).matrix();
  }
  return a.tape()->record(y, {a}, [a, y](Tape& t, const Matrix& g) {
    Matrix p = y.array().exp().matrix();
    Matrix gi(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) gi.row(r) = g.row(r) - p.row(r) * g.row(r).sum();
    t.accumulate(a, gi);
  });
}

Var sum(const Var& a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return a.tape()->record(v, {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw std::invalid_argument("autograd: mean of empty matrix");
  return scale(sum(a), 1.0 / n);
}

Var gather_rows(const Var& table, const std::vector<int>& rows) {
  Matrix v(static_cast<Eigen::Index>(rows.size()), table.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= table.rows()) throw std::out_of_range("autograd: gather_rows index");
    v.row(static_cast<Eigen::Index>(i)) = table.value().row(rows[i]);
  }
  return table.tape()->record(std::move(v), {table}, [table, rows](Tape& t, const Matrix& g) {
    Matrix gt = Matrix::Zero(table.rows(), table.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) gt.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(table, gt);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("autograd: concat_cols of nothing");
  Eigen::Index rows = parts.front().rows(), cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("autograd: concat_cols row mismatch");
    cols += p.cols();
  }
  Matrix v(rows, cols);
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return parts.front().tape()->record(std::move(v), parts, [parts](Tape& t, const Matrix& g) {
    Eigen::Index o = 0;
    for (const Var& p : parts) {
      if (p.requires_grad()) t.accumulate(p, g.middleCols(o, p.cols()));
      o += p.cols();
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("autograd: concat_rows of nothing");
  Eigen::Index cols = parts.front().cols(), rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("autograd: concat_rows col mismatch");
    rows += p.rows();
  }
  Matrix v(rows, cols);
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    v.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return parts.front().tape()->record(std::move(v), parts, [parts](Tape& t, const Matrix& g) {
    Eigen::Index o = 0;
    for (const Var& p : parts) {
      if (p.requires_grad()) t.accumulate(p, g.middleRows(o, p.rows()));
      o += p.rows();
    }
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols())
    throw std::out_of_range("autograd: slice_cols out of range");
  return a.tape()->record(a.value().middleCols(start, count), {a},
                          [a, start, count](Tape& t, const Matrix& g) {
                            Matrix ga = Matrix::Zero(a.rows(), a.cols());
                            ga.middleCols(start, count) = g;
                            t.accumulate(a, ga);
                          });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows())
    throw std::out_of_range("autograd: slice_rows out of range");
  return a.tape()->record(a.value().middleRows(start, count), {a},
                          [a, start, count](Tape& t, const Matrix& g) {
                            Matrix ga = Matrix::Zero(a.rows(), a.cols());
                            ga.middleRows(start, count) = g;
                            t.accumulate(a, ga);
                          });
}

Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Eigen::Index n = x.rows(), m = x.cols();
  if (gain.rows() != 1 || gain.cols() != m || bias.rows() != 1 || bias.cols() != m)
    throw std::invalid_argument("autograd: layer_norm gain/bias shape");
  Matrix xhat(n, m);
  Vector inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mu = x.value().row(r).mean();
    RowVector c = x.value().row(r).array() - mu;
    const double var = c.squaredNorm() / static_cast<double>(m);
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = c * inv_std(r);
  }
  Matrix y = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  y.rowwise() += bias.value().row(0);
  return x.tape()->record(std::move(y), {x, gain, bias},
                          [x, gain, bias, xhat, inv_std, m](Tape& t, const Matrix& g) {
                            if (gain.requires_grad()) t.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
                            if (bias.requires_grad()) t.accumulate(bias, g.colwise().sum());
                            if (!x.requires_grad()) return;
                            Matrix dxhat = (g.array().rowwise() * gain.value().row(0).array()).matrix();
                            Matrix dx(g.rows(), g.cols());
                            const double md = static_cast<double>(m);
                            for (Eigen::Index r = 0; r < g.rows(); ++r) {
                              const double s1 = dxhat.row(r).sum();
                              const double s2 = dxhat.row(r).dot(xhat.row(r));
                              dx.row(r) = (inv_std(r) / md) *
                                          (md * dxhat.row(r).array() - s1 - xhat.row(r).array() * s2).matrix();
                            }
                            t.accumulate(x, dx);
                          });
}

Var pick_nll(const Var& logp, const std::vector<int>& targets, double min_prob) {
  if (static_cast<Eigen::Index>(targets.size()) != logp.rows())
    throw std::invalid_argument("autograd: pick_nll target count mismatch");
  const double cap = min_prob > 0.0 ? -std::log(min_prob) : std::numeric_limits<double>::infinity();
  Matrix v(logp.rows(), 1);
  std::vector<char> clamped(targets.size(), 0);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    if (targets[i] < 0 || targets[i] >= logp.cols()) throw std::out_of_range("autograd: pick_nll target");
    const double nll = -logp.value()(r, targets[i]);
    if (nll > cap) {
      v(r, 0) = cap;
      clamped[i] = 1;
    } else {
      v(r, 0) = nll;
    }
  }
  return logp.tape()->record(std::move(v), {logp}, [logp, targets, clamped](Tape& t, const Matrix& g) {
    Matrix gl = Matrix::Zero(logp.rows(), logp.cols());
    for (std::size_t i = 0; i < targets.size(); ++i)
      if (!clamped[i]) gl(static_cast<Eigen::Index>(i), targets[i]) = -g(static_cast<Eigen::Index>(i), 0);
    t.accumulate(logp, gl);
  });
}

}  // namespace ccrs::ag
