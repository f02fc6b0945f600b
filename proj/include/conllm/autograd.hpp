#pragma once

// Reverse-mode differentiation over a linear tape. Every op appends a node
// holding its forward value and a closure that pushes the node's gradient
// into its inputs; nodes are appended in evaluation order, so the tape is
// topologically sorted by construction and backward is a reverse sweep.

#include "conllm/errors.hpp"
#include "conllm/rng.hpp"
#include "conllm/tensor.hpp"

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace conllm {

// Trainable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() {
    if (grad.shape() != value.shape()) grad = Tensor(value.shape());
    else grad.fill(0.0);
  }
};

class Tape;
using NodeId = std::size_t;

// Handle to a tape node.
struct Var {
  Tape* tape = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

  struct Node {
    std::string_view op;
    std::vector<NodeId> inputs;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    Backward backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor t) { return append("constant", {}, std::move(t), false, nullptr, {}); }

  // Differentiable input not tied to a Parameter; read its gradient with grad().
  Var leaf(Tensor t) { return append("leaf", {}, std::move(t), true, nullptr, {}); }

  // Parameter leaf. backward() adds the node gradient into p.grad.
  Var param(Parameter& p) { return append("param", {}, p.value, true, &p, {}); }

  Var push(std::string_view op, std::initializer_list<Var> inputs, Tensor value, Backward fn) {
    return push(op, std::vector<Var>(inputs), std::move(value), std::move(fn));
  }

  Var push(std::string_view op, const std::vector<Var>& inputs, Tensor value, Backward fn) {
    std::vector<NodeId> ids;
    ids.reserve(inputs.size());
    bool rg = false;
    for (const Var& v : inputs) {
      if (v.tape != this) throw ContractError(std::string(op) + ": input from a different tape");
      ids.push_back(v.id);
      rg = rg || nodes_[v.id].requires_grad;
    }
    return append(op, std::move(ids), std::move(value), rg, nullptr, rg ? std::move(fn) : Backward{});
  }

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  bool requires_grad(const Var& v) const { return requires_grad(v.id); }

  // Gradient buffer of a node, zero-initialized on first access.
  Tensor& grad(NodeId id) {
    Node& n = nodes_.at(id);
    if (n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }
  Tensor& grad(const Var& v) { return grad(v.id); }

  std::size_t size() const noexcept { return nodes_.size(); }
  const std::deque<Node>& nodes() const noexcept { return nodes_; }

  void backward(const Var& loss) {
    if (loss.tape != this) throw ContractError("backward: loss from a different tape");
    if (value(loss.id).size() != 1)
      throw ContractError("backward: loss must be a scalar, got shape " +
                          shape_str(value(loss.id).shape()));
    for (auto& n : nodes_) n.grad = Tensor();
    grad(loss.id).fill(1.0);
    for (NodeId i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, n.grad);
    }
    for (auto& n : nodes_) {
      if (!n.param || n.grad.empty()) continue;
      Parameter& p = *n.param;
      if (p.grad.shape() != p.value.shape()) p.grad = Tensor(p.value.shape());
      for (std::size_t k = 0; k < p.grad.size(); ++k) p.grad[k] += n.grad[k];
    }
  }

 private:
  Var append(std::string_view op, std::vector<NodeId> inputs, Tensor value, bool rg, Parameter* p,
             Backward fn) {
    nodes_.push_back(Node{op, std::move(inputs), std::move(value), Tensor(), rg, p, std::move(fn)});
    return Var{this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace detail {

inline void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

inline Tape& same_tape(const Var& a, const Var& b) {
  if (a.tape != b.tape) throw ContractError("operands live on different tapes");
  return *a.tape;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out = matmul(av, bv);
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  return t.push("matmul", {a, b}, std::move(out), [a, b, m, k, n](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a))  // dA = G * B^T
      kernel::gemm_nt(g.data().data(), b.value().data().data(), tp.grad(a).data().data(), m, n, k,
                      true);
    if (tp.requires_grad(b))  // dB = A^T * G
      kernel::gemm_tn(a.value().data().data(), g.data().data(), tp.grad(b).data().data(), k, m, n,
                      true);
  });
}

inline Var transpose(const Var& a) {
  return a.tape->push("transpose", {a}, transpose(a.value()), [a](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) ga(j, i) += g(i, j);
  });
}

// Y = X W^T + b for X [n x in], W [out x in], b [out].
inline Var linear(const Var& x, const Var& w, const Var& b) {
  Tape& t = detail::same_tape(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  require_matrix(xv, "linear");
  require_matrix(wv, "linear");
  const std::size_t n = xv.rows(), in = xv.cols(), out = wv.rows();
  if (wv.cols() != in)
    throw DimensionError("linear: input " + shape_str(xv.shape()) + " incompatible with weight " +
                         shape_str(wv.shape()));
  if (bv.size() != out)
    throw DimensionError("linear: bias " + shape_str(bv.shape()) + " does not match weight " +
                         shape_str(wv.shape()));
  Tensor y = Tensor::matrix(n, out);
  kernel::gemm_nt(xv.data().data(), wv.data().data(), y.data().data(), n, in, out, false);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < out; ++j) y(i, j) += bv[j];
  return t.push("linear", {x, w, b}, std::move(y), [x, w, b, n, in, out](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(x))  // dX = G W
      kernel::gemm_nn(g.data().data(), w.value().data().data(), tp.grad(x).data().data(), n, out,
                      in, true);
    if (tp.requires_grad(w))  // dW = G^T X
      kernel::gemm_tn(g.data().data(), x.value().data().data(), tp.grad(w).data().data(), out, n,
                      in, true);
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad(b);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < out; ++j) gb[j] += g(i, j);
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  detail::add_into(out, b.value());
  return t.push("add", {a, b}, std::move(out), [a, b](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) detail::add_into(tp.grad(a), g);
    if (tp.requires_grad(b)) detail::add_into(tp.grad(b), g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return t.push("sub", {a, b}, std::move(out), [a, b](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) detail::add_into(tp.grad(a), g);
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return t.push("mul", {a, b}, std::move(out), [a, b](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) {
      Tensor& ga = tp.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.value()[i];
    }
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.value()[i];
    }
  });
}

inline Var scale(const Var& a, double c) {
  Tensor out = a.value();
  for (double& v : out.storage()) v *= c;
  return a.tape->push("scale", {a}, std::move(out), [a, c](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape->push("sum", {a}, Tensor::scalar(s), [a](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad(a);
    for (double& v : ga.storage()) v += g[0];
  });
}

inline Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

// Weighted sum of two scalars: wa * a + wb * b.
inline Var weighted_sum(const Var& a, double wa, const Var& b, double wb) {
  Tape& t = detail::same_tape(a, b);
  if (a.value().size() != 1 || b.value().size() != 1)
    throw ContractError("weighted_sum expects scalars");
  const double v = wa * a.value()[0] + wb * b.value()[0];
  return t.push("weighted_sum", {a, b}, Tensor::scalar(v), [a, b, wa, wb](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) tp.grad(a)[0] += wa * g[0];
    if (tp.requires_grad(b)) tp.grad(b)[0] += wb * g[0];
  });
}

inline Var reshape(const Var& a, Shape s) {
  if (shape_numel(s) != a.value().size())
    throw DimensionError("reshape: " + shape_str(a.value().shape()) + " -> " + shape_str(s));
  return a.tape->push("reshape", {a}, a.value().reshaped(std::move(s)),
                      [a](Tape& tp, const Tensor& g) {
                        Tensor& ga = tp.grad(a);
                        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                      });
}

// ---------------------------------------------------------------------------
// Nonlinearities

inline Var relu(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.storage()) v = v > 0.0 ? v : 0.0;
  return a.tape->push("relu", {a}, std::move(out), [a](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad(a);
    const Tensor& x = a.value();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) ga[i] += g[i];
  });
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.storage()) v = sigmoid(v);
  Tensor y = out;
  return a.tape->push("sigmoid", {a}, std::move(out), [a, y](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

// Inverted dropout: survivors are scaled by 1/(1-p) in training; identity at eval.
inline Var dropout(const Var& a, double p, CounterRng& rng, bool train) {
  if (!(p >= 0.0 && p < 1.0))
    throw ParameterError("dropout: rate must be in [0, 1), got " + std::to_string(p));
  if (!train || p == 0.0) return a;
  const double keep_scale = 1.0 / (1.0 - p);
  Tensor mask(a.value().shape());
  for (double& m : mask.storage()) m = rng.uniform() >= p ? keep_scale : 0.0;
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return a.tape->push("dropout", {a}, std::move(out), [a, mask](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * mask[i];
  });
}

inline Var softmax_rows(const Var& a) {
  require_matrix(a.value(), "softmax_rows");
  Tensor y = softmax_rows(a.value());
  Tensor saved = y;
  return a.tape->push("softmax_rows", {a}, std::move(y), [a, saved](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad(a);
    for (std::size_t r = 0; r < saved.rows(); ++r) {
      auto yr = saved.row(r);
      auto gr = g.row(r);
      const double s = dot(gr, yr);
      auto out = ga.row(r);
      for (std::size_t c = 0; c < yr.size(); ++c) out[c] += yr[c] * (gr[c] - s);
    }
  });
}

// Normalizes each row of X [n x d] to zero mean / unit variance, then applies
// gamma [d] and beta [d].
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  Tape& t = detail::same_tape(x, gamma);
  const Tensor& xv = x.value();
  require_matrix(xv, "layer_norm");
  const std::size_t n = xv.rows(), d = xv.cols();
  if (gamma.value().size() != d || beta.value().size() != d)
    throw DimensionError("layer_norm: affine parameters must have length " + std::to_string(d));
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(n);
  Tensor y(xv.shape());
  for (std::size_t r = 0; r < n; ++r) {
    auto xr = xv.row(r);
    double mu = 0.0;
    for (double v : xr) mu += v;
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (double v : xr) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat(r, c) = (xr[c] - mu) * inv_std[r];
      y(r, c) = xhat(r, c) * gamma.value()[c] + beta.value()[c];
    }
  }
  return t.push("layer_norm", {x, gamma, beta}, std::move(y),
                [x, gamma, beta, xhat, inv_std, n, d](Tape& tp, const Tensor& g) {
                  const Tensor& gm = gamma.value();
                  if (tp.requires_grad(gamma) || tp.requires_grad(beta)) {
                    Tensor& gg = tp.grad(gamma);
                    Tensor& gb = tp.grad(beta);
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t c = 0; c < d; ++c) {
                        gg[c] += g(r, c) * xhat(r, c);
                        gb[c] += g(r, c);
                      }
                  }
                  if (!tp.requires_grad(x)) return;
                  Tensor& gx = tp.grad(x);
                  const double inv_d = 1.0 / static_cast<double>(d);
                  for (std::size_t r = 0; r < n; ++r) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t c = 0; c < d; ++c) {
                      const double gh = g(r, c) * gm[c];
                      m1 += gh;
                      m2 += gh * xhat(r, c);
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for (std::size_t c = 0; c < d; ++c)
                      gx(r, c) += inv_std[r] * (g(r, c) * gm[c] - m1 - xhat(r, c) * m2);
                  }
                });
}

// Scales each row to unit L2 norm. Rows with norm below `floor` are replaced
// by e_1 (no gradient flows through them) and counted in *fallbacks.
inline Var l2_normalize_rows(const Var& x, std::size_t* fallbacks = nullptr, double floor = 1e-12) {
  const Tensor& xv = x.value();
  require_matrix(xv, "l2_normalize_rows");
  const std::size_t n = xv.rows(), d = xv.cols();
  Tensor y(xv.shape());
  std::vector<double> norms(n);
  for (std::size_t r = 0; r < n; ++r) {
    norms[r] = l2_norm(xv.row(r));
    if (norms[r] < floor) {
      y(r, 0) = 1.0;
      if (fallbacks) ++*fallbacks;
      continue;
    }
    for (std::size_t c = 0; c < d; ++c) y(r, c) = xv(r, c) / norms[r];
  }
  Tensor saved = y;
  return x.tape->push("l2_normalize_rows", {x}, std::move(y),
                      [x, saved, norms, floor, d](Tape& tp, const Tensor& g) {
                        Tensor& gx = tp.grad(x);
                        for (std::size_t r = 0; r < saved.rows(); ++r) {
                          if (norms[r] < floor) continue;
                          const double proj = dot(saved.row(r), g.row(r));
                          for (std::size_t c = 0; c < d; ++c)
                            gx(r, c) += (g(r, c) - saved(r, c) * proj) / norms[r];
                        }
                      });
}

// ---------------------------------------------------------------------------
// Row plumbing

// Adds table T [period x d] to X [n x d], row r receiving T[r % period].
inline Var add_tiled_rows(const Var& x, const Var& table) {
  Tape& t = detail::same_tape(x, table);
  const Tensor& xv = x.value();
  const Tensor& tv = table.value();
  require_matrix(xv, "add_tiled_rows");
  require_matrix(tv, "add_tiled_rows");
  if (tv.cols() != xv.cols() || tv.rows() == 0 || xv.rows() % tv.rows() != 0)
    throw DimensionError("add_tiled_rows: " + shape_str(xv.shape()) + " vs table " +
                         shape_str(tv.shape()));
  const std::size_t period = tv.rows(), d = xv.cols();
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < d; ++c) out(r, c) += tv(r % period, c);
  return t.push("add_tiled_rows", {x, table}, std::move(out),
                [x, table, period, d](Tape& tp, const Tensor& g) {
                  if (tp.requires_grad(x)) detail::add_into(tp.grad(x), g);
                  if (tp.requires_grad(table)) {
                    Tensor& gt = tp.grad(table);
                    for (std::size_t r = 0; r < g.rows(); ++r)
                      for (std::size_t c = 0; c < d; ++c) gt(r % period, c) += g(r, c);
                  }
                });
}

// For X [n*group x d], output row i = sum_m weights[m] * X[i*group + m].
inline Var group_weighted_sum(const Var& x, const std::vector<double>& weights) {
  const Tensor& xv = x.value();
  require_matrix(xv, "group_weighted_sum");
  const std::size_t group = weights.size(), d = xv.cols();
  if (group == 0 || xv.rows() % group != 0)
    throw DimensionError("group_weighted_sum: " + std::to_string(xv.rows()) +
                         " rows not divisible by group " + std::to_string(group));
  const std::size_t n = xv.rows() / group;
  Tensor out = Tensor::matrix(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t m = 0; m < group; ++m)
      for (std::size_t c = 0; c < d; ++c) out(i, c) += weights[m] * xv(i * group + m, c);
  return x.tape->push("group_weighted_sum", {x}, std::move(out),
                      [x, weights, group, n, d](Tape& tp, const Tensor& g) {
                        Tensor& gx = tp.grad(x);
                        for (std::size_t i = 0; i < n; ++i)
                          for (std::size_t m = 0; m < group; ++m)
                            for (std::size_t c = 0; c < d; ++c)
                              gx(i * group + m, c) += weights[m] * g(i, c);
                      });
}

// Where an output row comes from: row `row` of source `source`.
struct RowRef {
  std::size_t source;
  std::size_t row;
};

// Builds a matrix whose rows are gathered from several same-width sources.
inline Var gather_rows(const std::vector<Var>& sources, const std::vector<RowRef>& layout) {
  if (sources.empty()) throw ContractError("gather_rows: no sources");
  const std::size_t d = sources[0].value().cols();
  for (const Var& s : sources) {
    require_matrix(s.value(), "gather_rows");
    if (s.value().cols() != d) throw DimensionError("gather_rows: sources differ in width");
  }
  Tensor out = Tensor::matrix(layout.size(), d);
  for (std::size_t r = 0; r < layout.size(); ++r) {
    const RowRef& ref = layout[r];
    if (ref.source >= sources.size() || ref.row >= sources[ref.source].value().rows())
      throw ContractError("gather_rows: row reference out of range");
    auto src = sources[ref.source].value().row(ref.row);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return sources[0].tape->push("gather_rows", sources, std::move(out),
                               [sources, layout, d](Tape& tp, const Tensor& g) {
                                 for (std::size_t r = 0; r < layout.size(); ++r) {
                                   const Var& s = sources[layout[r].source];
                                   if (!tp.requires_grad(s)) continue;
                                   auto dst = tp.grad(s).row(layout[r].row);
                                   auto gr = g.row(r);
                                   for (std::size_t c = 0; c < d; ++c) dst[c] += gr[c];
                                 }
                               });
}

// ---------------------------------------------------------------------------
// Losses

// Mean binary cross-entropy from pre-sigmoid logits [n] or [n x 1]:
//   -[y log s(z) + (1-y) log(1-s(z))] = softplus(z) - y z.
inline Var bce_with_logits(const Var& logits, const std::vector<double>& labels) {
  const Tensor& z = logits.value();
  if (z.size() != labels.size())
    throw DimensionError("bce_with_logits: " + std::to_string(z.size()) + " logits vs " +
                         std::to_string(labels.size()) + " labels");
  if (labels.empty()) throw ContractError("bce_with_logits: empty batch");
  const double n = static_cast<double>(labels.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double softplus = std::max(z[i], 0.0) + std::log1p(std::exp(-std::abs(z[i])));
    total += softplus - labels[i] * z[i];
  }
  return logits.tape->push("bce_with_logits", {logits}, Tensor::scalar(total / n),
                           [logits, labels, n](Tape& tp, const Tensor& g) {
                             Tensor& gz = tp.grad(logits);
                             const Tensor& zv = logits.value();
                             for (std::size_t i = 0; i < zv.size(); ++i)
                               gz[i] += g[0] * (sigmoid(zv[i]) - labels[i]) / n;
                           });
}

}  // namespace conllm
