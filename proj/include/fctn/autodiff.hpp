#pragma once

#include "fctn/tensor.hpp"

#include <cmath>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace fctn {

template <typename Scalar>
class Graph;

/// Handle to a node recorded on a Graph. Cheap to copy; only valid while the
/// owning graph is alive.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Graph<Scalar>* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph<Scalar>& graph() const { return *graph_; }
  std::size_t id() const { return id_; }

  const Tensor<Scalar>& value() const { return graph_->value(*this); }
  const Shape& shape() const { return value().shape(); }
  Index size() const { return value().size(); }
  bool requires_grad() const { return graph_->requires_grad(*this); }

  /// Gradient accumulated by Graph::backward, or nullopt if none reached this node.
  std::optional<Tensor<Scalar>> grad() const { return graph_->grad(*this); }

 private:
  Graph<Scalar>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run tape. Nodes are appended in creation order, which is a
/// topological order, so backward is a single reverse sweep.
///
/// A graph is confined to one thread. Leaves hold their own copy of the
/// value, so independent graphs can share parameters read-only.
template <typename Scalar>
class Graph {
 public:
  using Vector = typename Tensor<Scalar>::Vector;
  using BackwardFn = std::function<void(Graph&, const Vector& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<Scalar> leaf(Tensor<Scalar> value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), std::nullopt, requires_grad, true, nullptr});
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  Var<Scalar> constant(Tensor<Scalar> value) { return leaf(std::move(value), false); }
  Var<Scalar> constant(Scalar value) { return leaf(Tensor<Scalar>::scalar(value), false); }

  /// Records an op output. `backward` is dropped when no input needs a gradient.
  Var<Scalar> record(Tensor<Scalar> value, std::initializer_list<Var<Scalar>> inputs, BackwardFn backward) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || requires_grad(in);
    return record_if(std::move(value), needs, std::move(backward));
  }

  Var<Scalar> record_if(Tensor<Scalar> value, bool needs_grad, BackwardFn backward) {
    if (!value.all_finite()) throw DomainError("operation produced non-finite values");
    nodes_.push_back(Node{std::move(value), std::nullopt, needs_grad, false,
                          needs_grad ? std::move(backward) : nullptr});
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  const Tensor<Scalar>& value(const Var<Scalar>& v) const { return nodes_.at(v.id()).value; }
  bool requires_grad(const Var<Scalar>& v) const { return nodes_.at(v.id()).requires_grad; }

  std::optional<Tensor<Scalar>> grad(const Var<Scalar>& v) const {
    const Node& n = nodes_.at(v.id());
    if (!n.grad) return std::nullopt;
    return Tensor<Scalar>(n.value.shape(), *n.grad);
  }

  std::size_t size() const { return nodes_.size(); }

  /// Adds `g` into the gradient of `v`. No-op for nodes that need no gradient.
  template <typename Derived>
  void accumulate(const Var<Scalar>& v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return;
    if (n.grad)
      *n.grad += g;
    else
      n.grad = g;
  }

  /// Reverse sweep from a scalar root. Leaf gradients accumulate across
  /// calls; intermediate gradients are recomputed each time.
  void backward(const Var<Scalar>& root) {
    if (&root.graph() != this) throw Error("backward root belongs to another graph");
    if (value(root).size() != 1)
      throw ShapeError("backward requires a scalar root, got " + shape_str(value(root).shape()));
    for (auto& n : nodes_)
      if (!n.is_leaf) n.grad.reset();
    accumulate(root, Vector::Ones(1));
    for (std::size_t id = root.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.grad || !n.backward) continue;
      const Vector g = *n.grad;
      n.backward(*this, g);
    }
  }

 private:
  struct Node {
    Tensor<Scalar> value;
    std::optional<Vector> grad;
    bool requires_grad;
    bool is_leaf;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;  // deque: references to values survive later appends
};

namespace detail {

template <typename Scalar>
void check_same_graph(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (&a.graph() != &b.graph()) throw Error("operands recorded on different graphs");
}

// Sum of a broadcast gradient back onto a scalar operand.
template <typename Scalar>
typename Tensor<Scalar>::Vector reduce_to(const Var<Scalar>& v, const typename Tensor<Scalar>::Vector& g) {
  if (v.size() == g.size()) return g;
  return Tensor<Scalar>::Vector::Constant(1, g.sum());
}

// Broadcast rule: equal shapes, or one side holds a single value.
template <typename Scalar>
Shape broadcast_shape(const char* op, const Var<Scalar>& a, const Var<Scalar>& b) {
  check_same_graph(a, b);
  if (a.shape() == b.shape()) return a.shape();
  if (b.size() == 1) return a.shape();
  if (a.size() == 1) return b.shape();
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename Scalar>
auto expand(const Var<Scalar>& v, Index n) {
  using Vector = typename Tensor<Scalar>::Vector;
  if (v.size() == n) return Vector(v.value().data());
  return Vector(Vector::Constant(n, v.value()[0]));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  Shape shape = detail::broadcast_shape("add", a, b);
  const Index n = shape_size(shape);
  auto& g = a.graph();
  return g.record(Tensor<Scalar>(shape, detail::expand(a, n) + detail::expand(b, n)), {a, b},
                  [a, b](Graph<Scalar>& gr, const auto& go) {
                    gr.accumulate(a, detail::reduce_to(a, go));
                    gr.accumulate(b, detail::reduce_to(b, go));
                  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  Shape shape = detail::broadcast_shape("sub", a, b);
  const Index n = shape_size(shape);
  auto& g = a.graph();
  return g.record(Tensor<Scalar>(shape, detail::expand(a, n) - detail::expand(b, n)), {a, b},
                  [a, b](Graph<Scalar>& gr, const auto& go) {
                    gr.accumulate(a, detail::reduce_to(a, go));
                    gr.accumulate(b, -detail::reduce_to(b, go));
                  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  using Vector = typename Tensor<Scalar>::Vector;
  Shape shape = detail::broadcast_shape("mul", a, b);
  const Index n = shape_size(shape);
  Vector av = detail::expand(a, n), bv = detail::expand(b, n);
  Vector out = av.cwiseProduct(bv);
  return a.graph().record(Tensor<Scalar>(shape, std::move(out)), {a, b},
                          [a, b, av, bv](Graph<Scalar>& gr, const auto& go) {
                            if (a.requires_grad()) gr.accumulate(a, detail::reduce_to(a, Vector(go.cwiseProduct(bv))));
                            if (b.requires_grad()) gr.accumulate(b, detail::reduce_to(b, Vector(go.cwiseProduct(av))));
                          });
}

template <typename Scalar>
Var<Scalar> div(const Var<Scalar>& a, const Var<Scalar>& b) {
  using Vector = typename Tensor<Scalar>::Vector;
  Shape shape = detail::broadcast_shape("div", a, b);
  const Index n = shape_size(shape);
  Vector av = detail::expand(a, n), bv = detail::expand(b, n);
  if ((bv.array() == Scalar(0)).any()) throw DomainError("div: division by zero");
  Vector out = av.cwiseQuotient(bv);
  return a.graph().record(Tensor<Scalar>(shape, out), {a, b},
                          [a, b, bv, out](Graph<Scalar>& gr, const auto& go) {
                            Vector ga = go.cwiseQuotient(bv);
                            if (a.requires_grad()) gr.accumulate(a, detail::reduce_to(a, ga));
                            if (b.requires_grad()) gr.accumulate(b, detail::reduce_to(b, Vector(-ga.cwiseProduct(out))));
                          });
}

template <typename Scalar>
Var<Scalar> negate(const Var<Scalar>& a) {
  return a.graph().record(Tensor<Scalar>(a.shape(), -a.value().data()), {a},
                          [a](Graph<Scalar>& gr, const auto& go) { gr.accumulate(a, -go); });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  using Vector = typename Tensor<Scalar>::Vector;
  Vector out = a.value().data().cwiseMax(Scalar(0));
  return a.graph().record(Tensor<Scalar>(a.shape(), out), {a}, [a](Graph<Scalar>& gr, const auto& go) {
    gr.accumulate(a, (a.value().data().array() > Scalar(0)).select(go.array(), Scalar(0)).matrix());
  });
}

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& a) {
  using Vector = typename Tensor<Scalar>::Vector;
  Vector out = a.value().data().array().exp().matrix();
  return a.graph().record(Tensor<Scalar>(a.shape(), out), {a}, [a, out](Graph<Scalar>& gr, const auto& go) {
    gr.accumulate(a, go.cwiseProduct(out));
  });
}

template <typename Scalar>
Var<Scalar> log(const Var<Scalar>& a) {
  const auto& x = a.value().data();
  if ((x.array() <= Scalar(0)).any()) throw DomainError("log of non-positive value");
  return a.graph().record(Tensor<Scalar>(a.shape(), x.array().log().matrix()), {a},
                          [a](Graph<Scalar>& gr, const auto& go) {
                            gr.accumulate(a, go.cwiseQuotient(a.value().data()));
                          });
}

template <typename Scalar>
Var<Scalar> sqrt(const Var<Scalar>& a) {
  using Vector = typename Tensor<Scalar>::Vector;
  const auto& x = a.value().data();
  if ((x.array() < Scalar(0)).any()) throw DomainError("sqrt of negative value");
  Vector out = x.cwiseSqrt();
  return a.graph().record(Tensor<Scalar>(a.shape(), out), {a}, [a, out](Graph<Scalar>& gr, const auto& go) {
    gr.accumulate(a, (go.array() / (Scalar(2) * out.array())).matrix());
  });
}

/// Multiplies by a constant that is not part of the graph.
template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor) {
  return a.graph().record(Tensor<Scalar>(a.shape(), a.value().data() * factor), {a},
                          [a, factor](Graph<Scalar>& gr, const auto& go) { gr.accumulate(a, go * factor); });
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b) { return mul(a, b); }
template <typename Scalar>
Var<Scalar> operator/(const Var<Scalar>& a, const Var<Scalar>& b) { return div(a, b); }
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a) { return negate(a); }
template <typename Scalar>
Var<Scalar> operator*(Scalar s, const Var<Scalar>& a) { return scale(a, s); }
template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, Scalar s) { return scale(a, s); }

// ---------------------------------------------------------------------------
// Reductions and reshaping

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  using Vector = typename Tensor<Scalar>::Vector;
  const Index n = a.size();
  return a.graph().record(Tensor<Scalar>::scalar(a.value().data().sum()), {a},
                          [a, n](Graph<Scalar>& gr, const auto& go) { gr.accumulate(a, Vector::Constant(n, go[0])); });
}

template <typename Scalar>
Var<Scalar> dot(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::check_same_graph(a, b);
  if (a.size() != b.size())
    throw ShapeError("dot: length mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return a.graph().record(Tensor<Scalar>::scalar(a.value().data().dot(b.value().data())), {a, b},
                          [a, b](Graph<Scalar>& gr, const auto& go) {
                            gr.accumulate(a, b.value().data() * go[0]);
                            gr.accumulate(b, a.value().data() * go[0]);
                          });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  return a.graph().record(a.value().reshaped(std::move(shape)), {a},
                          [a](Graph<Scalar>& gr, const auto& go) { gr.accumulate(a, go); });
}

/// Flattens every input and joins them end to end into one vector.
template <typename Scalar>
Var<Scalar> flatten_concat(std::span<const Var<Scalar>> parts) {
  using Vector = typename Tensor<Scalar>::Vector;
  if (parts.empty()) throw ShapeError("flatten_concat: no inputs");
  Index total = 0;
  bool needs = false;
  for (const auto& p : parts) {
    detail::check_same_graph(parts.front(), p);
    total += p.size();
    needs = needs || p.requires_grad();
  }
  Vector out(total);
  Index offset = 0;
  for (const auto& p : parts) {
    out.segment(offset, p.size()) = p.value().data();
    offset += p.size();
  }
  std::vector<Var<Scalar>> inputs(parts.begin(), parts.end());
  return parts.front().graph().record_if(Tensor<Scalar>({total}, std::move(out)), needs,
                                         [inputs](Graph<Scalar>& gr, const auto& go) {
                                           Index off = 0;
                                           for (const auto& p : inputs) {
                                             gr.accumulate(p, go.segment(off, p.size()));
                                             off += p.size();
                                           }
                                         });
}

/// Joins two channels-last maps along their trailing dimension.
template <typename Scalar>
Var<Scalar> concat_channels(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::check_same_graph(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size() || sa.empty() || !std::equal(sa.begin(), sa.end() - 1, sb.begin()))
    throw ShapeError("concat_channels: " + shape_str(sa) + " vs " + shape_str(sb));
  const Index ca = sa.back(), cb = sb.back(), rows = a.size() / ca;
  using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Shape shape = sa;
  shape.back() = ca + cb;
  Tensor<Scalar> out(shape);
  Eigen::Map<RowMat> o(out.data().data(), rows, ca + cb);
  o.leftCols(ca) = Eigen::Map<const RowMat>(a.value().data().data(), rows, ca);
  o.rightCols(cb) = Eigen::Map<const RowMat>(b.value().data().data(), rows, cb);
  return a.graph().record(std::move(out), {a, b}, [a, b, rows, ca, cb](Graph<Scalar>& gr, const auto& go) {
    Eigen::Map<const RowMat> g(go.data(), rows, ca + cb);
    if (a.requires_grad()) {
      RowMat ga = g.leftCols(ca);
      gr.accumulate(a, Eigen::Map<const typename Tensor<Scalar>::Vector>(ga.data(), ga.size()));
    }
    if (b.requires_grad()) {
      RowMat gb = g.rightCols(cb);
      gr.accumulate(b, Eigen::Map<const typename Tensor<Scalar>::Vector>(gb.data(), gb.size()));
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vector = typename Tensor<Scalar>::Vector;
  detail::check_same_graph(a, b);
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const Index m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor<Scalar> out({m, n});
  Eigen::Map<const RowMat> am(a.value().data().data(), m, k), bm(b.value().data().data(), k, n);
  Eigen::Map<RowMat>(out.data().data(), m, n).noalias() = am * bm;
  return a.graph().record(std::move(out), {a, b}, [a, b, m, k, n](Graph<Scalar>& gr, const auto& go) {
    Eigen::Map<const RowMat> g(go.data(), m, n);
    Eigen::Map<const RowMat> am(a.value().data().data(), m, k), bm(b.value().data().data(), k, n);
    if (a.requires_grad()) {
      RowMat ga = g * bm.transpose();
      gr.accumulate(a, Eigen::Map<const Vector>(ga.data(), ga.size()));
    }
    if (b.requires_grad()) {
      RowMat gb = am.transpose() * g;
      gr.accumulate(b, Eigen::Map<const Vector>(gb.data(), gb.size()));
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax family. Both operate on the trailing (channel) dimension.

/// Per-pixel softmax over channels, stabilized by subtracting the pixel max.
template <typename Scalar>
Tensor<Scalar> softmax_channel(const Tensor<Scalar>& logits) {
  using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  if (logits.rank() < 1 || logits.shape().back() < 1) throw ShapeError("softmax_channel: need at least one channel");
  if (!logits.all_finite()) throw DomainError("softmax_channel: non-finite input");
  const Index c = logits.shape().back(), rows = logits.size() / c;
  Tensor<Scalar> out(logits.shape());
  Eigen::Map<const RowMat> z(logits.data().data(), rows, c);
  Eigen::Map<RowMat> p(out.data().data(), rows, c);
  p = (z.colwise() - z.rowwise().maxCoeff()).array().exp().matrix();
  p.array().colwise() /= p.rowwise().sum().array();
  return out;
}

template <typename Scalar>
Var<Scalar> softmax_channel(const Var<Scalar>& logits) {
  using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vector = typename Tensor<Scalar>::Vector;
  Tensor<Scalar> out = softmax_channel(logits.value());
  const Index c = out.shape().back(), rows = out.size() / c;
  Vector probs = out.data();
  return logits.graph().record(std::move(out), {logits}, [logits, probs, rows, c](Graph<Scalar>& gr, const auto& go) {
    Eigen::Map<const RowMat> s(probs.data(), rows, c), g(go.data(), rows, c);
    RowMat gin = s.cwiseProduct(g);
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inner = gin.rowwise().sum();
    gin -= (s.array().colwise() * inner.array()).matrix();
    gr.accumulate(logits, Eigen::Map<const Vector>(gin.data(), gin.size()));
  });
}

/// Result of a summed pixel-wise cross-entropy.
template <typename Scalar>
struct NllSum {
  Var<Scalar> sum;     ///< sum over labeled pixels of -alpha[y] * log softmax(z)[y]
  Index labeled = 0;   ///< number of pixels whose label is not the ignore id
};

/// Summed, optionally class-weighted, softmax cross-entropy of channels-last
/// logits against a label mask. Pixels holding kIgnoreId contribute nothing.
/// An empty `alpha` means unit weights.
template <typename Scalar>
NllSum<Scalar> softmax_nll_sum(const Var<Scalar>& logits, const Mask& labels, std::span<const Scalar> alpha = {}) {
  using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vector = typename Tensor<Scalar>::Vector;
  const Shape& shape = logits.shape();
  if (shape.size() != 3 || shape[0] != labels.rows() || shape[1] != labels.cols())
    throw ShapeError("cross-entropy: logits " + shape_str(shape) + " vs mask " + std::to_string(labels.rows()) + "x" +
                     std::to_string(labels.cols()));
  const Index c = shape[2], rows = shape[0] * shape[1];
  if (!alpha.empty() && Index(alpha.size()) != c) throw ShapeError("cross-entropy: class weight count != channels");
  Eigen::Map<const RowMat> z(logits.value().data().data(), rows, c);
  const std::uint8_t* y = labels.data();

  // Per-pixel gradient factor (softmax - onehot) * alpha, zero rows when ignored.
  RowMat dz = RowMat::Zero(rows, c);
  Scalar total = 0;
  Index labeled = 0;
  for (Index p = 0; p < rows; ++p) {
    if (y[p] == kIgnoreId) continue;
    if (Index(y[p]) >= c) throw DomainError("cross-entropy: label id " + std::to_string(y[p]) + " >= class count");
    const Scalar w = alpha.empty() ? Scalar(1) : alpha[y[p]];
    const Scalar m = z.row(p).maxCoeff();
    auto e = (z.row(p).array() - m).exp();
    const Scalar norm = e.sum();
    total += w * (m + std::log(norm) - z(p, y[p]));
    dz.row(p) = (e / norm * w).matrix();
    dz(p, y[p]) -= w;
    ++labeled;
  }
  Var<Scalar> out = logits.graph().record(Tensor<Scalar>::scalar(total), {logits},
                                          [logits, dz](Graph<Scalar>& gr, const auto& go) {
                                            gr.accumulate(logits, Eigen::Map<const Vector>(dz.data(), dz.size()) * go[0]);
                                          });
  return {out, labeled};
}

}  // namespace fctn
