#pragma once

// Symbolic reverse-mode automatic differentiation over dense tensors.
//
// A Graph is a list of op records in topological order (every node's inputs
// precede it). Leaves are named inputs bound at evaluation time, or
// constants. `Graph::grad` appends the adjoint computation to the same
// graph using the same op vocabulary, so its results can be differentiated
// again; this is what makes gradients of input-gradients (mixed partials
// d2J/dx dtheta) available for training.
//
// Shapes are resolved at evaluation time, which keeps the batch dimension
// free. Broadcasting follows numpy's right-aligned rules.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gradsigns/error.hpp"
#include "gradsigns/tensor.hpp"

namespace gradsigns::ad {

enum class Op : std::uint8_t {
  Input,
  Constant,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  MatMul,
  Transpose,
  Relu,
  Step,  // 1 where x > 0; derivative of relu (0 at 0)
  Sigmoid,
  Log,
  Exp,
  SumAll,
  MeanAll,
  SumAxis0,
  SumLastKeep,
  BroadcastLike,
  SumToLike,
  ReshapeBatch,  // [n, ...] -> [n, tail...]
  ReshapeLike,
  Softmax,
  SoftmaxXent,  // mean over rows of -sum(y * log softmax(z))
  GatherCols,
  ScatterCols,
  Clamp,
  InRange,
  Numel,
  BatchSize,
  ZerosLike,
  ScalarSeed,  // 1.0; fails unless its reference is a scalar
  Conv2D,
  Conv2DGradInput,
  Conv2DGradFilter,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Relu: return "relu";
    case Op::Step: return "step";
    case Op::Sigmoid: return "sigmoid";
    case Op::Log: return "log";
    case Op::Exp: return "exp";
    case Op::SumAll: return "sum";
    case Op::MeanAll: return "mean";
    case Op::SumAxis0: return "sum_axis0";
    case Op::SumLastKeep: return "sum_last";
    case Op::BroadcastLike: return "broadcast_like";
    case Op::SumToLike: return "sum_to_like";
    case Op::ReshapeBatch: return "reshape";
    case Op::ReshapeLike: return "reshape_like";
    case Op::Softmax: return "softmax";
    case Op::SoftmaxXent: return "softmax_xent";
    case Op::GatherCols: return "gather_cols";
    case Op::ScatterCols: return "scatter_cols";
    case Op::Clamp: return "clamp";
    case Op::InRange: return "in_range";
    case Op::Numel: return "numel";
    case Op::BatchSize: return "batch_size";
    case Op::ZerosLike: return "zeros_like";
    case Op::ScalarSeed: return "scalar_seed";
    case Op::Conv2D: return "conv2d";
    case Op::Conv2DGradInput: return "conv2d_grad_input";
    case Op::Conv2DGradFilter: return "conv2d_grad_filter";
  }
  return "?";
}

struct NodeId {
  std::uint32_t index = std::numeric_limits<std::uint32_t>::max();
  bool operator==(const NodeId&) const = default;
};

struct Node {
  Op op = Op::Input;
  std::vector<NodeId> inputs;
  std::string name;                                       // Input
  std::shared_ptr<const Tensor> constant;                 // Constant
  std::shared_ptr<const std::vector<std::size_t>> index;  // GatherCols / ScatterCols
  Shape tail;                                             // ReshapeBatch
  double lo = 0.0, hi = 0.0;                              // Clamp / InRange
  std::size_t pad = 0;                                    // Conv2D family
};

class Graph;

// Lightweight handle for building expressions with operators.
struct Var {
  Graph* graph = nullptr;
  NodeId id;
};

class Graph {
 public:
  NodeId input(std::string name) {
    Node n;
    n.op = Op::Input;
    n.name = std::move(name);
    return push(std::move(n));
  }

  NodeId constant(Tensor value) {
    Node n;
    n.op = Op::Constant;
    n.constant = std::make_shared<const Tensor>(std::move(value));
    return push(std::move(n));
  }

  NodeId scalar(double v) { return constant(Tensor::scalar(v)); }

  NodeId add(NodeId a, NodeId b) { return binary(Op::Add, a, b); }
  NodeId sub(NodeId a, NodeId b) { return binary(Op::Sub, a, b); }
  NodeId mul(NodeId a, NodeId b) { return binary(Op::Mul, a, b); }
  NodeId div(NodeId a, NodeId b) { return binary(Op::Div, a, b); }
  NodeId neg(NodeId a) { return unary(Op::Neg, a); }
  NodeId matmul(NodeId a, NodeId b) { return binary(Op::MatMul, a, b); }
  NodeId transpose(NodeId a) { return unary(Op::Transpose, a); }
  NodeId relu(NodeId a) { return unary(Op::Relu, a); }
  NodeId step(NodeId a) { return unary(Op::Step, a); }
  NodeId sigmoid(NodeId a) { return unary(Op::Sigmoid, a); }
  NodeId log(NodeId a) { return unary(Op::Log, a); }
  NodeId exp(NodeId a) { return unary(Op::Exp, a); }
  NodeId sum(NodeId a) { return unary(Op::SumAll, a); }
  NodeId mean(NodeId a) { return unary(Op::MeanAll, a); }
  NodeId sum_axis0(NodeId a) { return unary(Op::SumAxis0, a); }
  NodeId sum_last(NodeId a) { return unary(Op::SumLastKeep, a); }
  NodeId broadcast_like(NodeId a, NodeId ref) { return binary(Op::BroadcastLike, a, ref); }
  NodeId sum_to_like(NodeId a, NodeId ref) { return binary(Op::SumToLike, a, ref); }
  NodeId reshape_like(NodeId a, NodeId ref) { return binary(Op::ReshapeLike, a, ref); }
  NodeId softmax(NodeId a) { return unary(Op::Softmax, a); }
  NodeId softmax_xent(NodeId logits, NodeId onehot) { return binary(Op::SoftmaxXent, logits, onehot); }
  NodeId numel(NodeId a) { return unary(Op::Numel, a); }
  NodeId batch_size(NodeId a) { return unary(Op::BatchSize, a); }
  NodeId zeros_like(NodeId a) { return unary(Op::ZerosLike, a); }

  // Keeps the leading (batch) axis and reshapes the rest to `tail`.
  NodeId reshape_batch(NodeId a, Shape tail) {
    Node n;
    n.op = Op::ReshapeBatch;
    n.inputs = {a};
    n.tail = std::move(tail);
    return push(std::move(n));
  }

  NodeId flatten(NodeId a) { return reshape_batch(a, Shape{0}); }  // 0 = infer

  // Columns of the per-row flattened view of `a`.
  NodeId gather_cols(NodeId a, std::vector<std::size_t> columns) {
    return gather_cols(a, std::make_shared<const std::vector<std::size_t>>(std::move(columns)));
  }

  NodeId clamp(NodeId a, double lo, double hi) { return ranged(Op::Clamp, a, lo, hi); }
  NodeId in_range(NodeId a, double lo, double hi) { return ranged(Op::InRange, a, lo, hi); }

  // NHWC input, [kh, kw, cin, cout] filter, stride 1. `same` pads (k-1)/2.
  NodeId conv2d(NodeId x, NodeId w, std::size_t pad) {
    Node n;
    n.op = Op::Conv2D;
    n.inputs = {x, w};
    n.pad = pad;
    return push(std::move(n));
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id.index); }

  std::optional<NodeId> find_input(const std::string& name) const {
    for (std::uint32_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].op == Op::Input && nodes_[i].name == name) return NodeId{i};
    }
    return std::nullopt;
  }

  // Appends nodes computing d(output)/d(leaf) for each leaf in `wrt` and
  // returns their ids. The output must evaluate to a single value; this is
  // checked when the returned nodes are evaluated.
  std::vector<NodeId> grad(NodeId output, std::span<const NodeId> wrt);

  std::vector<NodeId> grad(NodeId output, std::initializer_list<NodeId> wrt) {
    return grad(output, std::span<const NodeId>(wrt.begin(), wrt.size()));
  }

 private:
  NodeId push(Node n) {
    for (const NodeId in : n.inputs) {
      if (in.index >= nodes_.size()) throw Error("graph", "node input refers to a later or unknown node");
    }
    nodes_.push_back(std::move(n));
    return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  NodeId unary(Op op, NodeId a) {
    Node n;
    n.op = op;
    n.inputs = {a};
    return push(std::move(n));
  }

  NodeId binary(Op op, NodeId a, NodeId b) {
    Node n;
    n.op = op;
    n.inputs = {a, b};
    return push(std::move(n));
  }

  NodeId ranged(Op op, NodeId a, double lo, double hi) {
    Node n;
    n.op = op;
    n.inputs = {a};
    n.lo = lo;
    n.hi = hi;
    return push(std::move(n));
  }

  NodeId gather_cols(NodeId a, std::shared_ptr<const std::vector<std::size_t>> columns) {
    Node n;
    n.op = Op::GatherCols;
    n.inputs = {a};
    n.index = std::move(columns);
    return push(std::move(n));
  }

  NodeId scatter_cols(NodeId a, NodeId ref, std::shared_ptr<const std::vector<std::size_t>> columns) {
    Node n;
    n.op = Op::ScatterCols;
    n.inputs = {a, ref};
    n.index = std::move(columns);
    return push(std::move(n));
  }

  NodeId conv_family(Op op, NodeId a, NodeId b, NodeId ref, std::size_t pad) {
    Node n;
    n.op = op;
    n.inputs = {a, b, ref};
    n.pad = pad;
    return push(std::move(n));
  }

  // Adjoint contributions of node `id` given upstream gradient `g`. Only
  // inputs flagged in `needed` receive a node.
  void backprop_node(NodeId id, NodeId g, const std::vector<bool>& needed,
                     std::vector<std::optional<NodeId>>& adjoint);

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Expression sugar

inline Var operator+(Var a, Var b) { return {a.graph, a.graph->add(a.id, b.id)}; }
inline Var operator-(Var a, Var b) { return {a.graph, a.graph->sub(a.id, b.id)}; }
inline Var operator*(Var a, Var b) { return {a.graph, a.graph->mul(a.id, b.id)}; }
inline Var operator/(Var a, Var b) { return {a.graph, a.graph->div(a.id, b.id)}; }
inline Var operator-(Var a) { return {a.graph, a.graph->neg(a.id)}; }
inline Var operator*(double s, Var a) { return {a.graph, a.graph->mul(a.graph->scalar(s), a.id)}; }
inline Var operator+(Var a, double s) { return {a.graph, a.graph->add(a.id, a.graph->scalar(s))}; }

// ---------------------------------------------------------------------------
// Evaluation

// Leaf values for one evaluation. Tensors are referenced, not copied, and
// must outlive the call to `forward`.
class Bindings {
 public:
  // Stores a pointer: the tensor must outlive every forward() using it.
  void bind(NodeId leaf, const Tensor& value) { values_[leaf.index] = &value; }
  void bind(NodeId leaf, Tensor&& value) = delete;
  const Tensor* find(NodeId leaf) const {
    const auto it = values_.find(leaf.index);
    return it == values_.end() ? nullptr : it->second;
  }

 private:
  std::unordered_map<std::uint32_t, const Tensor*> values_;
};

// Values computed by one forward pass, indexed by node.
class Evaluation {
 public:
  explicit Evaluation(std::size_t n) : values_(n) {}

  const Tensor& operator[](NodeId id) const {
    if (id.index >= values_.size() || !values_[id.index]) {
      throw Error("graph", "node " + std::to_string(id.index) + " was not evaluated");
    }
    return *values_[id.index];
  }

  bool has(NodeId id) const { return id.index < values_.size() && values_[id.index].has_value(); }

  std::vector<std::optional<Tensor>>& raw() { return values_; }

 private:
  std::vector<std::optional<Tensor>> values_;
};

Evaluation forward(const Graph& graph, const Bindings& bindings, std::span<const NodeId> outputs);

inline Evaluation forward(const Graph& graph, const Bindings& bindings, std::initializer_list<NodeId> outputs) {
  return forward(graph, bindings, std::span<const NodeId>(outputs.begin(), outputs.size()));
}

// ---------------------------------------------------------------------------
// Kernels

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw shape_error("cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// Strides of `s` viewed inside an `out`-ranked broadcast, 0 on broadcast axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < s.size(); ++k) {
    const std::size_t axis = s.size() - 1 - k;
    const std::size_t oaxis = out.size() - 1 - k;
    strides[oaxis] = s[axis] == 1 ? 0 : stride;
    stride *= s[axis];
  }
  return strides;
}

// Calls f(out_index, a_index, b_index) over the broadcast of a and b.
template <typename F>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, F&& f) {
  const std::size_t total = shape_size(out);
  if (a == out && b == out) {
    for (std::size_t i = 0; i < total; ++i) f(i, i, i);
    return;
  }
  const auto sa = broadcast_strides(a, out);
  const auto sb = broadcast_strides(b, out);
  std::vector<std::size_t> idx(out.size(), 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < total; ++i) {
    f(i, ia, ib);
    for (std::size_t ax = out.size(); ax-- > 0;) {
      ++idx[ax];
      ia += sa[ax];
      ib += sb[ax];
      if (idx[ax] < out[ax]) break;
      ia -= sa[ax] * out[ax];
      ib -= sb[ax] * out[ax];
      idx[ax] = 0;
    }
  }
}

template <typename F>
Tensor binary_broadcast(const Tensor& a, const Tensor& b, F&& f) {
  Shape out = broadcast_shape(a.shape(), b.shape());
  Tensor result(out);
  auto r = result.data();
  auto da = a.data();
  auto db = b.data();
  for_each_broadcast(out, a.shape(), b.shape(),
                     [&](std::size_t i, std::size_t ia, std::size_t ib) { r[i] = f(da[ia], db[ib]); });
  return result;
}

template <typename F>
Tensor unary_map(const Tensor& a, F&& f) {
  Tensor result(a.shape());
  auto r = result.data();
  auto d = a.data();
  for (std::size_t i = 0; i < d.size(); ++i) r[i] = f(d[i]);
  return result;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw shape_error("matmul " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  Tensor out(Shape{n, m});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* row = po + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * m;
      for (std::size_t j = 0; j < m; ++j) row[j] += av * brow[j];
    }
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw shape_error("transpose expects rank 2, got " + shape_string(a.shape()));
  const std::size_t n = a.dim(0), m = a.dim(1);
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = a[i * m + j];
  return out;
}

inline Tensor broadcast_to(const Tensor& a, const Shape& target) {
  const Shape out = broadcast_shape(a.shape(), target);
  if (out != target) throw shape_error("cannot broadcast " + shape_string(a.shape()) + " to " + shape_string(target));
  Tensor result(target);
  auto r = result.data();
  auto d = a.data();
  for_each_broadcast(target, a.shape(), target, [&](std::size_t i, std::size_t ia, std::size_t) { r[i] = d[ia]; });
  return result;
}

inline Tensor sum_to(const Tensor& a, const Shape& target) {
  if (a.shape() == target) return a;
  const Shape out = broadcast_shape(target, a.shape());
  if (out != a.shape()) throw shape_error("cannot reduce " + shape_string(a.shape()) + " to " + shape_string(target));
  Tensor result(target);
  auto r = result.data();
  auto d = a.data();
  for_each_broadcast(a.shape(), target, a.shape(), [&](std::size_t i, std::size_t it, std::size_t) { r[it] += d[i]; });
  return result;
}

inline std::size_t row_width(const Tensor& a) {
  if (a.rank() < 1 || a.dim(0) == 0) throw shape_error("expected a batched tensor, got " + shape_string(a.shape()));
  return a.size() / a.dim(0);
}

inline Tensor softmax_rows(const Tensor& z) {
  if (z.rank() < 1) throw shape_error("softmax on scalar");
  const std::size_t k = z.shape().back();
  const std::size_t rows = z.size() / k;
  Tensor out(z.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = z.data().data() + r * k;
    double* o = out.data().data() + r * k;
    const double mx = *std::max_element(in, in + k);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < k; ++j) o[j] /= total;
  }
  return out;
}

inline Tensor softmax_xent(const Tensor& z, const Tensor& y) {
  if (z.rank() != 2 || z.shape() != y.shape()) {
    throw shape_error("softmax_xent logits " + shape_string(z.shape()) + " vs targets " + shape_string(y.shape()));
  }
  const std::size_t n = z.dim(0), k = z.dim(1);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double* in = z.data().data() + r * k;
    const double* t = y.data().data() + r * k;
    const double mx = *std::max_element(in, in + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(in[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < k; ++j) total -= t[j] * (in[j] - lse);
  }
  return Tensor::scalar(total / static_cast<double>(n));
}

struct ConvDims {
  std::size_t n, h, w, c, kh, kw, o, ho, wo;
  std::ptrdiff_t pad;
};

inline ConvDims conv_dims(const Shape& x, const Shape& w, std::size_t pad) {
  if (x.size() != 4 || w.size() != 4 || x[3] != w[2]) {
    throw shape_error("conv2d input " + shape_string(x) + " with filter " + shape_string(w));
  }
  const std::size_t hp = x[1] + 2 * pad, wp = x[2] + 2 * pad;
  if (hp < w[0] || wp < w[1]) throw shape_error("conv2d filter larger than padded input");
  return {x[0], x[1], x[2], x[3], w[0], w[1], w[3], hp - w[0] + 1, wp - w[1] + 1, static_cast<std::ptrdiff_t>(pad)};
}

// Visits every (output position, kernel tap) pair whose input pixel lies
// inside the image: f(x_offset, w_offset, y_offset) give the base offsets of
// the channel vectors.
template <typename F>
void conv_taps(const ConvDims& d, F&& f) {
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t i = 0; i < d.ho; ++i)
      for (std::size_t j = 0; j < d.wo; ++j) {
        const std::size_t yoff = ((n * d.ho + i) * d.wo + j) * d.o;
        for (std::size_t a = 0; a < d.kh; ++a) {
          const std::ptrdiff_t xi = static_cast<std::ptrdiff_t>(i + a) - d.pad;
          if (xi < 0 || xi >= static_cast<std::ptrdiff_t>(d.h)) continue;
          for (std::size_t b = 0; b < d.kw; ++b) {
            const std::ptrdiff_t xj = static_cast<std::ptrdiff_t>(j + b) - d.pad;
            if (xj < 0 || xj >= static_cast<std::ptrdiff_t>(d.w)) continue;
            const std::size_t xoff = ((n * d.h + static_cast<std::size_t>(xi)) * d.w + static_cast<std::size_t>(xj)) * d.c;
            const std::size_t woff = (a * d.kw + b) * d.c * d.o;
            f(xoff, woff, yoff);
          }
        }
      }
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t pad) {
  const ConvDims d = conv_dims(x.shape(), w.shape(), pad);
  Tensor y(Shape{d.n, d.ho, d.wo, d.o});
  const double* px = x.data().data();
  const double* pw = w.data().data();
  double* py = y.data().data();
  conv_taps(d, [&](std::size_t xoff, std::size_t woff, std::size_t yoff) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const double xv = px[xoff + c];
      if (xv == 0.0) continue;
      const double* wr = pw + woff + c * d.o;
      for (std::size_t o = 0; o < d.o; ++o) py[yoff + o] += xv * wr[o];
    }
  });
  return y;
}

inline Tensor conv2d_grad_input(const Tensor& dy, const Tensor& w, const Shape& x_shape, std::size_t pad) {
  const ConvDims d = conv_dims(x_shape, w.shape(), pad);
  if (dy.shape() != Shape{d.n, d.ho, d.wo, d.o}) throw shape_error("conv2d_grad_input upstream shape");
  Tensor dx(x_shape);
  const double* pd = dy.data().data();
  const double* pw = w.data().data();
  double* px = dx.data().data();
  conv_taps(d, [&](std::size_t xoff, std::size_t woff, std::size_t yoff) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const double* wr = pw + woff + c * d.o;
      double s = 0.0;
      for (std::size_t o = 0; o < d.o; ++o) s += pd[yoff + o] * wr[o];
      px[xoff + c] += s;
    }
  });
  return dx;
}

inline Tensor conv2d_grad_filter(const Tensor& x, const Tensor& dy, const Shape& w_shape, std::size_t pad) {
  const ConvDims d = conv_dims(x.shape(), w_shape, pad);
  if (dy.shape() != Shape{d.n, d.ho, d.wo, d.o}) throw shape_error("conv2d_grad_filter upstream shape");
  Tensor dw(w_shape);
  const double* px = x.data().data();
  const double* pd = dy.data().data();
  double* pw = dw.data().data();
  conv_taps(d, [&](std::size_t xoff, std::size_t woff, std::size_t yoff) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const double xv = px[xoff + c];
      if (xv == 0.0) continue;
      double* wr = pw + woff + c * d.o;
      for (std::size_t o = 0; o < d.o; ++o) wr[o] += xv * pd[yoff + o];
    }
  });
  return dw;
}

inline Tensor evaluate_node(const Node& node, std::span<const Tensor* const> in) {
  auto arg = [&](std::size_t i) -> const Tensor& { return *in[i]; };
  switch (node.op) {
    case Op::Input:
    case Op::Constant:
      throw Error("graph", "leaf evaluated as op");
    case Op::Add: return binary_broadcast(arg(0), arg(1), [](double a, double b) { return a + b; });
    case Op::Sub: return binary_broadcast(arg(0), arg(1), [](double a, double b) { return a - b; });
    case Op::Mul: return binary_broadcast(arg(0), arg(1), [](double a, double b) { return a * b; });
    case Op::Div: return binary_broadcast(arg(0), arg(1), [](double a, double b) { return a / b; });
    case Op::Neg: return unary_map(arg(0), [](double a) { return -a; });
    case Op::MatMul: return matmul(arg(0), arg(1));
    case Op::Transpose: return transpose(arg(0));
    case Op::Relu: return unary_map(arg(0), [](double a) { return a > 0.0 ? a : 0.0; });
    case Op::Step: return unary_map(arg(0), [](double a) { return a > 0.0 ? 1.0 : 0.0; });
    case Op::Sigmoid:
      return unary_map(arg(0), [](double a) {
        return a >= 0.0 ? 1.0 / (1.0 + std::exp(-a)) : std::exp(a) / (1.0 + std::exp(a));
      });
    case Op::Log: return unary_map(arg(0), [](double a) { return std::log(a); });
    case Op::Exp: return unary_map(arg(0), [](double a) { return std::exp(a); });
    case Op::SumAll: {
      double s = 0.0;
      for (double v : arg(0).data()) s += v;
      return Tensor::scalar(s);
    }
    case Op::MeanAll: {
      double s = 0.0;
      for (double v : arg(0).data()) s += v;
      return Tensor::scalar(s / static_cast<double>(arg(0).size()));
    }
    case Op::SumAxis0: {
      const Tensor& a = arg(0);
      if (a.rank() < 1) throw shape_error("sum_axis0 on scalar");
      Shape s(a.shape().begin() + 1, a.shape().end());
      Tensor out(s);
      const std::size_t w = out.size();
      for (std::size_t r = 0; r < a.dim(0); ++r)
        for (std::size_t j = 0; j < w; ++j) out[j] += a[r * w + j];
      return out;
    }
    case Op::SumLastKeep: {
      const Tensor& a = arg(0);
      if (a.rank() < 1) throw shape_error("sum_last on scalar");
      const std::size_t k = a.shape().back();
      Shape s = a.shape();
      s.back() = 1;
      Tensor out(s);
      for (std::size_t r = 0; r < out.size(); ++r) {
        double t = 0.0;
        for (std::size_t j = 0; j < k; ++j) t += a[r * k + j];
        out[r] = t;
      }
      return out;
    }
    case Op::BroadcastLike: return broadcast_to(arg(0), arg(1).shape());
    case Op::SumToLike: return sum_to(arg(0), arg(1).shape());
    case Op::ReshapeBatch: {
      const Tensor& a = arg(0);
      const std::size_t n = a.rank() ? a.dim(0) : 1;
      Shape s{n};
      std::size_t known = 1;
      std::optional<std::size_t> infer;
      for (std::size_t i = 0; i < node.tail.size(); ++i) {
        if (node.tail[i] == 0) {
          infer = s.size();
          s.push_back(0);
        } else {
          known *= node.tail[i];
          s.push_back(node.tail[i]);
        }
      }
      if (infer) {
        if (n == 0 || a.size() % (n * known) != 0) throw shape_error("reshape cannot infer dimension");
        s[*infer] = a.size() / (n * known);
      }
      if (shape_size(s) != a.size()) throw shape_error("reshape " + shape_string(a.shape()) + " -> " + shape_string(s));
      return a.reshaped(std::move(s));
    }
    case Op::ReshapeLike: {
      if (arg(0).size() != arg(1).size()) throw shape_error("reshape_like size mismatch");
      return arg(0).reshaped(arg(1).shape());
    }
    case Op::Softmax: return softmax_rows(arg(0));
    case Op::SoftmaxXent: return softmax_xent(arg(0), arg(1));
    case Op::GatherCols: {
      const Tensor& a = arg(0);
      const std::size_t w = row_width(a);
      const auto& cols = *node.index;
      const std::size_t n = a.dim(0);
      Tensor out(Shape{n, cols.size()});
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < cols.size(); ++j) {
          if (cols[j] >= w) throw shape_error("gather_cols index out of range");
          out[r * cols.size() + j] = a[r * w + cols[j]];
        }
      return out;
    }
    case Op::ScatterCols: {
      const Tensor& a = arg(0);
      const Tensor& ref = arg(1);
      const std::size_t w = row_width(ref);
      const auto& cols = *node.index;
      const std::size_t n = ref.dim(0);
      if (a.shape() != Shape{n, cols.size()}) throw shape_error("scatter_cols shape");
      Tensor out(ref.shape());
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < cols.size(); ++j) out[r * w + cols[j]] += a[r * cols.size() + j];
      return out;
    }
    case Op::Clamp: {
      const double lo = node.lo, hi = node.hi;
      return unary_map(arg(0), [lo, hi](double a) { return std::clamp(a, lo, hi); });
    }
    case Op::InRange: {
      const double lo = node.lo, hi = node.hi;
      return unary_map(arg(0), [lo, hi](double a) { return a >= lo && a <= hi ? 1.0 : 0.0; });
    }
    case Op::Numel: return Tensor::scalar(static_cast<double>(arg(0).size()));
    case Op::BatchSize: {
      if (arg(0).rank() < 1) throw shape_error("batch_size on scalar");
      return Tensor::scalar(static_cast<double>(arg(0).dim(0)));
    }
    case Op::ZerosLike: return Tensor(arg(0).shape());
    case Op::ScalarSeed:
      if (arg(0).size() != 1) {
        throw shape_error("gradient requested of non-scalar output of shape " + shape_string(arg(0).shape()));
      }
      return Tensor::scalar(1.0);
    case Op::Conv2D: return conv2d(arg(0), arg(1), node.pad);
    case Op::Conv2DGradInput: return conv2d_grad_input(arg(0), arg(1), arg(2).shape(), node.pad);
    case Op::Conv2DGradFilter: return conv2d_grad_filter(arg(0), arg(1), arg(2).shape(), node.pad);
  }
  throw Error("graph", "unknown op");
}

}  // namespace detail

inline Evaluation forward(const Graph& graph, const Bindings& bindings, std::span<const NodeId> outputs) {
  const std::size_t n = graph.size();
  std::vector<bool> live(n, false);
  for (const NodeId o : outputs) {
    if (o.index >= n) throw Error("graph", "output node not in graph");
    live[o.index] = true;
  }
  for (std::size_t i = n; i-- > 0;) {
    if (!live[i]) continue;
    for (const NodeId in : graph.node(NodeId{static_cast<std::uint32_t>(i)}).inputs) live[in.index] = true;
  }

  Evaluation eval(n);
  auto& values = eval.raw();
  std::vector<const Tensor*> args;
  for (std::uint32_t i = 0; i < n; ++i) {
    if (!live[i]) continue;
    const Node& node = graph.node(NodeId{i});
    if (node.op == Op::Input) {
      const Tensor* bound = bindings.find(NodeId{i});
      if (!bound) throw Error("unbound", "input '" + node.name + "' is not bound");
      values[i] = *bound;
    } else if (node.op == Op::Constant) {
      values[i] = *node.constant;
    } else {
      args.clear();
      for (const NodeId in : node.inputs) args.push_back(&*values[in.index]);
      values[i] = detail::evaluate_node(node, args);
    }
    if (!values[i]->all_finite()) {
      throw Error("non-finite", std::string("non-finite value produced by ") + op_name(node.op) + " (node " +
                                    std::to_string(i) + ")");
    }
  }
  return eval;
}

// ---------------------------------------------------------------------------
// Differentiation

inline void Graph::backprop_node(NodeId id, NodeId g, const std::vector<bool>& needed,
                                 std::vector<std::optional<NodeId>>& adjoint) {
  const Node node = nodes_[id.index];  // copy: pushes below may reallocate
  auto accumulate = [&](std::size_t slot, auto&& make) {
    const NodeId target = node.inputs[slot];
    if (!needed[target.index]) return;
    const NodeId contrib = make();
    auto& acc = adjoint[target.index];
    acc = acc ? add(*acc, contrib) : contrib;
  };
  const auto& in = node.inputs;

  switch (node.op) {
    case Op::Input:
    case Op::Constant:
    case Op::Step:
    case Op::InRange:
    case Op::Numel:
    case Op::BatchSize:
    case Op::ZerosLike:
    case Op::ScalarSeed:
      return;
    case Op::Add:
      accumulate(0, [&] { return sum_to_like(g, in[0]); });
      accumulate(1, [&] { return sum_to_like(g, in[1]); });
      return;
    case Op::Sub:
      accumulate(0, [&] { return sum_to_like(g, in[0]); });
      accumulate(1, [&] { return sum_to_like(neg(g), in[1]); });
      return;
    case Op::Mul:
      accumulate(0, [&] { return sum_to_like(mul(g, in[1]), in[0]); });
      accumulate(1, [&] { return sum_to_like(mul(g, in[0]), in[1]); });
      return;
    case Op::Div:
      accumulate(0, [&] { return sum_to_like(div(g, in[1]), in[0]); });
      accumulate(1, [&] { return sum_to_like(neg(div(mul(g, id), in[1])), in[1]); });
      return;
    case Op::Neg:
      accumulate(0, [&] { return neg(g); });
      return;
    case Op::MatMul:
      accumulate(0, [&] { return matmul(g, transpose(in[1])); });
      accumulate(1, [&] { return matmul(transpose(in[0]), g); });
      return;
    case Op::Transpose:
      accumulate(0, [&] { return transpose(g); });
      return;
    case Op::Relu:
      accumulate(0, [&] { return mul(g, step(in[0])); });
      return;
    case Op::Sigmoid:
      accumulate(0, [&] { return mul(g, mul(id, sub(scalar(1.0), id))); });
      return;
    case Op::Log:
      accumulate(0, [&] { return div(g, in[0]); });
      return;
    case Op::Exp:
      accumulate(0, [&] { return mul(g, id); });
      return;
    case Op::SumAll:
      accumulate(0, [&] { return broadcast_like(g, in[0]); });
      return;
    case Op::MeanAll:
      accumulate(0, [&] { return broadcast_like(div(g, numel(in[0])), in[0]); });
      return;
    case Op::SumAxis0:
    case Op::SumLastKeep:
      accumulate(0, [&] { return broadcast_like(g, in[0]); });
      return;
    case Op::BroadcastLike:
      accumulate(0, [&] { return sum_to_like(g, in[0]); });
      return;
    case Op::SumToLike:
      accumulate(0, [&] { return broadcast_like(g, in[0]); });
      return;
    case Op::ReshapeBatch:
    case Op::ReshapeLike:
      accumulate(0, [&] { return reshape_like(g, in[0]); });
      return;
    case Op::Softmax:
      // y * (g - sum(g * y))
      accumulate(0, [&] { return mul(id, sub(g, sum_last(mul(g, id)))); });
      return;
    case Op::SoftmaxXent:
      accumulate(0, [&] { return mul(sub(softmax(in[0]), in[1]), div(g, batch_size(in[0]))); });
      accumulate(1, [&] { return mul(neg(log(softmax(in[0]))), div(g, batch_size(in[0]))); });
      return;
    case Op::GatherCols:
      accumulate(0, [&] { return scatter_cols(g, in[0], node.index); });
      return;
    case Op::ScatterCols:
      accumulate(0, [&] { return gather_cols(g, node.index); });
      return;
    case Op::Clamp:
      accumulate(0, [&] { return mul(g, in_range(in[0], node.lo, node.hi)); });
      return;
    // The conv family are the three partial derivatives of one trilinear
    // form T(x, w, dy); each op's gradient is another member of the family.
    case Op::Conv2D:
      accumulate(0, [&] { return conv_family(Op::Conv2DGradInput, g, in[1], in[0], node.pad); });
      accumulate(1, [&] { return conv_family(Op::Conv2DGradFilter, in[0], g, in[1], node.pad); });
      return;
    case Op::Conv2DGradInput:  // inputs: dy, w, x_ref
      accumulate(0, [&] { return conv2d(g, in[1], node.pad); });
      accumulate(1, [&] { return conv_family(Op::Conv2DGradFilter, g, in[0], in[1], node.pad); });
      return;
    case Op::Conv2DGradFilter:  // inputs: x, dy, w_ref
      accumulate(0, [&] { return conv_family(Op::Conv2DGradInput, in[1], g, in[0], node.pad); });
      accumulate(1, [&] { return conv2d(in[0], g, node.pad); });
      return;
  }
}

inline std::vector<NodeId> Graph::grad(NodeId output, std::span<const NodeId> wrt) {
  const std::size_t n = nodes_.size();
  if (output.index >= n) throw Error("graph", "output node not in graph");
  std::vector<bool> needed(n, false);
  for (const NodeId leaf : wrt) {
    if (leaf.index >= n) throw Error("graph", "differentiation leaf not in graph");
    if (nodes_[leaf.index].op != Op::Input) throw Error("graph", "can only differentiate with respect to inputs");
    needed[leaf.index] = true;
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (const NodeId in : nodes_[i].inputs) {
      if (needed[in.index]) needed[i] = true;
    }
  }
  // Shape-only operands never carry gradient.
  auto is_shape_ref = [&](std::size_t i, std::size_t slot) {
    const Op op = nodes_[i].op;
    return ((op == Op::BroadcastLike || op == Op::SumToLike || op == Op::ReshapeLike || op == Op::ScatterCols) &&
            slot == 1) ||
           ((op == Op::Conv2DGradInput || op == Op::Conv2DGradFilter) && slot == 2);
  };

  std::vector<std::optional<NodeId>> adjoint(n);
  Node seed;
  seed.op = Op::ScalarSeed;
  seed.inputs = {output};
  adjoint[output.index] = push(std::move(seed));

  for (std::size_t i = output.index + 1; i-- > 0;) {
    if (!adjoint[i] || !needed[i]) continue;
    std::vector<bool> mask = needed;
    for (std::size_t slot = 0; slot < nodes_[i].inputs.size(); ++slot) {
      if (is_shape_ref(i, slot)) mask[nodes_[i].inputs[slot].index] = false;
    }
    // A node may use the same input in a shape slot and a value slot; the
    // mask above would then drop a real contribution, so restore it.
    for (std::size_t slot = 0; slot < nodes_[i].inputs.size(); ++slot) {
      if (!is_shape_ref(i, slot)) {
        const auto j = nodes_[i].inputs[slot].index;
        mask[j] = needed[j];
      }
    }
    backprop_node(NodeId{static_cast<std::uint32_t>(i)}, *adjoint[i], mask, adjoint);
  }

  std::vector<NodeId> result;
  result.reserve(wrt.size());
  for (const NodeId leaf : wrt) {
    result.push_back(adjoint[leaf.index] ? *adjoint[leaf.index] : zeros_like(leaf));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Finite-difference checking

// A scalar function paired with its claimed gradient.
struct ScalarFunction {
  std::function<double(const Tensor&)> value;
  std::function<Tensor(const Tensor&)> gradient;
};

// Max over coordinates of |analytic - central difference| / (|analytic| + 1e-12).
inline double finite_diff_check(const ScalarFunction& fn, const Tensor& point, double step) {
  if (!(step > 0.0)) throw value_error("finite-difference step must be positive");
  const Tensor analytic = fn.gradient(point);
  if (analytic.size() != point.size()) throw shape_error("gradient size does not match point");
  Tensor probe = point;
  double worst = 0.0;
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + step;
    const double up = fn.value(probe);
    probe[i] = point[i] - step;
    const double down = fn.value(probe);
    probe[i] = point[i];
    if (!std::isfinite(up) || !std::isfinite(down)) throw Error("non-finite", "non-finite function evaluation");
    const double numeric = (up - down) / (2.0 * step);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + 1e-12));
  }
  return worst;
}

// Wraps `output` as a function of leaf `variable`, holding other bindings fixed.
inline ScalarFunction graph_function(Graph& graph, NodeId output, NodeId variable, const Bindings& fixed) {
  const NodeId g = graph.grad(output, {variable})[0];
  const Graph* gp = &graph;
  return ScalarFunction{
      [gp, output, variable, fixed](const Tensor& x) {
        Bindings b = fixed;
        b.bind(variable, x);
        return forward(*gp, b, {output})[output].item();
      },
      [gp, g, variable, fixed](const Tensor& x) {
        Bindings b = fixed;
        b.bind(variable, x);
        return forward(*gp, b, {g})[g];
      }};
}

}  // namespace gradsigns::ad
