#include <gtest/gtest.h>

#include <functional>

#include "gradsigns/autodiff.hpp"
#include "gradsigns/random.hpp"

using namespace gradsigns;
using namespace gradsigns::ad;

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  Rng r(seed);
  for (double& v : t.data()) v = uniform(r, lo, hi);
  return t;
}

// Sums op(x) against fixed random weights so every output coordinate
// contributes to the gradient, then checks against central differences.
double check_unary(const std::function<NodeId(Graph&, NodeId)>& op, const Tensor& x, const Shape& out_shape,
                   double step = 1e-6) {
  Graph g;
  const NodeId xn = g.input("x");
  const NodeId wn = g.input("w");
  const NodeId f = g.sum(g.mul(op(g, xn), wn));
  const Tensor w = random_tensor(out_shape, 99);
  Bindings b;
  b.bind(wn, w);
  return finite_diff_check(graph_function(g, f, xn, b), x, step);
}

}  // namespace

TEST(Autodiff, PolynomialFirstAndSecondDerivative) {
  Graph g;
  Var x{&g, g.input("x")};
  Var f = x * x * x + 2.0 * x;
  const NodeId d1 = g.grad(f.id, {x.id})[0];
  const NodeId d2 = g.grad(d1, {x.id})[0];
  const Tensor at = Tensor::scalar(1.5);
  Bindings b;
  b.bind(x.id, at);
  const auto ev = forward(g, b, {f.id, d1, d2});
  EXPECT_DOUBLE_EQ(ev[f.id].item(), 1.5 * 1.5 * 1.5 + 3.0);
  EXPECT_DOUBLE_EQ(ev[d1].item(), 3 * 1.5 * 1.5 + 2.0);
  EXPECT_DOUBLE_EQ(ev[d2].item(), 6 * 1.5);
}

TEST(Autodiff, GradientGraphIsTopologicallyOrdered) {
  Graph g;
  const NodeId x = g.input("x");
  const NodeId w = g.input("w");
  const NodeId y = g.sum(g.sigmoid(g.matmul(x, w)));
  const NodeId dw = g.grad(y, {w})[0];
  g.grad(g.sum(g.mul(dw, dw)), {x});
  for (std::uint32_t i = 0; i < g.size(); ++i) {
    for (const NodeId in : g.node(NodeId{i}).inputs) EXPECT_LT(in.index, i);
  }
}

TEST(Autodiff, GradOfNonScalarFailsOnEvaluation) {
  Graph g;
  const NodeId x = g.input("x");
  const NodeId y = g.exp(x);
  const NodeId dx = g.grad(y, {x})[0];
  const Tensor v(Shape{3}, 0.5);
  Bindings b;
  b.bind(x, v);
  EXPECT_THROW(forward(g, b, {dx}), Error);
}

TEST(Autodiff, UnboundInputFails) {
  Graph g;
  const NodeId x = g.input("x");
  const NodeId y = g.exp(x);
  EXPECT_THROW(forward(g, Bindings{}, {y}), Error);
}

TEST(Autodiff, ElementwiseOps) {
  const Tensor x = random_tensor({3, 4}, 1, 0.2, 1.0);
  EXPECT_LT(check_unary([](Graph& g, NodeId a) { return g.sigmoid(a); }, x, {3, 4}), 1e-6);
  EXPECT_LT(check_unary([](Graph& g, NodeId a) { return g.exp(a); }, x, {3, 4}), 1e-6);
  EXPECT_LT(check_unary([](Graph& g, NodeId a) { return g.log(a); }, x, {3, 4}), 1e-6);
  EXPECT_LT(check_unary([](Graph& g, NodeId a) { return g.neg(a); }, x, {3, 4}), 1e-6);
  EXPECT_LT(check_unary([](Graph& g, NodeId a) { return g.div(g.scalar(1.0), a); }, x, {3, 4}), 1e-6);
  EXPECT_LT(check_unary([](Graph& g, NodeId a) { return g.relu(g.sub(a, g.scalar(0.61))); }, x, {3, 4}), 1e-6);
  EXPECT_LT(check_unary([](Graph& g, NodeId a) { return g.clamp(a, 0.3, 0.7); }, x, {3, 4}), 1e-6);
}

TEST(Autodiff, BroadcastingBinaryOps) {
  const Tensor x = random_tensor({3, 4}, 2);
  const Tensor row = random_tensor({4}, 3, 0.5, 1.5);
  auto with_row = [&](auto make) {
    Graph g;
    const NodeId xn = g.input("x");
    const NodeId rn = g.input("r");
    const NodeId f = g.sum(g.mul(make(g, xn, rn), g.constant(random_tensor({3, 4}, 4))));
    Bindings b;
    b.bind(rn, row);
    const double ex = finite_diff_check(graph_function(g, f, xn, b), x, 1e-6);
    Graph g2;
    const NodeId xn2 = g2.input("x");
    const NodeId rn2 = g2.input("r");
    const NodeId f2 = g2.sum(g2.mul(make(g2, xn2, rn2), g2.constant(random_tensor({3, 4}, 4))));
    Bindings b2;
    b2.bind(xn2, x);
    const double er = finite_diff_check(graph_function(g2, f2, rn2, b2), row, 1e-6);
    return std::max(ex, er);
  };
  EXPECT_LT(with_row([](Graph& g, NodeId a, NodeId r) { return g.add(a, r); }), 1e-6);
  EXPECT_LT(with_row([](Graph& g, NodeId a, NodeId r) { return g.sub(a, r); }), 1e-6);
  EXPECT_LT(with_row([](Graph& g, NodeId a, NodeId r) { return g.mul(a, r); }), 1e-6);
  EXPECT_LT(with_row([](Graph& g, NodeId a, NodeId r) { return g.div(a, r); }), 1e-6);
}

TEST(Autodiff, MatmulTransposeReductions) {
  const Tensor x = random_tensor({3, 4}, 5);
  const Tensor w = random_tensor({4, 2}, 6);
  EXPECT_LT(check_unary([&](Graph& g, NodeId a) { return g.matmul(a, g.constant(w)); }, x, {3, 2}), 1e-6);
  EXPECT_LT(check_unary([](Graph& g, NodeId a) { return g.transpose(a); }, x, {4, 3}), 1e-6);
  EXPECT_LT(check_unary([](Graph& g, NodeId a) { return g.sum_axis0(a); }, x, {4}), 1e-6);
  EXPECT_LT(check_unary([](Graph& g, NodeId a) { return g.softmax(a); }, x, {3, 4}), 1e-6);
  EXPECT_LT(check_unary([](Graph& g, NodeId a) { return g.gather_cols(a, std::vector<std::size_t>{0, 3}); }, x, {3, 2}), 1e-6);
  EXPECT_LT(check_unary([](Graph& g, NodeId a) { return g.mean(a); }, x, {}), 1e-6);
}

TEST(Autodiff, SoftmaxCrossEntropy) {
  const Tensor z = random_tensor({5, 3}, 7, -2.0, 2.0);
  Tensor y(Shape{5, 3});
  for (std::size_t i = 0; i < 5; ++i) y[i * 3 + i % 3] = 1.0;
  Graph g;
  const NodeId zn = g.input("z");
  const NodeId yn = g.input("y");
  const NodeId ce = g.softmax_xent(zn, yn);
  Bindings b;
  b.bind(yn, y);
  EXPECT_LT(finite_diff_check(graph_function(g, ce, zn, b), z, 1e-6), 1e-6);

  // Mean over rows of -log softmax at the label.
  b.bind(zn, z);
  double want = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    double m = -1e300, s = 0.0;
    for (std::size_t k = 0; k < 3; ++k) m = std::max(m, z[i * 3 + k]);
    for (std::size_t k = 0; k < 3; ++k) s += std::exp(z[i * 3 + k] - m);
    want += -(z[i * 3 + i % 3] - m - std::log(s));
  }
  EXPECT_NEAR(forward(g, b, {ce})[ce].item(), want / 5.0, 1e-12);
}

TEST(Autodiff, Conv2dInputAndFilter) {
  for (const std::size_t pad : {0u, 1u}) {
    const Tensor x = random_tensor({2, 5, 5, 2}, 8);
    const Tensor w = random_tensor({3, 3, 2, 3}, 9);
    const std::size_t o = pad ? 5 : 3;
    // Linear in either argument, so a large step has no truncation error.
    EXPECT_LT(check_unary([&](Graph& g, NodeId a) { return g.conv2d(a, g.constant(w), pad); }, x, {2, o, o, 3}, 1e-3), 1e-8);
    EXPECT_LT(check_unary([&](Graph& g, NodeId a) { return g.conv2d(g.constant(x), a, pad); }, w, {2, o, o, 3}, 1e-3), 1e-8);
  }
}

TEST(Autodiff, ConvMatchesDirectLoop) {
  const Tensor x = random_tensor({1, 4, 4, 1}, 10);
  const Tensor w = random_tensor({3, 3, 1, 1}, 11);
  Graph g;
  const NodeId y = g.conv2d(g.constant(x), g.constant(w), 0);
  const Tensor out = forward(g, Bindings{}, {y})[y];
  ASSERT_EQ(out.shape(), (Shape{1, 2, 2, 1}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0.0;
      for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t c = 0; c < 3; ++c) s += x[(i + a) * 4 + (j + c)] * w[a * 3 + c];
      EXPECT_NEAR(out[i * 2 + j], s, 1e-14);
    }
}

// 0.5 x^T A x with symmetric A: gradient A x, Hessian-vector product A v.
TEST(Autodiff, QuadraticFormHessianVectorProduct) {
  Tensor a = random_tensor({4, 4}, 12);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < i; ++j) a[j * 4 + i] = a[i * 4 + j];
  const Tensor x = random_tensor({1, 4}, 13);
  const Tensor v = random_tensor({1, 4}, 14);
  Graph g;
  const NodeId xn = g.input("x");
  const NodeId vn = g.input("v");
  const NodeId f = g.mul(g.scalar(0.5), g.sum(g.mul(g.matmul(xn, g.constant(a)), xn)));
  const NodeId gx = g.grad(f, {xn})[0];
  const NodeId hv = g.grad(g.sum(g.mul(gx, vn)), {xn})[0];
  Bindings b;
  b.bind(xn, x);
  b.bind(vn, v);
  const auto ev = forward(g, b, {gx, hv});
  for (std::size_t i = 0; i < 4; ++i) {
    double ax = 0.0, av = 0.0;
    for (std::size_t j = 0; j < 4; ++j) {
      ax += a[i * 4 + j] * x[j];
      av += a[i * 4 + j] * v[j];
    }
    EXPECT_NEAR(ev[gx][i], ax, 1e-12);
    EXPECT_NEAR(ev[hv][i], av, 1e-12);
  }
}

// The gradient of a function that itself contains a gradient: the shape of
// the embedding objective (loss on the input gradient, differentiated by W).
TEST(Autodiff, SecondOrderThroughInputGradient) {
  const Tensor x = random_tensor({4, 6}, 15, 0.0, 1.0);
  Tensor y(Shape{4, 3});
  for (std::size_t i = 0; i < 4; ++i) y[i * 3 + i % 3] = 1.0;
  const Tensor w1 = random_tensor({6, 5}, 16);
  const Tensor w2 = random_tensor({5, 3}, 17);
  Graph g;
  const NodeId xn = g.input("x");
  const NodeId yn = g.input("y");
  const NodeId w1n = g.input("w1");
  const NodeId w2n = g.input("w2");
  const NodeId h = g.sigmoid(g.matmul(xn, w1n));
  const NodeId ce = g.softmax_xent(g.matmul(h, w2n), yn);
  const NodeId dx = g.grad(ce, {xn})[0];
  const NodeId gsum = g.sum_axis0(g.gather_cols(dx, std::vector<std::size_t>{1, 4}));
  const NodeId obj = g.sum(g.sigmoid(g.mul(gsum, g.constant(Tensor(Shape{2}, {3.0, -2.0})))));
  Bindings b;
  b.bind(xn, x);
  b.bind(yn, y);
  b.bind(w2n, w2);
  EXPECT_LT(finite_diff_check(graph_function(g, obj, w1n, b), w1, 1e-6), 1e-5);
}

TEST(Autodiff, VarSugarMatchesGraphCalls) {
  Graph g;
  Var a{&g, g.input("a")};
  Var c = (a + 1.0) * a - a / (a + 2.0);
  const Tensor v = Tensor::scalar(0.7);
  Bindings b;
  b.bind(a.id, v);
  EXPECT_NEAR(forward(g, b, {c.id})[c.id].item(), (1.7) * 0.7 - 0.7 / 2.7, 1e-15);
}

TEST(Autodiff, SmallForwardExamples) {
  Graph g;
  const NodeId x = g.input("x");
  const NodeId sq = g.mul(x, x);
  const NodeId r = g.relu(x);
  const NodeId d1 = g.grad(sq, {x})[0];
  const NodeId d2 = g.grad(d1, {x})[0];
  for (const double at : {3.0, -2.0}) {
    const Tensor v = Tensor::scalar(at);
    Bindings b;
    b.bind(x, v);
    const auto ev = forward(g, b, {sq, r, d1, d2});
    EXPECT_EQ(ev[sq].item(), at * at);
    EXPECT_EQ(ev[r].item(), std::max(at, 0.0));
    EXPECT_EQ(ev[d1].item(), 2 * at);
    EXPECT_EQ(ev[d2].item(), 2.0);
  }
}

TEST(Autodiff, ReluDerivativeAtZeroIsZero) {
  Graph g;
  const NodeId x = g.input("x");
  const NodeId d = g.grad(g.relu(x), {x})[0];
  const Tensor zero = Tensor::scalar(0.0);
  Bindings b;
  b.bind(x, zero);
  EXPECT_EQ(forward(g, b, {d})[d].item(), 0.0);
}

TEST(Autodiff, FiniteDiffOnQuadraticIsTight) {
  ScalarFunction f{[](const Tensor& x) { return x[0] * x[0]; },
                   [](const Tensor& x) { return Tensor(Shape{1}, {2.0 * x[0]}); }};
  EXPECT_LT(finite_diff_check(f, Tensor(Shape{1}, {1.0}), 1e-5), 1e-8);
  EXPECT_THROW(finite_diff_check(f, Tensor(Shape{1}, {1.0}), 0.0), Error);
}

TEST(Autodiff, GradientIsLinear) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor x = random_tensor({2, 3}, 100 + seed, 0.1, 1.0);
    Graph g;
    const NodeId xn = g.input("x");
    const NodeId f = g.sum(g.sigmoid(g.mul(xn, xn)));
    const NodeId h = g.mean(g.exp(g.neg(xn)));
    const NodeId comb = g.add(g.mul(g.scalar(2.5), f), g.mul(g.scalar(-0.5), h));
    const NodeId df = g.grad(f, {xn})[0];
    const NodeId dh = g.grad(h, {xn})[0];
    const NodeId dc = g.grad(comb, {xn})[0];
    Bindings b;
    b.bind(xn, x);
    const auto ev = forward(g, b, {df, dh, dc});
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(ev[dc][i], 2.5 * ev[df][i] - 0.5 * ev[dh][i], 1e-14);
  }
}

TEST(Autodiff, EvaluationIsDeterministic) {
  const Tensor x = random_tensor({3, 5}, 21);
  const Tensor w = random_tensor({5, 4}, 22);
  auto run = [&] {
    Graph g;
    const NodeId xn = g.input("x");
    const NodeId wn = g.input("w");
    const NodeId y = g.sum(g.softmax(g.matmul(xn, wn)));
    const NodeId dw = g.grad(y, {wn})[0];
    Bindings b;
    b.bind(xn, x);
    b.bind(wn, w);
    return forward(g, b, {dw})[dw].storage();
  };
  EXPECT_EQ(run(), run());
}

TEST(Autodiff, ShapeMismatchFails) {
  Graph g;
  const NodeId a = g.input("a");
  const NodeId b = g.input("b");
  const NodeId y = g.matmul(a, b);
  const Tensor ta(Shape{2, 3}), tb(Shape{2, 3});
  Bindings bind;
  bind.bind(a, ta);
  bind.bind(b, tb);
  EXPECT_THROW(forward(g, bind, {y}), Error);
}

TEST(Autodiff, UnknownLeafFails) {
  Graph g;
  const NodeId x = g.input("x");
  const NodeId y = g.exp(x);
  EXPECT_THROW(g.grad(y, {NodeId{999}}), Error);
}
