#include <doctest.h>

#include <functional>
#include <random>
#include <string>

#include <Eigen/Dense>

#include "epift/autodiff.hpp"
#include "epift/unroll.hpp"
#include "support/op_cases.hpp"
#include "support/oracles.hpp"

using namespace epift;
using epift::testing::central_difference;
using epift::testing::random_tensor;
using epift::testing::relative_error;
using namespace epift::testing;


TEST_CASE("every elementary op matches central differences in 64-bit") {
  std::mt19937_64 rng(1234);
  int trials = 0;
  for (const auto& op : op_cases()) {
    for (int t = 0; t < 6; ++t, ++trials) {
      auto xs = draw_inputs(op, rng);
      auto w = output_weights(op, xs, rng);
      auto params = as_params<double>(xs);
      auto loss = scalarize(op.f64(params), w);
      auto analytic = grad(loss, std::span<const Var<double>>(params)).tensors();
      auto numeric = central_difference([&](const auto& in) { return eval_value(op, w, in); }, xs, 1e-5);
      INFO(op.name << " trial " << t);
      CHECK(relative_error(analytic, numeric) <= 1e-6);
    }
  }
  CHECK(trials >= 100);
}

TEST_CASE("32-bit gradients match 64-bit central differences") {
  std::mt19937_64 rng(99);
  for (const auto& op : op_cases()) {
    for (int t = 0; t < 4; ++t) {
      auto xs = draw_inputs(op, rng);
      // Round inputs to float so both paths see the same point.
      for (auto& x : xs) x = x.cast<float>().cast<double>();
      auto w = output_weights(op, xs, rng);
      auto params = as_params<float>(xs);
      auto loss = scalarize(op.f32(params), w);
      auto analytic = grad(loss, std::span<const Var<float>>(params)).tensors();
      auto numeric = central_difference([&](const auto& in) { return eval_value(op, w, in); }, xs, 1e-5);
      INFO(op.name << " trial " << t);
      CHECK(relative_error(analytic, numeric) <= 1e-4);
    }
  }
}

TEST_CASE("second derivatives of every op match a four-point difference") {
  // u^T H v from function values only, compared with u . d/dx (v . grad f).
  std::mt19937_64 rng(4321);
  for (const auto& op : op_cases()) {
    for (int t = 0; t < 2; ++t) {
      auto xs = draw_inputs(op, rng);
      auto w = output_weights(op, xs, rng);
      std::vector<Tensor<double>> u, v;
      for (const auto& x : xs) {
        u.push_back(random_tensor<double>(x.shape(), rng));
        v.push_back(random_tensor<double>(x.shape(), rng));
      }
      auto params = as_params<double>(xs);
      auto loss = scalarize(op.f64(params), w);
      auto g = grad(loss, std::span<const Var<double>>(params), GradOptions{true});
      Var<double> gv = Var<double>::constant(Tensor<double>::scalar(0.0));
      for (std::size_t i = 0; i < params.size(); ++i)
        gv = add(gv, sum_all(mul(g.grads[i], Var<double>::constant(v[i]))));
      auto hv = grad(gv, std::span<const Var<double>>(params)).tensors();
      double analytic = 0;
      for (std::size_t i = 0; i < hv.size(); ++i) analytic += (hv[i].array() * u[i].array()).sum();

      const double h = 1e-4;
      auto shifted = [&](double a, double b) {
        auto p = xs;
        for (std::size_t i = 0; i < p.size(); ++i) p[i].array() += a * u[i].array() + b * v[i].array();
        return eval_value(op, w, p);
      };
      const double numeric = (shifted(h, h) - shifted(h, -h) - shifted(-h, h) + shifted(-h, -h)) / (4 * h * h);
      INFO(op.name << " trial " << t << " analytic " << analytic << " numeric " << numeric);
      CHECK(std::abs(analytic - numeric) <= 1e-5 * std::max(1.0, std::abs(numeric)));
    }
  }
}

TEST_CASE("gradient of x squared at 3 is 6") {
  auto x = Var<double>::param(Tensor<double>::scalar(3.0));
  std::vector<Var<double>> wrt{x};
  auto g = grad(mul(x, x), std::span<const Var<double>>(wrt));
  CHECK(g.grads[0].value().item() == 6.0);
  CHECK_FALSE(g.any_unreachable());
}

TEST_CASE("grad of grad: d2/dx2 of x cubed at 2 is 12") {
  auto x = Var<double>::param(Tensor<double>::scalar(2.0));
  std::vector<Var<double>> wrt{x};
  auto cube = mul(mul(x, x), x);
  auto g = grad(cube, std::span<const Var<double>>(wrt), GradOptions{true});
  CHECK(g.grads[0].value().item() == 12.0);
  REQUIRE(g.grads[0].requires_grad());
  auto gg = grad(g.grads[0], std::span<const Var<double>>(wrt));
  CHECK(gg.grads[0].value().item() == 12.0);
}

TEST_CASE("unreachable inputs get a zero gradient and a flag") {
  auto x = Var<double>::param(Tensor<double>({2}, {1.0, 2.0}));
  auto y = Var<double>::param(Tensor<double>({3}, {1.0, 2.0, 3.0}));
  std::vector<Var<double>> wrt{x, y};
  auto g = grad(sum_all(mul(x, x)), std::span<const Var<double>>(wrt));
  CHECK(g.any_unreachable());
  CHECK_FALSE(g.unreachable[0]);
  CHECK(g.unreachable[1]);
  CHECK(g.grads[1].shape() == Shape{3});
  CHECK(g.grads[1].value().array().abs().sum() == 0.0);
}

TEST_CASE("conv+relu+linear network gradients match finite differences") {
  std::mt19937_64 rng(2024);
  std::vector<Tensor<double>> xs{
      random_tensor<double>({2, 1, 6, 6}, rng),        // input
      random_tensor<double>({3, 1, 3, 3}, rng),        // conv weight
      random_tensor<double>({1, 3, 1, 1}, rng),        // conv bias
      random_tensor<double>({48, 4}, rng, -0.3, 0.3),  // linear weight
      random_tensor<double>({4}, rng),                 // linear bias
  };
  const int labels[] = {3, 1};
  auto net = [&](const std::vector<Var<double>>& p) {
    auto h = relu(add(conv2d(p[0], p[1], 0), p[2]));
    auto flat = reshape(h, {2, 48});
    auto logits = add(matmul(flat, p[3]), p[4]);
    return cross_entropy(logits, std::span<const int>(labels, 2));
  };
  auto params = as_params<double>(xs);
  auto analytic = grad(net(params), std::span<const Var<double>>(params)).tensors();
  auto numeric = central_difference(
      [&](const auto& in) {
        std::vector<Var<double>> c;
        for (const auto& x : in) c.push_back(Var<double>::constant(x));
        return net(c).value().item();
      },
      xs, 1e-3);
  for (std::size_t i = 1; i < xs.size(); ++i) {
    INFO("parameter " << i);
    CHECK(relative_error(std::vector{analytic[i]}, std::vector{numeric[i]}) <= 1e-5);
  }
}

TEST_CASE("gradients are bit-identical across identical runs") {
  auto run = [] {
    std::mt19937_64 rng(77);
    auto x = Var<float>::param(random_tensor<float>({3, 2, 6, 6}, rng));
    auto w = Var<float>::param(random_tensor<float>({4, 2, 3, 3}, rng));
    auto loss = mean_all(softmax(reshape(max_pool2d(relu(conv2d(x, w, 1))), {3, 36}), 1));
    std::vector<Var<float>> wrt{x, w};
    return grad(loss, std::span<const Var<float>>(wrt)).tensors();
  };
  auto a = run(), b = run();
  for (std::size_t i = 0; i < a.size(); ++i)
    for (Index j = 0; j < a[i].size(); ++j) REQUIRE(a[i][j] == b[i][j]);
}

TEST_CASE("unrolled meta-gradient of the quadratic case is 1.28") {
  auto theta = Var<double>::param(Tensor<double>::scalar(1.0));
  auto state = unroll_start<double>({theta});
  unroll_sgd_step(state, mul(state.adapted[0], state.adapted[0]), 0.1, true);
  CHECK(state.adapted[0].value().item() == doctest::Approx(0.8).epsilon(1e-15));
  auto outer = mul(state.adapted[0], state.adapted[0]);
  auto g = unrolled_adapt_grad(outer, state, MetaOrder::second);
  CHECK(std::abs(g[0].item() - 1.28) <= 1e-6);
  // First order ignores the (1 - 2 alpha) factor.
  auto fo = unrolled_adapt_grad(outer, state, MetaOrder::first);
  CHECK(std::abs(fo[0].item() - 1.6) <= 1e-12);
}

TEST_CASE("zero inner learning rate gives the plain outer gradient") {
  auto theta = Var<double>::param(Tensor<double>::scalar(1.5));
  auto state = unroll_start<double>({theta});
  unroll_sgd_step(state, mul(state.adapted[0], state.adapted[0]), 0.0, true);
  auto outer = mul(mul(state.adapted[0], state.adapted[0]), state.adapted[0]);
  auto g = unrolled_adapt_grad(outer, state, MetaOrder::second);
  CHECK(g[0].item() == doctest::Approx(3 * 1.5 * 1.5).epsilon(1e-14));
}

TEST_CASE("second order without create_graph is a configuration error") {
  auto theta = Var<double>::param(Tensor<double>::scalar(1.0));
  auto state = unroll_start<double>({theta});
  unroll_sgd_step(state, mul(state.adapted[0], state.adapted[0]), 0.1, false);
  auto outer = mul(state.adapted[0], state.adapted[0]);
  CHECK_THROWS_AS(unrolled_adapt_grad(outer, state, MetaOrder::second), ConfigError);
  CHECK_NOTHROW(unrolled_adapt_grad(outer, state, MetaOrder::first));
}

namespace {
// Linear regressor y = x w + b with MSE; support and query sets fixed.
struct TinyLinear {
  Tensor<double> xs{{4, 2}, {0.5, -1.0, 1.5, 0.2, -0.3, 0.8, 1.1, -0.6}};
  Tensor<double> ys{{4, 1}, {0.3, -0.2, 0.9, 0.1}};
  Tensor<double> xq{{3, 2}, {0.1, 0.4, -0.9, 1.2, 0.7, 0.7}};
  Tensor<double> yq{{3, 1}, {0.5, -0.4, 0.2}};

  static Var<double> mse(const Var<double>& w, const Var<double>& b, const Tensor<double>& x, const Tensor<double>& y) {
    auto pred = add(matmul(Var<double>::constant(x), w), b);
    return mean_all(square(sub(pred, Var<double>::constant(y))));
  }
};
}  // namespace

TEST_CASE("one-step meta-gradient of a tiny linear model matches finite differences") {
  TinyLinear m;
  const double alpha = 0.3;
  std::vector<Tensor<double>> theta{Tensor<double>({2, 1}, {0.2, -0.7}), Tensor<double>({1}, {0.1})};
  auto meta_loss = [&](const std::vector<Var<double>>& p, bool create_graph, Unrolled<double>* keep) {
    auto state = unroll_start<double>(p);
    unroll_sgd_step(state, TinyLinear::mse(state.adapted[0], state.adapted[1], m.xs, m.ys), alpha, create_graph);
    auto outer = TinyLinear::mse(state.adapted[0], state.adapted[1], m.xq, m.yq);
    if (keep) *keep = state;
    return outer;
  };
  auto params = as_params<double>(theta);
  Unrolled<double> state;
  auto outer = meta_loss(params, true, &state);
  auto analytic = unrolled_adapt_grad(outer, state, MetaOrder::second);
  // Oracle: the inner step is written out by hand and the outer derivative
  // comes from value differences only.
  auto hand_meta_loss = [&](const std::vector<Tensor<double>>& in) {
    Eigen::MatrixXd x = Eigen::Map<const Eigen::Matrix<double, 4, 2, Eigen::RowMajor>>(m.xs.data());
    Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(m.ys.data(), 4);
    Eigen::VectorXd w = Eigen::Map<const Eigen::VectorXd>(in[0].data(), 2);
    double b = in[1][0];
    Eigen::VectorXd r = x * w + Eigen::VectorXd::Constant(4, b) - y;
    Eigen::VectorXd gw = 2.0 / 4.0 * x.transpose() * r;
    double gb = 2.0 / 4.0 * r.sum();
    w -= alpha * gw;
    b -= alpha * gb;
    Eigen::MatrixXd xq = Eigen::Map<const Eigen::Matrix<double, 3, 2, Eigen::RowMajor>>(m.xq.data());
    Eigen::VectorXd yq = Eigen::Map<const Eigen::VectorXd>(m.yq.data(), 3);
    return (xq * w + Eigen::VectorXd::Constant(3, b) - yq).squaredNorm() / 3.0;
  };
  CHECK(hand_meta_loss(theta) == doctest::Approx(outer.value().item()).epsilon(1e-12));
  auto numeric = central_difference(hand_meta_loss, theta, 1e-5);
  CHECK(relative_error(analytic, numeric) <= 1e-4);
  auto first = unrolled_adapt_grad(outer, state, MetaOrder::first);
  CHECK(relative_error(first, numeric) > 1e-3);
}
