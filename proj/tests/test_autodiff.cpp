#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "oracles.hpp"
#include "rflow/autodiff.hpp"
#include "rflow/mlp.hpp"
#include "rflow/rng.hpp"

using namespace rflow;
using rflow::testing::relative_error;

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed, double scale = 1.0) {
  CounterRng rng(seed, 0);
  Tensor t(std::move(s));
  for (double& v : t.storage()) v = scale * rng.normal();
  return t;
}

/// Builds loss(inputs) on a fresh tape; compares reverse-mode gradients of
/// every input coordinate with central differences.
void check_gradients(const std::vector<Tensor>& inputs,
                     const std::function<Var(Tape&, const std::vector<Var>&)>& build, double tol = 1e-6) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.leaf(t));
  tape.backward(build(tape, vars));

  auto eval = [&](const std::vector<Tensor>& in) {
    Tape t;
    std::vector<Var> vs;
    for (const Tensor& x : in) vs.push_back(t.leaf(x));
    return t.value(build(t, vs))[0];
  };
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor g = tape.grad(vars[k]);
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      std::vector<Tensor> in = inputs;
      const double fd = rflow::testing::central_difference(
          [&](double v) {
            in[k][i] = v;
            return eval(in);
          },
          inputs[k][i]);
      EXPECT_LT(relative_error(g[i], fd, 1.0), tol) << "input " << k << " coord " << i << " ad " << g[i] << " fd " << fd;
    }
  }
}

Var weighted_sum(Tape& tape, Var a, std::uint64_t seed) {
  const Tensor w = random_tensor(tape.value(a).shape(), seed);
  return sum(tape, mul(tape, a, tape.constant(w)));
}

}  // namespace

TEST(Autodiff, SumOfParametersHasUnitGradient) {
  Tape tape;
  Var p = tape.leaf(random_tensor({3, 4}, 1));
  tape.backward(sum(tape, p));
  EXPECT_EQ(tape.grad(p), Tensor({3, 4}, 1.0));
}

TEST(Autodiff, QuadraticFormClosedForm) {
  // loss = ||W x||^2  =>  dW = 2 (W x) x^T
  const Tensor W = random_tensor({3, 2}, 2);
  const Tensor x = random_tensor({1, 2}, 3);
  Tape tape;
  Var w = tape.leaf(W);
  Var y = affine(tape, tape.constant(x), w, tape.constant(Tensor({3})));
  tape.backward(sum(tape, row_sq_norm(tape, y)));
  const Tensor g = tape.grad(w);
  for (std::size_t r = 0; r < 3; ++r) {
    double wx = 0;
    for (std::size_t c = 0; c < 2; ++c) wx += W.at(r, c) * x[c];
    for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(g.at(r, c), 2 * wx * x[c], 1e-12);
  }
}

TEST(Autodiff, NonScalarLossIsAContractViolation) {
  Tape tape;
  Var p = tape.leaf(random_tensor({2, 2}, 4));
  EXPECT_THROW(tape.backward(p), ContractError);
}

TEST(Autodiff, BackwardVisitsEachNodeOnce) {
  Tape tape;
  Var a = tape.leaf(random_tensor({2, 3}, 5));
  Var b = tanh(tape, a);
  Var c = add(tape, b, b);  // b reached through two paths
  Var d = mul(tape, c, a);
  tape.backward(sum(tape, d));
  const auto& order = tape.last_backward_order();
  std::vector<std::size_t> sorted(order);
  std::sort(sorted.begin(), sorted.end());
  EXPECT_TRUE(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
  EXPECT_TRUE(std::is_sorted(order.rbegin(), order.rend()));
  // d/da sum(2 tanh(a) a) = 2 tanh(a) + 2 a (1 - tanh^2 a)
  const Tensor av = tape.value(a), g = tape.grad(a);
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double th = std::tanh(av[i]);
    EXPECT_NEAR(g[i], 2 * th + 2 * av[i] * (1 - th * th), 1e-12);
  }
}

TEST(Autodiff, ConstantsReceiveNoGradientWork) {
  Tape tape;
  Var c = tape.constant(random_tensor({2, 2}, 6));
  Var p = tape.leaf(random_tensor({2, 2}, 7));
  tape.backward(sum(tape, mul(tape, c, p)));
  EXPECT_FALSE(tape.requires_grad(c));
  EXPECT_EQ(tape.grad(c), Tensor({2, 2}));
}

TEST(Autodiff, ElementwiseOpsMatchFiniteDifferences) {
  const Tensor a = random_tensor({3, 4}, 10), b = random_tensor({3, 4}, 11);
  check_gradients({a}, [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, tanh(t, v[0]), 1); });
  check_gradients({a}, [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, relu(t, v[0]), 2); });
  check_gradients({a}, [](Tape& t, const std::vector<Var>& v) {
    return weighted_sum(t, sqrt(t, add_scalar(t, row_sq_norm(t, v[0]), 0.3)), 3);
  });
  check_gradients({a}, [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, scale(t, v[0], -1.7), 4); });
  check_gradients({a, b}, [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, add(t, v[0], v[1]), 5); });
  check_gradients({a, b}, [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, sub(t, v[0], v[1]), 6); });
  check_gradients({a, b}, [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, mul(t, v[0], v[1]), 7); });
  check_gradients({a}, [](Tape& t, const std::vector<Var>& v) {
    return weighted_sum(t, scale_rows(t, v[0], {0.5, -2.0, 3.0}), 8);
  });
  check_gradients({a}, [](Tape& t, const std::vector<Var>& v) { return mean(t, row_sq_norm(t, v[0])); });
}

TEST(Autodiff, AffineAndConcatMatchFiniteDifferences) {
  const Tensor x = random_tensor({4, 3}, 20), W = random_tensor({5, 3}, 21), b = random_tensor({5}, 22);
  const Tensor y = random_tensor({4, 2}, 23);
  check_gradients({x, W, b}, [](Tape& t, const std::vector<Var>& v) {
    return weighted_sum(t, affine(t, v[0], v[1], v[2]), 24);
  });
  check_gradients({x, y}, [](Tape& t, const std::vector<Var>& v) {
    return weighted_sum(t, tanh(t, concat_cols(t, v[0], v[1])), 25);
  });
}

TEST(Autodiff, SqrtOfNegativeIsADomainError) {
  Tape tape;
  Var a = tape.leaf(Tensor::vector({1.0, -0.5}));
  EXPECT_THROW(sqrt(tape, a), DomainError);
}

TEST(Autodiff, DropoutZeroIsIdentityAndScalesKeptUnits) {
  Tape tape;
  const Tensor a = random_tensor({50, 20}, 30);
  Var v = tape.leaf(a);
  CounterRng rng(1, 1);
  EXPECT_EQ(tape.value(dropout(tape, v, 0.0, rng)), a);
  const Tensor d = tape.value(dropout(tape, v, 0.25, rng));
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (d[i] == 0.0) {
      ++zeros;
    } else {
      EXPECT_NEAR(d[i], a[i] / 0.75, 1e-12);
    }
  }
  EXPECT_NEAR(double(zeros) / a.size(), 0.25, 0.05);
}

TEST(Mlp, ZeroWeightsGiveZeroOutput) {
  const MlpParams p = MlpParams::zeros({3, 5, 2});
  EXPECT_EQ(forward_mlp(p, random_tensor({4, 3}, 40)), Tensor({4, 2}));
}

TEST(Mlp, IdentitySingleLayer) {
  MlpParams p = MlpParams::zeros({3, 3});
  for (std::size_t i = 0; i < 3; ++i) p.weight(0).storage()[i * 3 + i] = 1.0;
  EXPECT_EQ(forward_mlp(p, Tensor::vector({1.0, 2.0, 3.0})), Tensor::vector({1.0, 2.0, 3.0}));
}

TEST(Mlp, MatchesScalarReevaluation) {
  MlpParams p = MlpParams::init({3, 4, 2}, Activation::tanh, 99);
  for (double& v : p.bias(0).storage()) v = 0.1;
  const Tensor x = Tensor::vector({0.3, -1.2, 0.8});
  const Tensor y = forward_mlp(p, x);
  double h[4];
  for (int i = 0; i < 4; ++i) {
    double s = p.bias(0)[i];
    for (int j = 0; j < 3; ++j) s += p.weight(0).at(i, j) * x[j];
    h[i] = std::tanh(s);
  }
  for (int i = 0; i < 2; ++i) {
    double s = p.bias(1)[i];
    for (int j = 0; j < 4; ++j) s += p.weight(1).at(i, j) * h[j];
    EXPECT_NEAR(y[i], s, 1e-14);
  }
}

TEST(Mlp, InitIsDeterministicAndBounded) {
  const MlpParams a = MlpParams::init({4, 8, 3}, Activation::relu, 5);
  EXPECT_EQ(a, MlpParams::init({4, 8, 3}, Activation::relu, 5));
  EXPECT_NE(a, MlpParams::init({4, 8, 3}, Activation::relu, 6));
  const double limit = std::sqrt(6.0 / 12.0);
  for (double v : a.weight(0).storage()) EXPECT_LE(std::abs(v), limit);
  EXPECT_EQ(a.parameter_count(), 4u * 8 + 8 + 8 * 3 + 3);
}

TEST(Mlp, DimensionMismatchIsRejected) {
  const MlpParams p = MlpParams::init({3, 4, 2}, Activation::tanh, 1);
  EXPECT_THROW(forward_mlp(p, Tensor({2, 4})), ShapeError);
}

TEST(Mlp, TapeForwardMatchesDirectForwardAndGradients) {
  for (Activation act : {Activation::tanh, Activation::relu}) {
    const MlpParams p = MlpParams::init({3, 6, 5, 2}, act, 7);
    const Tensor x = random_tensor({4, 3}, 8);
    Tape tape;
    const auto vars = tape_parameters(tape, p);
    Var out = forward_mlp(tape, p, vars, tape.constant(x), 0.0, nullptr);
    EXPECT_LT(max_abs_diff(tape.value(out), forward_mlp(p, x)), 1e-14);

    check_gradients(p.tensors, [&](Tape& t, const std::vector<Var>& v) {
      return weighted_sum(t, forward_mlp(t, p, v, t.constant(x), 0.0, nullptr), 9);
    }, 1e-4);
  }
}
