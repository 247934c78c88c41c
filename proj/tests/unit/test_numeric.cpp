#include <gtest/gtest.h>

#include <cmath>

#include "dlqat/gradcheck.hpp"
#include "dlqat/ops.hpp"

namespace dlqat {
namespace {

Tensor mat(std::size_t r, std::size_t c, std::vector<double> v, bool grad = false) {
  return Tensor({r, c}, std::move(v), grad);
}

TEST(Tensor, RejectsInconsistentConstruction) {
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor({0, 2}, {}), ShapeError);
  EXPECT_THROW(Tensor({1}, {std::nan("")}), NumericError);
  EXPECT_THROW(Tensor({1}, {INFINITY}), NumericError);
}

TEST(Tensor, NonFiniteForwardResultIsAnError) {
  Tensor big = mat(1, 1, {1e200});
  EXPECT_THROW(mul(big, big), NumericError);
}

TEST(Tensor, GradAppearsOnlyAfterBackward) {
  Tensor x = mat(1, 3, {1, 2, 3}, true);
  EXPECT_FALSE(x.has_grad());
  backward(sum(mul(x, x)));
  ASSERT_TRUE(x.has_grad());
  EXPECT_EQ(x.grad().size(), x.numel());
}

TEST(Matmul, IdentityAndScalar) {
  Tensor id = mat(2, 2, {1, 0, 0, 1});
  Tensor b = mat(2, 2, {3, 4, 5, 6});
  auto y = matmul(id, b);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{3, 4, 5, 6}));
  EXPECT_EQ(matmul(mat(1, 1, {2}), mat(1, 1, {3})).item(), 6.0);
}

TEST(Matmul, MatchesTripleLoopOracle) {
  std::mt19937_64 rng(3);
  for (auto [m, k, n] : {std::tuple{4, 5, 3}, std::tuple{7, 9, 17}, std::tuple{1, 3, 33}}) {
    Tensor a = Tensor::randn({std::size_t(m), std::size_t(k)}, 1.0, rng);
    Tensor b = Tensor::randn({std::size_t(k), std::size_t(n)}, 1.0, rng);
    Tensor c = matmul(a, b);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
        EXPECT_NEAR(c.at(i, j), acc, 1e-6);
      }
    }
  }
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Elementwise, RoundHalfEvenAndClip) {
  EXPECT_EQ(round_half_even(2.5), 2.0);
  EXPECT_EQ(round_half_even(3.5), 4.0);
  EXPECT_EQ(round_half_even(-2.5), -2.0);
  EXPECT_EQ(clip(Tensor::scalar(40), -8, 7).item(), 7.0);
  EXPECT_EQ(clip(Tensor::scalar(-40), -8, 7).item(), -8.0);
}

TEST(Elementwise, DivisionByZeroThrows) {
  EXPECT_THROW(div(mat(1, 2, {1, 2}), mat(1, 2, {1, 0})), NumericError);
}

TEST(Elementwise, ShapeMismatchThrows) {
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
  EXPECT_THROW(broadcast_mul(Tensor::zeros({4, 6}), Tensor::zeros({3, 1})), ShapeError);
}

TEST(Elementwise, BroadcastMulMatchesScalarLoop) {
  std::mt19937_64 rng(5);
  Tensor a = Tensor::randn({4, 6}, 1.0, rng);
  Tensor col = Tensor::randn({4, 1}, 1.0, rng);
  Tensor row = Tensor::randn({1, 6}, 1.0, rng);
  Tensor bc = broadcast_mul(a, col), br = broadcast_mul(a, row);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 6; ++j) {
      EXPECT_EQ(bc.at(i, j), a.at(i, j) * col.at(i));
      EXPECT_EQ(br.at(i, j), a.at(i, j) * row.at(j));
    }
  }
}

TEST(Primitives, SoftmaxOfZerosIsUniform) {
  auto s = softmax(mat(3, 1, {0, 0, 0}), 0);
  for (double v : s.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Primitives, SaturatedCrossEntropyIsNearZero) {
  const std::vector<std::int32_t> target{0};
  EXPECT_LE(cross_entropy(mat(2, 1, {20, -20}), target).item(), 1e-6);
}

TEST(Primitives, CrossEntropyMatchesScalarLogSumExp) {
  std::mt19937_64 rng(9);
  Tensor logits = Tensor::randn({5, 4}, 2.0, rng);
  const std::vector<std::int32_t> targets{4, 0, 2, 2};
  double nll = 0.0;
  for (std::size_t t = 0; t < 4; ++t) {
    double z = 0.0;
    for (std::size_t v = 0; v < 5; ++v) z += std::exp(logits.at(v, t));
    nll += std::log(z) - logits.at(targets[t], t);
  }
  EXPECT_NEAR(cross_entropy(logits, targets).item(), nll / 4.0, 1e-12);
}

TEST(Primitives, OutOfRangeIdsThrow) {
  const std::vector<std::int32_t> bad{5};
  EXPECT_THROW(embedding_lookup(Tensor::zeros({4, 2}), bad), std::out_of_range);
  EXPECT_THROW(cross_entropy(Tensor::zeros({4, 1}), bad), std::out_of_range);
}

TEST(Primitives, RmsnormColumnsHaveUnitRms) {
  std::mt19937_64 rng(1);
  Tensor y = rmsnorm(Tensor::randn({8, 3}, 4.0, rng));
  for (std::size_t c = 0; c < 3; ++c) {
    double ss = 0.0;
    for (std::size_t r = 0; r < 8; ++r) ss += y.at(r, c) * y.at(r, c);
    EXPECT_NEAR(std::sqrt(ss / 8.0), 1.0, 1e-6);
  }
}

TEST(Primitives, CausalAttentionIgnoresFutureTokens) {
  std::mt19937_64 rng(2);
  Tensor q = Tensor::randn({4, 6}, 1.0, rng), k = Tensor::randn({4, 6}, 1.0, rng),
         v = Tensor::randn({4, 6}, 1.0, rng);
  Tensor out = causal_attention(q, k, v, 2, 3);
  std::vector<double> kd(k.data().begin(), k.data().end()), vd(v.data().begin(), v.data().end());
  for (std::size_t r = 0; r < 4; ++r) {  // perturb the last token of each sequence
    kd[r * 6 + 2] += 1.0;
    vd[r * 6 + 5] -= 2.0;
  }
  Tensor out2 = causal_attention(q, Tensor({4, 6}, kd), Tensor({4, 6}, vd), 2, 3);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c : {0, 1, 3, 4}) EXPECT_EQ(out.at(r, c), out2.at(r, c));
  }
}

TEST(Backward, SquareSumGradient) {
  Tensor x = mat(1, 3, {1, 2, 3}, true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, UnreachableTensorHasNoGrad) {
  Tensor x = mat(1, 2, {1, 2}, true), y = mat(1, 2, {3, 4}, true);
  Tensor unused = mul(y, y);
  backward(sum(x));
  EXPECT_TRUE(x.has_grad());
  EXPECT_FALSE(y.has_grad());
}

TEST(Backward, NonScalarOrRepeatedBackwardThrows) {
  Tensor x = mat(1, 2, {1, 2}, true);
  EXPECT_THROW(backward(mul(x, x)), GraphError);
  Tensor loss = sum(mul(x, x));
  backward(loss);
  EXPECT_THROW(backward(loss), GraphError);
}

TEST(Backward, UsingATensorTwiceDoublesItsGradient) {
  std::mt19937_64 rng(4);
  Tensor x = Tensor::randn({3, 3}, 1.0, rng, true);
  Tensor w = Tensor::randn({3, 3}, 1.0, rng);
  backward(sum(mul(x, w)));
  std::vector<double> once(x.grad().begin(), x.grad().end());
  x.clear_grad();
  backward(add(sum(mul(x, w)), sum(mul(x, w))));
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_EQ(x.grad()[i], 2.0 * once[i]);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor x = mat(1, 2, {1, 2}, true);
  NoGradGuard guard;
  Tensor y = mul(x, x);
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, DeterministicGradients) {
  auto run = [] {
    std::mt19937_64 rng(11);
    Tensor w = Tensor::randn({5, 4}, 1.0, rng, true);
    Tensor x = Tensor::randn({4, 6}, 1.0, rng);
    const std::vector<std::int32_t> t{0, 1, 2, 3, 4, 0};
    backward(cross_entropy(matmul(w, silu(rmsnorm(x))), t));
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(FiniteDifference, RmsnormAtRandomPoints) {
  std::mt19937_64 rng(21);
  for (int p = 0; p < 20; ++p) {
    Tensor w = Tensor::randn({6, 5}, 1.0, rng);
    std::vector<Tensor> in{Tensor::randn({6, 5}, 1.0, rng, true)};
    LossFn f = [w](const std::vector<Tensor>& x) { return sum(mul(rmsnorm(x[0]), w)); };
    EXPECT_LE(fd_relative_error(f, in), 1e-4);
  }
}

TEST(FiniteDifference, CompositeMlp) {
  std::mt19937_64 rng(22);
  Tensor x = Tensor::randn({6, 4}, 1.0, rng);
  const std::vector<std::int32_t> t{1, 4, 0, 2};
  std::vector<Tensor> in{Tensor::randn({8, 6}, 0.4, rng, true), Tensor::randn({5, 8}, 0.4, rng, true)};
  LossFn f = [&](const std::vector<Tensor>& p) {
    return cross_entropy(matmul(p[1], silu(matmul(p[0], x))), t);
  };
  EXPECT_LE(fd_relative_error(f, in), 1e-4);
}

TEST(Gradcheck, FullSuitePasses) {
  const auto report = run_gradcheck(0, 100);
  for (const auto& e : report.entries) {
    EXPECT_TRUE(e.passed) << e.name << " max error " << e.max_error;
  }
}

}  // namespace
}  // namespace dlqat
