// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "convfuse/autograd.hpp"
#include "convfuse/error.hpp"
#include "test_util.hpp"

namespace convfuse {
namespace {

using testing::finite_difference_check;
using testing::probe;
using testing::random_tensor;

constexpr double kTol = 1e-6;

ad::Var leaf(Shape shape, std::uint64_t seed, double scale = 1.0) {
  return ad::Var(random_tensor(std::move(shape), seed, scale), true);
}

TEST(Autograd, SumOfSquaresGradientIsTwiceWeights) {
  ad::Var w = leaf({3, 4}, 1);
  ad::backward(ad::sum_squares(w));
  for (std::size_t i = 0; i < w.value().size(); ++i) EXPECT_DOUBLE_EQ(w.grad()[i], 2.0 * w.value()[i]);
}

TEST(Autograd, FrozenLeavesReceiveNothing) {
  ad::Var w = leaf({4, 3}, 1);
  ad::Var frozen(random_tensor({2, 4}, 2), false);
  ad::backward(probe(ad::linear(frozen, w), 3));
  EXPECT_TRUE(w.has_grad());
  EXPECT_FALSE(frozen.has_grad());
}

TEST(Autograd, GradientsAccumulateUntilCleared) {
  ad::Var w = leaf({2}, 4);
  ad::backward(ad::sum_squares(w));
  ad::backward(ad::sum_squares(w));
  EXPECT_DOUBLE_EQ(w.grad()[0], 4.0 * w.value()[0]);
  w.zero_grad();
  EXPECT_FALSE(w.has_grad());
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  ad::Var w = leaf({2, 2}, 5);
  ad::Var y;
  {
    ad::NoGradGuard guard;
    EXPECT_FALSE(ad::grad_enabled());
    y = ad::sum_squares(w);
  }
  EXPECT_TRUE(ad::grad_enabled());
  ad::backward(y);
  EXPECT_FALSE(w.has_grad());
}

TEST(Autograd, SharedSubexpressionsSumTheirContributions) {
  ad::Var w = leaf({3}, 6);
  const ad::Var y = ad::add(w, w);
  ad::backward(ad::sum_squares(y));  // d/dw (2w)^2 = 8w
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(w.grad()[i], 8.0 * w.value()[i], 1e-15);
}

// Each op checked in isolation against central differences.

TEST(AutogradOps, Linear) {
  ad::Var x = leaf({2, 3, 4}, 1), w = leaf({4, 5}, 2);
  EXPECT_LT(finite_difference_check({x, w}, [&] { return probe(ad::linear(x, w), 9); }).max_rel, kTol);
}

TEST(AutogradOps, Conv2dSame) {
  for (std::size_t k : {1, 3, 5}) {
    ad::Var x = leaf({2, 2, 4, 3}, 1), w = leaf({3, 2, k, k}, 2);
    EXPECT_LT(finite_difference_check({x, w}, [&] { return probe(ad::conv2d_same(x, w), 9); }).max_rel, kTol)
        << "k=" << k;
  }
}

TEST(AutogradOps, LayoutAndConcat) {
  ad::Var a = leaf({2, 6, 3}, 1), b = leaf({2, 6, 3}, 2);
  auto f = [&] {
    const ad::Var s = ad::concat_channels({ad::seq_to_2d(a, {2, 3}), ad::seq_to_2d(b, {2, 3})});
    return probe(ad::seq_from_2d(s), 7);
  };
  EXPECT_LT(finite_difference_check({a, b}, f).max_rel, kTol);
}

TEST(AutogradOps, ElementwiseAndNorm) {
  ad::Var x = leaf({2, 3, 8}, 31, 2.0);
  EXPECT_LT(finite_difference_check({x}, [&] { return probe(ad::tanh(x), 1); }).max_rel, kTol);
  EXPECT_LT(finite_difference_check({x}, [&] { return probe(ad::gelu(x), 2); }).max_rel, kTol);
  EXPECT_LT(finite_difference_check({x}, [&] { return probe(ad::layer_norm(x), 13); }).max_rel, kTol);
  EXPECT_LT(finite_difference_check({x}, [&] { return probe(ad::scale(x, -1.5), 4); }).max_rel, kTol);
}

TEST(AutogradOps, Attention) {
  const std::size_t c = 8;
  ad::Var x = leaf({2, 5, c}, 1), wq = leaf({c, c}, 2, 0.5), wk = leaf({c, c}, 3, 0.5), wv = leaf({c, c}, 4),
          wo = leaf({c, c}, 5);
  for (bool causal : {false, true}) {
    auto f = [&] { return probe(ad::attention(x, wq, wk, wv, wo, 2, causal), 6); };
    EXPECT_LT(finite_difference_check({x, wq, wk, wv, wo}, f).max_rel, kTol) << "causal=" << causal;
  }
}

TEST(AutogradOps, TokenPlumbing) {
  ad::Var x = leaf({2, 5, 3}, 1), d = leaf({2, 4, 3}, 2), tok = leaf({3}, 3);
  EXPECT_LT(finite_difference_check({x}, [&] { return probe(ad::slice_tokens(x, 1, 3), 4); }).max_rel, kTol);
  EXPECT_LT(finite_difference_check({x, d}, [&] { return probe(ad::add_to_tokens(x, d, 1), 5); }).max_rel, kTol);
  EXPECT_LT(finite_difference_check({x, tok}, [&] { return probe(ad::prepend_token(x, tok), 6); }).max_rel, kTol);
  EXPECT_LT(finite_difference_check({x}, [&] { return probe(ad::select_token(x, 4), 7); }).max_rel, kTol);
  EXPECT_LT(finite_difference_check({x}, [&] { return probe(ad::gap(x), 8); }).max_rel, kTol);
}

TEST(AutogradOps, RowsSoftmaxAndMean) {
  ad::Var a = leaf({3, 4}, 1, 3.0), b = leaf({3, 4}, 2);
  EXPECT_LT(finite_difference_check({a}, [&] { return probe(ad::softmax_rows(a), 3); }).max_rel, kTol);
  EXPECT_LT(finite_difference_check({a, b}, [&] { return probe(ad::mean_of({a, b, a}), 4); }).max_rel, kTol);
  ad::Var t = leaf({2, 2, 4}, 5);
  EXPECT_LT(finite_difference_check({t}, [&] { return probe(ad::stack_rows({ad::select_token(t, 0), ad::select_token(t, 1)}, 1), 6); })
                .max_rel,
            kTol);
}

TEST(AutogradOps, CosineTokens) {
  ad::Var v = leaf({2, 3, 5}, 1), t1 = leaf({1, 5}, 2), tb = leaf({2, 5}, 3);
  EXPECT_LT(finite_difference_check({v, t1}, [&] { return probe(ad::cosine_tokens(v, t1), 4); }).max_rel, kTol);
  EXPECT_LT(finite_difference_check({v, tb}, [&] { return probe(ad::cosine_tokens(v, tb), 5); }).max_rel, kTol);
}

TEST(AutogradOps, CosineZeroNormIsCountedNotNan) {
  ad::Var v(Tensor({1, 2, 3}), true);
  ad::Var t(random_tensor({1, 3}, 1), true);
  std::size_t events = 0;
  const ad::Var s = ad::cosine_tokens(v, t, &events);
  EXPECT_EQ(events, 2u);
  for (double x : s.value().values()) EXPECT_EQ(x, 0.0);
  ad::backward(probe(s, 2));
  EXPECT_TRUE(v.grad().all_finite());
}

TEST(AutogradOps, BilinearUpsample) {
  ad::Var m = leaf({2, 3, 3}, 1);
  EXPECT_LT(finite_difference_check({m}, [&] { return probe(ad::bilinear_upsample(m, {5, 7}), 2); }).max_rel, kTol);
}

TEST(AutogradOps, WeightedSumAndReshape) {
  ad::Var a = leaf({2, 3}, 1), b = leaf({3, 2}, 2);
  auto f = [&] { return ad::weighted_sum({0.5, 2.0}, {ad::sum_squares(a), ad::sum_squares(ad::reshape(b, {6}))}); };
  EXPECT_LT(finite_difference_check({a, b}, f).max_rel, kTol);
}

}  // namespace
}  // namespace convfuse
