// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "convfuse/conv_lora.hpp"
#include "convfuse/error.hpp"
#include "convfuse/kernels.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace convfuse {
namespace {

using testing::max_abs_diff;
using testing::naive_linear;
using testing::random_tensor;

void randomize(ConvLoraAdapter& a, std::uint64_t seed) { testing::randomize_adapter(a, seed); }

using testing::adapter_oracle;
using testing::branch_oracle;
using testing::scaled;

TEST(ConvLora, ZeroInitGivesZeroUpdate) {
  const ConvLoraAdapter a({16, 4, {3, 5}}, 1);
  const Tensor x = random_tensor({2, 9, 16}, 2);
  for (double v : testing::elements(a.forward(ad::constant(x), {3, 3}).value())) EXPECT_EQ(v, 0.0);
  for (double v : testing::elements(a.branch_forward(ad::constant(x), 3, {3, 3}).value())) EXPECT_EQ(v, 0.0);
}

TEST(ConvLora, IdentityConvsCollapseToPlainLora) {
  ConvLoraAdapter a({4, 2, {1}}, 1);
  randomize(a, 10);
  for (ad::Var* conv : {&a.conv_down(1), &a.conv_up(1)}) {
    Tensor id({2, 2, 1, 1});
    id.at(0, 0, 0, 0) = id.at(1, 1, 0, 0) = 1.0;
    conv->mutable_value() = id;
  }
  const Tensor x = random_tensor({1, 4, 4}, 3);
  const Tensor expected = naive_linear(naive_linear(x, a.w_down().value()), a.w_up().value());
  EXPECT_LE(max_abs_diff(a.branch_forward(ad::constant(x), 1, {2, 2}).value(), expected), 1e-14);
}

TEST(ConvLora, BranchMatchesCompositionOracle) {
  ConvLoraAdapter a({4, 2, {3, 5}}, 1);
  randomize(a, 20);
  const Tensor x = random_tensor({1, 9, 4}, 4);
  for (std::size_t k : {3, 5})
    EXPECT_LE(max_abs_diff(a.branch_forward(ad::constant(x), k, {3, 3}).value(), branch_oracle(a, x, k, {3, 3})),
              1e-12);
  EXPECT_THROW(a.branch_forward(ad::constant(x), 7, {3, 3}), ConfigError);
}

TEST(ConvLora, AdapterMatchesCompositionOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ConvLoraAdapter a({8, 3, {3, 5}}, seed);
    randomize(a, 100 * seed);
    const Tensor x = random_tensor({2, 12, 8}, seed + 1);
    EXPECT_LE(max_abs_diff(a.forward(ad::constant(x), {3, 4}).value(), adapter_oracle(a, x, {3, 4})), 1e-12);
  }
}

TEST(ConvLora, ZeroFuseAnnihilates) {
  ConvLoraAdapter a({8, 2, {3, 5}}, 1);
  randomize(a, 5);
  a.fuse().mutable_value().fill(0.0);
  for (double v : testing::elements(a.forward(ad::constant(random_tensor({1, 4, 8}, 2)), {2, 2}).value())) EXPECT_EQ(v, 0.0);
}

TEST(ConvLora, ShapePreservedForManyGrids) {
  ConvLoraAdapter a({6, 2, {3, 5}}, 3);
  randomize(a, 7);
  for (Grid g : {Grid{1, 1}, Grid{2, 5}, Grid{4, 4}, Grid{3, 1}}) {
    const Tensor x = random_tensor({2, g.cells(), 6}, g.cells());
    EXPECT_EQ(a.forward(ad::constant(x), g).value().shape(), x.shape());
  }
  EXPECT_THROW(a.forward(ad::constant(random_tensor({1, 5, 6}, 1)), {2, 2}), ShapeError);
}

TEST(ConvLora, LinearInUpProjectionAndFuse) {
  ConvLoraAdapter a({8, 2, {3, 5}}, 1);
  randomize(a, 9);
  const Tensor x = random_tensor({1, 9, 8}, 2);
  const Tensor base = a.forward(ad::constant(x), {3, 3}).value();
  for (ad::Var* w : {&a.w_up(), &a.fuse()}) {
    const Tensor saved = w->value();
    w->mutable_value() = scaled(saved, -2.5);
    const Tensor y = a.forward(ad::constant(x), {3, 3}).value();
    w->mutable_value() = saved;
    EXPECT_LE(max_abs_diff(y, scaled(base, -2.5)), 1e-12);
  }
}

TEST(ConvLora, BranchOrderPermutationWithPermutedFuse) {
  ConvLoraAdapter a({6, 2, {3, 5}}, 1);
  randomize(a, 11);
  ConvLoraAdapter b({6, 2, {5, 3}}, 2);
  b.w_down().mutable_value() = a.w_down().value();
  b.w_up().mutable_value() = a.w_up().value();
  for (std::size_t k : {3, 5}) {
    b.conv_down(k).mutable_value() = a.conv_down(k).value();
    b.conv_up(k).mutable_value() = a.conv_up(k).value();
  }
  const std::size_t c = 6;
  Tensor fuse({c, 2 * c, 1, 1});
  for (std::size_t o = 0; o < c; ++o)
    for (std::size_t i = 0; i < c; ++i) {
      fuse.at(o, i, 0, 0) = a.fuse().value().at(o, c + i, 0, 0);
      fuse.at(o, c + i, 0, 0) = a.fuse().value().at(o, i, 0, 0);
    }
  b.fuse().mutable_value() = fuse;
  const Tensor x = random_tensor({2, 9, 6}, 3);
  EXPECT_LE(max_abs_diff(a.forward(ad::constant(x), {3, 3}).value(), b.forward(ad::constant(x), {3, 3}).value()),
            1e-12);
}

std::size_t enumerate(const ConvLoraAdapter& a) {
  ParamList ps;
  a.collect(ps, "");
  std::size_t n = 0;
  for (const auto& p : ps) n += p.var.value().size();
  return n;
}

TEST(ConvLora, ParamCountMatchesEnumeration) {
  const ConvLoraAdapter def({64, 8, {3, 5}}, 1);
  EXPECT_EQ(def.param_count(), enumerate(def));
  EXPECT_EQ(def.param_count(), 64u * 8 + 8 * 64 + 2 * 64 * 9 + 2 * 64 * 25 + 128 * 64);
  const ConvLoraAdapter small({8, 2, {3}}, 1);
  EXPECT_EQ(small.param_count(), 168u);
  EXPECT_EQ(small.param_count(), enumerate(small));
  const ConvLoraAdapter doubled({64, 16, {3, 5}}, 1);
  EXPECT_EQ(doubled.param_count(), enumerate(doubled));
  EXPECT_GT(doubled.param_count(), def.param_count());
}

TEST(ConvLora, CheaperThanOneAttentionBlock) {
  const std::size_t c = 64;
  const std::size_t block = 4 * c * c + 2 * c * 4 * c;  // projections + MLP
  EXPECT_LT(ConvLoraAdapter({c, 8, {3, 5}}, 1).param_count(), block);
}

TEST(ConvLora, ConfigValidation) {
  EXPECT_THROW(ConvLoraAdapter({8, 8, {3}}, 1), ConfigError);
  EXPECT_THROW(ConvLoraAdapter({8, 2, {4}}, 1), ConfigError);
  EXPECT_THROW(ConvLoraAdapter({8, 2, {}}, 1), ConfigError);
  EXPECT_THROW(ConvLoraAdapter({8, 2, {3, 3}}, 1), ConfigError);
  EXPECT_THROW(ConvLoraAdapter({8, 0, {3}}, 1), ConfigError);
}

TEST(ConvLora, InitializationStatistics) {
  const ConvLoraAdapter a({64, 8, {3, 5}}, 42);
  auto variance = [](const Tensor& t) {
    double m = 0, v = 0;
    for (double x : t.values()) m += x;
    m /= static_cast<double>(t.size());
    for (double x : t.values()) v += (x - m) * (x - m);
    return v / static_cast<double>(t.size());
  };
  EXPECT_NEAR(variance(a.w_down().value()), 1.0 / 64, 0.2 / 64);
  EXPECT_NEAR(variance(a.fuse().value()), 1.0 / 128, 0.1 / 128);
  EXPECT_NEAR(variance(a.conv_down(5).value()), 1.0 / 200, 0.2 / 200);
  for (double v : a.w_up().value().values()) EXPECT_EQ(v, 0.0);
}

TEST(LowRank, ForwardIsTwoProjections) {
  LowRankAdapter a(6, 2, 1);
  a.w_up().mutable_value() = random_tensor({2, 6}, 3);
  const Tensor x = random_tensor({2, 3, 6}, 4);
  EXPECT_LE(max_abs_diff(a.forward(ad::constant(x)).value(),
                         naive_linear(naive_linear(x, a.w_down().value()), a.w_up().value())),
            1e-14);
  EXPECT_EQ(a.param_count(), 24u);
  EXPECT_THROW(LowRankAdapter(4, 4, 1), ConfigError);
}

}  // namespace
}  // namespace convfuse
