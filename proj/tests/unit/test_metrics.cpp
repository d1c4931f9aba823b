// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>
#include <vector>

#include "convfuse/error.hpp"
#include "convfuse/metrics.hpp"
#include "oracles.hpp"

namespace convfuse {
namespace {

using testing::brute_ap;
using testing::brute_auroc;

struct Instance {
  std::vector<double> scores;
  std::vector<int> labels;
};

Instance random_instance(std::mt19937_64& rng) {
  const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 200)(rng);
  const int levels = std::uniform_int_distribution<int>(2, 12)(rng);  // few levels force ties
  Instance in;
  for (std::size_t i = 0; i < n; ++i) {
    in.scores.push_back(std::uniform_int_distribution<int>(0, levels)(rng) / static_cast<double>(levels));
    in.labels.push_back(std::bernoulli_distribution(0.3)(rng) ? 1 : 0);
  }
  in.labels[0] = 1;
  in.labels[1] = 0;
  return in;
}

TEST(Auroc, HandCase) {
  EXPECT_DOUBLE_EQ(auroc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1}), 0.75);
}

TEST(Auroc, SeparatedAndAllTied) {
  EXPECT_EQ(auroc(std::vector<double>{0.1, 0.2, 0.9, 0.95}, std::vector<int>{0, 0, 1, 1}), 1.0);
  EXPECT_EQ(auroc(std::vector<double>{0.1, 0.2, 0.9, 0.95}, std::vector<int>{1, 1, 0, 0}), 0.0);
  EXPECT_EQ(auroc(std::vector<double>(7, 0.3), std::vector<int>{0, 1, 0, 1, 1, 0, 0}), 0.5);
}

TEST(Auroc, EqualsBruteForceOnRandomInstancesWithTies) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const Instance in = random_instance(rng);
    EXPECT_EQ(auroc(in.scores, in.labels), brute_auroc(in.scores, in.labels)) << "trial " << trial;
  }
}

TEST(Auroc, InvariantToMonotoneTransforms) {
  std::mt19937_64 rng(12);
  const Instance in = random_instance(rng);
  std::vector<double> cubed;
  for (double s : in.scores) cubed.push_back(s * s * s + 4.0);
  EXPECT_EQ(auroc(in.scores, in.labels), auroc(cubed, in.labels));
}

TEST(Auroc, SingleClassIsUndefined) {
  EXPECT_THROW(auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), MetricError);
  EXPECT_THROW(auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{0, 0}), MetricError);
  EXPECT_THROW(auroc(std::vector<double>{0.1}, std::vector<int>{0, 1}), MetricError);
}

TEST(AveragePrecision, ClosedForms) {
  EXPECT_EQ(average_precision(std::vector<double>{0.9, 0.8, 0.1, 0.2}, std::vector<int>{1, 1, 0, 0}), 1.0);
  for (std::size_t n : {2u, 5u, 17u}) {
    std::vector<double> s;
    std::vector<int> y(n, 0);
    for (std::size_t i = 0; i < n; ++i) s.push_back(1.0 - static_cast<double>(i) / n);
    y.back() = 1;
    EXPECT_DOUBLE_EQ(average_precision(s, y), 1.0 / static_cast<double>(n));
  }
}

TEST(AveragePrecision, HandCaseMatchesSweep) {
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  const std::vector<int> y{0, 0, 1, 1};
  // Sweep: 0.8 -> P 1 R .5; 0.4 -> P .5 R .5; 0.35 -> P 2/3 R 1.
  EXPECT_DOUBLE_EQ(average_precision(s, y), 0.5 + 0.5 * 2.0 / 3.0);
  EXPECT_EQ(average_precision(s, y), brute_ap(s, y));
}

TEST(AveragePrecision, TiedBlockCountsAsOneThreshold) {
  // All tied: one threshold, precision = prevalence.
  EXPECT_DOUBLE_EQ(average_precision(std::vector<double>(4, 0.5), std::vector<int>{1, 0, 0, 0}), 0.25);
}

TEST(AveragePrecision, EqualsSweepOnRandomInstancesWithTies) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 300; ++trial) {
    const Instance in = random_instance(rng);
    EXPECT_EQ(average_precision(in.scores, in.labels), brute_ap(in.scores, in.labels)) << "trial " << trial;
  }
}

TEST(AveragePrecision, NoPositivesIsUndefined) {
  EXPECT_THROW(average_precision(std::vector<double>{0.1, 0.2}, std::vector<int>{0, 0}), MetricError);
}

TEST(SignTest, ExactBinomialTail) {
  EXPECT_DOUBLE_EQ(sign_test_p_value(5, 5), 1.0 / 32.0);
  EXPECT_DOUBLE_EQ(sign_test_p_value(4, 5), 6.0 / 32.0);
  EXPECT_DOUBLE_EQ(sign_test_p_value(0, 5), 1.0);
  EXPECT_DOUBLE_EQ(sign_test_p_value(7, 8), 9.0 / 256.0);
}

}  // namespace
}  // namespace convfuse
