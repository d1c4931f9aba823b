// SPDX-License-Identifier: Apache-2.0

#include "convfuse/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "convfuse/error.hpp"

namespace convfuse {

namespace {

std::vector<std::size_t> descending_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

void check_sizes(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw MetricError("scores and labels differ in length");
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
  check_sizes(scores, labels);
  std::int64_t pos = 0, neg = 0;
  for (int l : labels) (l ? pos : neg)++;
  if (pos == 0 || neg == 0) throw MetricError("AUROC undefined: need both positive and negative labels");

  // Walk tie groups from the highest score down. Each positive beats every
  // negative in later groups and ties the negatives in its own group.
  const auto order = descending_order(scores);
  std::int64_t twice_wins = 0;  // 2 * (wins) + ties, kept integral
  std::int64_t neg_remaining = neg;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    std::int64_t gp = 0, gn = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? gp : gn)++;
      ++j;
    }
    neg_remaining -= gn;
    twice_wins += gp * (2 * neg_remaining + gn);
    i = j;
  }
  return static_cast<double>(twice_wins) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

double average_precision(std::span<const double> scores, std::span<const int> labels) {
  check_sizes(scores, labels);
  std::int64_t pos = 0;
  for (int l : labels) pos += l ? 1 : 0;
  if (pos == 0) throw MetricError("average precision undefined: no positive labels");

  const auto order = descending_order(scores);
  std::int64_t tp = 0, fp = 0, tp_prev = 0;
  double ap = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? tp : fp)++;
      ++j;
    }
    if (tp != tp_prev) {
      const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
      const double delta_recall = static_cast<double>(tp - tp_prev) / static_cast<double>(pos);
      ap += precision * delta_recall;
      tp_prev = tp;
    }
    i = j;
  }
  return ap;
}

double sign_test_p_value(std::size_t wins, std::size_t trials) {
  if (wins > trials) throw MetricError("sign test: more wins than trials");
  // Binomial coefficients by the multiplicative recurrence; exact in double
  // for the trial counts used here.
  double coeff = 1.0, tail = 0.0;
  for (std::size_t k = 0; k <= trials; ++k) {
    if (k >= wins) tail += coeff;
    coeff = coeff * static_cast<double>(trials - k) / static_cast<double>(k + 1);
  }
  return std::ldexp(tail, -static_cast<int>(trials));
}

}  // namespace convfuse
