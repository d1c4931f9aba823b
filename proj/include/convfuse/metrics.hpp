// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>

namespace convfuse {

/// Mann-Whitney AUROC: P(pos > neg) + 0.5 P(tie), exact for tied scores.
/// Throws MetricError unless both classes are present.
double auroc(std::span<const double> scores, std::span<const int> labels);

/// Precision-weighted recall increments over a descending-score sweep with
/// tied scores handled as one threshold. Throws MetricError without positives.
double average_precision(std::span<const double> scores, std::span<const int> labels);

/// One-sided exact sign test: P(X >= wins) for X ~ Binomial(trials, 1/2).
double sign_test_p_value(std::size_t wins, std::size_t trials);

}  // namespace convfuse
