// SPDX-License-Identifier: Apache-2.0

// Training objective: focal + dice on the aggregated map, two-way
// cross-entropy of the final class token against the unfused last-level text
// pair, and the inference-time image score.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "convfuse/autograd.hpp"

namespace convfuse {

inline constexpr double kProbabilityClamp = 1e-7;

struct LossConfig {
  double focal_weight = 1.0;
  double dice_weight = 1.0;
  double cls_weight = 1.0;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double dice_smooth = 1.0;

  void validate() const;
};

// ---- plain-value forms ----------------------------------------------------------

/// Mean over pixels of the binary focal loss; predictions are clamped to
/// [1e-7, 1 - 1e-7] before taking logs.
double focal_loss(std::span<const double> pred, std::span<const double> target, double gamma, double alpha);

/// 1 - (2 sum p t + s) / (sum p + sum t + s) over one map.
double dice_loss(std::span<const double> pred, std::span<const double> target, double smooth);

/// Focal over all pixels plus the per-image dice averaged over the batch.
/// pred and target are (B, H, W).
double seg_loss(const Tensor& pred, const Tensor& target, const LossConfig& cfg);

/// Cross-entropy of softmax_tau(cos(v, T^N), cos(v, T^A)) against labels.
/// v_cls is (B, C), anchor is (2, C) with row 0 normal.
double cls_loss(const Tensor& v_cls, const Tensor& anchor, double temperature, std::span<const int> labels);

double total_loss(double seg, double cls, const LossConfig& cfg);

/// 0.5 * (P_abnormal + max map value).
double image_score(double p_abnormal, double map_max);

// ---- differentiable forms -------------------------------------------------------

ad::Var focal_loss(const ad::Var& pred, const Tensor& target, double gamma, double alpha);
/// Per-image dice over (B, H, W), averaged over B.
ad::Var dice_loss(const ad::Var& pred, const Tensor& target, double smooth);
ad::Var seg_loss(const ad::Var& pred, const Tensor& target, const LossConfig& cfg);

/// (B, 1) probability of the abnormal state for each class token. The
/// optional outputs receive the two (B, 1) cosine similarities.
ad::Var abnormal_probability(const ad::Var& v_cls, const ad::Var& anchor, double temperature,
                             ad::Var* sim_normal = nullptr, ad::Var* sim_abnormal = nullptr);

struct ClassifierOutput {
  ad::Var loss;           // scalar
  ad::Var p_abnormal;     // (B, 1)
};
ClassifierOutput cls_loss(const ad::Var& v_cls, const ad::Var& anchor, double temperature,
                          std::span<const int> labels);

/// L_seg + cls_weight * L_cls. Throws TrainingError on a non-finite input.
ad::Var total_loss(const ad::Var& seg, const ad::Var& cls, const LossConfig& cfg);

}  // namespace convfuse
