// SPDX-License-Identifier: Apache-2.0

// Vision-conditioned fusion of multi-level text features into per-level
// anomaly maps.
//
// For visual level i and state s:
//   logits   = Gate_s(GAP(V_i))                      (B, N)
//   w        = softmax(logits)
//   T_i^s    = sum_j w_j T_j^s
//   M_i      = softmax_tau(cos(V_i, T_i^N), cos(V_i, T_i^A))[abnormal]
// and the aggregated map is the plain mean over levels.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "convfuse/autograd.hpp"
#include "convfuse/params.hpp"

namespace convfuse {

enum class SemanticState : std::size_t { Normal = 0, Abnormal = 1 };
inline constexpr std::array<SemanticState, 2> kSemanticStates{SemanticState::Normal, SemanticState::Abnormal};
inline constexpr std::size_t index_of(SemanticState s) { return static_cast<std::size_t>(s); }
const char* state_name(SemanticState s);

enum class FusionMode {
  Dynamic,  ///< gate-driven weights
  Static,   ///< visual level i reads text level i only
};

// ---- plain-value forms ----------------------------------------------------------

/// Softmax over one level's gate logits.
std::vector<double> fusion_weights(std::span<const double> logits);

/// sum_j weights[j] * features[j]; features is (N, C).
std::vector<double> fuse_text(std::span<const double> weights, const Tensor& features);

/// Per-token abnormal probability for V (B, L, C) against one descriptor pair.
/// Returns (B, L).
Tensor level_anomaly_map(const Tensor& visual, std::span<const double> text_normal,
                         std::span<const double> text_abnormal, double temperature);

// ---- differentiable forms -------------------------------------------------------

/// exp(a/tau) / (exp(n/tau) + exp(a/tau)), elementwise.
ad::Var anomaly_probability(const ad::Var& sim_normal, const ad::Var& sim_abnormal, double temperature);

/// visual (B, L, C), descriptors (B, C) -> (B, L).
ad::Var level_anomaly_map(const ad::Var& visual, const ad::Var& text_normal, const ad::Var& text_abnormal,
                          double temperature, std::size_t* zero_norm_events = nullptr);

/// Two-layer perceptron C -> hidden -> N with tanh in between.
class GatingMlp {
 public:
  GatingMlp(std::size_t channels, std::size_t hidden, std::size_t levels, std::uint64_t seed);

  ad::Var logits(const ad::Var& v_global) const;
  void collect(ParamList& out, const std::string& prefix) const;

  ad::Var& w1() { return w1_; }
  ad::Var& w2() { return w2_; }
  const ad::Var& w1() const { return w1_; }
  const ad::Var& w2() const { return w2_; }

 private:
  ad::Var w1_;  // (C, hidden)
  ad::Var w2_;  // (hidden, N), zero at init
};

struct AnomalyMaps {
  std::vector<ad::Var> per_level;                  // (B, H, W) each
  ad::Var aggregated;                              // (B, H, W)
  ad::Var upsampled;                               // (B, Hpx, Wpx)
  std::vector<std::array<ad::Var, 2>> weights;     // [level][state] -> (B, N)
  std::size_t zero_norm_events = 0;
};

/// Fusion weights for every level and state: [level][state] -> (B, N).
using LevelWeights = std::vector<std::array<ad::Var, 2>>;

class FusionGateway {
 public:
  FusionGateway(std::size_t channels, std::size_t levels, std::size_t hidden, double temperature,
                FusionMode mode, std::uint64_t seed);

  std::size_t levels() const { return levels_; }
  double temperature() const { return temperature_; }
  FusionMode mode() const { return mode_; }
  /// Gate weights are trainable only in dynamic mode.
  void set_mode(FusionMode mode);

  /// visual: N tensors (B, H*W, C). text: N tensors (2, C), row 0 normal.
  AnomalyMaps forward(const std::vector<ad::Var>& visual, const std::vector<ad::Var>& text, Grid grid,
                      Grid pixels) const;

  /// Same pipeline with caller-supplied fusion weights.
  AnomalyMaps forward_with_weights(const std::vector<ad::Var>& visual, const std::vector<ad::Var>& text,
                                   const LevelWeights& weights, Grid grid, Grid pixels) const;

  LevelWeights dynamic_weights(const std::vector<ad::Var>& visual) const;
  LevelWeights static_weights(std::size_t batch) const;

  GatingMlp& gate(SemanticState s) { return gates_[index_of(s)]; }
  const GatingMlp& gate(SemanticState s) const { return gates_[index_of(s)]; }

  std::size_t param_count() const;
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  std::size_t levels_;
  double temperature_;
  FusionMode mode_;
  std::vector<GatingMlp> gates_;  // indexed by SemanticState
};

/// Mean Shannon entropy (nats) of the (B, N) weight rows.
double mean_entropy(const Tensor& weights);

}  // namespace convfuse
