// SPDX-License-Identifier: Apache-2.0

// Central-difference verification of the full-model loss gradient.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "convfuse/backbone.hpp"
#include "convfuse/config.hpp"
#include "convfuse/data.hpp"
#include "convfuse/losses.hpp"

namespace convfuse {

struct GradCheckOptions {
  double step = 1e-5;
  double rel_tol = 1e-4;
  double min_abs_grad = 1e-8;  ///< smaller analytic gradients are not compared
  std::size_t stride = 1;      ///< check every stride-th scalar of each tensor
};

struct GradCheckEntry {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::size_t trainable = 0;  ///< trainable scalars in the model
  std::size_t checked = 0;
  std::size_t below_threshold = 0;
  std::size_t refined = 0;  ///< entries re-evaluated in extended precision
  std::size_t failures = 0;
  double max_rel_error = 0.0;
  GradCheckEntry worst;
  std::vector<GradCheckEntry> failed;  ///< first few failures

  bool passed() const { return failures == 0 && checked > 0; }
};

/// Moves every trainable parameter away from its initialization by Gaussian
/// noise so zero-initialized factors (adapter up-projections, gate outputs)
/// no longer hide gradient paths.
void perturb_trainables(GroupedModel& model, double stddev, std::uint64_t seed);

/// Compares backward() against (L(w+h) - L(w-h)) / 2h for each trainable
/// scalar. Forward passes re-run only the stages downstream of the perturbed
/// parameter, reusing cached upstream activations.
GradCheckReport gradcheck_model(const GroupedModel& model, const std::vector<const Sample*>& batch,
                                const LossConfig& loss, const GradCheckOptions& options = {});

/// The reference check: default configuration, model seed 1, trainables
/// perturbed with stddev 0.2, one anomalous training image.
GradCheckReport gradcheck_default_model(const GradCheckOptions& options = {});

}  // namespace convfuse
