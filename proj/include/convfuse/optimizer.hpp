// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "convfuse/params.hpp"

namespace convfuse {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam over a fixed parameter list. Parameters without a
/// gradient in a step are left untouched but their moments still decay.
class Adam {
 public:
  Adam(ParamList params, AdamConfig config);

  void zero_grad();
  void step();

  std::size_t steps_taken() const { return t_; }
  const ParamList& params() const { return params_; }

 private:
  ParamList params_;
  AdamConfig config_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace convfuse
