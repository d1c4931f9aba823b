// SPDX-License-Identifier: Apache-2.0

#include "convfuse/optimizer.hpp"

#include <cmath>

namespace convfuse {

Adam::Adam(ParamList params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.emplace_back(p.var.shape(), 0.0);
    v_.emplace_back(p.var.shape(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

void Adam::step() {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ad::Var& var = params_[i].var;
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    const bool has = var.has_grad();
    Tensor& w = var.mutable_value();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double g = has ? var.grad()[j] : 0.0;
      m[j] = b1 * m[j] + (1.0 - b1) * g;
      v[j] = b2 * v[j] + (1.0 - b2) * g * g;
      w[j] -= config_.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.epsilon);
    }
  }
}

}  // namespace convfuse
