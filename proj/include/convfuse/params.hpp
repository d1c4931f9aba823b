// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "convfuse/autograd.hpp"

namespace convfuse {

/// A model weight with its hierarchical name. `var` shares storage with the
/// owning module, so edits through it are visible to the model.
struct NamedParam {
  std::string name;
  ad::Var var;

  bool trainable() const { return var.requires_grad(); }
};

using ParamList = std::vector<NamedParam>;

inline ad::Var make_param(Tensor value, bool trainable) { return ad::Var(std::move(value), trainable); }

std::size_t count_scalars(const ParamList& params, bool trainable_only);

}  // namespace convfuse
