// SPDX-License-Identifier: Apache-2.0

#include "convfuse/params.hpp"

namespace convfuse {

std::size_t count_scalars(const ParamList& params, bool trainable_only) {
  std::size_t n = 0;
  for (const auto& p : params)
    if (!trainable_only || p.trainable()) n += p.var.value().size();
  return n;
}

}  // namespace convfuse
