// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace convfuse {

struct SelfTestResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SelfTestOptions {
  std::size_t gradcheck_stride = 1;  ///< 1 checks every trainable scalar
  std::size_t metric_instances = 200;
  std::uint64_t seed = 2024;
};

/// Gradient check of the default model plus reference comparisons for the
/// kernels and metrics. Each check is reported; none throws.
std::vector<SelfTestResult> run_selftest(const SelfTestOptions& options = {});

}  // namespace convfuse
