// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace convfuse {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a training step produces a non-finite loss. Carries the step
/// index and, when raised by the trainer, a serialized checkpoint of the
/// parameters at the failing step.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, long step = -1, std::string snapshot = {})
      : std::runtime_error(what), step_(step), snapshot_(std::move(snapshot)) {}
  long step() const noexcept { return step_; }
  const std::string& snapshot() const noexcept { return snapshot_; }

 private:
  long step_;
  std::string snapshot_;
};

class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace convfuse
