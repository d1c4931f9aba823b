// SPDX-License-Identifier: Apache-2.0

// Low-rank residual adapters for token sequences.
//
// ConvLoraAdapter runs parallel k x k convolution branches inside a shared
// low-rank bottleneck:
//
//   h        = X W_down                        (B, L, r)
//   conv_k   = (1/k) ConvDown_k(R2d(h))        (B, r, H, W)
//   branch_k = R_seq((1/k) ConvUp_k(conv_k)) W_up
//   dX       = R_seq(Conv1x1(R2d(Concat_k branch_k)))
//
// W_up starts at zero so the adapter contributes nothing until trained.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "convfuse/autograd.hpp"
#include "convfuse/params.hpp"

namespace convfuse {

struct ConvLoraConfig {
  std::size_t channels = 64;
  std::size_t rank = 8;
  std::vector<std::size_t> branch_kernels{3, 5};

  void validate() const;
};

class ConvLoraAdapter {
 public:
  ConvLoraAdapter(ConvLoraConfig config, std::uint64_t seed);

  const ConvLoraConfig& config() const { return config_; }

  /// Output of the branch with kernel size k, shape (B, L, C).
  ad::Var branch_forward(const ad::Var& x_in, std::size_t k, Grid grid) const;

  /// Residual update dX, same shape as x_in. The caller adds it to x_in.
  ad::Var forward(const ad::Var& x_in, Grid grid) const;

  std::size_t param_count() const;
  void collect(ParamList& out, const std::string& prefix) const;

  ad::Var& w_down() { return w_down_; }
  ad::Var& w_up() { return w_up_; }
  ad::Var& conv_down(std::size_t k);
  ad::Var& conv_up(std::size_t k);
  ad::Var& fuse() { return fuse_; }
  const ad::Var& w_down() const { return w_down_; }
  const ad::Var& w_up() const { return w_up_; }
  const ad::Var& conv_down(std::size_t k) const;
  const ad::Var& conv_up(std::size_t k) const;
  const ad::Var& fuse() const { return fuse_; }

 private:
  struct Branch {
    std::size_t kernel;
    ad::Var conv_down;  // (r, r, k, k)
    ad::Var conv_up;    // (r, r, k, k)
  };

  const Branch& branch(std::size_t k) const;
  ad::Var branch_from_projection(const ad::Var& projected, const Branch& b, Grid grid) const;

  ConvLoraConfig config_;
  ad::Var w_down_;  // (C, r)
  ad::Var w_up_;    // (r, C)
  std::vector<Branch> branches_;
  ad::Var fuse_;    // (C, |branches| * C, 1, 1)
};

/// Plain LoRA: dX = X W_down W_up with W_up zero-initialised.
class LowRankAdapter {
 public:
  LowRankAdapter(std::size_t channels, std::size_t rank, std::uint64_t seed);

  ad::Var forward(const ad::Var& x_in, Grid grid = {}) const;

  std::size_t param_count() const;
  void collect(ParamList& out, const std::string& prefix) const;

  ad::Var& w_down() { return w_down_; }
  ad::Var& w_up() { return w_up_; }
  const ad::Var& w_down() const { return w_down_; }
  const ad::Var& w_up() const { return w_up_; }

 private:
  ad::Var w_down_;
  ad::Var w_up_;
};

using VisionAdapter = std::variant<ConvLoraAdapter, LowRankAdapter>;

ad::Var adapter_forward(const VisionAdapter& adapter, const ad::Var& x_in, Grid grid);
std::size_t adapter_param_count(const VisionAdapter& adapter);
void collect_adapter(const VisionAdapter& adapter, ParamList& out, const std::string& prefix);

}  // namespace convfuse
