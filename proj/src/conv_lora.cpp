// SPDX-License-Identifier: Apache-2.0

#include "convfuse/conv_lora.hpp"

#include <algorithm>
#include <set>

#include "convfuse/error.hpp"
#include "convfuse/random.hpp"

namespace convfuse {

void ConvLoraConfig::validate() const {
  std::vector<std::string> bad;
  if (rank == 0) bad.push_back("rank must be positive");
  if (rank >= channels) bad.push_back("rank must be below channels");
  if (branch_kernels.empty()) bad.push_back("branch_kernels must not be empty");
  std::set<std::size_t> seen;
  for (std::size_t k : branch_kernels) {
    if (k % 2 == 0) bad.push_back("branch kernel " + std::to_string(k) + " is not odd");
    if (!seen.insert(k).second) bad.push_back("branch kernel " + std::to_string(k) + " repeated");
  }
  if (!bad.empty()) {
    std::string msg = "invalid Conv-LoRA configuration:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw ConfigError(msg);
  }
}

ConvLoraAdapter::ConvLoraAdapter(ConvLoraConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  const std::size_t c = config_.channels, r = config_.rank;
  Rng rng(seed);
  w_down_ = make_param(gaussian({c, r}, 1.0 / static_cast<double>(c), rng), true);
  w_up_ = make_param(Tensor({r, c}), true);
  for (std::size_t k : config_.branch_kernels) {
    const double var = 1.0 / static_cast<double>(r * k * k);
    Branch b{k, make_param(gaussian({r, r, k, k}, var, rng), true),
             make_param(gaussian({r, r, k, k}, var, rng), true)};
    branches_.push_back(std::move(b));
  }
  const std::size_t fan_in = branches_.size() * c;
  fuse_ = make_param(gaussian({c, fan_in, 1, 1}, 1.0 / static_cast<double>(fan_in), rng), true);
}

const ConvLoraAdapter::Branch& ConvLoraAdapter::branch(std::size_t k) const {
  auto it = std::find_if(branches_.begin(), branches_.end(), [k](const Branch& b) { return b.kernel == k; });
  if (it == branches_.end()) throw ConfigError("no Conv-LoRA branch with kernel " + std::to_string(k));
  return *it;
}

ad::Var& ConvLoraAdapter::conv_down(std::size_t k) { return const_cast<Branch&>(branch(k)).conv_down; }
ad::Var& ConvLoraAdapter::conv_up(std::size_t k) { return const_cast<Branch&>(branch(k)).conv_up; }
const ad::Var& ConvLoraAdapter::conv_down(std::size_t k) const { return branch(k).conv_down; }
const ad::Var& ConvLoraAdapter::conv_up(std::size_t k) const { return branch(k).conv_up; }

ad::Var ConvLoraAdapter::branch_from_projection(const ad::Var& projected, const Branch& b, Grid grid) const {
  const double inv_k = 1.0 / static_cast<double>(b.kernel);
  ad::Var spatial = ad::seq_to_2d(projected, grid);
  ad::Var conv = ad::scale(ad::conv2d_same(spatial, b.conv_down), inv_k);
  ad::Var refined = ad::scale(ad::conv2d_same(conv, b.conv_up), inv_k);
  return ad::linear(ad::seq_from_2d(refined), w_up_);
}

ad::Var ConvLoraAdapter::branch_forward(const ad::Var& x_in, std::size_t k, Grid grid) const {
  const Branch& b = branch(k);
  return branch_from_projection(ad::linear(x_in, w_down_), b, grid);
}

ad::Var ConvLoraAdapter::forward(const ad::Var& x_in, Grid grid) const {
  const ad::Var projected = ad::linear(x_in, w_down_);
  std::vector<ad::Var> outs;
  outs.reserve(branches_.size());
  for (const Branch& b : branches_) outs.push_back(ad::seq_to_2d(branch_from_projection(projected, b, grid), grid));
  return ad::seq_from_2d(ad::conv2d_same(ad::concat_channels(outs), fuse_));
}

std::size_t ConvLoraAdapter::param_count() const {
  std::size_t n = w_down_.value().size() + w_up_.value().size() + fuse_.value().size();
  for (const Branch& b : branches_) n += b.conv_down.value().size() + b.conv_up.value().size();
  return n;
}

void ConvLoraAdapter::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + "w_down", w_down_});
  out.push_back({prefix + "w_up", w_up_});
  for (const Branch& b : branches_) {
    out.push_back({prefix + "conv_down_k" + std::to_string(b.kernel), b.conv_down});
    out.push_back({prefix + "conv_up_k" + std::to_string(b.kernel), b.conv_up});
  }
  out.push_back({prefix + "fuse", fuse_});
}

LowRankAdapter::LowRankAdapter(std::size_t channels, std::size_t rank, std::uint64_t seed) {
  if (rank == 0 || rank >= channels) throw ConfigError("low-rank adapter: rank must be in [1, channels)");
  Rng rng(seed);
  w_down_ = make_param(gaussian({channels, rank}, 1.0 / static_cast<double>(channels), rng), true);
  w_up_ = make_param(Tensor({rank, channels}), true);
}

ad::Var LowRankAdapter::forward(const ad::Var& x_in, Grid) const {
  return ad::linear(ad::linear(x_in, w_down_), w_up_);
}

std::size_t LowRankAdapter::param_count() const { return w_down_.value().size() + w_up_.value().size(); }

void LowRankAdapter::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + "w_down", w_down_});
  out.push_back({prefix + "w_up", w_up_});
}

ad::Var adapter_forward(const VisionAdapter& adapter, const ad::Var& x_in, Grid grid) {
  return std::visit([&](const auto& a) { return a.forward(x_in, grid); }, adapter);
}

std::size_t adapter_param_count(const VisionAdapter& adapter) {
  return std::visit([](const auto& a) { return a.param_count(); }, adapter);
}

void collect_adapter(const VisionAdapter& adapter, ParamList& out, const std::string& prefix) {
  std::visit([&](const auto& a) { a.collect(out, prefix); }, adapter);
}

}  // namespace convfuse
