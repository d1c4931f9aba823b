// SPDX-License-Identifier: Apache-2.0

// Grouped dual encoder. Vision and text transformers are split into N groups
// of frozen pre-norm blocks. After each vision group a residual adapter acts on
// the patch tokens; after each text group a plain LoRA residual acts on every
// token and the last token is read out as that level's text feature.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "convfuse/autograd.hpp"
#include "convfuse/conv_lora.hpp"
#include "convfuse/gateway.hpp"
#include "convfuse/params.hpp"

namespace convfuse {

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 64;
  std::size_t heads = 4;
  std::size_t groups = 3;
  std::size_t blocks_per_group = 1;
  std::size_t rank = 8;
  std::vector<std::size_t> branch_kernels{3, 5};
  double temperature = 0.07;
  std::size_t gate_hidden = 32;
  std::size_t text_context = 8;
  std::string prompt_normal = "object flawless";
  std::string prompt_abnormal = "object damaged";
  bool conv_lora = true;       ///< false: plain low-rank vision adapters
  bool dynamic_fusion = true;  ///< false: one-hot layer-wise fusion

  /// Throws ConfigError naming every offending field.
  void validate() const;

  Grid patch_grid() const { return {image_size / patch_size, image_size / patch_size}; }
  Grid pixel_grid() const { return {image_size, image_size}; }
};

/// Word list for the toy text encoder.
const std::vector<std::string>& text_vocabulary();

/// <sot> words... <eot> as vocabulary ids.
std::vector<std::size_t> tokenize_prompt(const std::string& prompt, std::size_t context);

struct TransformerBlock {
  ad::Var wq, wk, wv, wo;  // (C, C)
  ad::Var mlp_in;          // (C, 4C)
  ad::Var mlp_out;         // (4C, C)

  ad::Var forward(const ad::Var& x, std::size_t heads, bool causal) const;
  void collect(ParamList& out, const std::string& prefix) const;
  std::size_t param_count() const;
};

struct VisionOutputs {
  std::vector<ad::Var> levels;  // V_i, (B, P, C), post-adapter patch tokens
  ad::Var cls_final;            // (B, C)
};

struct TextOutputs {
  std::vector<ad::Var> levels;  // T_j, (2, C), row 0 normal

  /// Final-level pair before any gateway fusion.
  const ad::Var& anchor() const { return levels.back(); }
};

struct ModelOutputs {
  VisionOutputs vision;
  TextOutputs text;
  AnomalyMaps maps;
};

class GroupedModel {
 public:
  GroupedModel(ModelConfig config, std::uint64_t seed);

  // Parameters are shared handles; copies would alias weights. Use clone().
  GroupedModel(const GroupedModel&) = delete;
  GroupedModel& operator=(const GroupedModel&) = delete;
  GroupedModel(GroupedModel&&) = default;
  GroupedModel& operator=(GroupedModel&&) = default;

  /// Independent deep copy.
  GroupedModel clone() const;

  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

  /// (B, 1, H, W) image -> (B, 1 + P, C) tokens with the class token first.
  ad::Var patchify(const ad::Var& images) const;
  /// Blocks of one vision group, no adapter.
  ad::Var run_vision_group(std::size_t group, const ad::Var& tokens) const;
  /// Adds the group's adapter update to the patch tokens; class token untouched.
  ad::Var apply_vision_adapter(std::size_t group, const ad::Var& tokens) const;
  VisionOutputs vision_forward(const ad::Var& images) const;

  /// (2, L, C) embedded prompts, normal first.
  ad::Var embed_prompts() const;
  ad::Var run_text_group(std::size_t group, const ad::Var& tokens) const;
  ad::Var apply_text_lora(std::size_t group, const ad::Var& tokens) const;
  /// Pools the last prompt token: (2, L, C) -> (2, C).
  ad::Var pool_text(const ad::Var& tokens) const;
  TextOutputs text_forward() const;

  ModelOutputs forward(const ad::Var& images) const;

  const FusionGateway& gateway() const { return gateway_; }
  FusionGateway& gateway() { return gateway_; }
  const VisionAdapter& vision_adapter(std::size_t group) const { return vision_adapters_.at(group); }
  VisionAdapter& vision_adapter(std::size_t group) { return vision_adapters_.at(group); }
  const LowRankAdapter& text_lora(std::size_t group) const { return text_loras_.at(group); }
  LowRankAdapter& text_lora(std::size_t group) { return text_loras_.at(group); }
  const std::vector<TransformerBlock>& vision_blocks() const { return vision_blocks_; }
  const std::vector<TransformerBlock>& text_blocks() const { return text_blocks_; }

  /// Every weight with its hierarchical name, in a fixed order.
  ParamList parameters() const;
  ParamList trainable_parameters() const;

 private:
  ModelConfig config_;
  std::uint64_t seed_;
  ad::Var patch_embed_;   // (p*p, C)
  ad::Var class_token_;   // (C)
  std::vector<TransformerBlock> vision_blocks_;
  std::vector<VisionAdapter> vision_adapters_;
  ad::Var token_embed_;   // (vocab, C)
  ad::Var pos_embed_;     // (context, C)
  std::vector<TransformerBlock> text_blocks_;
  std::vector<LowRankAdapter> text_loras_;
  std::vector<std::vector<std::size_t>> prompt_ids_;  // by SemanticState
  FusionGateway gateway_;
};

GroupedModel build_model(const ModelConfig& config, std::uint64_t seed);

}  // namespace convfuse
