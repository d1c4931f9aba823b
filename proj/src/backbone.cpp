// SPDX-License-Identifier: Apache-2.0

#include "convfuse/backbone.hpp"

#include <algorithm>
#include <sstream>

#include "convfuse/error.hpp"
#include "convfuse/random.hpp"

namespace convfuse {

namespace {

TransformerBlock make_block(std::size_t channels, std::size_t total_blocks, Rng& rng) {
  const double c = static_cast<double>(channels);
  // Residual-branch outputs are shrunk with depth so patch content survives
  // the frozen stack.
  const double out_var = 1.0 / (c * 2.0 * static_cast<double>(total_blocks));
  TransformerBlock b;
  b.wq = make_param(gaussian({channels, channels}, 1.0 / c, rng), false);
  b.wk = make_param(gaussian({channels, channels}, 1.0 / c, rng), false);
  b.wv = make_param(gaussian({channels, channels}, 1.0 / c, rng), false);
  b.wo = make_param(gaussian({channels, channels}, out_var, rng), false);
  b.mlp_in = make_param(gaussian({channels, 4 * channels}, 1.0 / c, rng), false);
  b.mlp_out = make_param(gaussian({4 * channels, channels}, out_var, rng), false);
  return b;
}

std::string group_prefix(const char* tower, std::size_t group) {
  return std::string(tower) + "." + std::to_string(group) + ".";
}

}  // namespace

void ModelConfig::validate() const {
  std::vector<std::string> bad;
  if (groups == 0) bad.emplace_back("groups must be >= 1");
  if (blocks_per_group == 0) bad.emplace_back("blocks_per_group must be >= 1");
  if (heads == 0 || channels % heads != 0) bad.emplace_back("channels must be divisible by heads");
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
    bad.emplace_back("image_size must be a positive multiple of patch_size");
  if (rank == 0 || rank >= channels) bad.emplace_back("rank must be in [1, channels)");
  if (branch_kernels.empty()) bad.emplace_back("branch_kernels must not be empty");
  for (std::size_t k : branch_kernels)
    if (k % 2 == 0) bad.emplace_back("branch_kernels entries must be odd");
  if (!(temperature > 0.0)) bad.emplace_back("temperature must be positive");
  if (gate_hidden == 0) bad.emplace_back("gate_hidden must be >= 1");
  try {
    const auto n = tokenize_prompt(prompt_normal, text_context);
    const auto a = tokenize_prompt(prompt_abnormal, text_context);
    if (n.size() != a.size()) bad.emplace_back("prompt_normal and prompt_abnormal must have equal token counts");
  } catch (const ConfigError& e) {
    bad.emplace_back(e.what());
  }
  if (!bad.empty()) {
    std::string msg = "invalid model configuration:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw ConfigError(msg);
  }
}

const std::vector<std::string>& text_vocabulary() {
  static const std::vector<std::string> vocab{"<sot>",   "<eot>", "object", "flawless", "damaged",
                                              "normal",  "defect", "good",  "broken",   "surface"};
  return vocab;
}

std::vector<std::size_t> tokenize_prompt(const std::string& prompt, std::size_t context) {
  const auto& vocab = text_vocabulary();
  auto id_of = [&](const std::string& w) -> std::size_t {
    auto it = std::find(vocab.begin(), vocab.end(), w);
    if (it == vocab.end()) throw ConfigError("prompt word '" + w + "' not in vocabulary");
    return static_cast<std::size_t>(it - vocab.begin());
  };
  std::vector<std::size_t> ids{id_of("<sot>")};
  std::istringstream words(prompt);
  for (std::string w; words >> w;) ids.push_back(id_of(w));
  ids.push_back(id_of("<eot>"));
  if (ids.size() > context)
    throw ConfigError("prompt '" + prompt + "' needs " + std::to_string(ids.size()) +
                      " positions, text context holds " + std::to_string(context));
  return ids;
}

ad::Var TransformerBlock::forward(const ad::Var& x, std::size_t heads, bool causal) const {
  ad::Var h = ad::add(x, ad::attention(ad::layer_norm(x), wq, wk, wv, wo, heads, causal));
  return ad::add(h, ad::linear(ad::gelu(ad::linear(ad::layer_norm(h), mlp_in)), mlp_out));
}

void TransformerBlock::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + "wq", wq});
  out.push_back({prefix + "wk", wk});
  out.push_back({prefix + "wv", wv});
  out.push_back({prefix + "wo", wo});
  out.push_back({prefix + "mlp_in", mlp_in});
  out.push_back({prefix + "mlp_out", mlp_out});
}

std::size_t TransformerBlock::param_count() const {
  return wq.value().size() + wk.value().size() + wv.value().size() + wo.value().size() +
         mlp_in.value().size() + mlp_out.value().size();
}

GroupedModel::GroupedModel(ModelConfig config, std::uint64_t seed)
    : config_((config.validate(), std::move(config))),
      seed_(seed),
      gateway_(config_.channels, config_.groups, config_.gate_hidden, config_.temperature,
               config_.dynamic_fusion ? FusionMode::Dynamic : FusionMode::Static, derive_seed(seed, "gateway")) {
  const std::size_t c = config_.channels, p = config_.patch_size;
  const std::size_t depth = config_.groups * config_.blocks_per_group;

  Rng vision_rng(derive_seed(seed, "vision.backbone"));
  patch_embed_ = make_param(gaussian({p * p, c}, 1.0 / static_cast<double>(p * p), vision_rng), false);
  class_token_ = make_param(gaussian({c}, 1.0, vision_rng), false);
  for (std::size_t i = 0; i < depth; ++i) vision_blocks_.push_back(make_block(c, depth, vision_rng));

  Rng text_rng(derive_seed(seed, "text.backbone"));
  token_embed_ = make_param(gaussian({text_vocabulary().size(), c}, 1.0, text_rng), false);
  pos_embed_ = make_param(gaussian({config_.text_context, c}, 0.01, text_rng), false);
  for (std::size_t i = 0; i < depth; ++i) text_blocks_.push_back(make_block(c, depth, text_rng));

  for (std::size_t g = 0; g < config_.groups; ++g) {
    const std::uint64_t s = derive_seed(seed, "vision.adapter." + std::to_string(g));
    if (config_.conv_lora)
      vision_adapters_.emplace_back(ConvLoraAdapter(ConvLoraConfig{c, config_.rank, config_.branch_kernels}, s));
    else
      vision_adapters_.emplace_back(LowRankAdapter(c, config_.rank, s));
    text_loras_.emplace_back(c, config_.rank, derive_seed(seed, "text.lora." + std::to_string(g)));
  }
  prompt_ids_.push_back(tokenize_prompt(config_.prompt_normal, config_.text_context));
  prompt_ids_.push_back(tokenize_prompt(config_.prompt_abnormal, config_.text_context));
}

ad::Var GroupedModel::patchify(const ad::Var& images) const {
  const Tensor& img = images.value();
  if (img.rank() != 4 || img.dim(1) != 1) throw ShapeError("patchify: expected (B, 1, H, W) images");
  const std::size_t b = img.dim(0), h = img.dim(2), w = img.dim(3), p = config_.patch_size;
  if (h % p != 0 || w % p != 0)
    throw ShapeError("patchify: image " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by patch size " + std::to_string(p));
  const std::size_t gh = h / p, gw = w / p;
  Tensor patches({b, gh * gw, p * p});
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t py = 0; py < gh; ++py)
      for (std::size_t px = 0; px < gw; ++px)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            patches.at(bi, py * gw + px, dy * p + dx) = img.at(bi, 0, py * p + dy, px * p + dx);
  return ad::prepend_token(ad::linear(ad::constant(std::move(patches)), patch_embed_), class_token_);
}

ad::Var GroupedModel::run_vision_group(std::size_t group, const ad::Var& tokens) const {
  ad::Var x = tokens;
  for (std::size_t i = 0; i < config_.blocks_per_group; ++i)
    x = vision_blocks_.at(group * config_.blocks_per_group + i).forward(x, config_.heads, false);
  return x;
}

ad::Var GroupedModel::apply_vision_adapter(std::size_t group, const ad::Var& tokens) const {
  const Grid grid = config_.patch_grid();
  const ad::Var patches = ad::slice_tokens(tokens, 1, grid.cells());
  return ad::add_to_tokens(tokens, adapter_forward(vision_adapters_.at(group), patches, grid), 1);
}

VisionOutputs GroupedModel::vision_forward(const ad::Var& images) const {
  VisionOutputs out;
  const std::size_t cells = config_.patch_grid().cells();
  ad::Var x = patchify(images);
  for (std::size_t g = 0; g < config_.groups; ++g) {
    x = apply_vision_adapter(g, run_vision_group(g, x));
    out.levels.push_back(ad::slice_tokens(x, 1, cells));
  }
  out.cls_final = ad::select_token(x, 0);
  return out;
}

ad::Var GroupedModel::embed_prompts() const {
  const std::size_t c = config_.channels, l = prompt_ids_.front().size();
  Tensor x({prompt_ids_.size(), l, c});
  for (std::size_t s = 0; s < prompt_ids_.size(); ++s)
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t e = 0; e < c; ++e)
        x.at(s, t, e) = token_embed_.value().at(prompt_ids_[s][t], e) + pos_embed_.value().at(t, e);
  return ad::constant(std::move(x));
}

ad::Var GroupedModel::run_text_group(std::size_t group, const ad::Var& tokens) const {
  ad::Var x = tokens;
  for (std::size_t i = 0; i < config_.blocks_per_group; ++i)
    x = text_blocks_.at(group * config_.blocks_per_group + i).forward(x, config_.heads, true);
  return x;
}

ad::Var GroupedModel::apply_text_lora(std::size_t group, const ad::Var& tokens) const {
  return ad::add(tokens, text_loras_.at(group).forward(tokens));
}

ad::Var GroupedModel::pool_text(const ad::Var& tokens) const {
  return ad::select_token(tokens, tokens.shape()[1] - 1);
}

TextOutputs GroupedModel::text_forward() const {
  TextOutputs out;
  ad::Var x = embed_prompts();
  for (std::size_t g = 0; g < config_.groups; ++g) {
    x = apply_text_lora(g, run_text_group(g, x));
    out.levels.push_back(pool_text(x));
  }
  return out;
}

ModelOutputs GroupedModel::forward(const ad::Var& images) const {
  ModelOutputs out;
  out.vision = vision_forward(images);
  out.text = text_forward();
  out.maps = gateway_.forward(out.vision.levels, out.text.levels, config_.patch_grid(), config_.pixel_grid());
  return out;
}

ParamList GroupedModel::parameters() const {
  ParamList out;
  out.push_back({"vision.patch_embed", patch_embed_});
  out.push_back({"vision.class_token", class_token_});
  for (std::size_t i = 0; i < vision_blocks_.size(); ++i)
    vision_blocks_[i].collect(out, group_prefix("vision.block", i));
  for (std::size_t g = 0; g < vision_adapters_.size(); ++g)
    collect_adapter(vision_adapters_[g], out, group_prefix("vision.adapter", g));
  out.push_back({"text.token_embed", token_embed_});
  out.push_back({"text.pos_embed", pos_embed_});
  for (std::size_t i = 0; i < text_blocks_.size(); ++i) text_blocks_[i].collect(out, group_prefix("text.block", i));
  for (std::size_t g = 0; g < text_loras_.size(); ++g) text_loras_[g].collect(out, group_prefix("text.lora", g));
  gateway_.collect(out, "gateway.");
  return out;
}

ParamList GroupedModel::trainable_parameters() const {
  ParamList all = parameters();
  ParamList out;
  for (auto& p : all)
    if (p.trainable()) out.push_back(std::move(p));
  return out;
}

GroupedModel GroupedModel::clone() const {
  GroupedModel copy(config_, seed_);
  copy.gateway_.set_mode(gateway_.mode());
  const ParamList src = parameters();
  ParamList dst = copy.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i].var.mutable_value() = src[i].var.value();
    dst[i].var.set_requires_grad(src[i].var.requires_grad());
  }
  return copy;
}

GroupedModel build_model(const ModelConfig& config, std::uint64_t seed) { return GroupedModel(config, seed); }

}  // namespace convfuse
