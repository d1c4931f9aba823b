// SPDX-License-Identifier: Apache-2.0

#include "convfuse/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "convfuse/error.hpp"
#include "convfuse/random.hpp"

namespace convfuse {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("key '" + key + "': not a number: '" + v + "'");
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("key '" + key + "': not a non-negative integer: '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("key '" + key + "': not a boolean: '" + v + "'");
}

std::string fmt_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);  // shortest round-trip form
  return std::string(buf, res.ptr);
}

std::vector<std::size_t> to_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(to_uint(key, trim(item)));
  return out;
}

std::string fmt_list(const std::vector<std::size_t>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + std::to_string(xs[i]);
  return out;
}

struct Field {
  ConfigKey key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define CF_SIZE(NAME, MEMBER, HELP)                                                                     \
  Field {                                                                                              \
    {NAME, HELP}, [](RunConfig& c, const std::string& v) { c.MEMBER = to_uint(NAME, v); },              \
        [](const RunConfig& c) { return std::to_string(c.MEMBER); }                                     \
  }
#define CF_REAL(NAME, MEMBER, HELP)                                                                     \
  Field {                                                                                              \
    {NAME, HELP}, [](RunConfig& c, const std::string& v) { c.MEMBER = to_double(NAME, v); },            \
        [](const RunConfig& c) { return fmt_double(c.MEMBER); }                                          \
  }
#define CF_BOOL(NAME, MEMBER, HELP)                                                                     \
  Field {                                                                                              \
    {NAME, HELP}, [](RunConfig& c, const std::string& v) { c.MEMBER = to_bool(NAME, v); },              \
        [](const RunConfig& c) { return std::string(c.MEMBER ? "true" : "false"); }                     \
  }
#define CF_TEXT(NAME, MEMBER, HELP)                                                                     \
  Field {                                                                                              \
    {NAME, HELP}, [](RunConfig& c, const std::string& v) { c.MEMBER = v; },                              \
        [](const RunConfig& c) { return c.MEMBER; }                                                     \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      CF_SIZE("groups", model.groups, "number of encoder groups N"),
      CF_SIZE("blocks_per_group", model.blocks_per_group, "transformer blocks per group"),
      CF_SIZE("channels", model.channels, "token width C"),
      CF_SIZE("heads", model.heads, "attention heads"),
      CF_SIZE("image_size", model.image_size, "square image side in pixels"),
      CF_SIZE("patch_size", model.patch_size, "patch side in pixels"),
      CF_SIZE("rank", model.rank, "adapter rank r"),
      Field{{"branch_kernels", "comma-separated odd kernel sizes"},
            [](RunConfig& c, const std::string& v) { c.model.branch_kernels = to_list("branch_kernels", v); },
            [](const RunConfig& c) { return fmt_list(c.model.branch_kernels); }},
      CF_REAL("temperature", model.temperature, "similarity temperature"),
      CF_SIZE("gate_hidden", model.gate_hidden, "gating MLP hidden width"),
      CF_SIZE("text_context", model.text_context, "text positional capacity"),
      CF_TEXT("prompt_normal", model.prompt_normal, "prompt words for the normal state"),
      CF_TEXT("prompt_abnormal", model.prompt_abnormal, "prompt words for the abnormal state"),
      CF_BOOL("conv_lora", model.conv_lora, "convolutional adapters on vision groups"),
      CF_BOOL("dfg", model.dynamic_fusion, "dynamic gated text fusion"),
      CF_REAL("focal_weight", loss.focal_weight, "focal loss weight"),
      CF_REAL("dice_weight", loss.dice_weight, "dice loss weight"),
      CF_REAL("cls_weight", loss.cls_weight, "classification loss weight"),
      CF_REAL("focal_gamma", loss.focal_gamma, "focal focusing exponent"),
      CF_REAL("focal_alpha", loss.focal_alpha, "focal positive-class weight"),
      CF_REAL("dice_smooth", loss.dice_smooth, "dice smoothing constant"),
      CF_REAL("learning_rate", optim.learning_rate, "Adam step size"),
      CF_SIZE("steps", optim.steps, "training steps"),
      CF_SIZE("batch_size", optim.batch_size, "training batch size"),
      CF_SIZE("eval_batch", eval_batch, "evaluation batch size"),
      CF_SIZE("model_seed", model_seed, "seed for model initialization"),
      CF_SIZE("data_seed", data_seed, "seed for synthetic data and batching"),
      CF_SIZE("train_samples", train_samples, "synthetic training images"),
      CF_SIZE("test_samples", test_samples, "synthetic test images"),
      Field{{"texture", "noise, grid or mixed"},
            [](RunConfig& c, const std::string& v) { c.data.texture = parse_texture_family(v); },
            [](const RunConfig& c) { return texture_family_name(c.data.texture); }},
      CF_REAL("anomaly_rate", data.anomaly_rate, "fraction of anomalous images"),
      CF_REAL("texture_std", data.texture_std, "texture standard deviation (0..255 scale)"),
      CF_REAL("min_defect_fraction", data.min_defect_fraction, "smallest defect area fraction"),
      CF_REAL("max_defect_fraction", data.max_defect_fraction, "largest defect area fraction"),
      CF_REAL("min_delta", data.min_delta, "smallest defect offset in texture std units"),
      CF_REAL("max_delta", data.max_delta, "largest defect offset in texture std units"),
      CF_REAL("brightness_min", data.brightness_min, "lowest per-image mean intensity"),
      CF_REAL("brightness_max", data.brightness_max, "highest per-image mean intensity"),
      CF_TEXT("dataset_dir", dataset_dir, "load images from this directory instead of generating"),
      CF_SIZE("ablation_seeds", ablation_seeds, "seeds per ablation row"),
  };
  return table;
}

#undef CF_SIZE
#undef CF_REAL
#undef CF_BOOL
#undef CF_TEXT

const Field& find_field(const std::string& key) {
  const auto& table = fields();
  auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.key.name == key; });
  if (it == table.end()) {
    std::string msg = "unknown configuration key '" + key + "'; valid keys:";
    for (const auto& f : table) msg += " " + f.key.name;
    throw ConfigError(msg);
  }
  return *it;
}

}  // namespace

void RunConfig::validate() const {
  std::vector<std::string> bad;
  auto nested = [&](auto&& check) {
    try {
      check();
    } catch (const ConfigError& e) {
      bad.emplace_back(e.what());
    }
  };
  nested([&] { model.validate(); });
  nested([&] { loss.validate(); });
  nested([&] { train_params().validate(); });
  if (!(optim.learning_rate > 0)) bad.emplace_back("learning_rate must be positive");
  if (optim.batch_size == 0) bad.emplace_back("batch_size must be positive");
  if (eval_batch == 0) bad.emplace_back("eval_batch must be positive");
  if (dataset_dir.empty() && (train_samples == 0 || test_samples == 0))
    bad.emplace_back("train_samples and test_samples must be positive");
  if (ablation_seeds == 0) bad.emplace_back("ablation_seeds must be positive");
  if (!bad.empty()) {
    std::string msg = "invalid run configuration:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw ConfigError(msg);
  }
}

SyntheticParams RunConfig::train_params() const {
  SyntheticParams p = data;
  p.image_size = model.image_size;
  p.count = train_samples;
  p.id_prefix = "tr";
  return p;
}

SyntheticParams RunConfig::test_params() const {
  SyntheticParams p = data;
  p.image_size = model.image_size;
  p.count = test_samples;
  p.id_prefix = "te";
  return p;
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const auto& f : fields()) out.push_back(f.key);
    return out;
  }();
  return keys;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  find_field(key).set(cfg, trim(value));
}

std::string get_config_value(const RunConfig& cfg, const std::string& key) { return find_field(key).get(cfg); }

RunConfig parse_config_text(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    set_config_value(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

RunConfig load_config_file(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), std::move(base));
}

std::string config_echo(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key.name + " = " + f.get(cfg) + "\n";
  return out;
}

}  // namespace convfuse
