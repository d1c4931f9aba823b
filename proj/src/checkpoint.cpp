// SPDX-License-Identifier: Apache-2.0

#include "convfuse/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "convfuse/error.hpp"

namespace convfuse {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'C', 'V', 'F', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw LoadError("checkpoint truncated");
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

Checkpoint make_checkpoint(const GroupedModel& model, const RunConfig& config, std::uint64_t step) {
  Checkpoint ckpt;
  ckpt.step = step;
  ckpt.config_text = config_echo(config);
  for (const auto& p : model.parameters()) ckpt.tensors.push_back({p.name, p.trainable(), p.var.value()});
  return ckpt;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, ckpt.step);
  put<std::uint64_t>(out, ckpt.config_text.size());
  out += ckpt.config_text;
  put<std::uint64_t>(out, ckpt.tensors.size());
  for (const auto& t : ckpt.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put<std::uint8_t>(out, t.trainable ? 1 : 0);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.rank()));
    for (std::size_t d : t.value.shape()) put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.value.data()), t.value.size() * sizeof(double));
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (in.get_string(sizeof kMagic) != std::string(kMagic, sizeof kMagic)) throw LoadError("not a checkpoint file");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw LoadError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.step = in.get<std::uint64_t>();
  ckpt.config_text = in.get_string(in.get<std::uint64_t>());
  const auto count = in.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = in.get_string(in.get<std::uint32_t>());
    e.trainable = in.get<std::uint8_t>() != 0;
    const auto rank = in.get<std::uint32_t>();
    if (rank > 4) throw LoadError("checkpoint tensor '" + e.name + "' has rank > 4");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(in.get<std::uint64_t>());
    std::vector<double> data(shape_numel(shape));
    const std::string raw = in.get_string(data.size() * sizeof(double));
    std::memcpy(data.data(), raw.data(), raw.size());
    e.value = Tensor(std::move(shape), std::move(data));
    ckpt.tensors.push_back(std::move(e));
  }
  if (!in.done()) throw LoadError("trailing bytes after checkpoint");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write " + path.string());
  const std::string bytes = serialize_checkpoint(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw LoadError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return deserialize_checkpoint(ss.str());
  } catch (const LoadError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

RunConfig checkpoint_config(const Checkpoint& ckpt) { return parse_config_text(ckpt.config_text); }

GroupedModel restore_model(const Checkpoint& ckpt) {
  const RunConfig cfg = checkpoint_config(ckpt);
  GroupedModel model = build_model(cfg.model, cfg.model_seed);
  ParamList params = model.parameters();
  if (params.size() != ckpt.tensors.size())
    throw LoadError("checkpoint holds " + std::to_string(ckpt.tensors.size()) + " tensors, model expects " +
                    std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = ckpt.tensors[i];
    if (e.name != params[i].name) throw LoadError("checkpoint tensor '" + e.name + "' where '" + params[i].name + "' expected");
    if (e.value.shape() != params[i].var.shape())
      throw LoadError("checkpoint tensor '" + e.name + "' has shape " + shape_str(e.value.shape()) + ", expected " +
                      shape_str(params[i].var.shape()));
    if (e.trainable != params[i].trainable()) throw LoadError("checkpoint tensor '" + e.name + "' trainable flag differs");
    params[i].var.mutable_value() = e.value;
  }
  return model;
}

}  // namespace convfuse
