// SPDX-License-Identifier: Apache-2.0

#include "convfuse/gateway.hpp"

#include <cmath>

#include "convfuse/error.hpp"
#include "convfuse/kernels.hpp"
#include "convfuse/random.hpp"

namespace convfuse {

namespace {

void check_temperature(double t) {
  if (!(t > 0.0)) throw ConfigError("temperature must be positive, got " + std::to_string(t));
}

}  // namespace

const char* state_name(SemanticState s) { return s == SemanticState::Normal ? "normal" : "abnormal"; }

std::vector<double> fusion_weights(std::span<const double> logits) { return kernels::softmax(logits, 1.0); }

std::vector<double> fuse_text(std::span<const double> weights, const Tensor& features) {
  if (features.rank() != 2 || features.dim(0) != weights.size())
    throw ShapeError("fuse_text: " + std::to_string(weights.size()) + " weights for features " +
                     shape_str(features.shape()));
  const std::size_t n = features.dim(0), c = features.dim(1);
  std::vector<double> out(c, 0.0);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t e = 0; e < c; ++e) out[e] += weights[j] * features.at(j, e);
  return out;
}

Tensor level_anomaly_map(const Tensor& visual, std::span<const double> text_normal,
                         std::span<const double> text_abnormal, double temperature) {
  check_temperature(temperature);
  if (visual.rank() != 3) throw ShapeError("level_anomaly_map: visual must be (B, L, C)");
  const std::size_t b = visual.dim(0), l = visual.dim(1), c = visual.dim(2);
  Tensor out({b, l});
  for (std::size_t i = 0; i < b * l; ++i) {
    const auto v = visual.values().subspan(i * c, c);
    const double sims[2] = {kernels::cosine_sim(v, text_normal).value,
                            kernels::cosine_sim(v, text_abnormal).value};
    out[i] = kernels::softmax(sims, temperature)[1];
  }
  return out;
}

ad::Var anomaly_probability(const ad::Var& sim_normal, const ad::Var& sim_abnormal, double temperature) {
  check_temperature(temperature);
  if (sim_normal.shape() != sim_abnormal.shape()) throw ShapeError("anomaly_probability: shape mismatch");
  Tensor out(sim_normal.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double sims[2] = {sim_normal.value()[i], sim_abnormal.value()[i]};
    out[i] = kernels::softmax(sims, temperature)[1];
  }
  return ad::make_result(std::move(out), {sim_normal, sim_abnormal}, [temperature](ad::Node& self) {
    Tensor dn(self.value.shape()), da(self.value.shape());
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      const double m = self.value[i];
      const double d = self.grad[i] * m * (1.0 - m) / temperature;
      da[i] = d;
      dn[i] = -d;
    }
    ad::accumulate(*self.parents[0], std::move(dn));
    ad::accumulate(*self.parents[1], std::move(da));
  });
}

ad::Var level_anomaly_map(const ad::Var& visual, const ad::Var& text_normal, const ad::Var& text_abnormal,
                          double temperature, std::size_t* zero_norm_events) {
  check_temperature(temperature);
  return anomaly_probability(ad::cosine_tokens(visual, text_normal, zero_norm_events),
                             ad::cosine_tokens(visual, text_abnormal, zero_norm_events), temperature);
}

GatingMlp::GatingMlp(std::size_t channels, std::size_t hidden, std::size_t levels, std::uint64_t seed) {
  Rng rng(seed);
  w1_ = make_param(gaussian({channels, hidden}, 1.0 / static_cast<double>(channels), rng), true);
  w2_ = make_param(Tensor({hidden, levels}), true);
}

ad::Var GatingMlp::logits(const ad::Var& v_global) const {
  return ad::linear(ad::tanh(ad::linear(v_global, w1_)), w2_);
}

void GatingMlp::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + "w1", w1_});
  out.push_back({prefix + "w2", w2_});
}

FusionGateway::FusionGateway(std::size_t channels, std::size_t levels, std::size_t hidden, double temperature,
                             FusionMode mode, std::uint64_t seed)
    : levels_(levels), temperature_(temperature), mode_(mode) {
  check_temperature(temperature);
  if (levels == 0) throw ConfigError("gateway needs at least one level");
  if (hidden == 0) throw ConfigError("gate hidden width must be positive");
  for (SemanticState s : kSemanticStates)
    gates_.emplace_back(channels, hidden, levels, derive_seed(seed, state_name(s)));
  set_mode(mode);
}

void FusionGateway::set_mode(FusionMode mode) {
  mode_ = mode;
  for (auto& g : gates_) {
    g.w1().set_requires_grad(mode == FusionMode::Dynamic);
    g.w2().set_requires_grad(mode == FusionMode::Dynamic);
  }
}

LevelWeights FusionGateway::dynamic_weights(const std::vector<ad::Var>& visual) const {
  LevelWeights weights(visual.size());
  for (std::size_t i = 0; i < visual.size(); ++i) {
    const ad::Var v_global = ad::gap(visual[i]);
    for (SemanticState s : kSemanticStates)
      weights[i][index_of(s)] = ad::softmax_rows(gates_[index_of(s)].logits(v_global));
  }
  return weights;
}

LevelWeights FusionGateway::static_weights(std::size_t batch) const {
  LevelWeights weights(levels_);
  for (std::size_t i = 0; i < levels_; ++i) {
    Tensor one_hot({batch, levels_});
    for (std::size_t b = 0; b < batch; ++b) one_hot.at(b, i) = 1.0;
    for (SemanticState s : kSemanticStates) weights[i][index_of(s)] = ad::constant(one_hot);
  }
  return weights;
}

AnomalyMaps FusionGateway::forward(const std::vector<ad::Var>& visual, const std::vector<ad::Var>& text,
                                   Grid grid, Grid pixels) const {
  if (visual.size() != levels_) throw ShapeError("gateway: expected " + std::to_string(levels_) + " visual levels");
  const LevelWeights weights =
      mode_ == FusionMode::Dynamic ? dynamic_weights(visual) : static_weights(visual.front().shape()[0]);
  return forward_with_weights(visual, text, weights, grid, pixels);
}

AnomalyMaps FusionGateway::forward_with_weights(const std::vector<ad::Var>& visual,
                                                const std::vector<ad::Var>& text, const LevelWeights& weights,
                                                Grid grid, Grid pixels) const {
  if (visual.size() != levels_ || text.size() != levels_ || weights.size() != levels_)
    throw ShapeError("gateway: level count mismatch");
  AnomalyMaps maps;
  maps.weights = weights;
  const std::size_t batch = visual.front().shape()[0];
  std::array<ad::Var, 2> text_by_state;
  for (SemanticState s : kSemanticStates) text_by_state[index_of(s)] = ad::stack_rows(text, index_of(s));

  for (std::size_t i = 0; i < levels_; ++i) {
    std::array<ad::Var, 2> descriptors;
    for (SemanticState s : kSemanticStates)
      descriptors[index_of(s)] = ad::linear(weights[i][index_of(s)], text_by_state[index_of(s)]);
    ad::Var m = level_anomaly_map(visual[i], descriptors[0], descriptors[1], temperature_, &maps.zero_norm_events);
    maps.per_level.push_back(ad::reshape(m, {batch, grid.height, grid.width}));
  }
  maps.aggregated = ad::mean_of(maps.per_level);
  maps.upsampled = ad::bilinear_upsample(maps.aggregated, pixels);
  return maps;
}

std::size_t FusionGateway::param_count() const {
  std::size_t n = 0;
  for (const auto& g : gates_) n += g.w1().value().size() + g.w2().value().size();
  return n;
}

void FusionGateway::collect(ParamList& out, const std::string& prefix) const {
  for (SemanticState s : kSemanticStates)
    gates_[index_of(s)].collect(out, prefix + "gate_" + state_name(s) + ".");
}

double mean_entropy(const Tensor& weights) {
  const std::size_t rows = weights.dim(0), n = weights.dim(1);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) {
      const double w = weights.at(r, j);
      if (w > 0.0) total -= w * std::log(w);
    }
  return total / static_cast<double>(rows);
}

}  // namespace convfuse
