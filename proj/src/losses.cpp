// SPDX-License-Identifier: Apache-2.0

#include "convfuse/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "convfuse/error.hpp"
#include "convfuse/gateway.hpp"
#include "convfuse/kernels.hpp"

namespace convfuse {

namespace {

double clamp_probability(double p) { return std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp); }

double focal_term(double p, double t, double gamma, double alpha) {
  const double q = clamp_probability(p);
  if (t > 0.5) return -alpha * std::pow(1.0 - q, gamma) * std::log(q);
  return -(1.0 - alpha) * std::pow(q, gamma) * std::log(1.0 - q);
}

double focal_term_grad(double p, double t, double gamma, double alpha) {
  if (p < kProbabilityClamp || p > 1.0 - kProbabilityClamp) return 0.0;
  if (t > 0.5) {
    const double one_minus = 1.0 - p;
    double g = -std::pow(one_minus, gamma) / p;
    if (gamma != 0.0) g += gamma * std::pow(one_minus, gamma - 1.0) * std::log(p);
    return alpha * g;
  }
  double g = std::pow(p, gamma) / (1.0 - p);
  if (gamma != 0.0) g -= gamma * std::pow(p, gamma - 1.0) * std::log(1.0 - p);
  return (1.0 - alpha) * g;
}

void check_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": prediction and target sizes differ");
}

}  // namespace

void LossConfig::validate() const {
  std::vector<std::string> bad;
  if (focal_weight < 0) bad.emplace_back("focal_weight");
  if (dice_weight < 0) bad.emplace_back("dice_weight");
  if (cls_weight < 0) bad.emplace_back("cls_weight");
  if (focal_weight <= 0 && dice_weight <= 0 && cls_weight <= 0) bad.emplace_back("at least one loss weight must be positive");
  if (focal_gamma < 0) bad.emplace_back("focal_gamma");
  if (focal_alpha < 0 || focal_alpha > 1) bad.emplace_back("focal_alpha");
  if (!(dice_smooth > 0)) bad.emplace_back("dice_smooth");
  if (!bad.empty()) {
    std::string msg = "invalid loss configuration:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw ConfigError(msg);
  }
}

double focal_loss(std::span<const double> pred, std::span<const double> target, double gamma, double alpha) {
  check_same_size(pred.size(), target.size(), "focal_loss");
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) total += focal_term(pred[i], target[i], gamma, alpha);
  return total / static_cast<double>(pred.size());
}

double dice_loss(std::span<const double> pred, std::span<const double> target, double smooth) {
  check_same_size(pred.size(), target.size(), "dice_loss");
  double inter = 0.0, sp = 0.0, st = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] * target[i];
    sp += pred[i];
    st += target[i];
  }
  return 1.0 - (2.0 * inter + smooth) / (sp + st + smooth);
}

double seg_loss(const Tensor& pred, const Tensor& target, const LossConfig& cfg) {
  check_same_size(pred.size(), target.size(), "seg_loss");
  const std::size_t b = pred.dim(0), per = pred.size() / b;
  const double focal = focal_loss(pred.values(), target.values(), cfg.focal_gamma, cfg.focal_alpha);
  double dice = 0.0;
  for (std::size_t i = 0; i < b; ++i)
    dice += dice_loss(pred.values().subspan(i * per, per), target.values().subspan(i * per, per), cfg.dice_smooth);
  dice /= static_cast<double>(b);
  return cfg.focal_weight * focal + cfg.dice_weight * dice;
}

double cls_loss(const Tensor& v_cls, const Tensor& anchor, double temperature, std::span<const int> labels) {
  const std::size_t b = v_cls.dim(0), c = v_cls.dim(1);
  if (labels.size() != b) throw ShapeError("cls_loss: label count mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const auto v = v_cls.values().subspan(i * c, c);
    const double sims[2] = {kernels::cosine_sim(v, anchor.values().subspan(0, c)).value,
                            kernels::cosine_sim(v, anchor.values().subspan(c, c)).value};
    const double mx = std::max(sims[0], sims[1]);
    const double lse = std::log(std::exp((sims[0] - mx) / temperature) + std::exp((sims[1] - mx) / temperature));
    total -= (sims[labels[i] ? 1 : 0] - mx) / temperature - lse;
  }
  return total / static_cast<double>(b);
}

double total_loss(double seg, double cls, const LossConfig& cfg) {
  if (!std::isfinite(seg) || !std::isfinite(cls)) throw TrainingError("non-finite loss component");
  return seg + cfg.cls_weight * cls;
}

double image_score(double p_abnormal, double map_max) { return 0.5 * (p_abnormal + map_max); }

ad::Var focal_loss(const ad::Var& pred, const Tensor& target, double gamma, double alpha) {
  check_same_size(pred.value().size(), target.size(), "focal_loss");
  const double value = focal_loss(pred.value().values(), target.values(), gamma, alpha);
  return ad::make_result(Tensor::scalar(value), {pred}, [target, gamma, alpha](ad::Node& self) {
    const Tensor& p = self.parents[0]->value;
    Tensor g(p.shape());
    const double scale = self.grad.item() / static_cast<double>(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) g[i] = scale * focal_term_grad(p[i], target[i], gamma, alpha);
    ad::accumulate(*self.parents[0], std::move(g));
  });
}

ad::Var dice_loss(const ad::Var& pred, const Tensor& target, double smooth) {
  check_same_size(pred.value().size(), target.size(), "dice_loss");
  const Tensor& p = pred.value();
  const std::size_t b = p.dim(0), per = p.size() / b;
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i)
    total += dice_loss(p.values().subspan(i * per, per), target.values().subspan(i * per, per), smooth);
  total /= static_cast<double>(b);
  return ad::make_result(Tensor::scalar(total), {pred}, [target, smooth, b, per](ad::Node& self) {
    const Tensor& p = self.parents[0]->value;
    Tensor g(p.shape());
    const double outer = self.grad.item() / static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i) {
      double inter = 0.0, sp = 0.0, st = 0.0;
      for (std::size_t k = 0; k < per; ++k) {
        inter += p[i * per + k] * target[i * per + k];
        sp += p[i * per + k];
        st += target[i * per + k];
      }
      const double den = sp + st + smooth;
      const double num = 2.0 * inter + smooth;
      for (std::size_t k = 0; k < per; ++k)
        g[i * per + k] = -outer * (2.0 * target[i * per + k] * den - num) / (den * den);
    }
    ad::accumulate(*self.parents[0], std::move(g));
  });
}

ad::Var seg_loss(const ad::Var& pred, const Tensor& target, const LossConfig& cfg) {
  std::vector<double> weights;
  std::vector<ad::Var> parts;
  if (cfg.focal_weight != 0.0) {
    weights.push_back(cfg.focal_weight);
    parts.push_back(focal_loss(pred, target, cfg.focal_gamma, cfg.focal_alpha));
  }
  if (cfg.dice_weight != 0.0) {
    weights.push_back(cfg.dice_weight);
    parts.push_back(dice_loss(pred, target, cfg.dice_smooth));
  }
  return ad::weighted_sum(weights, parts);
}

ad::Var abnormal_probability(const ad::Var& v_cls, const ad::Var& anchor, double temperature, ad::Var* sim_normal,
                             ad::Var* sim_abnormal) {
  const std::size_t b = v_cls.shape()[0], c = v_cls.shape()[1];
  const ad::Var tokens = ad::reshape(v_cls, {b, 1, c});
  const ad::Var sim_n = ad::cosine_tokens(tokens, ad::stack_rows({anchor}, 0));
  const ad::Var sim_a = ad::cosine_tokens(tokens, ad::stack_rows({anchor}, 1));
  if (sim_normal) *sim_normal = sim_n;
  if (sim_abnormal) *sim_abnormal = sim_a;
  return anomaly_probability(sim_n, sim_a, temperature);
}

ClassifierOutput cls_loss(const ad::Var& v_cls, const ad::Var& anchor, double temperature,
                          std::span<const int> labels) {
  const std::size_t b = v_cls.shape()[0];
  if (labels.size() != b) throw ShapeError("cls_loss: label count mismatch");
  ad::Var sim_n, sim_a;
  ClassifierOutput out;
  out.p_abnormal = abnormal_probability(v_cls, anchor, temperature, &sim_n, &sim_a);

  std::vector<int> lab(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double sn = sim_n.value()[i], sa = sim_a.value()[i];
    const double mx = std::max(sn, sa);
    const double lse = std::log(std::exp((sn - mx) / temperature) + std::exp((sa - mx) / temperature));
    total -= ((lab[i] ? sa : sn) - mx) / temperature - lse;
  }
  total /= static_cast<double>(b);
  const ad::Var p = out.p_abnormal;
  out.loss = ad::make_result(Tensor::scalar(total), {sim_n, sim_a}, [lab, temperature, p](ad::Node& self) {
    // d/d(sim_a) of -log softmax = (p_a - y) / tau; d/d(sim_n) is the negative.
    const std::size_t b = lab.size();
    Tensor dn({b, 1}), da({b, 1});
    const double scale = self.grad.item() / static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i) {
      const double d = scale * (p.value()[i] - (lab[i] ? 1.0 : 0.0)) / temperature;
      da[i] = d;
      dn[i] = -d;
    }
    ad::accumulate(*self.parents[0], std::move(dn));
    ad::accumulate(*self.parents[1], std::move(da));
  });
  return out;
}

ad::Var total_loss(const ad::Var& seg, const ad::Var& cls, const LossConfig& cfg) {
  const double s = seg.value().item(), c = cls.value().item();
  if (!std::isfinite(s) || !std::isfinite(c)) throw TrainingError("non-finite loss component");
  return ad::weighted_sum({1.0, cfg.cls_weight}, {seg, cls});
}

}  // namespace convfuse
