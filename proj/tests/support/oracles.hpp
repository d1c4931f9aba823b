// SPDX-License-Identifier: Apache-2.0

// Straight-line references built from loop-level primitives. They share no
// code with the library beyond the plain-value helpers they are meant to
// compose.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <vector>

#include "convfuse/conv_lora.hpp"
#include "convfuse/gateway.hpp"
#include "convfuse/losses.hpp"
#include "test_util.hpp"

namespace convfuse::testing {

inline Tensor scaled(Tensor t, double s) {
  for (double& v : t.values()) v *= s;
  return t;
}

inline void randomize_adapter(ConvLoraAdapter& a, std::uint64_t seed, double scale = 0.5) {
  ParamList ps;
  a.collect(ps, "");
  for (auto& p : ps) p.var.mutable_value() = random_tensor(p.var.shape(), seed++, scale);
}

inline void randomize_gates(FusionGateway& gw, std::uint64_t seed) {
  for (SemanticState s : kSemanticStates) {
    gw.gate(s).w1().mutable_value() = random_tensor(gw.gate(s).w1().shape(), seed++);
    gw.gate(s).w2().mutable_value() = random_tensor(gw.gate(s).w2().shape(), seed++);
  }
}

/// Down-projection, two 1/k-scaled k x k convolutions, up-projection.
inline Tensor branch_oracle(const ConvLoraAdapter& a, const Tensor& x, std::size_t k, Grid g) {
  const Tensor proj = naive_linear(x, a.w_down().value());
  const double s = 1.0 / static_cast<double>(k);
  const Tensor conv = scaled(naive_conv2d_same(naive_seq_to_2d(proj, g.height, g.width), a.conv_down(k).value()), s);
  const Tensor refined = scaled(naive_conv2d_same(conv, a.conv_up(k).value()), s);
  return naive_linear(naive_seq_from_2d(refined), a.w_up().value());
}

/// Branches concatenated on channels in declaration order, then the 1x1 fuse.
inline Tensor adapter_oracle(const ConvLoraAdapter& a, const Tensor& x, Grid g) {
  const auto& ks = a.config().branch_kernels;
  const std::size_t b = x.dim(0), c = x.dim(2);
  Tensor cat({b, ks.size() * c, g.height, g.width});
  for (std::size_t i = 0; i < ks.size(); ++i) {
    const Tensor s = naive_seq_to_2d(branch_oracle(a, x, ks[i], g), g.height, g.width);
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t h = 0; h < g.height; ++h)
          for (std::size_t w = 0; w < g.width; ++w) cat.at(n, i * c + ch, h, w) = s.at(n, ch, h, w);
  }
  return naive_seq_from_2d(naive_conv2d_same(cat, a.fuse().value()));
}

/// Aggregated (B, H, W) map: GAP and the gate MLP by loops, then the
/// plain-value fusion primitives, averaged over levels. `dynamic` false uses
/// one-hot layer-wise weights.
inline Tensor gateway_oracle(const FusionGateway& gw, const std::vector<Tensor>& visual,
                             const std::vector<Tensor>& text, Grid grid, bool dynamic) {
  const std::size_t n = visual.size(), b = visual[0].dim(0), c = visual[0].dim(2), cells = grid.cells();
  Tensor agg({b, cells});
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor& v = visual[i];
    for (std::size_t bi = 0; bi < b; ++bi) {
      std::vector<std::vector<double>> desc;
      for (SemanticState s : kSemanticStates) {
        std::vector<double> w(n, 0.0);
        if (dynamic) {
          std::vector<double> g(c, 0.0);
          for (std::size_t l = 0; l < cells; ++l)
            for (std::size_t e = 0; e < c; ++e) g[e] += v.at(bi, l, e) / static_cast<double>(cells);
          const Tensor& w1 = gw.gate(s).w1().value();
          const Tensor& w2 = gw.gate(s).w2().value();
          std::vector<double> logits(n, 0.0);
          for (std::size_t k = 0; k < w1.dim(1); ++k) {
            double h = 0.0;
            for (std::size_t e = 0; e < c; ++e) h += g[e] * w1.at(e, k);
            h = std::tanh(h);
            for (std::size_t j = 0; j < n; ++j) logits[j] += h * w2.at(k, j);
          }
          w = fusion_weights(logits);
        } else {
          w[i] = 1.0;
        }
        Tensor feats({n, c});
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t e = 0; e < c; ++e) feats.at(j, e) = text[j].at(index_of(s), e);
        desc.push_back(fuse_text(w, feats));
      }
      const auto vb = v.values().subspan(bi * cells * c, cells * c);
      const Tensor one({1, cells, c}, std::vector<double>(vb.begin(), vb.end()));
      const Tensor m = level_anomaly_map(one, desc[0], desc[1], gw.temperature());
      for (std::size_t l = 0; l < cells; ++l) agg.at(bi, l) += m[l] / static_cast<double>(n);
    }
  }
  return agg.reshaped({b, grid.height, grid.width});
}

/// Focal over all pixels plus per-image dice, in extended precision.
inline double seg_loss_oracle(const Tensor& pred, const Tensor& target, const LossConfig& cfg) {
  const std::size_t b = pred.dim(0), per = pred.size() / b;
  long double focal = 0, dice = 0;
  const long double lo = kProbabilityClamp, hi = 1.0L - kProbabilityClamp;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const long double p = std::clamp(static_cast<long double>(pred[i]), lo, hi);
    focal += target[i] > 0.5 ? -cfg.focal_alpha * std::pow(1 - p, static_cast<long double>(cfg.focal_gamma)) * std::log(p)
                             : -(1 - cfg.focal_alpha) * std::pow(p, static_cast<long double>(cfg.focal_gamma)) * std::log(1 - p);
  }
  focal /= pred.size();
  for (std::size_t n = 0; n < b; ++n) {
    long double inter = 0, sp = 0, st = 0;
    for (std::size_t k = n * per; k < (n + 1) * per; ++k) {
      inter += static_cast<long double>(pred[k]) * target[k];
      sp += pred[k];
      st += target[k];
    }
    dice += 1 - (2 * inter + cfg.dice_smooth) / (sp + st + cfg.dice_smooth);
  }
  dice /= b;
  return static_cast<double>(cfg.focal_weight * focal + cfg.dice_weight * dice);
}

// ---- metrics ------------------------------------------------------------------

// All positive/negative pairs, ties counted half.
inline double brute_auroc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return wins / pairs;
}

// Every distinct score as a threshold, highest first, counting hits by a
// full scan at each threshold. Terms are formed as precision * (new hits / P)
// and summed in threshold order, so the result is comparable bit for bit.
inline double brute_ap(const std::vector<double>& s, const std::vector<int>& y) {
  const std::set<double, std::greater<>> thresholds(s.begin(), s.end());
  const long positives = std::count(y.begin(), y.end(), 1);
  double ap = 0;
  long prev_tp = 0;
  for (double t : thresholds) {
    long tp = 0, fp = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= t) ++(y[i] ? tp : fp);
    if (tp == prev_tp) continue;
    ap += static_cast<double>(tp) / static_cast<double>(tp + fp) *
          (static_cast<double>(tp - prev_tp) / static_cast<double>(positives));
    prev_tp = tp;
  }
  return ap;
}

}  // namespace convfuse::testing
