// SPDX-License-Identifier: Apache-2.0

#include "convfuse/selftest.hpp"

#include <cmath>
#include <cstdio>
#include <exception>
#include <functional>
#include <set>

#include "convfuse/backbone.hpp"
#include "convfuse/gradcheck.hpp"
#include "convfuse/kernels.hpp"
#include "convfuse/metrics.hpp"
#include "convfuse/random.hpp"

namespace convfuse {

namespace {

std::string fmt(const char* pattern, double a, double b = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, pattern, a, b);
  return buf;
}

SelfTestResult guarded(const std::string& name, const std::function<SelfTestResult()>& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    return {name, false, std::string("threw: ") + e.what()};
  }
}

SelfTestResult check_gradients(const SelfTestOptions& opt) {
  GradCheckOptions g;
  g.stride = opt.gradcheck_stride;
  const GradCheckReport r = gradcheck_default_model(g);
  std::string detail = std::to_string(r.checked) + " of " + std::to_string(r.trainable) + " scalars compared, " +
                       std::to_string(r.failures) + " failures, max rel error " + fmt("%.3g", r.max_rel_error);
  if (!r.passed() && !r.failed.empty())
    detail += "; first: " + r.failed.front().name + "[" + std::to_string(r.failed.front().index) + "]";
  return {"gradient", r.passed(), detail};
}

SelfTestResult check_conv(const SelfTestOptions& opt) {
  Rng rng(derive_seed(opt.seed, "conv"));
  double worst = 0.0;
  for (std::size_t k : {1, 3, 5}) {
    const std::size_t b = 2, ci = 3, co = 2, h = 5, w = 4, pad = k / 2;
    const Tensor x = gaussian({b, ci, h, w}, 1.0, rng);
    const Tensor ker = gaussian({co, ci, k, k}, 1.0, rng);
    const Tensor y = kernels::conv2d_same(x, ker);
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t o = 0; o < co; ++o)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < ci; ++c)
              for (std::size_t u = 0; u < k; ++u)
                for (std::size_t v = 0; v < k; ++v) {
                  const long ii = static_cast<long>(i + u) - static_cast<long>(pad);
                  const long jj = static_cast<long>(j + v) - static_cast<long>(pad);
                  if (ii < 0 || jj < 0 || ii >= static_cast<long>(h) || jj >= static_cast<long>(w)) continue;
                  acc += x.at(n, c, static_cast<std::size_t>(ii), static_cast<std::size_t>(jj)) * ker.at(o, c, u, v);
                }
            worst = std::max(worst, std::abs(acc - y.at(n, o, i, j)));
          }
  }
  return {"conv2d_same", worst <= 1e-12, fmt("max abs deviation from direct loops %.3g", worst)};
}

SelfTestResult check_softmax(const SelfTestOptions& opt) {
  Rng rng(derive_seed(opt.seed, "softmax"));
  double worst_sum = 0.0, worst_shift = 0.0;
  for (int t = 0; t < 100; ++t) {
    const Tensor v = gaussian({6}, 25.0, rng);
    const auto p = kernels::softmax(v.values());
    double s = 0.0;
    for (double x : p) s += x;
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    std::vector<double> shifted(v.values().begin(), v.values().end());
    for (double& x : shifted) x += 17.25;
    const auto q = kernels::softmax(shifted);
    for (std::size_t i = 0; i < p.size(); ++i) worst_shift = std::max(worst_shift, std::abs(p[i] - q[i]));
  }
  return {"softmax", worst_sum <= 1e-12 && worst_shift <= 1e-12,
          fmt("max |sum-1| %.3g, max shift deviation %.3g", worst_sum, worst_shift)};
}

SelfTestResult check_metrics(const SelfTestOptions& opt) {
  Rng rng(derive_seed(opt.seed, "metrics"));
  std::size_t mismatches = 0;
  for (std::size_t t = 0; t < opt.metric_instances; ++t) {
    const std::size_t n = 2 + rng() % 60;
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = static_cast<double>(rng() % 8) / 8.0;  // coarse grid forces ties
      labels[i] = static_cast<int>(rng() % 2);
    }
    labels[0] = 1;
    labels[1] = 0;
    long twice = 0, pos = 0, neg = 0;
    for (std::size_t i = 0; i < n; ++i) (labels[i] ? pos : neg)++;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (labels[i] && !labels[j]) twice += scores[i] > scores[j] ? 2 : scores[i] == scores[j] ? 1 : 0;
    if (auroc(scores, labels) != static_cast<double>(twice) / (2.0 * static_cast<double>(pos * neg))) ++mismatches;

    const std::set<double, std::greater<>> thresholds(scores.begin(), scores.end());
    double ap = 0.0;
    long tp_prev = 0;
    for (double th : thresholds) {
      long tp = 0, fp = 0;
      for (std::size_t i = 0; i < n; ++i)
        if (scores[i] >= th) (labels[i] ? tp : fp)++;
      if (tp != tp_prev) {
        ap += static_cast<double>(tp) / static_cast<double>(tp + fp) * static_cast<double>(tp - tp_prev) /
              static_cast<double>(pos);
        tp_prev = tp;
      }
    }
    if (average_precision(scores, labels) != ap) ++mismatches;
  }
  return {"metrics", mismatches == 0,
          std::to_string(opt.metric_instances) + " random tied instances, " + std::to_string(mismatches) + " mismatches"};
}

SelfTestResult check_zero_init(const SelfTestOptions& opt) {
  ModelConfig cfg;
  const GroupedModel model = build_model(cfg, opt.seed);
  Rng rng(derive_seed(opt.seed, "zero-init"));
  const Tensor x = gaussian({2, cfg.patch_grid().cells(), cfg.channels}, 1.0, rng);
  std::size_t nonzero = 0;
  ad::NoGradGuard no_grad;
  for (std::size_t g = 0; g < cfg.groups; ++g) {
    const Tensor d = adapter_forward(model.vision_adapter(g), ad::constant(x), cfg.patch_grid()).value();
    for (double v : d.values()) nonzero += v != 0.0;
  }
  return {"zero_init", nonzero == 0, std::to_string(nonzero) + " non-zero adapter outputs at initialization"};
}

}  // namespace

std::vector<SelfTestResult> run_selftest(const SelfTestOptions& options) {
  std::vector<SelfTestResult> out;
  out.push_back(guarded("conv2d_same", [&] { return check_conv(options); }));
  out.push_back(guarded("softmax", [&] { return check_softmax(options); }));
  out.push_back(guarded("metrics", [&] { return check_metrics(options); }));
  out.push_back(guarded("zero_init", [&] { return check_zero_init(options); }));
  out.push_back(guarded("gradient", [&] { return check_gradients(options); }));
  return out;
}

}  // namespace convfuse
