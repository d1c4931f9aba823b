// SPDX-License-Identifier: Apache-2.0

#include "convfuse/gradcheck.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <tuple>
#include <variant>

#include "convfuse/error.hpp"
#include "convfuse/harness.hpp"
#include "convfuse/kernels.hpp"
#include "convfuse/random.hpp"

namespace convfuse {

namespace {

using LD = long double;

enum class Stage { VisionAdapter, TextLora, Gateway };

struct Locus {
  Stage stage;
  std::size_t group = 0;
};

Locus locate(const std::string& name) {
  auto group_of = [&](std::size_t prefix_len) { return static_cast<std::size_t>(std::stoul(name.substr(prefix_len))); };
  if (name.rfind("vision.adapter.", 0) == 0) return {Stage::VisionAdapter, group_of(15)};
  if (name.rfind("text.lora.", 0) == 0) return {Stage::TextLora, group_of(10)};
  if (name.rfind("gateway.", 0) == 0) return {Stage::Gateway, 0};
  throw ConfigError("gradcheck: no stage for trainable parameter '" + name + "'");
}

// ---- extended-precision encoder replica ---------------------------------------
// Mirrors the double-precision forward op for op. Used to re-evaluate entries
// whose double difference quotient is inconclusive: re-running downstream
// encoder groups in double leaves ~1e-16 of noise in the loss, which after
// division by 2h is comparable to gradients near 1e-8.

struct Seq {
  std::size_t b = 0, l = 0, c = 0;
  std::vector<LD> v;  // (b, l, c)

  LD* row(std::size_t bi, std::size_t t) { return v.data() + (bi * l + t) * c; }
  const LD* row(std::size_t bi, std::size_t t) const { return v.data() + (bi * l + t) * c; }
};

Seq to_seq(const Tensor& x) {
  Seq s{x.dim(0), x.dim(1), x.dim(2), {}};
  s.v.assign(x.values().begin(), x.values().end());
  return s;
}

// rows (m, k) times w (k, n).
std::vector<LD> matmul(const LD* a, std::size_t m, std::size_t k, const Tensor& w) {
  const std::size_t n = w.dim(1);
  std::vector<LD> out(m * n, 0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const LD x = a[i * k + p];
      const double* wr = w.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += x * wr[j];
    }
  return out;
}

Seq linear(const Seq& x, const Tensor& w) {
  return {x.b, x.l, w.dim(1), matmul(x.v.data(), x.b * x.l, x.c, w)};
}

Seq layer_norm(const Seq& x) {
  Seq out = x;
  for (std::size_t r = 0; r < x.b * x.l; ++r) {
    const LD* xi = x.v.data() + r * x.c;
    LD mean = 0, var = 0;
    for (std::size_t i = 0; i < x.c; ++i) mean += xi[i];
    mean /= static_cast<LD>(x.c);
    for (std::size_t i = 0; i < x.c; ++i) var += (xi[i] - mean) * (xi[i] - mean);
    var /= static_cast<LD>(x.c);
    const LD inv = 1 / std::sqrt(var + static_cast<LD>(kernels::kLayerNormEps));
    for (std::size_t i = 0; i < x.c; ++i) out.v[r * x.c + i] = (xi[i] - mean) * inv;
  }
  return out;
}

void add_into(Seq& x, const Seq& y) {
  for (std::size_t i = 0; i < x.v.size(); ++i) x.v[i] += y.v[i];
}

Seq attention(const Seq& x, const TransformerBlock& blk, std::size_t heads, bool causal) {
  const Seq q = linear(x, blk.wq.value()), k = linear(x, blk.wk.value()), v = linear(x, blk.wv.value());
  const std::size_t l = x.l, c = x.c, d = c / heads;
  const LD scale = 1 / std::sqrt(static_cast<LD>(d));
  Seq ctx{x.b, l, c, std::vector<LD>(x.v.size(), 0)};
  std::vector<LD> row(l);
  for (std::size_t bi = 0; bi < x.b; ++bi)
    for (std::size_t hd = 0; hd < heads; ++hd)
      for (std::size_t i = 0; i < l; ++i) {
        const std::size_t visible = causal ? i + 1 : l;
        const LD* qi = q.row(bi, i) + hd * d;
        LD mx = -std::numeric_limits<LD>::infinity(), sum = 0;
        for (std::size_t j = 0; j < visible; ++j) {
          const LD* kj = k.row(bi, j) + hd * d;
          LD s = 0;
          for (std::size_t e = 0; e < d; ++e) s += qi[e] * kj[e];
          mx = std::max(mx, row[j] = s * scale);
        }
        for (std::size_t j = 0; j < visible; ++j) sum += (row[j] = std::exp(row[j] - mx));
        LD* ci = ctx.row(bi, i) + hd * d;
        for (std::size_t j = 0; j < visible; ++j) {
          const LD* vj = v.row(bi, j) + hd * d;
          for (std::size_t e = 0; e < d; ++e) ci[e] += row[j] / sum * vj[e];
        }
      }
  return linear(ctx, blk.wo.value());
}

Seq block_forward(const Seq& x, const TransformerBlock& blk, std::size_t heads, bool causal) {
  Seq h = x;
  add_into(h, attention(layer_norm(x), blk, heads, causal));
  Seq mid = linear(layer_norm(h), blk.mlp_in.value());
  for (auto& z : mid.v) z = z / 2 * (1 + std::erf(z / std::sqrt(LD{2})));
  add_into(h, linear(mid, blk.mlp_out.value()));
  return h;
}

// Planes (ch, H, W) with zero padding; kernel (cout, cin, k, k).
std::vector<LD> conv_same(const std::vector<LD>& x, std::size_t cin, Grid g, const Tensor& ker, LD scale) {
  const std::size_t cout = ker.dim(0), k = ker.dim(2), h = g.height, w = g.width;
  const long pad = static_cast<long>(k / 2);
  std::vector<LD> out(cout * h * w, 0);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) {
        LD acc = 0;
        for (std::size_t i = 0; i < cin; ++i)
          for (std::size_t ky = 0; ky < k; ++ky) {
            const long sy = static_cast<long>(y + ky) - pad;
            if (sy < 0 || sy >= static_cast<long>(h)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long sx = static_cast<long>(xx + kx) - pad;
              if (sx < 0 || sx >= static_cast<long>(w)) continue;
              acc += ker.at(o, i, ky, kx) * x[(i * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
            }
          }
        out[(o * h + y) * w + xx] = acc * scale;
      }
  return out;
}

// Token rows (cells, ch) <-> planes (ch, cells).
std::vector<LD> transpose(const std::vector<LD>& a, std::size_t rows, std::size_t cols) {
  std::vector<LD> out(a.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  return out;
}

// Patch tokens (cells, C) -> adapter update (cells, C).
std::vector<LD> adapter_update(const VisionAdapter& adapter, const LD* patches, std::size_t cells, std::size_t c,
                               Grid grid) {
  if (const auto* lr = std::get_if<LowRankAdapter>(&adapter)) {
    const std::size_t r = lr->w_down().value().dim(1);
    return matmul(matmul(patches, cells, c, lr->w_down().value()).data(), cells, r, lr->w_up().value());
  }
  const auto& a = std::get<ConvLoraAdapter>(adapter);
  const std::size_t r = a.w_down().value().dim(1);
  const auto& kernels = a.config().branch_kernels;
  const std::vector<LD> projected = transpose(matmul(patches, cells, c, a.w_down().value()), cells, r);
  std::vector<LD> cat;
  for (std::size_t k : kernels) {
    const LD inv_k = 1 / static_cast<LD>(k);
    const auto conv = conv_same(projected, r, grid, a.conv_down(k).value(), inv_k);
    const auto refined = transpose(conv_same(conv, r, grid, a.conv_up(k).value(), inv_k), r, cells);
    const auto up = transpose(matmul(refined.data(), cells, r, a.w_up().value()), cells, c);
    cat.insert(cat.end(), up.begin(), up.end());
  }
  return transpose(conv_same(cat, kernels.size() * c, grid, a.fuse().value(), 1), c, cells);
}

// ---- staged loss ----------------------------------------------------------------

// Everything the loss tail reads, widened to long double.
struct Levels {
  std::vector<std::vector<LD>> vision;  // per level, (B, P, C)
  std::vector<LD> cls;                  // (B, C)
  std::vector<std::vector<LD>> text;    // per level, (2, C)
};

std::vector<LD> widen(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

// Activations shared by every perturbation. Built without recording a graph.
class StagedLoss {
 public:
  StagedLoss(const GroupedModel& model, const std::vector<const Sample*>& batch, const LossConfig& loss)
      : model_(model), loss_(loss), masks_(masks_tensor(batch)) {
    for (const Sample* s : batch) labels_.push_back(s->label);
    const std::size_t n = model.config().groups;
    ad::Var x = model.patchify(ad::constant(images_tensor(batch)));
    wide_vision_pre_.push_back(to_seq(x.value()));
    for (std::size_t g = 0; g < n; ++g) {
      x = model.run_vision_group(g, x);
      vision_pre_.push_back(x);
      x = model.apply_vision_adapter(g, x);
    }
    ad::Var t = model.embed_prompts();
    wide_text_pre_.push_back(to_seq(t.value()));
    for (std::size_t g = 0; g < n; ++g) {
      t = model.run_text_group(g, t);
      text_pre_.push_back(t);
      t = model.apply_text_lora(g, t);
    }
    vision_ = vision_from(0);
    text_ = text_from(0);

    // Wide caches hold each group's input; the group itself is re-run on use.
    Seq wx = wide_vision_pre_.front();
    Seq wt = wide_text_pre_.front();
    for (std::size_t g = 0; g + 1 < n; ++g) {
      wx = wide_vision_step(g, wx, nullptr);
      wide_vision_pre_.push_back(wx);
      wt = wide_text_step(g, wt, nullptr);
      wide_text_pre_.push_back(wt);
    }
    wide_ = {};
    wide_vision_from(0, wide_);
    wide_text_from(0, wide_);
  }

  long double eval(const Locus& at) const {
    switch (at.stage) {
      case Stage::VisionAdapter:
        return total(widen_levels(vision_from(at.group), text_));
      case Stage::TextLora:
        return total(widen_levels(vision_, text_from(at.group)));
      case Stage::Gateway:
        break;
    }
    return total(widen_levels(vision_, text_));
  }

  /// Same loss with the encoder groups downstream of the locus also run in
  /// long double.
  long double eval_wide(const Locus& at) const {
    Levels lv = wide_;
    if (at.stage == Stage::VisionAdapter) wide_vision_from(at.group, lv);
    if (at.stage == Stage::TextLora) wide_text_from(at.group, lv);
    return total(lv);
  }

 private:
  VisionOutputs vision_from(std::size_t group) const {
    VisionOutputs out;
    const std::size_t cells = model_.config().patch_grid().cells();
    for (std::size_t g = 0; g < group; ++g) out.levels.push_back(vision_.levels[g]);
    ad::Var x = model_.apply_vision_adapter(group, vision_pre_[group]);
    out.levels.push_back(ad::slice_tokens(x, 1, cells));
    for (std::size_t g = group + 1; g < vision_pre_.size(); ++g) {
      x = model_.apply_vision_adapter(g, model_.run_vision_group(g, x));
      out.levels.push_back(ad::slice_tokens(x, 1, cells));
    }
    out.cls_final = ad::select_token(x, 0);
    return out;
  }

  TextOutputs text_from(std::size_t group) const {
    TextOutputs out;
    for (std::size_t g = 0; g < group; ++g) out.levels.push_back(text_.levels[g]);
    ad::Var t = model_.apply_text_lora(group, text_pre_[group]);
    out.levels.push_back(model_.pool_text(t));
    for (std::size_t g = group + 1; g < text_pre_.size(); ++g) {
      t = model_.apply_text_lora(g, model_.run_text_group(g, t));
      out.levels.push_back(model_.pool_text(t));
    }
    return out;
  }

  static Levels widen_levels(const VisionOutputs& v, const TextOutputs& t) {
    Levels lv;
    for (const auto& x : v.levels) lv.vision.push_back(widen(x.value()));
    lv.cls = widen(v.cls_final.value());
    for (const auto& x : t.levels) lv.text.push_back(widen(x.value()));
    return lv;
  }

  // One vision group plus its adapter; stores the patch-token level if asked.
  Seq wide_vision_step(std::size_t g, const Seq& in, std::vector<LD>* level) const {
    const ModelConfig& mc = model_.config();
    const Grid grid = mc.patch_grid();
    const std::size_t cells = grid.cells(), c = mc.channels;
    Seq x = in;
    for (std::size_t i = 0; i < mc.blocks_per_group; ++i)
      x = block_forward(x, model_.vision_blocks().at(g * mc.blocks_per_group + i), mc.heads, false);
    for (std::size_t bi = 0; bi < x.b; ++bi) {
      const auto delta = adapter_update(model_.vision_adapter(g), x.row(bi, 1), cells, c, grid);
      LD* patches = x.row(bi, 1);
      for (std::size_t i = 0; i < cells * c; ++i) patches[i] += delta[i];
    }
    if (level) {
      level->clear();
      for (std::size_t bi = 0; bi < x.b; ++bi) level->insert(level->end(), x.row(bi, 1), x.row(bi, 1) + cells * c);
    }
    return x;
  }

  Seq wide_text_step(std::size_t g, const Seq& in, std::vector<LD>* level) const {
    const ModelConfig& mc = model_.config();
    Seq x = in;
    for (std::size_t i = 0; i < mc.blocks_per_group; ++i)
      x = block_forward(x, model_.text_blocks().at(g * mc.blocks_per_group + i), mc.heads, true);
    const LowRankAdapter& lora = model_.text_lora(g);
    const std::size_t r = lora.w_down().value().dim(1);
    const auto delta = matmul(matmul(x.v.data(), x.b * x.l, x.c, lora.w_down().value()).data(), x.b * x.l, r,
                              lora.w_up().value());
    for (std::size_t i = 0; i < x.v.size(); ++i) x.v[i] += delta[i];
    if (level) {
      level->clear();
      for (std::size_t bi = 0; bi < x.b; ++bi) level->insert(level->end(), x.row(bi, x.l - 1), x.row(bi, x.l - 1) + x.c);
    }
    return x;
  }

  void wide_vision_from(std::size_t group, Levels& lv) const {
    const std::size_t n = wide_vision_pre_.size();
    lv.vision.resize(n);
    Seq x = wide_vision_pre_[group];
    for (std::size_t g = group; g < n; ++g) x = wide_vision_step(g, x, &lv.vision[g]);
    lv.cls.clear();
    for (std::size_t bi = 0; bi < x.b; ++bi) lv.cls.insert(lv.cls.end(), x.row(bi, 0), x.row(bi, 0) + x.c);
  }

  void wide_text_from(std::size_t group, Levels& lv) const {
    const std::size_t n = wide_text_pre_.size();
    lv.text.resize(n);
    Seq t = wide_text_pre_[group];
    for (std::size_t g = group; g < n; ++g) t = wide_text_step(g, t, &lv.text[g]);
  }

  // Gateway, maps and losses are evaluated in extended precision: a
  // double-valued loss carries ~1 ulp of rounding noise, which after division
  // by 2h swamps gradients near 1e-7.
  long double total(const Levels& lv) const {
    const ModelConfig& mc = model_.config();
    const FusionGateway& gw = model_.gateway();
    const Grid grid = mc.patch_grid(), pixels = mc.pixel_grid();
    const std::size_t n = gw.levels(), c = mc.channels, b = lv.cls.size() / c, cells = grid.cells();
    const LD tau = mc.temperature;

    auto cosine = [](const LD* x, const LD* y, std::size_t len) {
      LD dot = 0, nx = 0, ny = 0;
      for (std::size_t e = 0; e < len; ++e) {
        dot += x[e] * y[e];
        nx += x[e] * x[e];
        ny += y[e] * y[e];
      }
      return nx == 0 || ny == 0 ? LD{0} : dot / std::sqrt(nx * ny);
    };

    // Aggregated (B, H, W) map at patch resolution.
    std::vector<LD> agg(b * cells, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::vector<LD>& vis = lv.vision[i];
      for (std::size_t bi = 0; bi < b; ++bi) {
        std::array<std::vector<LD>, 2> desc;
        for (SemanticState s : kSemanticStates) {
          const std::size_t si = index_of(s);
          std::vector<LD> w(n, 0);
          if (gw.mode() == FusionMode::Static) {
            w[i] = 1;
          } else {
            const Tensor& w1 = gw.gate(s).w1().value();
            const Tensor& w2 = gw.gate(s).w2().value();
            const std::size_t hidden = w1.dim(1);
            std::vector<LD> g(c, 0), hid(hidden, 0);
            for (std::size_t l = 0; l < cells; ++l)
              for (std::size_t e = 0; e < c; ++e) g[e] += vis[(bi * cells + l) * c + e];
            for (auto& x : g) x /= static_cast<LD>(cells);
            for (std::size_t k = 0; k < hidden; ++k) {
              LD acc = 0;
              for (std::size_t e = 0; e < c; ++e) acc += g[e] * w1.at(e, k);
              hid[k] = std::tanh(acc);
            }
            LD mx = -std::numeric_limits<LD>::infinity();
            for (std::size_t j = 0; j < n; ++j) {
              for (std::size_t k = 0; k < hidden; ++k) w[j] += hid[k] * w2.at(k, j);
              mx = std::max(mx, w[j]);
            }
            LD z = 0;
            for (auto& x : w) z += (x = std::exp(x - mx));
            for (auto& x : w) x /= z;
          }
          desc[si].assign(c, 0);
          for (std::size_t j = 0; j < n; ++j)
            for (std::size_t e = 0; e < c; ++e) desc[si][e] += w[j] * lv.text[j][si * c + e];
        }
        for (std::size_t l = 0; l < cells; ++l) {
          const LD* tok = vis.data() + (bi * cells + l) * c;
          const LD sn = cosine(tok, desc[0].data(), c) / tau, sa = cosine(tok, desc[1].data(), c) / tau;
          agg[bi * cells + l] += 1 / (1 + std::exp(sn - sa));
        }
      }
    }
    for (auto& x : agg) x /= static_cast<LD>(n);

    // Align-corners bilinear upsampling.
    auto taps = [](std::size_t src, std::size_t dst, std::size_t o) {
      const LD pos = dst == 1 ? LD{0} : static_cast<LD>(o) * static_cast<LD>(src - 1) / static_cast<LD>(dst - 1);
      const std::size_t i0 = std::min(static_cast<std::size_t>(pos), src - 1);
      const std::size_t i1 = std::min(i0 + 1, src - 1);
      return std::tuple<std::size_t, std::size_t, LD>{i0, i1, pos - static_cast<LD>(i0)};
    };
    const std::size_t per = pixels.cells();
    std::vector<LD> pred(b * per);
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t oy = 0; oy < pixels.height; ++oy) {
        const auto [y0, y1, fy] = taps(grid.height, pixels.height, oy);
        for (std::size_t ox = 0; ox < pixels.width; ++ox) {
          const auto [x0, x1, fx] = taps(grid.width, pixels.width, ox);
          const LD* src = agg.data() + bi * cells;
          const LD top = (1 - fx) * src[y0 * grid.width + x0] + fx * src[y0 * grid.width + x1];
          const LD bot = (1 - fx) * src[y1 * grid.width + x0] + fx * src[y1 * grid.width + x1];
          pred[bi * per + oy * pixels.width + ox] = (1 - fy) * top + fy * bot;
        }
      }

    const LD gamma = loss_.focal_gamma, alpha = loss_.focal_alpha;
    LD focal = 0, dice = 0;
    for (std::size_t i = 0; i < b; ++i) {
      LD inter = 0, sp = 0, st = 0;
      for (std::size_t k = 0; k < per; ++k) {
        const LD p = pred[i * per + k], y = masks_[i * per + k];
        const LD q = std::clamp<LD>(p, kProbabilityClamp, 1.0L - kProbabilityClamp);
        focal += y > 0.5L ? -alpha * std::pow(1 - q, gamma) * std::log(q)
                          : -(1 - alpha) * std::pow(q, gamma) * std::log(1 - q);
        inter += p * y;
        sp += p;
        st += y;
      }
      dice += 1 - (2 * inter + loss_.dice_smooth) / (sp + st + loss_.dice_smooth);
    }
    focal /= static_cast<long double>(pred.size());
    dice /= static_cast<long double>(b);

    const LD* anchor = lv.text.back().data();
    LD ce = 0;
    for (std::size_t i = 0; i < b; ++i) {
      const LD sn = cosine(lv.cls.data() + i * c, anchor, c) / tau;
      const LD sa = cosine(lv.cls.data() + i * c, anchor + c, c) / tau;
      const LD mx = std::max(sn, sa);
      const LD lse = mx + std::log(std::exp(sn - mx) + std::exp(sa - mx));
      ce -= (labels_[i] ? sa : sn) - lse;
    }
    ce /= static_cast<LD>(b);
    return loss_.focal_weight * focal + loss_.dice_weight * dice + loss_.cls_weight * ce;
  }

  const GroupedModel& model_;
  const LossConfig& loss_;
  Tensor masks_;
  std::vector<int> labels_;
  std::vector<ad::Var> vision_pre_, text_pre_;
  VisionOutputs vision_;
  TextOutputs text_;
  std::vector<Seq> wide_vision_pre_, wide_text_pre_;
  Levels wide_;
};

}  // namespace

void perturb_trainables(GroupedModel& model, double stddev, std::uint64_t seed) {
  for (auto& p : model.trainable_parameters()) {
    Rng rng(derive_seed(seed, p.name));
    const Tensor noise = gaussian(p.var.shape(), stddev * stddev, rng);
    Tensor& w = p.var.mutable_value();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += noise[i];
  }
}

GradCheckReport gradcheck_model(const GroupedModel& model, const std::vector<const Sample*>& batch,
                                const LossConfig& loss, const GradCheckOptions& options) {
  ParamList params = model.trainable_parameters();
  for (auto& p : params) p.var.zero_grad();
  ad::backward(batch_loss(model, batch, loss).total);
  std::vector<Tensor> analytic;
  for (auto& p : params) {
    analytic.push_back(p.var.has_grad() ? p.var.grad() : Tensor(p.var.shape(), 0.0));
    p.var.zero_grad();
  }

  ad::NoGradGuard no_grad;
  const StagedLoss staged(model, batch, loss);
  GradCheckReport report;
  const double h = options.step;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Locus at = locate(params[k].name);
    Tensor& w = params[k].var.mutable_value();
    report.trainable += w.size();
    for (std::size_t i = 0; i < w.size(); i += std::max<std::size_t>(options.stride, 1)) {
      const double a = analytic[k][i];
      if (std::abs(a) <= options.min_abs_grad) {
        ++report.below_threshold;
        continue;
      }
      const double saved = w[i];
      w[i] = saved + h;
      const long double up = staged.eval(at);
      w[i] = saved - h;
      const long double down = staged.eval(at);
      double numeric = static_cast<double>((up - down) / (2.0L * h));
      double rel = std::abs(a - numeric) / std::max(std::abs(a), std::abs(numeric));
      if (!(rel < options.rel_tol)) {
        // Inconclusive in double: repeat the same difference with the
        // downstream encoder groups in long double.
        w[i] = saved + h;
        const long double wide_up = staged.eval_wide(at);
        w[i] = saved - h;
        const long double wide_down = staged.eval_wide(at);
        numeric = static_cast<double>((wide_up - wide_down) / (2.0L * h));
        rel = std::abs(a - numeric) / std::max(std::abs(a), std::abs(numeric));
        ++report.refined;
      }
      w[i] = saved;
      ++report.checked;
      const GradCheckEntry entry{params[k].name, i, a, numeric, rel};
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = entry;
      }
      if (!(rel < options.rel_tol)) {
        ++report.failures;
        if (report.failed.size() < 16) report.failed.push_back(entry);
      }
    }
  }
  return report;
}

GradCheckReport gradcheck_default_model(const GradCheckOptions& options) {
  RunConfig cfg;
  cfg.train_samples = 16;
  cfg.test_samples = 1;
  const Corpus corpus = load_corpus(cfg);
  const auto it = std::find_if(corpus.train.begin(), corpus.train.end(), [](const Sample& s) { return s.label == 1; });
  GroupedModel model = build_model(cfg.model, cfg.model_seed);
  perturb_trainables(model, 0.2, derive_seed(cfg.model_seed, "gradcheck"));
  return gradcheck_model(model, {&*it}, cfg.loss, options);
}

}  // namespace convfuse
