// SPDX-License-Identifier: Apache-2.0

#include "convfuse/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "convfuse/error.hpp"

namespace convfuse::kernels {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

// (Cin*k*k, H*W) patch matrix for one batch item.
void im2col(const double* x, std::size_t cin, std::size_t h, std::size_t w, std::size_t k,
            double* cols) {
  const auto pad = static_cast<long>(k / 2);
  const std::size_t hw = h * w;
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols + ((c * k + ky) * k + kx) * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y + ky) - pad;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const long sx = static_cast<long>(xx + kx) - pad;
            const bool inside = sy >= 0 && sy < static_cast<long>(h) && sx >= 0 && sx < static_cast<long>(w);
            row[y * w + xx] = inside ? x[(c * h + sy) * w + sx] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, std::size_t cin, std::size_t h, std::size_t w, std::size_t k,
            double* dx) {
  const auto pad = static_cast<long>(k / 2);
  const std::size_t hw = h * w;
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = cols + ((c * k + ky) * k + kx) * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y + ky) - pad;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const long sx = static_cast<long>(xx + kx) - pad;
            if (sx < 0 || sx >= static_cast<long>(w)) continue;
            dx[(c * h + sy) * w + sx] += row[y * w + xx];
          }
        }
      }
    }
  }
}

void check_conv_args(const Tensor& x, const Tensor& kernel) {
  require_rank(x, 4, "conv2d_same input");
  require_rank(kernel, 4, "conv2d_same kernel");
  const std::size_t k = kernel.dim(2);
  if (kernel.dim(3) != k) throw ConfigError("conv2d_same: kernel must be square");
  if (k % 2 == 0) throw ConfigError("conv2d_same: kernel size must be odd, got " + std::to_string(k));
  if (kernel.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d_same: kernel expects " + std::to_string(kernel.dim(1)) +
                     " input channels, input has " + std::to_string(x.dim(1)));
  }
}

}  // namespace

Tensor reshape_seq_to_2d(const Tensor& x, Grid grid) {
  require_rank(x, 3, "reshape_seq_to_2d");
  const std::size_t b = x.dim(0), l = x.dim(1), c = x.dim(2);
  if (l != grid.cells()) {
    throw ShapeError("reshape_seq_to_2d: sequence length " + std::to_string(l) + " != grid " +
                     std::to_string(grid.height) + "x" + std::to_string(grid.width));
  }
  Tensor out({b, c, grid.height, grid.width});
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t ci = 0; ci < c; ++ci) out[(bi * c + ci) * l + t] = x[(bi * l + t) * c + ci];
  return out;
}

Tensor reshape_2d_to_seq(const Tensor& x) {
  require_rank(x, 4, "reshape_2d_to_seq");
  const std::size_t b = x.dim(0), c = x.dim(1), l = x.dim(2) * x.dim(3);
  Tensor out({b, l, c});
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t t = 0; t < l; ++t) out[(bi * l + t) * c + ci] = x[(bi * c + ci) * l + t];
  return out;
}

void gemm(const double* a, bool trans_a, const double* b, bool trans_b, double* c, std::size_t m,
          std::size_t n, std::size_t k, bool accumulate) {
  const auto mi = static_cast<Eigen::Index>(m), ni = static_cast<Eigen::Index>(n),
             ki = static_cast<Eigen::Index>(k);
  ConstMap am(a, trans_a ? ki : mi, trans_a ? mi : ki);
  ConstMap bm(b, trans_b ? ni : ki, trans_b ? ki : ni);
  MutMap cm(c, mi, ni);
  if (!accumulate) cm.setZero();
  if (!trans_a && !trans_b) {
    cm.noalias() += am * bm;
  } else if (trans_a && !trans_b) {
    cm.noalias() += am.transpose() * bm;
  } else if (!trans_a && trans_b) {
    cm.noalias() += am * bm.transpose();
  } else {
    cm.noalias() += am.transpose() * bm.transpose();
  }
}

Tensor linear(const Tensor& x, const Tensor& w) {
  require_rank(w, 2, "linear weight");
  if (x.rank() == 0 || x.shape().back() != w.dim(0)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(w.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = w.dim(1);
  Tensor out(out_shape);
  const std::size_t rows = x.size() / w.dim(0);
  gemm(x.data(), false, w.data(), false, out.data(), rows, w.dim(1), w.dim(0), false);
  return out;
}

void linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor* dx, Tensor* dw) {
  const std::size_t rows = x.size() / w.dim(0);
  if (dx) {
    *dx = Tensor(x.shape());
    gemm(dy.data(), false, w.data(), true, dx->data(), rows, w.dim(0), w.dim(1), false);
  }
  if (dw) {
    *dw = Tensor(w.shape());
    gemm(x.data(), true, dy.data(), false, dw->data(), w.dim(0), w.dim(1), rows, false);
  }
}

Tensor conv2d_same(const Tensor& x, const Tensor& kernel) {
  check_conv_args(x, kernel);
  const std::size_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2), hw = h * w;
  const std::size_t patch = cin * k * k;
  Tensor out({b, cout, h, w});
  if (k == 1) {
    for (std::size_t bi = 0; bi < b; ++bi)
      gemm(kernel.data(), false, x.data() + bi * cin * hw, false, out.data() + bi * cout * hw, cout,
           hw, cin, false);
    return out;
  }
  std::vector<double> cols(patch * hw);
  for (std::size_t bi = 0; bi < b; ++bi) {
    im2col(x.data() + bi * cin * hw, cin, h, w, k, cols.data());
    gemm(kernel.data(), false, cols.data(), false, out.data() + bi * cout * hw, cout, hw, patch, false);
  }
  return out;
}

void conv2d_same_backward(const Tensor& x, const Tensor& kernel, const Tensor& dy, Tensor* dx,
                          Tensor* dkernel) {
  const std::size_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2), hw = h * w;
  const std::size_t patch = cin * k * k;
  if (dx) *dx = Tensor(x.shape());
  if (dkernel) *dkernel = Tensor(kernel.shape());
  std::vector<double> cols(patch * hw), dcols(patch * hw);
  for (std::size_t bi = 0; bi < b; ++bi) {
    const double* dyb = dy.data() + bi * cout * hw;
    if (dkernel) {
      const double* colp = x.data() + bi * cin * hw;
      if (k != 1) {
        im2col(x.data() + bi * cin * hw, cin, h, w, k, cols.data());
        colp = cols.data();
      }
      gemm(dyb, false, colp, true, dkernel->data(), cout, patch, hw, true);
    }
    if (dx) {
      if (k == 1) {
        gemm(kernel.data(), true, dyb, false, dx->data() + bi * cin * hw, cin, hw, cout, true);
      } else {
        gemm(kernel.data(), true, dyb, false, dcols.data(), patch, hw, cout, false);
        col2im(dcols.data(), cin, h, w, k, dx->data() + bi * cin * hw);
      }
    }
  }
}

std::vector<double> softmax(std::span<const double> v, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("softmax: temperature must be positive");
  std::vector<double> out(v.size());
  if (v.empty()) return out;
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp((v[i] - mx) / temperature);
    sum += out[i];
  }
  for (double& o : out) o /= sum;
  return out;
}

CosineSim cosine_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine_sim: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return {0.0, true};
  return {dot / (std::sqrt(na) * std::sqrt(nb)), false};
}

Tensor gap(const Tensor& x) {
  require_rank(x, 3, "gap");
  const std::size_t b = x.dim(0), l = x.dim(1), c = x.dim(2);
  Tensor out({b, c});
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t ci = 0; ci < c; ++ci) out[bi * c + ci] += x[(bi * l + t) * c + ci];
    for (std::size_t ci = 0; ci < c; ++ci) out[bi * c + ci] /= static_cast<double>(l);
  }
  return out;
}

namespace {

struct Tap {
  std::size_t i0, i1;
  double frac;
};

std::vector<Tap> interpolation_taps(std::size_t src, std::size_t dst) {
  std::vector<Tap> taps(dst);
  for (std::size_t o = 0; o < dst; ++o) {
    const double pos = dst > 1 ? static_cast<double>(o) * static_cast<double>(src - 1) /
                                     static_cast<double>(dst - 1)
                               : 0.0;
    auto i0 = static_cast<std::size_t>(std::floor(pos));
    if (i0 >= src) i0 = src - 1;
    const std::size_t i1 = std::min(i0 + 1, src - 1);
    taps[o] = {i0, i1, pos - static_cast<double>(i0)};
  }
  return taps;
}

void check_upsample(const Shape& source, Grid target) {
  if (source.size() != 2 && source.size() != 3) throw ShapeError("bilinear_upsample: map must be rank 2 or 3");
  const std::size_t h = source[source.size() - 2], w = source.back();
  if (target.height < h || target.width < w) {
    throw ShapeError("bilinear_upsample: target " + std::to_string(target.height) + "x" +
                     std::to_string(target.width) + " smaller than source " + std::to_string(h) +
                     "x" + std::to_string(w));
  }
}

}  // namespace

Tensor bilinear_upsample(const Tensor& m, Grid target) {
  check_upsample(m.shape(), target);
  const bool batched = m.rank() == 3;
  const std::size_t b = batched ? m.dim(0) : 1;
  const std::size_t h = m.shape()[m.rank() - 2], w = m.shape().back();
  const auto ty = interpolation_taps(h, target.height);
  const auto tx = interpolation_taps(w, target.width);
  Tensor out(batched ? Shape{b, target.height, target.width} : Shape{target.height, target.width});
  for (std::size_t bi = 0; bi < b; ++bi) {
    const double* src = m.data() + bi * h * w;
    double* dst = out.data() + bi * target.cells();
    for (std::size_t oy = 0; oy < target.height; ++oy) {
      const Tap& a = ty[oy];
      for (std::size_t ox = 0; ox < target.width; ++ox) {
        const Tap& c = tx[ox];
        const double top = (1.0 - c.frac) * src[a.i0 * w + c.i0] + c.frac * src[a.i0 * w + c.i1];
        const double bot = (1.0 - c.frac) * src[a.i1 * w + c.i0] + c.frac * src[a.i1 * w + c.i1];
        dst[oy * target.width + ox] = (1.0 - a.frac) * top + a.frac * bot;
      }
    }
  }
  return out;
}

Tensor bilinear_upsample_backward(const Shape& source_shape, const Tensor& dy) {
  const bool batched = source_shape.size() == 3;
  const std::size_t b = batched ? source_shape[0] : 1;
  const std::size_t h = source_shape[source_shape.size() - 2], w = source_shape.back();
  const std::size_t th = dy.shape()[dy.rank() - 2], tw = dy.shape().back();
  const auto ty = interpolation_taps(h, th);
  const auto tx = interpolation_taps(w, tw);
  Tensor dm(source_shape);
  for (std::size_t bi = 0; bi < b; ++bi) {
    double* dsrc = dm.data() + bi * h * w;
    const double* g = dy.data() + bi * th * tw;
    for (std::size_t oy = 0; oy < th; ++oy) {
      const Tap& a = ty[oy];
      for (std::size_t ox = 0; ox < tw; ++ox) {
        const Tap& c = tx[ox];
        const double v = g[oy * tw + ox];
        dsrc[a.i0 * w + c.i0] += (1.0 - a.frac) * (1.0 - c.frac) * v;
        dsrc[a.i0 * w + c.i1] += (1.0 - a.frac) * c.frac * v;
        dsrc[a.i1 * w + c.i0] += a.frac * (1.0 - c.frac) * v;
        dsrc[a.i1 * w + c.i1] += a.frac * c.frac * v;
      }
    }
  }
  return dm;
}

Tensor layer_norm(const Tensor& x) {
  const std::size_t c = x.shape().back(), rows = x.size() / c;
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = x.data() + r * c;
    double mean = 0.0;
    for (std::size_t i = 0; i < c; ++i) mean += xi[i];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t i = 0; i < c; ++i) var += (xi[i] - mean) * (xi[i] - mean);
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t i = 0; i < c; ++i) out[r * c + i] = (xi[i] - mean) * inv;
  }
  return out;
}

Tensor layer_norm_backward(const Tensor& x, const Tensor& dy) {
  const std::size_t c = x.shape().back(), rows = x.size() / c;
  const Tensor y = layer_norm(x);
  Tensor dx(x.shape());
  const double n = static_cast<double>(c);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = x.data() + r * c;
    double mean = 0.0;
    for (std::size_t i = 0; i < c; ++i) mean += xi[i];
    mean /= n;
    double var = 0.0;
    for (std::size_t i = 0; i < c; ++i) var += (xi[i] - mean) * (xi[i] - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    double mean_dy = 0.0, mean_dy_y = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      mean_dy += dy[r * c + i];
      mean_dy_y += dy[r * c + i] * y[r * c + i];
    }
    mean_dy /= n;
    mean_dy_y /= n;
    for (std::size_t i = 0; i < c; ++i)
      dx[r * c + i] = inv * (dy[r * c + i] - mean_dy - y[r * c + i] * mean_dy_y);
  }
  return dx;
}

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
  return out;
}

Tensor gelu_backward(const Tensor& x, const Tensor& dy) {
  Tensor dx(x.shape());
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double cdf = 0.5 * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
    const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
    dx[i] = dy[i] * (cdf + x[i] * pdf);
  }
  return dx;
}

Tensor attention(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                 const Tensor& wo, std::size_t heads, bool causal, AttentionCache* cache) {
  require_rank(x, 3, "attention");
  const std::size_t b = x.dim(0), l = x.dim(1), c = x.dim(2);
  if (heads == 0 || c % heads != 0) throw ConfigError("attention: channels not divisible by heads");
  const std::size_t d = c / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  Tensor q = linear(x, wq), k = linear(x, wk), v = linear(x, wv);
  Tensor probs({b, heads, l, l});
  Tensor ctx({b, l, c});
  std::vector<double> row(l);
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t hd = 0; hd < heads; ++hd) {
      double* p = probs.data() + (bi * heads + hd) * l * l;
      for (std::size_t i = 0; i < l; ++i) {
        const std::size_t visible = causal ? i + 1 : l;
        const double* qi = q.data() + (bi * l + i) * c + hd * d;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < visible; ++j) {
          const double* kj = k.data() + (bi * l + j) * c + hd * d;
          double s = 0.0;
          for (std::size_t e = 0; e < d; ++e) s += qi[e] * kj[e];
          row[j] = s * scale;
          mx = std::max(mx, row[j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < visible; ++j) {
          row[j] = std::exp(row[j] - mx);
          sum += row[j];
        }
        for (std::size_t j = 0; j < l; ++j) p[i * l + j] = j < visible ? row[j] / sum : 0.0;
        double* ci = ctx.data() + (bi * l + i) * c + hd * d;
        for (std::size_t j = 0; j < visible; ++j) {
          const double pij = p[i * l + j];
          const double* vj = v.data() + (bi * l + j) * c + hd * d;
          for (std::size_t e = 0; e < d; ++e) ci[e] += pij * vj[e];
        }
      }
    }
  }
  Tensor out = linear(ctx, wo);
  if (cache) {
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->context = std::move(ctx);
  }
  return out;
}

AttentionGrads attention_backward(const Tensor& x, const Tensor& wq, const Tensor& wk,
                                  const Tensor& wv, const Tensor& wo, std::size_t heads,
                                  const AttentionCache& cache, const Tensor& dy, bool weight_grads) {
  const std::size_t b = x.dim(0), l = x.dim(1), c = x.dim(2);
  const std::size_t d = c / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  AttentionGrads g;
  Tensor dctx;
  linear_backward(cache.context, wo, dy, &dctx, weight_grads ? &g.dwo : nullptr);

  Tensor dq(x.shape()), dk(x.shape()), dv(x.shape());
  std::vector<double> dp(l);
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const double* p = cache.probs.data() + (bi * heads + hd) * l * l;
      for (std::size_t i = 0; i < l; ++i) {
        const double* dci = dctx.data() + (bi * l + i) * c + hd * d;
        double dot = 0.0;
        for (std::size_t j = 0; j < l; ++j) {
          const double pij = p[i * l + j];
          const double* vj = cache.v.data() + (bi * l + j) * c + hd * d;
          double* dvj = dv.data() + (bi * l + j) * c + hd * d;
          double s = 0.0;
          for (std::size_t e = 0; e < d; ++e) {
            s += dci[e] * vj[e];
            dvj[e] += pij * dci[e];
          }
          dp[j] = s;
          dot += s * pij;
        }
        const double* qi = cache.q.data() + (bi * l + i) * c + hd * d;
        double* dqi = dq.data() + (bi * l + i) * c + hd * d;
        for (std::size_t j = 0; j < l; ++j) {
          const double ds = p[i * l + j] * (dp[j] - dot) * scale;
          if (ds == 0.0) continue;
          const double* kj = cache.k.data() + (bi * l + j) * c + hd * d;
          double* dkj = dk.data() + (bi * l + j) * c + hd * d;
          for (std::size_t e = 0; e < d; ++e) {
            dqi[e] += ds * kj[e];
            dkj[e] += ds * qi[e];
          }
        }
      }
    }
  }
  Tensor part;
  linear_backward(x, wq, dq, &g.dx, weight_grads ? &g.dwq : nullptr);
  linear_backward(x, wk, dk, &part, weight_grads ? &g.dwk : nullptr);
  for (std::size_t i = 0; i < part.size(); ++i) g.dx[i] += part[i];
  linear_backward(x, wv, dv, &part, weight_grads ? &g.dwv : nullptr);
  for (std::size_t i = 0; i < part.size(); ++i) g.dx[i] += part[i];
  return g;
}

}  // namespace convfuse::kernels
