// SPDX-License-Identifier: Apache-2.0

#include "convfuse/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>
#include <utility>

#include "convfuse/error.hpp"
#include "convfuse/kernels.hpp"

namespace convfuse::ad {

namespace {

thread_local bool g_grad_enabled = true;

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(const Var& a, std::size_t rank, const char* op) {
  if (a.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
  }
}

Tensor scaled(const Tensor& t, double s) {
  Tensor out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = t[i] * s;
  return out;
}

}  // namespace

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var Var::from_node(std::shared_ptr<Node> node) {
  Var v;
  v.node_ = std::move(node);
  return v;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  const bool needs = g_grad_enabled && std::any_of(parents.begin(), parents.end(),
                                                   [](const Var& p) { return p.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const Var& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward_fn);
  }
  return Var::from_node(std::move(node));
}

void accumulate(Node& node, const Tensor& g) {
  if (!node.requires_grad) return;
  if (node.grad.empty()) {
    node.grad = g;
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) node.grad[i] += g[i];
}

void accumulate(Node& node, Tensor&& g) {
  if (!node.requires_grad) return;
  if (node.grad.empty()) {
    node.grad = std::move(g);
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) node.grad[i] += g[i];
}

void backward(const Var& root) {
  if (!root.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  accumulate(*root.node(), Tensor(root.shape(), 1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

Var constant(Tensor value) { return Var(std::move(value), false); }

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    accumulate(*self.parents[0], self.grad);
    accumulate(*self.parents[1], self.grad);
  });
}

Var scale(const Var& a, double s) {
  return make_result(scaled(a.value(), s), {a},
                     [s](Node& self) { accumulate(*self.parents[0], scaled(self.grad, s)); });
}

Var reshape(const Var& a, Shape shape) {
  Shape original = a.shape();
  return make_result(a.value().reshaped(std::move(shape)), {a}, [original](Node& self) {
    accumulate(*self.parents[0], self.grad.reshaped(original));
  });
}

Var tanh(const Var& a) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.value()[i]);
  return make_result(std::move(out), {a}, [](Node& self) {
    Tensor g(self.value.shape());
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] = self.grad[i] * (1.0 - self.value[i] * self.value[i]);
    accumulate(*self.parents[0], std::move(g));
  });
}

Var gelu(const Var& a) {
  return make_result(kernels::gelu(a.value()), {a}, [](Node& self) {
    accumulate(*self.parents[0], kernels::gelu_backward(self.parents[0]->value, self.grad));
  });
}

Var layer_norm(const Var& a) {
  return make_result(kernels::layer_norm(a.value()), {a}, [](Node& self) {
    accumulate(*self.parents[0], kernels::layer_norm_backward(self.parents[0]->value, self.grad));
  });
}

Var mean_of(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("mean_of: empty input");
  Tensor out(xs.front().shape());
  for (const Var& x : xs) {
    require_same_shape(xs.front(), x, "mean_of");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += x.value()[i];
  }
  const double n = static_cast<double>(xs.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= n;
  return make_result(std::move(out), xs, [n](Node& self) {
    const Tensor g = scaled(self.grad, 1.0 / n);
    for (auto& p : self.parents) accumulate(*p, g);
  });
}

Var weighted_sum(const std::vector<double>& weights, const std::vector<Var>& scalars) {
  if (weights.size() != scalars.size()) throw ShapeError("weighted_sum: count mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) total += weights[i] * scalars[i].value().item();
  return make_result(Tensor::scalar(total), scalars, [weights](Node& self) {
    for (std::size_t i = 0; i < weights.size(); ++i)
      accumulate(*self.parents[i], Tensor::scalar(weights[i] * self.grad.item()));
  });
}

Var sum_squares(const Var& a) {
  double total = 0.0;
  for (double v : a.value().values()) total += v * v;
  return make_result(Tensor::scalar(total), {a}, [](Node& self) {
    const Tensor& x = self.parents[0]->value;
    accumulate(*self.parents[0], scaled(x, 2.0 * self.grad.item()));
  });
}

Var linear(const Var& x, const Var& w) {
  return make_result(kernels::linear(x.value(), w.value()), {x, w}, [](Node& self) {
    Node& xn = *self.parents[0];
    Node& wn = *self.parents[1];
    Tensor dx, dw;
    kernels::linear_backward(xn.value, wn.value, self.grad, xn.requires_grad ? &dx : nullptr,
                             wn.requires_grad ? &dw : nullptr);
    if (xn.requires_grad) accumulate(xn, std::move(dx));
    if (wn.requires_grad) accumulate(wn, std::move(dw));
  });
}

Var conv2d_same(const Var& x, const Var& kernel) {
  return make_result(kernels::conv2d_same(x.value(), kernel.value()), {x, kernel}, [](Node& self) {
    Node& xn = *self.parents[0];
    Node& kn = *self.parents[1];
    Tensor dx, dk;
    kernels::conv2d_same_backward(xn.value, kn.value, self.grad, xn.requires_grad ? &dx : nullptr,
                                  kn.requires_grad ? &dk : nullptr);
    if (xn.requires_grad) accumulate(xn, std::move(dx));
    if (kn.requires_grad) accumulate(kn, std::move(dk));
  });
}

Var seq_to_2d(const Var& x, Grid grid) {
  return make_result(kernels::reshape_seq_to_2d(x.value(), grid), {x}, [](Node& self) {
    accumulate(*self.parents[0], kernels::reshape_2d_to_seq(self.grad));
  });
}

Var seq_from_2d(const Var& x) {
  require_rank(x, 4, "seq_from_2d");
  const Grid grid{x.shape()[2], x.shape()[3]};
  return make_result(kernels::reshape_2d_to_seq(x.value()), {x}, [grid](Node& self) {
    accumulate(*self.parents[0], kernels::reshape_seq_to_2d(self.grad, grid));
  });
}

Var concat_channels(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: empty input");
  const Shape& first = xs.front().shape();
  if (first.size() != 4) throw ShapeError("concat_channels: expected spatial tensors");
  const std::size_t b = first[0], hw = first[2] * first[3];
  std::size_t total_c = 0;
  std::vector<std::size_t> channels;
  for (const Var& x : xs) {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[0] != b || s[2] != first[2] || s[3] != first[3])
      throw ShapeError("concat_channels: incompatible shape " + shape_str(s));
    channels.push_back(s[1]);
    total_c += s[1];
  }
  Tensor out({b, total_c, first[2], first[3]});
  for (std::size_t bi = 0; bi < b; ++bi) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double* src = xs[i].value().data() + bi * channels[i] * hw;
      std::copy(src, src + channels[i] * hw, out.data() + (bi * total_c + offset) * hw);
      offset += channels[i];
    }
  }
  return make_result(std::move(out), xs, [channels, b, hw, total_c](Node& self) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < channels.size(); ++i) {
      Node& p = *self.parents[i];
      if (p.requires_grad) {
        Tensor g(p.value.shape());
        for (std::size_t bi = 0; bi < b; ++bi) {
          const double* src = self.grad.data() + (bi * total_c + offset) * hw;
          std::copy(src, src + channels[i] * hw, g.data() + bi * channels[i] * hw);
        }
        accumulate(p, std::move(g));
      }
      offset += channels[i];
    }
  });
}

Var attention(const Var& x, const Var& wq, const Var& wk, const Var& wv, const Var& wo,
              std::size_t heads, bool causal) {
  auto cache = std::make_shared<kernels::AttentionCache>();
  const bool record = grad_enabled() && (x.requires_grad() || wq.requires_grad() ||
                                         wk.requires_grad() || wv.requires_grad() ||
                                         wo.requires_grad());
  Tensor out = kernels::attention(x.value(), wq.value(), wk.value(), wv.value(), wo.value(), heads,
                                  causal, record ? cache.get() : nullptr);
  return make_result(std::move(out), {x, wq, wk, wv, wo}, [cache, heads](Node& self) {
    auto& p = self.parents;
    const bool weight_grads = p[1]->requires_grad || p[2]->requires_grad ||
                              p[3]->requires_grad || p[4]->requires_grad;
    auto g = kernels::attention_backward(p[0]->value, p[1]->value, p[2]->value, p[3]->value,
                                         p[4]->value, heads, *cache, self.grad, weight_grads);
    accumulate(*p[0], std::move(g.dx));
    if (weight_grads) {
      accumulate(*p[1], std::move(g.dwq));
      accumulate(*p[2], std::move(g.dwk));
      accumulate(*p[3], std::move(g.dwv));
      accumulate(*p[4], std::move(g.dwo));
    }
  });
}

Var slice_tokens(const Var& x, std::size_t begin, std::size_t count) {
  require_rank(x, 3, "slice_tokens");
  const std::size_t b = x.shape()[0], l = x.shape()[1], c = x.shape()[2];
  if (begin + count > l) throw ShapeError("slice_tokens: range exceeds sequence length");
  Tensor out({b, count, c});
  for (std::size_t bi = 0; bi < b; ++bi) {
    const double* src = x.value().data() + (bi * l + begin) * c;
    std::copy(src, src + count * c, out.data() + bi * count * c);
  }
  return make_result(std::move(out), {x}, [b, l, c, begin, count](Node& self) {
    Tensor g({b, l, c});
    for (std::size_t bi = 0; bi < b; ++bi) {
      const double* src = self.grad.data() + bi * count * c;
      std::copy(src, src + count * c, g.data() + (bi * l + begin) * c);
    }
    accumulate(*self.parents[0], std::move(g));
  });
}

Var add_to_tokens(const Var& x, const Var& delta, std::size_t offset) {
  require_rank(x, 3, "add_to_tokens");
  require_rank(delta, 3, "add_to_tokens");
  const std::size_t b = x.shape()[0], l = x.shape()[1], c = x.shape()[2];
  const std::size_t count = delta.shape()[1];
  if (delta.shape()[0] != b || delta.shape()[2] != c || offset + count > l)
    throw ShapeError("add_to_tokens: delta " + shape_str(delta.shape()) + " does not fit " +
                     shape_str(x.shape()));
  Tensor out = x.value();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t i = 0; i < count * c; ++i)
      out[(bi * l + offset) * c + i] += delta.value()[bi * count * c + i];
  return make_result(std::move(out), {x, delta}, [b, l, c, offset, count](Node& self) {
    accumulate(*self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) {
      Tensor g({b, count, c});
      for (std::size_t bi = 0; bi < b; ++bi) {
        const double* src = self.grad.data() + (bi * l + offset) * c;
        std::copy(src, src + count * c, g.data() + bi * count * c);
      }
      accumulate(*self.parents[1], std::move(g));
    }
  });
}

Var prepend_token(const Var& x, const Var& token) {
  require_rank(x, 3, "prepend_token");
  const std::size_t b = x.shape()[0], p = x.shape()[1], c = x.shape()[2];
  if (token.value().size() != c) throw ShapeError("prepend_token: token width mismatch");
  Tensor out({b, p + 1, c});
  for (std::size_t bi = 0; bi < b; ++bi) {
    std::copy(token.value().data(), token.value().data() + c, out.data() + bi * (p + 1) * c);
    std::copy(x.value().data() + bi * p * c, x.value().data() + (bi + 1) * p * c,
              out.data() + (bi * (p + 1) + 1) * c);
  }
  return make_result(std::move(out), {x, token}, [b, p, c](Node& self) {
    if (self.parents[0]->requires_grad) {
      Tensor g({b, p, c});
      for (std::size_t bi = 0; bi < b; ++bi)
        std::copy(self.grad.data() + (bi * (p + 1) + 1) * c, self.grad.data() + (bi + 1) * (p + 1) * c,
                  g.data() + bi * p * c);
      accumulate(*self.parents[0], std::move(g));
    }
    if (self.parents[1]->requires_grad) {
      Tensor g(self.parents[1]->value.shape());
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t i = 0; i < c; ++i) g[i] += self.grad[bi * (p + 1) * c + i];
      accumulate(*self.parents[1], std::move(g));
    }
  });
}

Var select_token(const Var& x, std::size_t index) {
  require_rank(x, 3, "select_token");
  const std::size_t b = x.shape()[0], l = x.shape()[1], c = x.shape()[2];
  if (index >= l) throw ShapeError("select_token: index out of range");
  Tensor out({b, c});
  for (std::size_t bi = 0; bi < b; ++bi)
    std::copy(x.value().data() + (bi * l + index) * c, x.value().data() + (bi * l + index + 1) * c,
              out.data() + bi * c);
  return make_result(std::move(out), {x}, [b, l, c, index](Node& self) {
    Tensor g({b, l, c});
    for (std::size_t bi = 0; bi < b; ++bi)
      std::copy(self.grad.data() + bi * c, self.grad.data() + (bi + 1) * c,
                g.data() + (bi * l + index) * c);
    accumulate(*self.parents[0], std::move(g));
  });
}

Var stack_rows(const std::vector<Var>& xs, std::size_t row) {
  if (xs.empty()) throw ShapeError("stack_rows: empty input");
  const std::size_t c = xs.front().shape().back();
  Tensor out({xs.size(), c});
  for (std::size_t i = 0; i < xs.size(); ++i) {
    require_rank(xs[i], 2, "stack_rows");
    if (row >= xs[i].shape()[0] || xs[i].shape()[1] != c) throw ShapeError("stack_rows: bad input shape");
    std::copy(xs[i].value().data() + row * c, xs[i].value().data() + (row + 1) * c, out.data() + i * c);
  }
  return make_result(std::move(out), xs, [row, c](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      Node& p = *self.parents[i];
      if (!p.requires_grad) continue;
      Tensor g(p.value.shape());
      std::copy(self.grad.data() + i * c, self.grad.data() + (i + 1) * c, g.data() + row * c);
      accumulate(p, std::move(g));
    }
  });
}

Var gap(const Var& x) {
  require_rank(x, 3, "gap");
  return make_result(kernels::gap(x.value()), {x}, [](Node& self) {
    const Shape& s = self.parents[0]->value.shape();
    const std::size_t b = s[0], l = s[1], c = s[2];
    Tensor g(s);
    const double inv = 1.0 / static_cast<double>(l);
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t t = 0; t < l; ++t)
        for (std::size_t ci = 0; ci < c; ++ci) g[(bi * l + t) * c + ci] = self.grad[bi * c + ci] * inv;
    accumulate(*self.parents[0], std::move(g));
  });
}

Var softmax_rows(const Var& x) {
  require_rank(x, 2, "softmax_rows");
  const std::size_t rows = x.shape()[0], n = x.shape()[1];
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = kernels::softmax(x.value().values().subspan(r * n, n));
    std::copy(row.begin(), row.end(), out.data() + r * n);
  }
  return make_result(std::move(out), {x}, [rows, n](Node& self) {
    Tensor g(self.value.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += self.grad[r * n + i] * self.value[r * n + i];
      for (std::size_t i = 0; i < n; ++i)
        g[r * n + i] = self.value[r * n + i] * (self.grad[r * n + i] - dot);
    }
    accumulate(*self.parents[0], std::move(g));
  });
}

Var cosine_tokens(const Var& v, const Var& t, std::size_t* zero_norm_events) {
  require_rank(v, 3, "cosine_tokens");
  require_rank(t, 2, "cosine_tokens");
  const std::size_t b = v.shape()[0], l = v.shape()[1], c = v.shape()[2];
  const std::size_t bt = t.shape()[0];
  if (t.shape()[1] != c || (bt != 1 && bt != b))
    throw ShapeError("cosine_tokens: text " + shape_str(t.shape()) + " vs visual " + shape_str(v.shape()));
  Tensor out({b, l});
  for (std::size_t bi = 0; bi < b; ++bi) {
    const auto tv = t.value().values().subspan((bt == 1 ? 0 : bi) * c, c);
    for (std::size_t i = 0; i < l; ++i) {
      const auto sim = kernels::cosine_sim(v.value().values().subspan((bi * l + i) * c, c), tv);
      out[bi * l + i] = sim.value;
      if (sim.zero_norm && zero_norm_events) ++*zero_norm_events;
    }
  }
  return make_result(std::move(out), {v, t}, [b, l, c, bt](Node& self) {
    Node& vn = *self.parents[0];
    Node& tn = *self.parents[1];
    Tensor dv(vn.value.shape()), dt(tn.value.shape());
    for (std::size_t bi = 0; bi < b; ++bi) {
      const double* tp = tn.value.data() + (bt == 1 ? 0 : bi) * c;
      double* dtp = dt.data() + (bt == 1 ? 0 : bi) * c;
      double tt = 0.0;
      for (std::size_t e = 0; e < c; ++e) tt += tp[e] * tp[e];
      for (std::size_t i = 0; i < l; ++i) {
        const double* vp = vn.value.data() + (bi * l + i) * c;
        double vv = 0.0;
        for (std::size_t e = 0; e < c; ++e) vv += vp[e] * vp[e];
        if (vv == 0.0 || tt == 0.0) continue;
        const double g = self.grad[bi * l + i];
        const double cosv = self.value[bi * l + i];
        const double inv = 1.0 / (std::sqrt(vv) * std::sqrt(tt));
        double* dvp = dv.data() + (bi * l + i) * c;
        for (std::size_t e = 0; e < c; ++e) {
          dvp[e] += g * (tp[e] * inv - cosv * vp[e] / vv);
          dtp[e] += g * (vp[e] * inv - cosv * tp[e] / tt);
        }
      }
    }
    accumulate(vn, std::move(dv));
    accumulate(tn, std::move(dt));
  });
}

Var bilinear_upsample(const Var& m, Grid target) {
  return make_result(kernels::bilinear_upsample(m.value(), target), {m}, [](Node& self) {
    accumulate(*self.parents[0],
               kernels::bilinear_upsample_backward(self.parents[0]->value.shape(), self.grad));
  });
}

}  // namespace convfuse::ad
