// SPDX-License-Identifier: Apache-2.0

// Tape-free reverse-mode differentiation. Each op result keeps its parents and
// a backward closure; backward() walks the graph in reverse topological order.
// Nodes whose inputs need no gradient record nothing, so frozen-backbone work
// costs no extra memory.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "convfuse/tensor.hpp"

namespace convfuse::ad {

struct Node {
  Tensor value;
  Tensor grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  /// Only meaningful on leaves (parameters).
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  const Tensor& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor(); }

  bool defined() const { return static_cast<bool>(node_); }
  const std::shared_ptr<Node>& node() const { return node_; }

  static Var from_node(std::shared_ptr<Node> node);

 private:
  std::shared_ptr<Node> node_;
};

/// Seeds d(root)/d(root) = 1 and accumulates into every reachable node that
/// requires a gradient. Leaf gradients add up across calls until zero_grad().
void backward(const Var& root);

bool grad_enabled();

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Builds an op result. The backward closure is stored only when recording is
/// enabled and at least one parent requires a gradient.
Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

/// Adds g into node.grad when the node wants a gradient.
void accumulate(Node& node, const Tensor& g);
void accumulate(Node& node, Tensor&& g);

// ---- ops --------------------------------------------------------------------

Var constant(Tensor value);

Var add(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var reshape(const Var& a, Shape shape);
Var tanh(const Var& a);
Var gelu(const Var& a);
Var layer_norm(const Var& a);

/// Elementwise mean of same-shaped inputs, summed in list order.
Var mean_of(const std::vector<Var>& xs);
/// Σ w_i x_i over scalars.
Var weighted_sum(const std::vector<double>& weights, const std::vector<Var>& scalars);
Var sum_squares(const Var& a);

Var linear(const Var& x, const Var& w);
Var conv2d_same(const Var& x, const Var& kernel);
Var seq_to_2d(const Var& x, Grid grid);
Var seq_from_2d(const Var& x);
/// Concatenates spatial tensors along the channel axis, in list order.
Var concat_channels(const std::vector<Var>& xs);

Var attention(const Var& x, const Var& wq, const Var& wk, const Var& wv, const Var& wo,
              std::size_t heads, bool causal);

/// Tokens [begin, begin + count) of a (B, L, C) sequence.
Var slice_tokens(const Var& x, std::size_t begin, std::size_t count);
/// x with delta added to tokens [offset, offset + delta.L).
Var add_to_tokens(const Var& x, const Var& delta, std::size_t offset);
/// Prepends one shared (C) token to every batch item of (B, P, C).
Var prepend_token(const Var& x, const Var& token);
/// Token `index` of (B, L, C) -> (B, C).
Var select_token(const Var& x, std::size_t index);
/// Row `row` of each (R, C) input stacked -> (inputs.size(), C).
Var stack_rows(const std::vector<Var>& xs, std::size_t row);

Var gap(const Var& x);
/// Row-wise softmax over the last axis of a rank-2 tensor.
Var softmax_rows(const Var& x);

/// Cosine similarity of every token of v (B, L, C) with t (Bt, C), Bt ∈ {1, B}.
/// Zero-norm pairs give 0 and bump *zero_norm_events when provided.
Var cosine_tokens(const Var& v, const Var& t, std::size_t* zero_norm_events = nullptr);

Var bilinear_upsample(const Var& m, Grid target);

}  // namespace convfuse::ad
