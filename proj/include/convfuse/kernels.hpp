// SPDX-License-Identifier: Apache-2.0

// Dense kernels over Tensor. Every function here is pure: inputs are read-only
// and results are returned by value, so calls are safe from any thread.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "convfuse/tensor.hpp"

namespace convfuse::kernels {

// ---- layout -----------------------------------------------------------------

/// (B, L, C) -> (B, C, H, W) with element (b, c, h, w) = x(b, h*W + w, c).
Tensor reshape_seq_to_2d(const Tensor& x, Grid grid);
/// (B, C, H, W) -> (B, H*W, C). Exact inverse of reshape_seq_to_2d.
Tensor reshape_2d_to_seq(const Tensor& x);

// ---- dense products -----------------------------------------------------------

/// C (m x n) (+)= op(A) * op(B), all row-major.
void gemm(const double* a, bool trans_a, const double* b, bool trans_b, double* c, std::size_t m,
          std::size_t n, std::size_t k, bool accumulate);

/// Per-row product over the last axis: x (..., Cin) times w (Cin, Cout). No bias.
Tensor linear(const Tensor& x, const Tensor& w);
void linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor* dx, Tensor* dw);

/// Stride-1 convolution with zero padding (k-1)/2, so spatial dims are kept.
/// x (B, Cin, H, W), kernel (Cout, Cin, k, k) with odd k. No bias.
Tensor conv2d_same(const Tensor& x, const Tensor& kernel);
void conv2d_same_backward(const Tensor& x, const Tensor& kernel, const Tensor& dy, Tensor* dx,
                          Tensor* dkernel);

// ---- vector ops -------------------------------------------------------------

/// softmax(v / temperature), max-subtracted.
std::vector<double> softmax(std::span<const double> v, double temperature = 1.0);

struct CosineSim {
  double value = 0.0;
  bool zero_norm = false;  ///< set when either input has zero norm; value is then 0
};
CosineSim cosine_sim(std::span<const double> a, std::span<const double> b);

/// Mean over the token axis: (B, L, C) -> (B, C).
Tensor gap(const Tensor& x);

// ---- maps ---------------------------------------------------------------------

/// Align-corners bilinear resize of (H, W) or (B, H, W) maps to a larger grid.
Tensor bilinear_upsample(const Tensor& m, Grid target);
/// Adjoint of bilinear_upsample; returns a gradient shaped like the source map.
Tensor bilinear_upsample_backward(const Shape& source_shape, const Tensor& dy);

// ---- transformer pieces ---------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-5;

/// Normalize over the last axis. No affine parameters.
Tensor layer_norm(const Tensor& x);
Tensor layer_norm_backward(const Tensor& x, const Tensor& dy);

Tensor gelu(const Tensor& x);
Tensor gelu_backward(const Tensor& x, const Tensor& dy);

struct AttentionCache {
  Tensor q, k, v;   // (B, L, C)
  Tensor probs;     // (B, heads, L, L)
  Tensor context;   // (B, L, C), pre output projection
};

/// Multi-head self-attention on (B, L, C) with bias-free projections (C, C).
Tensor attention(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                 const Tensor& wo, std::size_t heads, bool causal, AttentionCache* cache = nullptr);

struct AttentionGrads {
  Tensor dx, dwq, dwk, dwv, dwo;
};
AttentionGrads attention_backward(const Tensor& x, const Tensor& wq, const Tensor& wk,
                                  const Tensor& wv, const Tensor& wo, std::size_t heads,
                                  const AttentionCache& cache, const Tensor& dy,
                                  bool weight_grads = true);

}  // namespace convfuse::kernels
