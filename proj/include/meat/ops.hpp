#pragma once

#include <vector>

#include "meat/tensor.hpp"

namespace meat {

// ---------------------------------------------------------------------------
// Elementwise / reduction
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);  // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // Hadamard product
Tensor scale(const Tensor& a, double c);
Tensor scale_by(const Tensor& a, const Tensor& s);  // s is a scalar tensor
Tensor sum(const Tensor& a);                        // -> scalar
Tensor mean(const Tensor& a);                       // -> scalar
Tensor reshape(const Tensor& a, std::vector<std::size_t> shape);

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);          // [m,k]x[k,p] -> [m,p]
Tensor add_rowvec(const Tensor& x, const Tensor& v);      // broadcast v over rows
Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1);
Tensor concat_cols(const std::vector<Tensor>& parts);

// ---------------------------------------------------------------------------
// Activations / normalization / losses
// ---------------------------------------------------------------------------

Tensor gelu(const Tensor& a);  // exact erf form
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias);

// Row-wise softmax over the last axis, stabilized by max subtraction.
// Throws NumericError on non-finite input.
Tensor softmax_rows(const Tensor& a);

// Row-wise weighted softmax: out_j = w_j * exp(a_j - c) / sum_s w_s * exp(a_s - c)
// with c the max over entries whose weight is positive. Zero-weight positions
// are exactly 0.0. Gradients flow to both `a` and `weights`. Throws
// NumericError when every weight is zero or a weight lies outside [0, 1].
Tensor masked_softmax_rows(const Tensor& a, const Tensor& weights);

// Mean negative log-likelihood of the true class. labels[i] in [0, C).
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// ---------------------------------------------------------------------------
// Sequence-batch helpers. A batch of B sequences of S tokens is stacked into
// a [B*S, d] matrix; block b occupies rows [b*S, (b+1)*S).
// ---------------------------------------------------------------------------

// Per-block scaled dot products: out[b*S+i, j] = scale * <q_{b,i}, k_{b,j}>.
Tensor attn_scores(const Tensor& q, const Tensor& k, std::size_t batch, double scale);

// Per-block weighted sum of value rows: out[b*S+i, :] = sum_j p[b*S+i, j] * v[b*S+j, :].
Tensor attn_apply(const Tensor& p, const Tensor& v, std::size_t batch);

// [n] -> [n+1] with a constant 1.0 in front (the always-active class slot).
Tensor prepend_one(const Tensor& v);

// Insert a shared learnable row at the head of every block: [B*n, d] -> [B*(n+1), d].
Tensor prepend_row_per_block(const Tensor& x, const Tensor& row, std::size_t batch);

// Broadcast-add a [S, d] matrix to every block of a [B*S, d] matrix.
Tensor add_per_block(const Tensor& x, const Tensor& p, std::size_t batch);

// Gather row 0 of every block: [B*S, d] -> [B, d].
Tensor take_block_row0(const Tensor& x, std::size_t batch);

// ---------------------------------------------------------------------------
// Mask relaxation
// ---------------------------------------------------------------------------

// Two-way Gumbel-softmax, first component, per row of an [m, 2] logit matrix:
// out_i = exp((l_i0+g_i0)/tau) / (exp((l_i0+g_i0)/tau) + exp((l_i1+g_i1)/tau)).
// `noise` holds the 2m Gumbel draws (a constant of the sample); gradients flow
// to the logits only. Output entries are clamped strictly inside (0, 1).
Tensor gumbel_relax(const Tensor& logits, const std::vector<double>& noise, double tau);

}  // namespace meat
