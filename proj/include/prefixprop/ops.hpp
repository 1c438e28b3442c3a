#pragma once

#include <cstddef>
#include <span>

#include "prefixprop/autodiff.hpp"
#include "prefixprop/mask.hpp"
#include "prefixprop/rng.hpp"
#include "prefixprop/tensor.hpp"

namespace prefixprop {

// ---------------------------------------------------------------------------
// Value-level kernels
// ---------------------------------------------------------------------------

/// Row-wise softmax with max subtraction. Masked entries are excluded from
/// the normalization and come out exactly 0. Throws DegenerateRowError when
/// a row has no allowed entry.
Tensor softmax_rows(const Tensor& m, const AttentionMask* mask = nullptr);

// Per-row log-sum-exp over allowed entries; shape [rows].
Tensor logsumexp_rows(const Tensor& m, const AttentionMask* mask = nullptr);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

double gelu(double x) noexcept;

// ---------------------------------------------------------------------------
// Differentiable ops
// ---------------------------------------------------------------------------

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double s);
// out = s * a + shift, elementwise.
Var affine(Var a, double s, double shift);
Var mul(Var a, Var b);
// x [n x c] plus bias [c] broadcast over rows.
Var add_bias(Var x, Var bias);
// x [n x c] with row i multiplied by w[i]; w has n elements.
Var scale_rows(Var x, Var w);

Var transpose(Var a);
Var concat_rows(Var top, Var bottom);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var gather_rows(Var table, std::span<const int> ids);

Var gelu(Var x);
Var sigmoid(Var x);
Var layer_norm(Var x, Var gamma, Var beta, double eps);
Var softmax_rows(Var m, const AttentionMask* mask = nullptr);
Var logsumexp_rows(Var m, const AttentionMask* mask = nullptr);

// Inverted dropout. Identity when !train or rate == 0.
Var dropout(Var x, double rate, bool train, Rng& rng);

/// Multi-head scaled dot-product attention that only visits mask-allowed
/// entries. q: [nq x d], k, v: [nk x d], mask: [nq x nk]. Head h owns the
/// column block [h*dh, (h+1)*dh); output is the concatenation of heads.
Var masked_attention(Var q, Var k, Var v, const AttentionMask& mask, std::size_t n_heads);

// -log softmax(logits)[label] computed through log-sum-exp.
Var cross_entropy(Var logits, std::size_t label);
Var sum(Var a);
Var sum_squares(Var a);

}  // namespace prefixprop
