#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prefixprop/autodiff.hpp"
#include "prefixprop/mask.hpp"
#include "prefixprop/rng.hpp"
#include "prefixprop/tensor.hpp"

namespace prefixprop {

struct AttentionConfig {
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t prefix_len = 0;
    // Sliding-window radius; nullopt means full attention.
    std::optional<std::size_t> window = 64;
    // Sequence positions (before prefix composition) that attend and are attended globally.
    std::vector<std::size_t> global_positions{0};

    std::size_t d_head() const noexcept { return n_heads ? d_model / n_heads : 0; }
    void validate() const;
};

/// Frozen projection, feed-forward and layer-norm weights of one encoder layer.
struct LayerWeights {
    Parameter wq, wk, wv, wo;
    Parameter ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    Parameter ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;

    // Gaussian projections with std `proj_std`, FFN with std 1/sqrt(fan_in),
    // unit gammas and zero biases.
    static LayerWeights random(std::size_t d_model, std::size_t d_ff, Rng& rng, const std::string& name_prefix,
                               double proj_std);

    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
};

// Attention projections bound to a tape.
struct AttentionVars {
    Var wq, wk, wv, wo;
};

AttentionVars bind_attention(Tape& tape, LayerWeights& w);
// Non-differentiable binding over const weights.
AttentionVars bind_attention_constant(Tape& tape, const LayerWeights& w);

enum class PrefixMode { propagation, prefix_tuning };

/// Trainable prefixes of every layer.
///
/// Propagation keeps one [j x d] matrix per layer that is concatenated at the
/// first layer and summed onto the prefix hidden states afterwards.
/// Prefix-tuning keeps a key and a value matrix per layer, each [j x d] and
/// split per head into contiguous [j x d_head] column blocks.
struct PrefixBank {
    PrefixMode mode = PrefixMode::propagation;
    std::size_t n_layers = 0;
    std::size_t prefix_len = 0;
    std::size_t d_model = 0;
    std::vector<Parameter> prefixes;
    std::vector<Parameter> keys;
    std::vector<Parameter> values;

    // Elementwise N(0, init_std^2).
    static PrefixBank create(PrefixMode mode, std::size_t n_layers, std::size_t prefix_len, std::size_t d_model,
                             Rng& rng, double init_std = 0.02);

    std::size_t trainable_count() const noexcept;
    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
};

// Per-head, per-query share of softmax mass that falls on prefix keys.
struct KernelWeighting {
    Tensor lambda;
    // nullopt when lambda is the exact softmax split.
    std::optional<double> alpha;
};

/// Sliding-window + global mask over j + seq_len composed positions. Prefix
/// rows and columns (the first j) are always allowed; global sequence
/// positions attend to and are attended by everything.
AttentionMask build_mask(const AttentionConfig& cfg, std::size_t seq_len);

// Rows of build_mask for sequence queries only: [seq_len x (j + seq_len)].
AttentionMask build_tuning_mask(const AttentionConfig& cfg, std::size_t seq_len);

/// Multi-head attention: per head softmax(Q K^T / sqrt(d_h), mask) V with
/// Q = q_in Wq, K = k_in Wk, V = v_in Wv, heads concatenated and projected by Wo.
Var standard_attention(Var q_in, Var k_in, Var v_in, const AttentionVars& w, const AttentionMask& mask,
                       std::size_t n_heads);
Tensor standard_attention(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in, const LayerWeights& w,
                          const AttentionMask& mask, std::size_t n_heads);

/// Layer input for prefix-propagation. layer is 1-based: layer 1 concatenates
/// the prefix before the m sequence rows; later layers add it onto the first
/// j rows of the (j + m)-row hidden state.
Var compose_propagation_input(Var input, Var prefix, std::size_t layer);
Tensor compose_propagation_input(const Tensor& input, const Tensor& prefix, std::size_t layer);

// Self-attention over the composed sequence; prefix rows produce queries too.
Var prefix_propagation_attention(Var composed, const AttentionVars& w, const AttentionMask& mask,
                                 std::size_t n_heads);
Tensor prefix_propagation_attention(const Tensor& composed, const LayerWeights& w, const AttentionMask& mask,
                                    std::size_t n_heads);

/// Queries from the sequence only; keys cat(P_k, C Wk) and values
/// cat(P_v, C Wv). Output keeps m rows. `mask` is [m x m] over the sequence or
/// [m x (j + m)]; prefix key columns are allowed regardless.
Var prefix_tuning_attention(Var sequence, Var prefix_keys, Var prefix_values, const AttentionVars& w,
                            const AttentionMask& mask, std::size_t n_heads);
// As above with queries taken from `query_rows` (a subset of the sequence rows);
// mask rows follow the query rows.
Var prefix_tuning_attention(Var query_rows, Var sequence, Var prefix_keys, Var prefix_values,
                            const AttentionVars& w, const AttentionMask& mask, std::size_t n_heads);
// Throws ConfigError unless bank.mode is prefix_tuning. layer is 1-based.
Tensor prefix_tuning_attention(const Tensor& sequence, const PrefixBank& bank, std::size_t layer,
                               const LayerWeights& w, const AttentionMask& mask, std::size_t n_heads);

// exp(<x_q, x_k> / sqrt(d_k)).
double exp_kernel(std::span<const double> x_q, std::span<const double> x_k, std::size_t d_k);

/// Kernel smoother with the exponential kernel, evaluated literally:
/// row i is sum_j k(Q_i, K_j) V_j / sum_j' k(Q_i, K_j'). Throws ShapeError on
/// an empty key set.
Tensor kernel_attention(const Tensor& queries, const Tensor& keys, const Tensor& values);

/// Per head h, per query row i of D = cat(P, C):
/// lambda_i = S_P / (S_P + S_C) with S_X = sum over keys x in X of exp(q_i . k_x / sqrt(d_h)).
std::vector<KernelWeighting> lambda_weights(const Tensor& prefix, const Tensor& sequence, const LayerWeights& w,
                                            std::size_t n_heads);

/// Prefix-propagation attention split into a sequence kernel module and a
/// prefix kernel module over queries cat(P, C) Wq.
///
/// alpha == nullopt combines them per row as (1 - lambda) Kern_C + lambda Kern_P,
/// which reproduces full attention over cat(P, C). A numeric alpha > 0
/// multiplies the prefix kernel scores before renormalizing over both
/// modules. This overload evaluates the kernels literally and has no mask.
Tensor kernel_decomposed_attention(const Tensor& prefix, const Tensor& sequence, const LayerWeights& w,
                                   std::size_t n_heads, std::optional<double> alpha);

/// Differentiable form of the decomposition computed through log-sum-exp.
/// `sequence_mask` restricts sequence keys ([(j + m) x m]); prefix keys are
/// always visible.
Var kernel_decomposed_attention(Var prefix, Var sequence, const AttentionVars& w,
                                const AttentionMask* sequence_mask, std::size_t n_heads,
                                std::optional<double> alpha);

}  // namespace prefixprop
