#include "prefixprop/attention.hpp"

#include <cmath>
#include <string>

#include "prefixprop/errors.hpp"
#include "prefixprop/ops.hpp"

namespace prefixprop {

namespace {

Tensor gaussian(Shape shape, double std, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) {
        v = std * rng.normal();
    }
    return t;
}

void require_heads(std::size_t d, std::size_t n_heads) {
    if (n_heads == 0 || d % n_heads != 0) {
        throw ShapeError("width " + std::to_string(d) + " is not divisible into " + std::to_string(n_heads) +
                         " heads");
    }
}

// Mask over [m x (j + m)] keys with the j prefix columns forced on.
AttentionMask tuning_keys_mask(const AttentionMask& mask, std::size_t nq, std::size_t m, std::size_t j) {
    if (mask.rows() != nq) {
        throw ShapeError("prefix-tuning mask has " + std::to_string(mask.rows()) + " rows for " + std::to_string(nq) +
                         " queries");
    }
    if (mask.cols() == m) {
        return mask.with_leading_columns(j);
    }
    if (mask.cols() != j + m) {
        throw ShapeError("prefix-tuning mask has " + std::to_string(mask.cols()) + " columns, expected " +
                         std::to_string(m) + " or " + std::to_string(j + m));
    }
    if (mask.columns_allowed(0, j)) {
        return mask;
    }
    std::vector<std::uint8_t> allow(nq * (j + m));
    for (std::size_t r = 0; r < nq; ++r) {
        for (std::size_t c = 0; c < j + m; ++c) {
            allow[r * (j + m) + c] = (c < j || mask.allowed(r, c)) ? 1 : 0;
        }
    }
    return AttentionMask(nq, j + m, std::move(allow));
}

Tensor head_block(const Tensor& t, std::size_t h, std::size_t dh) {
    return slice_cols(t, h * dh, (h + 1) * dh);
}

}  // namespace

void AttentionConfig::validate() const {
    if (d_model == 0 || n_heads == 0) {
        throw ConfigError("d_model and n_heads must be positive");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("d_model " + std::to_string(d_model) + " must equal n_heads x d_head (n_heads = " +
                          std::to_string(n_heads) + ")");
    }
    if (window && *window == 0) {
        throw ConfigError("window must be at least 1 or full");
    }
}

LayerWeights LayerWeights::random(std::size_t d_model, std::size_t d_ff, Rng& rng, const std::string& name_prefix,
                                  double proj_std) {
    const auto name = [&](const char* leaf) { return name_prefix + leaf; };
    LayerWeights w;
    w.wq = Parameter(name("attn.wq"), gaussian({d_model, d_model}, proj_std, rng));
    w.wk = Parameter(name("attn.wk"), gaussian({d_model, d_model}, proj_std, rng));
    w.wv = Parameter(name("attn.wv"), gaussian({d_model, d_model}, 1.0 / std::sqrt(double(d_model)), rng));
    w.wo = Parameter(name("attn.wo"), gaussian({d_model, d_model}, 1.0 / std::sqrt(double(d_model)), rng));
    w.ffn_w1 = Parameter(name("ffn.w1"), gaussian({d_model, d_ff}, 1.0 / std::sqrt(double(d_model)), rng));
    w.ffn_b1 = Parameter(name("ffn.b1"), Tensor({d_ff}));
    w.ffn_w2 = Parameter(name("ffn.w2"), gaussian({d_ff, d_model}, 1.0 / std::sqrt(double(d_ff)), rng));
    w.ffn_b2 = Parameter(name("ffn.b2"), Tensor({d_model}));
    w.ln1_gamma = Parameter(name("ln1.gamma"), Tensor({d_model}, 1.0));
    w.ln1_beta = Parameter(name("ln1.beta"), Tensor({d_model}));
    w.ln2_gamma = Parameter(name("ln2.gamma"), Tensor({d_model}, 1.0));
    w.ln2_beta = Parameter(name("ln2.beta"), Tensor({d_model}));
    return w;
}

std::vector<Parameter*> LayerWeights::parameters() {
    return {&wq, &wk, &wv, &wo, &ffn_w1, &ffn_b1, &ffn_w2, &ffn_b2, &ln1_gamma, &ln1_beta, &ln2_gamma, &ln2_beta};
}

std::vector<const Parameter*> LayerWeights::parameters() const {
    return {&wq, &wk, &wv, &wo, &ffn_w1, &ffn_b1, &ffn_w2, &ffn_b2, &ln1_gamma, &ln1_beta, &ln2_gamma, &ln2_beta};
}

AttentionVars bind_attention(Tape& tape, LayerWeights& w) {
    return {tape.bind(w.wq), tape.bind(w.wk), tape.bind(w.wv), tape.bind(w.wo)};
}

AttentionVars bind_attention_constant(Tape& tape, const LayerWeights& w) {
    return {tape.constant_ref(w.wq.value), tape.constant_ref(w.wk.value), tape.constant_ref(w.wv.value),
            tape.constant_ref(w.wo.value)};
}

PrefixBank PrefixBank::create(PrefixMode mode, std::size_t n_layers, std::size_t prefix_len, std::size_t d_model,
                              Rng& rng, double init_std) {
    PrefixBank bank;
    bank.mode = mode;
    bank.n_layers = n_layers;
    bank.prefix_len = prefix_len;
    bank.d_model = d_model;
    for (std::size_t l = 0; l < n_layers; ++l) {
        const std::string base = "prefix." + std::to_string(l);
        if (mode == PrefixMode::propagation) {
            bank.prefixes.emplace_back(base, gaussian({prefix_len, d_model}, init_std, rng));
        } else {
            bank.keys.emplace_back(base + ".key", gaussian({prefix_len, d_model}, init_std, rng));
            bank.values.emplace_back(base + ".value", gaussian({prefix_len, d_model}, init_std, rng));
        }
    }
    return bank;
}

std::size_t PrefixBank::trainable_count() const noexcept {
    std::size_t n = 0;
    for (const auto* p : parameters()) {
        n += p->count();
    }
    return n;
}

std::vector<Parameter*> PrefixBank::parameters() {
    std::vector<Parameter*> out;
    for (auto& p : prefixes) {
        out.push_back(&p);
    }
    for (std::size_t l = 0; l < keys.size(); ++l) {
        out.push_back(&keys[l]);
        out.push_back(&values[l]);
    }
    return out;
}

std::vector<const Parameter*> PrefixBank::parameters() const {
    std::vector<const Parameter*> out;
    for (const auto& p : prefixes) {
        out.push_back(&p);
    }
    for (std::size_t l = 0; l < keys.size(); ++l) {
        out.push_back(&keys[l]);
        out.push_back(&values[l]);
    }
    return out;
}

AttentionMask build_mask(const AttentionConfig& cfg, std::size_t seq_len) {
    if (seq_len == 0) {
        throw LengthError("mask needs at least one sequence position");
    }
    if (cfg.window && *cfg.window == 0) {
        throw ConfigError("window must be at least 1 or full");
    }
    const std::size_t j = cfg.prefix_len;
    const std::size_t n = j + seq_len;
    std::vector<std::uint8_t> global(seq_len, 0);
    for (std::size_t g : cfg.global_positions) {
        if (g >= seq_len) {
            throw IndexError("global position " + std::to_string(g) + " outside sequence of length " +
                             std::to_string(seq_len));
        }
        global[g] = 1;
    }
    std::vector<std::uint8_t> allow(n * n, 0);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
            bool ok = r < j || c < j || !cfg.window;
            if (!ok) {
                const std::size_t pr = r - j, pc = c - j;
                const std::size_t dist = pr > pc ? pr - pc : pc - pr;
                ok = dist <= *cfg.window || global[pr] || global[pc];
            }
            allow[r * n + c] = ok ? 1 : 0;
        }
    }
    return AttentionMask(n, n, std::move(allow));
}

AttentionMask build_tuning_mask(const AttentionConfig& cfg, std::size_t seq_len) {
    return build_mask(cfg, seq_len).select_rows(cfg.prefix_len, cfg.prefix_len + seq_len);
}

Var standard_attention(Var q_in, Var k_in, Var v_in, const AttentionVars& w, const AttentionMask& mask,
                       std::size_t n_heads) {
    Var q = matmul(q_in, w.wq);
    Var k = matmul(k_in, w.wk);
    Var v = matmul(v_in, w.wv);
    return matmul(masked_attention(q, k, v, mask, n_heads), w.wo);
}

Tensor standard_attention(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in, const LayerWeights& w,
                          const AttentionMask& mask, std::size_t n_heads) {
    Tape tape(false);
    return standard_attention(tape.constant_ref(q_in), tape.constant_ref(k_in), tape.constant_ref(v_in),
                              bind_attention_constant(tape, w), mask, n_heads)
        .value();
}

Var compose_propagation_input(Var input, Var prefix, std::size_t layer) {
    const std::size_t j = prefix.value().rows();
    const std::size_t rows = input.value().rows();
    if (layer == 0) {
        throw ConfigError("layers are numbered from 1");
    }
    if (prefix.value().rank() != 2 || input.value().rank() != 2 || prefix.value().cols() != input.value().cols()) {
        throw ShapeError("prefix " + shape_string(prefix.value().shape()) + " does not conform to input " +
                         shape_string(input.value().shape()));
    }
    if (layer == 1) {
        return concat_rows(prefix, input);
    }
    if (rows < j) {
        throw ShapeError("layer " + std::to_string(layer) + " input has " + std::to_string(rows) +
                         " rows, fewer than the prefix length " + std::to_string(j));
    }
    return concat_rows(add(slice_rows(input, 0, j), prefix), slice_rows(input, j, rows));
}

Tensor compose_propagation_input(const Tensor& input, const Tensor& prefix, std::size_t layer) {
    Tape tape(false);
    return compose_propagation_input(tape.constant_ref(input), tape.constant_ref(prefix), layer).value();
}

Var prefix_propagation_attention(Var composed, const AttentionVars& w, const AttentionMask& mask,
                                 std::size_t n_heads) {
    return standard_attention(composed, composed, composed, w, mask, n_heads);
}

Tensor prefix_propagation_attention(const Tensor& composed, const LayerWeights& w, const AttentionMask& mask,
                                    std::size_t n_heads) {
    return standard_attention(composed, composed, composed, w, mask, n_heads);
}

Var prefix_tuning_attention(Var sequence, Var prefix_keys, Var prefix_values, const AttentionVars& w,
                            const AttentionMask& mask, std::size_t n_heads) {
    return prefix_tuning_attention(sequence, sequence, prefix_keys, prefix_values, w, mask, n_heads);
}

Var prefix_tuning_attention(Var query_rows, Var sequence, Var prefix_keys, Var prefix_values,
                            const AttentionVars& w, const AttentionMask& mask, std::size_t n_heads) {
    const std::size_t m = sequence.value().rows();
    const std::size_t j = prefix_keys.value().rows();
    if (prefix_values.value().rows() != j) {
        throw ShapeError("prefix keys and values have different lengths");
    }
    const AttentionMask keys_mask = tuning_keys_mask(mask, query_rows.value().rows(), m, j);
    Var q = matmul(query_rows, w.wq);
    Var k = concat_rows(prefix_keys, matmul(sequence, w.wk));
    Var v = concat_rows(prefix_values, matmul(sequence, w.wv));
    return matmul(masked_attention(q, k, v, keys_mask, n_heads), w.wo);
}

Tensor prefix_tuning_attention(const Tensor& sequence, const PrefixBank& bank, std::size_t layer,
                               const LayerWeights& w, const AttentionMask& mask, std::size_t n_heads) {
    if (bank.mode != PrefixMode::prefix_tuning) {
        throw ConfigError("prefix-tuning attention needs a prefix-tuning bank");
    }
    if (layer == 0 || layer > bank.keys.size()) {
        throw IndexError("layer " + std::to_string(layer) + " outside prefix bank of " +
                         std::to_string(bank.keys.size()) + " layers");
    }
    Tape tape(false);
    return prefix_tuning_attention(tape.constant_ref(sequence), tape.constant_ref(bank.keys[layer - 1].value),
                                   tape.constant_ref(bank.values[layer - 1].value), bind_attention_constant(tape, w),
                                   mask, n_heads)
        .value();
}

double exp_kernel(std::span<const double> x_q, std::span<const double> x_k, std::size_t d_k) {
    if (x_q.size() != x_k.size()) {
        throw ShapeError("kernel arguments differ in length");
    }
    double dot = 0.0;
    for (std::size_t i = 0; i < x_q.size(); ++i) {
        dot += x_q[i] * x_k[i];
    }
    return std::exp(dot / std::sqrt(static_cast<double>(d_k)));
}

Tensor kernel_attention(const Tensor& queries, const Tensor& keys, const Tensor& values) {
    require_matrix(queries, "kernel_attention");
    require_matrix(keys, "kernel_attention");
    require_matrix(values, "kernel_attention");
    if (keys.rows() == 0) {
        throw ShapeError("kernel_attention: empty key set");
    }
    if (keys.rows() != values.rows() || keys.cols() != queries.cols()) {
        throw ShapeError("kernel_attention: Q " + shape_string(queries.shape()) + ", K " + shape_string(keys.shape()) +
                         ", V " + shape_string(values.shape()) + " do not conform");
    }
    const std::size_t d_k = keys.cols();
    Tensor out({queries.rows(), values.cols()});
    std::vector<double> weights(keys.rows());
    for (std::size_t i = 0; i < queries.rows(); ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < keys.rows(); ++j) {
            weights[j] = exp_kernel(queries.row(i), keys.row(j), d_k);
            total += weights[j];
        }
        auto o = out.row(i);
        for (std::size_t j = 0; j < keys.rows(); ++j) {
            const double a = weights[j] / total;
            auto v = values.row(j);
            for (std::size_t c = 0; c < o.size(); ++c) {
                o[c] += a * v[c];
            }
        }
    }
    return out;
}

namespace {

struct HeadProjections {
    Tensor queries;
    Tensor prefix_keys, prefix_values;
    Tensor sequence_keys, sequence_values;
};

// Literal per-head projections of D = cat(P, C).
std::vector<HeadProjections> project_heads(const Tensor& prefix, const Tensor& sequence, const LayerWeights& w,
                                           std::size_t n_heads) {
    require_matrix(prefix, "prefix");
    require_matrix(sequence, "sequence");
    const std::size_t d = w.wq.value.rows();
    if (prefix.cols() != d || sequence.cols() != d) {
        throw ShapeError("prefix " + shape_string(prefix.shape()) + " and sequence " + shape_string(sequence.shape()) +
                         " must have width " + std::to_string(d));
    }
    require_heads(d, n_heads);
    const std::size_t dh = d / n_heads;
    const Tensor composed = concat_rows(prefix, sequence);
    const Tensor q = matmul(composed, w.wq.value);
    const Tensor pk = matmul(prefix, w.wk.value), pv = matmul(prefix, w.wv.value);
    const Tensor ck = matmul(sequence, w.wk.value), cv = matmul(sequence, w.wv.value);
    std::vector<HeadProjections> heads;
    for (std::size_t h = 0; h < n_heads; ++h) {
        heads.push_back({head_block(q, h, dh), head_block(pk, h, dh), head_block(pv, h, dh), head_block(ck, h, dh),
                         head_block(cv, h, dh)});
    }
    return heads;
}

double kernel_mass(std::span<const double> query, const Tensor& keys) {
    double total = 0.0;
    for (std::size_t j = 0; j < keys.rows(); ++j) {
        total += exp_kernel(query, keys.row(j), keys.cols());
    }
    return total;
}

}  // namespace

std::vector<KernelWeighting> lambda_weights(const Tensor& prefix, const Tensor& sequence, const LayerWeights& w,
                                            std::size_t n_heads) {
    std::vector<KernelWeighting> out;
    for (const HeadProjections& head : project_heads(prefix, sequence, w, n_heads)) {
        KernelWeighting kw{Tensor({head.queries.rows()}), std::nullopt};
        for (std::size_t i = 0; i < head.queries.rows(); ++i) {
            const double sp = kernel_mass(head.queries.row(i), head.prefix_keys);
            const double sc = kernel_mass(head.queries.row(i), head.sequence_keys);
            kw.lambda[i] = sp / (sp + sc);
        }
        out.push_back(std::move(kw));
    }
    return out;
}

Tensor kernel_decomposed_attention(const Tensor& prefix, const Tensor& sequence, const LayerWeights& w,
                                   std::size_t n_heads, std::optional<double> alpha) {
    if (alpha && !(*alpha > 0.0)) {
        throw ConfigError("alpha must be positive");
    }
    if (sequence.rank() == 2 && sequence.rows() == 0) {
        throw ShapeError("kernel decomposition needs at least one sequence row");
    }
    const auto heads = project_heads(prefix, sequence, w, n_heads);
    const std::size_t rows = prefix.rows() + sequence.rows();
    const std::size_t dh = w.wq.value.rows() / n_heads;
    Tensor concat({rows, dh * n_heads});
    for (std::size_t h = 0; h < n_heads; ++h) {
        const HeadProjections& head = heads[h];
        const Tensor seq_module = kernel_attention(head.queries, head.sequence_keys, head.sequence_values);
        Tensor combined = seq_module;
        if (head.prefix_keys.rows() > 0) {
            const Tensor prefix_module = kernel_attention(head.queries, head.prefix_keys, head.prefix_values);
            for (std::size_t i = 0; i < rows; ++i) {
                const double sp = kernel_mass(head.queries.row(i), head.prefix_keys);
                const double sc = kernel_mass(head.queries.row(i), head.sequence_keys);
                const double scaled = alpha ? *alpha * sp : sp;
                const double lambda = scaled / (scaled + sc);
                for (std::size_t c = 0; c < dh; ++c) {
                    combined(i, c) = (1.0 - lambda) * seq_module(i, c) + lambda * prefix_module(i, c);
                }
            }
        }
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t c = 0; c < dh; ++c) {
                concat(i, h * dh + c) = combined(i, c);
            }
        }
    }
    return matmul(concat, w.wo.value);
}

Var kernel_decomposed_attention(Var prefix, Var sequence, const AttentionVars& w,
                                const AttentionMask* sequence_mask, std::size_t n_heads,
                                std::optional<double> alpha) {
    if (alpha && !(*alpha > 0.0)) {
        throw ConfigError("alpha must be positive");
    }
    const std::size_t j = prefix.value().rows();
    const std::size_t d = w.wq.value().rows();
    require_heads(d, n_heads);
    const std::size_t dh = d / n_heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const double log_alpha = alpha ? std::log(*alpha) : 0.0;

    Var composed = concat_rows(prefix, sequence);
    Var q = matmul(composed, w.wq);
    Var ck = matmul(sequence, w.wk);
    Var cv = matmul(sequence, w.wv);
    Var pk = matmul(prefix, w.wk);
    Var pv = matmul(prefix, w.wv);

    std::vector<Var> heads;
    for (std::size_t h = 0; h < n_heads; ++h) {
        Var qh = slice_cols(q, h * dh, (h + 1) * dh);
        Var seq_logits = scale(matmul(qh, transpose(slice_cols(ck, h * dh, (h + 1) * dh))), inv_scale);
        Var seq_module = matmul(softmax_rows(seq_logits, sequence_mask), slice_cols(cv, h * dh, (h + 1) * dh));
        if (j == 0) {
            heads.push_back(seq_module);
            continue;
        }
        Var prefix_logits = scale(matmul(qh, transpose(slice_cols(pk, h * dh, (h + 1) * dh))), inv_scale);
        Var prefix_module = matmul(softmax_rows(prefix_logits), slice_cols(pv, h * dh, (h + 1) * dh));
        // lambda = alpha S_P / (alpha S_P + S_C) = sigmoid(lse_P + log alpha - lse_C).
        Var gap = sub(logsumexp_rows(prefix_logits), logsumexp_rows(seq_logits, sequence_mask));
        Var lambda = sigmoid(affine(gap, 1.0, log_alpha));
        heads.push_back(add(scale_rows(seq_module, affine(lambda, -1.0, 1.0)), scale_rows(prefix_module, lambda)));
    }
    return matmul(concat_cols(heads), w.wo);
}

}  // namespace prefixprop
