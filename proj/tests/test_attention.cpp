#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "prefixprop/attention.hpp"
#include "prefixprop/errors.hpp"
#include "prefixprop/gradcheck.hpp"
#include "prefixprop/ops.hpp"
#include "test_support.hpp"

namespace prefixprop {
namespace {

using testing::dense_attention_oracle;
using testing::mask_matrix;
using testing::pick;
using testing::random_tensor;

struct Case {
    std::size_t j, m, d, heads;
};

Case random_case(Rng& rng, std::size_t min_j = 1) {
    static constexpr std::size_t widths[] = {4, 8, 16};
    return {pick(rng, min_j, 4), pick(rng, 2, 16), widths[rng.below(3)], pick(rng, 1, 2)};
}

LayerWeights weights_for(std::size_t d, Rng& rng) {
    return LayerWeights::random(d, 2 * d, rng, "t.", 0.5);
}

TEST(Mask, WindowAndGlobalPositions) {
    AttentionConfig cfg;
    cfg.prefix_len = 2;
    cfg.window = 1;
    cfg.global_positions = {0, 4};
    const std::size_t m = 7;
    const AttentionMask mask = build_mask(cfg, m);
    ASSERT_EQ(mask.rows(), 9u);
    ASSERT_EQ(mask.cols(), 9u);
    for (std::size_t r = 0; r < 9; ++r) {
        for (std::size_t c = 0; c < 9; ++c) {
            bool expect = r < 2 || c < 2;
            if (!expect) {
                const long pr = long(r) - 2, pc = long(c) - 2;
                expect = std::abs(pr - pc) <= 1 || pr == 0 || pc == 0 || pr == 4 || pc == 4;
            }
            EXPECT_EQ(mask.allowed(r, c), expect) << r << "," << c;
        }
    }
}

TEST(Mask, IsSymmetricAndHasDiagonal) {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        AttentionConfig cfg;
        cfg.prefix_len = pick(rng, 0, 4);
        cfg.window = pick(rng, 1, 5);
        const std::size_t m = pick(rng, 1, 20);
        cfg.global_positions = {rng.below(m)};
        const AttentionMask mask = build_mask(cfg, m);
        for (std::size_t r = 0; r < mask.rows(); ++r) {
            EXPECT_TRUE(mask.allowed(r, r));
            for (std::size_t c = 0; c < mask.cols(); ++c) {
                EXPECT_EQ(mask.allowed(r, c), mask.allowed(c, r));
            }
        }
    }
}

TEST(Mask, FullWindowAllowsEverything) {
    AttentionConfig cfg;
    cfg.prefix_len = 3;
    cfg.window.reset();
    EXPECT_TRUE(build_mask(cfg, 10).is_full());
}

TEST(Mask, TuningMaskIsTheSequenceRows) {
    AttentionConfig cfg;
    cfg.prefix_len = 3;
    cfg.window = 2;
    const AttentionMask rows = build_tuning_mask(cfg, 8);
    const AttentionMask full = build_mask(cfg, 8);
    ASSERT_EQ(rows.rows(), 8u);
    for (std::size_t r = 0; r < 8; ++r) {
        for (std::size_t c = 0; c < 11; ++c) {
            EXPECT_EQ(rows.allowed(r, c), full.allowed(r + 3, c));
        }
    }
}

TEST(Mask, GlobalPositionOutsideSequenceThrows) {
    AttentionConfig cfg;
    cfg.global_positions = {5};
    EXPECT_THROW(build_mask(cfg, 5), IndexError);
    EXPECT_THROW(build_mask(cfg, 0), LengthError);
}

TEST(AttentionConfig, RejectsIndivisibleHeads) {
    AttentionConfig cfg;
    cfg.d_model = 10;
    cfg.n_heads = 4;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg.d_model = 12;
    cfg.window = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(PrefixBank, PropagationHasHalfTheParametersOfTuning) {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t layers = pick(rng, 1, 6), j = pick(rng, 1, 32), d = 4 * pick(rng, 1, 32);
        const PrefixBank prop = PrefixBank::create(PrefixMode::propagation, layers, j, d, rng);
        const PrefixBank tune = PrefixBank::create(PrefixMode::prefix_tuning, layers, j, d, rng);
        EXPECT_EQ(prop.trainable_count(), layers * j * d);
        EXPECT_EQ(tune.trainable_count(), 2 * layers * j * d);
        EXPECT_EQ(2 * prop.trainable_count(), tune.trainable_count());
    }
}

TEST(PrefixBank, InitialValuesHaveTheRequestedScale) {
    Rng rng(6);
    const PrefixBank bank = PrefixBank::create(PrefixMode::propagation, 2, 50, 40, rng, 0.02);
    double s2 = 0.0;
    std::size_t n = 0;
    for (const Parameter* p : bank.parameters()) {
        for (double v : p->value.data()) {
            s2 += v * v;
            ++n;
        }
    }
    EXPECT_NEAR(std::sqrt(s2 / n), 0.02, 0.002);
}

TEST(ComposePropagation, FirstLayerConcatenatesLaterLayersAdd) {
    const Tensor input = Tensor::matrix({{1, 1}, {2, 2}, {3, 3}});
    const Tensor prefix = Tensor::matrix({{10, 20}});
    EXPECT_EQ(compose_propagation_input(input, prefix, 1), Tensor::matrix({{10, 20}, {1, 1}, {2, 2}, {3, 3}}));
    EXPECT_EQ(compose_propagation_input(input, prefix, 2), Tensor::matrix({{11, 21}, {2, 2}, {3, 3}}));
    EXPECT_THROW(compose_propagation_input(input, prefix, 0), ConfigError);
    EXPECT_THROW(compose_propagation_input(input, Tensor({1, 3}), 2), ShapeError);
}

TEST(StandardAttention, MatchesDenseOracleUnderMask) {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const Case c = random_case(rng, 0);
        const LayerWeights w = weights_for(c.d, rng);
        AttentionConfig cfg;
        cfg.d_model = c.d;
        cfg.n_heads = c.heads;
        cfg.prefix_len = c.j;
        cfg.window = pick(rng, 1, 4);
        const AttentionMask mask = build_mask(cfg, c.m);
        const Tensor composed = random_tensor({c.j + c.m, c.d}, rng);
        const auto allow = mask_matrix(mask);
        const Tensor expect = dense_attention_oracle(composed, composed, composed, w, c.heads, &allow);
        EXPECT_LT(max_abs_diff(prefix_propagation_attention(composed, w, mask, c.heads), expect), 1e-12);
    }
}

TEST(PrefixTuningAttention, MatchesDenseOracleWithPrependedKeys) {
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        const Case c = random_case(rng);
        const LayerWeights w = weights_for(c.d, rng);
        const PrefixBank bank = PrefixBank::create(PrefixMode::prefix_tuning, 1, c.j, c.d, rng, 1.0);
        AttentionConfig cfg;
        cfg.d_model = c.d;
        cfg.n_heads = c.heads;
        cfg.prefix_len = 0;
        cfg.window = pick(rng, 1, 4);
        const AttentionMask seq_mask = build_mask(cfg, c.m);
        const Tensor seq = random_tensor({c.m, c.d}, rng);
        const auto allow = mask_matrix(seq_mask);
        const Tensor expect = dense_attention_oracle(seq, seq, seq, w, c.heads, &allow, &bank.keys[0].value,
                                                     &bank.values[0].value);
        EXPECT_LT(max_abs_diff(prefix_tuning_attention(seq, bank, 1, w, seq_mask, c.heads), expect), 1e-12);

        // The [m x (j + m)] form of the mask gives the same result.
        cfg.prefix_len = c.j;
        const AttentionMask wide = build_tuning_mask(cfg, c.m);
        EXPECT_LT(max_abs_diff(prefix_tuning_attention(seq, bank, 1, w, wide, c.heads), expect), 1e-12);
    }
}

TEST(PrefixTuningAttention, OutputKeepsSequenceLength) {
    Rng rng(10);
    const LayerWeights w = weights_for(8, rng);
    const PrefixBank bank = PrefixBank::create(PrefixMode::prefix_tuning, 2, 3, 8, rng);
    const Tensor seq = random_tensor({5, 8}, rng);
    EXPECT_EQ(prefix_tuning_attention(seq, bank, 2, w, AttentionMask::full(5, 5), 2).shape(), (Shape{5, 8}));
    EXPECT_THROW(prefix_tuning_attention(seq, bank, 3, w, AttentionMask::full(5, 5), 2), IndexError);
    const PrefixBank prop = PrefixBank::create(PrefixMode::propagation, 2, 3, 8, rng);
    EXPECT_THROW(prefix_tuning_attention(seq, prop, 1, w, AttentionMask::full(5, 5), 2), ConfigError);
}

TEST(PrefixTuningAttention, EmptyPrefixIsStandardAttention) {
    Rng rng(11);
    const LayerWeights w = weights_for(8, rng);
    const PrefixBank bank = PrefixBank::create(PrefixMode::prefix_tuning, 1, 0, 8, rng);
    const Tensor seq = random_tensor({6, 8}, rng);
    const AttentionMask mask = AttentionMask::full(6, 6);
    EXPECT_EQ(prefix_tuning_attention(seq, bank, 1, w, mask, 2), standard_attention(seq, seq, seq, w, mask, 2));
}

TEST(KernelAttention, MatchesDirectKernelSmoother) {
    Rng rng(12);
    const Tensor q = random_tensor({3, 4}, rng);
    const Tensor k = random_tensor({5, 4}, rng);
    const Tensor v = random_tensor({5, 2}, rng);
    const Tensor out = kernel_attention(q, k, v);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t c = 0; c < 2; ++c) {
            double num = 0.0, den = 0.0;
            for (std::size_t j = 0; j < 5; ++j) {
                double dot = 0.0;
                for (std::size_t e = 0; e < 4; ++e) {
                    dot += q(i, e) * k(j, e);
                }
                const double kv = std::exp(dot / 2.0);
                num += kv * v(j, c);
                den += kv;
            }
            EXPECT_NEAR(out(i, c), num / den, 1e-13);
        }
    }
    EXPECT_THROW(kernel_attention(q, Tensor({0, 4}), Tensor({0, 2})), ShapeError);
}

TEST(KernelDecomposition, BothRoutesReproduceFullAttention) {
    Rng rng(13);
    for (int trial = 0; trial < 100; ++trial) {
        const Case c = random_case(rng);
        const LayerWeights w = weights_for(c.d, rng);
        const Tensor p = random_tensor({c.j, c.d}, rng);
        const Tensor seq = random_tensor({c.m, c.d}, rng);
        const Tensor composed = concat_rows(p, seq);
        const Tensor expect = dense_attention_oracle(composed, composed, composed, w, c.heads);

        EXPECT_LT(max_abs_diff(kernel_decomposed_attention(p, seq, w, c.heads, std::nullopt), expect), 1e-10);
        Tape tape(false);
        const Tensor smooth = kernel_decomposed_attention(tape.constant_ref(p), tape.constant_ref(seq),
                                                          bind_attention_constant(tape, w), nullptr, c.heads,
                                                          std::nullopt)
                                  .value();
        EXPECT_LT(max_abs_diff(smooth, expect), 1e-10);
    }
}

TEST(KernelDecomposition, LambdaIsStrictlyBetweenZeroAndOneAndMatchesMassRatio) {
    Rng rng(14);
    for (int trial = 0; trial < 20; ++trial) {
        const Case c = random_case(rng);
        const LayerWeights w = weights_for(c.d, rng);
        const Tensor p = random_tensor({c.j, c.d}, rng);
        const Tensor seq = random_tensor({c.m, c.d}, rng);
        const auto lambdas = lambda_weights(p, seq, w, c.heads);
        ASSERT_EQ(lambdas.size(), c.heads);
        const Tensor q = matmul(concat_rows(p, seq), w.wq.value);
        const Tensor pk = matmul(p, w.wk.value), ck = matmul(seq, w.wk.value);
        const std::size_t dh = c.d / c.heads;
        for (std::size_t h = 0; h < c.heads; ++h) {
            ASSERT_EQ(lambdas[h].lambda.size(), c.j + c.m);
            for (std::size_t i = 0; i < c.j + c.m; ++i) {
                const auto mass = [&](const Tensor& keys) {
                    double s = 0.0;
                    for (std::size_t r = 0; r < keys.rows(); ++r) {
                        double dot = 0.0;
                        for (std::size_t e = 0; e < dh; ++e) {
                            dot += q(i, h * dh + e) * keys(r, h * dh + e);
                        }
                        s += std::exp(dot / std::sqrt(double(dh)));
                    }
                    return s;
                };
                const double l = lambdas[h].lambda[i];
                EXPECT_GT(l, 0.0);
                EXPECT_LT(l, 1.0);
                EXPECT_NEAR(l, mass(pk) / (mass(pk) + mass(ck)), 1e-12);
            }
        }
    }
}

TEST(KernelDecomposition, AlphaOneEqualsExactSplitAndAlphaShiftsTowardPrefix) {
    Rng rng(15);
    const LayerWeights w = weights_for(8, rng);
    const Tensor p = random_tensor({2, 8}, rng);
    const Tensor seq = random_tensor({6, 8}, rng);
    const Tensor exact = kernel_decomposed_attention(p, seq, w, 2, std::nullopt);
    EXPECT_LT(max_abs_diff(kernel_decomposed_attention(p, seq, w, 2, 1.0), exact), 1e-14);

    // With alpha, each head row is (1 - l_a) Kern_C + l_a Kern_P with l_a = a S_P / (a S_P + S_C).
    const double alpha = 3.0;
    const Tensor got = kernel_decomposed_attention(p, seq, w, 2, alpha);
    const Tensor q = matmul(concat_rows(p, seq), w.wq.value);
    const Tensor pk = matmul(p, w.wk.value), pv = matmul(p, w.wv.value);
    const Tensor ck = matmul(seq, w.wk.value), cv = matmul(seq, w.wv.value);
    Tensor heads({8, 8});
    for (std::size_t h = 0; h < 2; ++h) {
        const Tensor qh = slice_cols(q, 4 * h, 4 * h + 4);
        const Tensor kp = kernel_attention(qh, slice_cols(pk, 4 * h, 4 * h + 4), slice_cols(pv, 4 * h, 4 * h + 4));
        const Tensor kc = kernel_attention(qh, slice_cols(ck, 4 * h, 4 * h + 4), slice_cols(cv, 4 * h, 4 * h + 4));
        const auto lam = lambda_weights(p, seq, w, 2)[h].lambda;
        for (std::size_t i = 0; i < 8; ++i) {
            // S_P / S_C from the exact lambda.
            const double ratio = lam[i] / (1.0 - lam[i]);
            const double la = alpha * ratio / (alpha * ratio + 1.0);
            for (std::size_t e = 0; e < 4; ++e) {
                heads(i, 4 * h + e) = (1.0 - la) * kc(i, e) + la * kp(i, e);
            }
        }
    }
    EXPECT_LT(max_abs_diff(got, matmul(heads, w.wo.value)), 1e-12);

    Tape tape(false);
    const Tensor smooth = kernel_decomposed_attention(tape.constant_ref(p), tape.constant_ref(seq),
                                                      bind_attention_constant(tape, w), nullptr, 2, alpha)
                              .value();
    EXPECT_LT(max_abs_diff(smooth, got), 1e-12);
    EXPECT_THROW(kernel_decomposed_attention(p, seq, w, 2, 0.0), ConfigError);
}

TEST(KernelDecomposition, MaskedFormMatchesMaskedPropagation) {
    Rng rng(16);
    for (int trial = 0; trial < 20; ++trial) {
        const Case c = random_case(rng);
        const LayerWeights w = weights_for(c.d, rng);
        AttentionConfig cfg;
        cfg.d_model = c.d;
        cfg.n_heads = c.heads;
        cfg.prefix_len = c.j;
        cfg.window = pick(rng, 1, 3);
        const AttentionMask mask = build_mask(cfg, c.m);
        const AttentionMask seq_cols = mask.select_cols(c.j, c.j + c.m);
        const Tensor p = random_tensor({c.j, c.d}, rng);
        const Tensor seq = random_tensor({c.m, c.d}, rng);
        Tape tape(false);
        const Tensor got = kernel_decomposed_attention(tape.constant_ref(p), tape.constant_ref(seq),
                                                       bind_attention_constant(tape, w), &seq_cols, c.heads,
                                                       std::nullopt)
                               .value();
        const Tensor expect = prefix_propagation_attention(concat_rows(p, seq), w, mask, c.heads);
        EXPECT_LT(max_abs_diff(got, expect), 1e-10);
    }
}

TEST(KernelDecomposition, EmptyPrefixIsTheSequenceModule) {
    Rng rng(17);
    for (int trial = 0; trial < 10; ++trial) {
        const Case c = random_case(rng, 0);
        const LayerWeights w = weights_for(c.d, rng);
        const Tensor p({0, c.d});
        const Tensor seq = random_tensor({c.m, c.d}, rng);
        const Tensor literal = kernel_decomposed_attention(p, seq, w, c.heads, std::nullopt);
        const Tensor expect = dense_attention_oracle(seq, seq, seq, w, c.heads);
        EXPECT_LT(max_abs_diff(literal, expect), 1e-12);
    }
}

// Gradients of each attention variant with respect to its prefix parameters.
TEST(AttentionGradients, PrefixParametersOfEveryVariant) {
    Rng rng(18);
    for (int trial = 0; trial < 4; ++trial) {
        const Case c = random_case(rng);
        LayerWeights w = weights_for(c.d, rng);
        for (Parameter* p : w.parameters()) {
            p->trainable = false;
        }
        AttentionConfig cfg;
        cfg.d_model = c.d;
        cfg.n_heads = c.heads;
        cfg.prefix_len = c.j;
        cfg.window = 2;
        const AttentionMask mask = build_mask(cfg, c.m);
        const AttentionMask tuning_mask = build_tuning_mask(cfg, c.m);
        const AttentionMask seq_cols = mask.select_cols(c.j, c.j + c.m);
        const Tensor seq = random_tensor({c.m, c.d}, rng);
        const Tensor proj_prop = random_tensor({c.j + c.m, c.d}, rng);
        const Tensor proj_tune = random_tensor({c.m, c.d}, rng);
        Parameter prefix("prefix.0", random_tensor({c.j, c.d}, rng));
        Parameter keys("prefix.0.key", random_tensor({c.j, c.d}, rng));
        Parameter values("prefix.0.value", random_tensor({c.j, c.d}, rng));

        std::vector<Parameter*> prop_params{&prefix};
        const auto propagation = grad_check(
            [&](Tape& t) {
                Var composed = compose_propagation_input(t.constant_ref(seq), t.bind(prefix), 1);
                Var out = prefix_propagation_attention(composed, bind_attention(t, w), mask, c.heads);
                return sum(mul(out, t.constant_ref(proj_prop)));
            },
            prop_params);
        EXPECT_LT(propagation.max_relative_error, 1e-5);
        EXPECT_TRUE(propagation.passed);

        std::vector<Parameter*> tune_params{&keys, &values};
        const auto tuning = grad_check(
            [&](Tape& t) {
                Var out = prefix_tuning_attention(t.constant_ref(seq), t.bind(keys), t.bind(values),
                                                  bind_attention(t, w), tuning_mask, c.heads);
                return sum(mul(out, t.constant_ref(proj_tune)));
            },
            tune_params);
        EXPECT_LT(tuning.max_relative_error, 1e-5);
        EXPECT_TRUE(tuning.passed);

        for (std::optional<double> alpha : {std::optional<double>{}, std::optional<double>{0.5}}) {
            const auto kernel = grad_check(
                [&](Tape& t) {
                    Var out = kernel_decomposed_attention(t.bind(prefix), t.constant_ref(seq), bind_attention(t, w),
                                                          &seq_cols, c.heads, alpha);
                    return sum(mul(out, t.constant_ref(proj_prop)));
                },
                prop_params);
            EXPECT_LT(kernel.max_relative_error, 1e-5);
            EXPECT_TRUE(kernel.passed);
        }
        for (const Parameter* p : w.parameters()) {
            EXPECT_EQ(p->grad, Tensor::zeros_like(p->value)) << p->name;
        }
    }
}

}  // namespace
}  // namespace prefixprop
