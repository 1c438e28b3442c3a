#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "prefixprop/errors.hpp"
#include "prefixprop/gradcheck.hpp"
#include "prefixprop/ops.hpp"
#include "test_support.hpp"

namespace prefixprop {
namespace {

using testing::pick;
using testing::random_tensor;

AttentionMask random_mask(std::size_t rows, std::size_t cols, Rng& rng) {
    std::vector<std::uint8_t> allow(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t keep = rng.below(cols);
        for (std::size_t c = 0; c < cols; ++c) {
            allow[r * cols + c] = (c == keep || rng.uniform() < 0.5) ? 1 : 0;
        }
    }
    return AttentionMask(rows, cols, std::move(allow));
}

TEST(Softmax, RowsSumToOneAndMaskedEntriesAreExactlyZero) {
    Rng rng(1);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t rows = pick(rng, 1, 6), cols = pick(rng, 1, 9);
        const Tensor x = random_tensor({rows, cols}, rng, 5.0);
        const AttentionMask mask = random_mask(rows, cols, rng);
        const Tensor p = softmax_rows(x, &mask);
        for (std::size_t r = 0; r < rows; ++r) {
            double total = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                if (!mask.allowed(r, c)) {
                    EXPECT_EQ(p(r, c), 0.0);
                }
                EXPECT_GE(p(r, c), 0.0);
                total += p(r, c);
            }
            EXPECT_NEAR(total, 1.0, 1e-12);
        }
    }
}

TEST(Softmax, MatchesDefinition) {
    const Tensor x = Tensor::matrix({{1.0, 2.0, 3.0}});
    const Tensor p = softmax_rows(x);
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    EXPECT_NEAR(p(0, 0), std::exp(1.0) / z, 1e-15);
    EXPECT_NEAR(p(0, 2), std::exp(3.0) / z, 1e-15);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
    const Tensor p = softmax_rows(Tensor::matrix({{1000.0, 1000.0}}));
    EXPECT_DOUBLE_EQ(p(0, 0), 0.5);
}

TEST(Softmax, FullyMaskedRowThrows) {
    const AttentionMask mask(2, 2, {1, 1, 0, 0});
    EXPECT_THROW(softmax_rows(Tensor({2, 2}), &mask), DegenerateRowError);
}

TEST(Softmax, MaskShapeMismatchThrows) {
    const AttentionMask mask = AttentionMask::full(2, 3);
    EXPECT_THROW(softmax_rows(Tensor({2, 2}), &mask), ShapeError);
}

TEST(LogSumExp, MatchesNaiveSum) {
    Rng rng(2);
    const Tensor x = random_tensor({4, 5}, rng);
    const AttentionMask mask = random_mask(4, 5, rng);
    const Tensor l = logsumexp_rows(x, &mask);
    for (std::size_t r = 0; r < 4; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < 5; ++c) {
            if (mask.allowed(r, c)) {
                s += std::exp(x(r, c));
            }
        }
        EXPECT_NEAR(l[r], std::log(s), 1e-13);
    }
}

TEST(LayerNorm, MatchesDefinition) {
    const Tensor x = Tensor::matrix({{1.0, 2.0, 3.0, 6.0}});
    const Tensor gamma = Tensor::vector({1.0, 2.0, 1.0, 1.0});
    const Tensor beta = Tensor::vector({0.0, 0.0, 1.0, 0.0});
    const Tensor y = layer_norm(x, gamma, beta, 1e-5);
    const double mean = 3.0;
    const double var = (4.0 + 1.0 + 0.0 + 9.0) / 4.0;
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    EXPECT_NEAR(y(0, 0), (1.0 - mean) * inv, 1e-14);
    EXPECT_NEAR(y(0, 1), 2.0 * (2.0 - mean) * inv, 1e-14);
    EXPECT_NEAR(y(0, 2), 1.0, 1e-14);
    EXPECT_NEAR(y(0, 3), (6.0 - mean) * inv, 1e-14);
}

TEST(Gelu, KnownValues) {
    EXPECT_EQ(gelu(0.0), 0.0);
    // x * Phi(x) with the exact normal CDF.
    EXPECT_NEAR(gelu(1.0), 0.8413447460685429, 1e-12);
    EXPECT_NEAR(gelu(-1.0), -0.15865525393145707, 1e-12);
}

TEST(Autodiff, FrozenParametersReceiveNoGradient) {
    Parameter a("a", Tensor::matrix({{1.0, 2.0}}), true);
    Parameter b("b", Tensor::matrix({{3.0}, {4.0}}), false);
    Tape tape;
    Var loss = sum(matmul(tape.bind(a), tape.bind(b)));
    tape.backward(loss);
    EXPECT_EQ(a.grad, Tensor::matrix({{3.0, 4.0}}));
    EXPECT_EQ(b.grad, Tensor::zeros_like(b.value));
}

TEST(Autodiff, GradientsAccumulateAcrossUses) {
    Parameter a("a", Tensor::matrix({{2.0}}));
    Tape tape;
    Var x = tape.bind(a);
    tape.backward(sum(mul(x, x)));
    EXPECT_DOUBLE_EQ(a.grad[0], 4.0);
}

TEST(Autodiff, NonRecordingTapeOnlyEvaluates) {
    Parameter a("a", Tensor::matrix({{2.0}}));
    Tape tape(false);
    Var y = scale(tape.bind(a), 3.0);
    EXPECT_DOUBLE_EQ(y.value()[0], 6.0);
    EXPECT_THROW(tape.backward(y), std::logic_error);
}

TEST(Autodiff, TapeIsSingleUse) {
    Parameter a("a", Tensor::matrix({{2.0}}));
    Tape tape;
    Var y = sum(tape.bind(a));
    tape.backward(y);
    EXPECT_THROW(tape.backward(y), std::logic_error);
}

TEST(Autodiff, BackwardNeedsScalarLoss) {
    Parameter a("a", Tensor::matrix({{2.0, 1.0}}));
    Tape tape;
    EXPECT_THROW(tape.backward(tape.bind(a)), ShapeError);
}

// Gradient check of every differentiable op through a random scalar projection.
class OpGradient : public ::testing::Test {
protected:
    Rng rng{17};

    void check(const std::vector<Parameter*>& params, const LossFn& fn) {
        const GradCheckReport report = grad_check(fn, params, 1e-5);
        EXPECT_TRUE(report.passed) << "max relative error " << report.max_relative_error;
        EXPECT_LT(report.max_relative_error, 1e-5);
    }

    // sum(out * weights) so every output coordinate matters.
    static Var project(Tape& tape, Var out, const Tensor& weights) {
        return sum(mul(out, tape.constant_ref(weights)));
    }
};

TEST_F(OpGradient, ElementwiseAndMatrixOps) {
    Parameter a("a", random_tensor({3, 4}, rng));
    Parameter b("b", random_tensor({4, 2}, rng));
    Parameter c("c", random_tensor({3, 4}, rng));
    Parameter bias("bias", random_tensor({4}, rng));
    Parameter w("w", random_tensor({3}, rng));
    const Tensor proj = random_tensor({3, 2}, rng);
    check({&a, &b, &c, &bias, &w}, [&](Tape& t) {
        Var x = add_bias(add(t.bind(a), mul(t.bind(c), t.bind(a))), t.bind(bias));
        x = sub(scale_rows(x, t.bind(w)), affine(t.bind(c), 0.5, 1.0));
        Var y = matmul(gelu(x), t.bind(b));
        return sum(mul(sigmoid(y), t.constant(proj)));
    });
}

TEST_F(OpGradient, StructuralOps) {
    Parameter a("a", random_tensor({3, 4}, rng));
    Parameter b("b", random_tensor({2, 4}, rng));
    Parameter table("table", random_tensor({5, 3}, rng));
    const std::vector<int> ids{4, 0, 4, 2};
    const Tensor proj = random_tensor({4, 5}, rng);
    check({&a, &b, &table}, [&](Tape& t) {
        Var both = concat_rows(t.bind(a), t.bind(b));
        Var parts[] = {slice_cols(both, 1, 3), transpose(slice_rows(transpose(both), 0, 3))};
        Var wide = concat_cols(parts);
        Var picked = gather_rows(t.bind(table), ids);
        Var doubled = concat_cols(std::vector<Var>{picked, slice_cols(picked, 0, 2)});
        Var m = matmul(slice_rows(wide, 1, 5), transpose(doubled));
        return add(sum(mul(slice_cols(m, 0, 4), t.constant(slice_cols(proj, 0, 4)))), sum_squares(picked));
    });
}

TEST_F(OpGradient, NormalizationAndSoftmax) {
    Parameter x("x", random_tensor({3, 5}, rng));
    Parameter gamma("gamma", random_tensor({5}, rng));
    Parameter beta("beta", random_tensor({5}, rng));
    const AttentionMask mask = random_mask(3, 5, rng);
    const Tensor wp = random_tensor({3, 5}, rng);
    const Tensor wl = random_tensor({3}, rng);
    check({&x, &gamma, &beta}, [&](Tape& t) {
        Var ln = layer_norm(t.bind(x), t.bind(gamma), t.bind(beta), 1e-5);
        return add(project(t, softmax_rows(ln, &mask), wp), project(t, logsumexp_rows(ln, &mask), wl));
    });
}

TEST_F(OpGradient, CrossEntropy) {
    Parameter z("z", random_tensor({1, 4}, rng));
    check({&z}, [&](Tape& t) { return cross_entropy(t.bind(z), 2); });
}

TEST_F(OpGradient, MaskedAttention) {
    for (std::size_t heads : {1u, 2u}) {
        Parameter q("q", random_tensor({4, 6}, rng));
        Parameter k("k", random_tensor({5, 6}, rng));
        Parameter v("v", random_tensor({5, 6}, rng));
        const AttentionMask mask = random_mask(4, 5, rng);
        const Tensor wo = random_tensor({4, 6}, rng);
        check({&q, &k, &v}, [&](Tape& t) {
            return project(t, masked_attention(t.bind(q), t.bind(k), t.bind(v), mask, heads), wo);
        });
    }
}

TEST(MaskedAttention, MatchesDenseOracle) {
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t heads = pick(rng, 1, 2);
        const std::size_t d = heads * pick(rng, 1, 4);
        const std::size_t nq = pick(rng, 1, 6), nk = pick(rng, 1, 7);
        const Tensor q = random_tensor({nq, d}, rng);
        const Tensor k = random_tensor({nk, d}, rng);
        const Tensor v = random_tensor({nk, d}, rng);
        const AttentionMask mask = random_mask(nq, nk, rng);
        Tape tape(false);
        const Tensor got =
            masked_attention(tape.constant_ref(q), tape.constant_ref(k), tape.constant_ref(v), mask, heads).value();
        const std::size_t dh = d / heads;
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < nq; ++i) {
                std::vector<double> w(nk, 0.0);
                double total = 0.0;
                for (std::size_t j = 0; j < nk; ++j) {
                    if (!mask.allowed(i, j)) {
                        continue;
                    }
                    double dot = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) {
                        dot += q(i, h * dh + c) * k(j, h * dh + c);
                    }
                    w[j] = std::exp(dot / std::sqrt(static_cast<double>(dh)));
                    total += w[j];
                }
                for (std::size_t c = 0; c < dh; ++c) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < nk; ++j) {
                        s += w[j] * v(j, h * dh + c);
                    }
                    EXPECT_NEAR(got(i, h * dh + c), s / total, 1e-12);
                }
            }
        }
    }
}

TEST(Dropout, IdentityOutsideTrainingAndScaledInside) {
    Rng rng(3);
    Tape tape(false);
    const Tensor x({1, 2000}, 1.0);
    Var in = tape.constant(x);
    EXPECT_EQ(dropout(in, 0.5, false, rng).value(), x);
    const Tensor y = dropout(in, 0.25, true, rng).value();
    std::size_t kept = 0;
    for (double v : y.data()) {
        ASSERT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-15);
        kept += v != 0.0;
    }
    EXPECT_NEAR(static_cast<double>(kept) / 2000.0, 0.75, 0.04);
}

TEST(GradCheck, DetectsAWrongGradient) {
    Parameter p("p", Tensor::matrix({{0.3, -0.7}}));
    // Forward is x^2 but the backward claims 3x.
    const LossFn wrong = [&](Tape& t) {
        Var x = t.bind(p);
        Tensor v = x.value();
        double s = 0.0;
        for (double e : v.data()) {
            s += e * e;
        }
        return t.record(Tensor({1}, s), {x},
                        [x, &t](const Tensor& g) { t.accumulate(x, scale(x.value(), 3.0 * g[0])); });
    };
    std::vector<Parameter*> params{&p};
    EXPECT_FALSE(grad_check(wrong, params).passed);
}

TEST(GradCheck, RejectsStepOutsideRange) {
    Parameter p("p", Tensor::matrix({{1.0}}));
    std::vector<Parameter*> params{&p};
    const LossFn fn = [&](Tape& t) { return sum(t.bind(p)); };
    EXPECT_THROW(grad_check(fn, params, 1e-3), ConfigError);
    EXPECT_THROW(grad_check(fn, params, 1e-8), ConfigError);
}

TEST(GradCheck, RejectsNondeterministicLoss) {
    Parameter p("p", Tensor::matrix({{1.0}}));
    std::vector<Parameter*> params{&p};
    int calls = 0;
    const LossFn fn = [&](Tape& t) { return scale(sum(t.bind(p)), 1.0 + 1e-3 * ++calls); };
    EXPECT_THROW(grad_check(fn, params), DeterminismError);
}

}  // namespace
}  // namespace prefixprop
