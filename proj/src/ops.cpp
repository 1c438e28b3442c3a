#include "prefixprop/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "prefixprop/errors.hpp"
#include "vector_clones.hpp"

namespace prefixprop {

namespace {

void check_mask(const Tensor& m, const AttentionMask* mask, const char* what) {
    if (mask && (mask->rows() != m.rows() || mask->cols() != m.cols())) {
        throw ShapeError(std::string(what) + ": mask [" + std::to_string(mask->rows()) + "x" +
                         std::to_string(mask->cols()) + "] does not match " + shape_string(m.shape()));
    }
}

void degenerate(std::size_t r) {
    throw DegenerateRowError("softmax row " + std::to_string(r) + " has no unmasked entry");
}

Tensor ones_like(const Tensor& t) {
    return Tensor(t.shape(), 1.0);
}

}  // namespace

// ---------------------------------------------------------------------------
// Value-level kernels
// ---------------------------------------------------------------------------

Tensor softmax_rows(const Tensor& m, const AttentionMask* mask) {
    require_matrix(m, "softmax_rows");
    check_mask(m, mask, "softmax_rows");
    Tensor out(m.shape());
    const std::size_t cols = m.cols();
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto in = m.row(r);
        auto o = out.row(r);
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t c = 0; c < cols; ++c) {
            if (!mask || mask->allowed(r, c)) {
                mx = std::max(mx, in[c]);
                any = true;
            }
        }
        if (!any) {
            degenerate(r);
        }
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            if (!mask || mask->allowed(r, c)) {
                o[c] = std::exp(in[c] - mx);
                total += o[c];
            }
        }
        for (std::size_t c = 0; c < cols; ++c) {
            o[c] /= total;
        }
    }
    return out;
}

Tensor logsumexp_rows(const Tensor& m, const AttentionMask* mask) {
    require_matrix(m, "logsumexp_rows");
    check_mask(m, mask, "logsumexp_rows");
    Tensor out({m.rows()});
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto in = m.row(r);
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t c = 0; c < m.cols(); ++c) {
            if (!mask || mask->allowed(r, c)) {
                mx = std::max(mx, in[c]);
                any = true;
            }
        }
        if (!any) {
            degenerate(r);
        }
        double total = 0.0;
        for (std::size_t c = 0; c < m.cols(); ++c) {
            if (!mask || mask->allowed(r, c)) {
                total += std::exp(in[c] - mx);
            }
        }
        out[r] = mx + std::log(total);
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require_matrix(x, "layer_norm");
    if (!(eps > 0.0)) {
        throw ConfigError("layer_norm: eps must be positive");
    }
    const std::size_t d = x.cols();
    if (gamma.size() != d || beta.size() != d) {
        throw ShapeError("layer_norm: gamma/beta " + shape_string(gamma.shape()) + "/" +
                         shape_string(beta.shape()) + " do not match width " + std::to_string(d));
    }
    Tensor out(x.shape());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto in = x.row(r);
        double mean = 0.0;
        for (double v : in) {
            mean += v;
        }
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (double v : in) {
            var += (v - mean) * (v - mean);
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        auto o = out.row(r);
        for (std::size_t c = 0; c < d; ++c) {
            o[c] = (in[c] - mean) * inv * gamma[c] + beta[c];
        }
    }
    return out;
}

double gelu(double x) noexcept {
    return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

// ---------------------------------------------------------------------------
// Differentiable ops
// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
    Tape& t = a.tape();
    return t.record(matmul(a.value(), b.value()), {a, b}, [a, b, &t](const Tensor& g) {
        if (a.requires_grad()) {
            t.accumulate(a, matmul_nt(g, b.value()));
        }
        if (b.requires_grad()) {
            t.accumulate(b, matmul_tn(a.value(), g));
        }
    });
}

Var add(Var a, Var b) {
    Tape& t = a.tape();
    return t.record(add(a.value(), b.value()), {a, b}, [a, b, &t](const Tensor& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

Var sub(Var a, Var b) {
    Tape& t = a.tape();
    return t.record(sub(a.value(), b.value()), {a, b}, [a, b, &t](const Tensor& g) {
        t.accumulate(a, g);
        if (b.requires_grad()) {
            t.accumulate(b, scale(g, -1.0));
        }
    });
}

Var scale(Var a, double s) {
    Tape& t = a.tape();
    return t.record(scale(a.value(), s), {a}, [a, s, &t](const Tensor& g) { t.accumulate(a, scale(g, s)); });
}

Var affine(Var a, double s, double shift) {
    Tape& t = a.tape();
    Tensor out = a.value();
    for (auto& v : out.data()) {
        v = s * v + shift;
    }
    return t.record(std::move(out), {a}, [a, s, &t](const Tensor& g) { t.accumulate(a, scale(g, s)); });
}

Var mul(Var a, Var b) {
    Tape& t = a.tape();
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= b.value()[i];
    }
    return t.record(std::move(out), {a, b}, [a, b, &t](const Tensor& g) {
        if (a.requires_grad()) {
            Tensor ga = g;
            for (std::size_t i = 0; i < ga.size(); ++i) {
                ga[i] *= b.value()[i];
            }
            t.accumulate(a, ga);
        }
        if (b.requires_grad()) {
            Tensor gb = g;
            for (std::size_t i = 0; i < gb.size(); ++i) {
                gb[i] *= a.value()[i];
            }
            t.accumulate(b, gb);
        }
    });
}

Var add_bias(Var x, Var bias) {
    Tape& t = x.tape();
    const Tensor& xv = x.value();
    require_matrix(xv, "add_bias");
    if (bias.value().size() != xv.cols()) {
        throw ShapeError("add_bias: bias " + shape_string(bias.value().shape()) + " does not match " +
                         shape_string(xv.shape()));
    }
    Tensor out = xv;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) {
            row[c] += bias.value()[c];
        }
    }
    return t.record(std::move(out), {x, bias}, [x, bias, &t](const Tensor& g) {
        t.accumulate(x, g);
        if (bias.requires_grad()) {
            Tensor gb = Tensor::zeros_like(bias.value());
            for (std::size_t r = 0; r < g.rows(); ++r) {
                auto row = g.row(r);
                for (std::size_t c = 0; c < row.size(); ++c) {
                    gb[c] += row[c];
                }
            }
            t.accumulate(bias, gb);
        }
    });
}

Var scale_rows(Var x, Var w) {
    Tape& t = x.tape();
    const Tensor& xv = x.value();
    require_matrix(xv, "scale_rows");
    if (w.value().size() != xv.rows()) {
        throw ShapeError("scale_rows: weights " + shape_string(w.value().shape()) + " do not match " +
                         shape_string(xv.shape()));
    }
    Tensor out = xv;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        for (auto& v : out.row(r)) {
            v *= w.value()[r];
        }
    }
    return t.record(std::move(out), {x, w}, [x, w, &t](const Tensor& g) {
        if (x.requires_grad()) {
            Tensor gx = g;
            for (std::size_t r = 0; r < gx.rows(); ++r) {
                for (auto& v : gx.row(r)) {
                    v *= w.value()[r];
                }
            }
            t.accumulate(x, gx);
        }
        if (w.requires_grad()) {
            Tensor gw = Tensor::zeros_like(w.value());
            for (std::size_t r = 0; r < g.rows(); ++r) {
                double acc = 0.0;
                auto gr = g.row(r);
                auto xr = x.value().row(r);
                for (std::size_t c = 0; c < gr.size(); ++c) {
                    acc += gr[c] * xr[c];
                }
                gw[r] = acc;
            }
            t.accumulate(w, gw);
        }
    });
}

Var transpose(Var a) {
    Tape& t = a.tape();
    return t.record(transpose(a.value()), {a}, [a, &t](const Tensor& g) { t.accumulate(a, transpose(g)); });
}

Var concat_rows(Var top, Var bottom) {
    Tape& t = top.tape();
    const std::size_t split = top.value().rows();
    return t.record(concat_rows(top.value(), bottom.value()), {top, bottom},
                    [top, bottom, split, &t](const Tensor& g) {
                        if (top.requires_grad()) {
                            t.accumulate(top, slice_rows(g, 0, split));
                        }
                        if (bottom.requires_grad()) {
                            t.accumulate(bottom, slice_rows(g, split, g.rows()));
                        }
                    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) {
        throw ShapeError("concat_cols: no operands");
    }
    Tape& t = parts.front().tape();
    const std::size_t rows = parts.front().value().rows();
    std::size_t cols = 0;
    for (const Var& p : parts) {
        require_matrix(p.value(), "concat_cols");
        if (p.value().rows() != rows) {
            throw ShapeError("concat_cols: row counts differ");
        }
        cols += p.value().cols();
    }
    Tensor out({rows, cols});
    std::size_t offset = 0;
    for (const Var& p : parts) {
        const Tensor& v = p.value();
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy(v.row(r).begin(), v.row(r).end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(offset));
        }
        offset += v.cols();
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return t.record(std::move(out), parts, [inputs, &t](const Tensor& g) {
        std::size_t off = 0;
        for (const Var& p : inputs) {
            const std::size_t w = p.value().cols();
            if (p.requires_grad()) {
                t.accumulate(p, slice_cols(g, off, off + w));
            }
            off += w;
        }
    });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
    Tape& t = a.tape();
    return t.record(slice_rows(a.value(), begin, end), {a}, [a, begin, &t](const Tensor& g) {
        Tensor& buf = t.grad_buffer(a);
        const std::size_t c = buf.cols();
        for (std::size_t i = 0; i < g.size(); ++i) {
            buf[begin * c + i] += g[i];
        }
    });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
    Tape& t = a.tape();
    return t.record(slice_cols(a.value(), begin, end), {a}, [a, begin, &t](const Tensor& g) {
        Tensor& buf = t.grad_buffer(a);
        for (std::size_t r = 0; r < g.rows(); ++r) {
            auto src = g.row(r);
            auto dst = buf.row(r);
            for (std::size_t c = 0; c < src.size(); ++c) {
                dst[begin + c] += src[c];
            }
        }
    });
}

Var gather_rows(Var table, std::span<const int> ids) {
    Tape& t = table.tape();
    const Tensor& tv = table.value();
    require_matrix(tv, "gather_rows");
    Tensor out({ids.size(), tv.cols()});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
            throw IndexError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                             std::to_string(tv.rows()) + " rows");
        }
        auto src = tv.row(static_cast<std::size_t>(ids[i]));
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    std::vector<int> idx(ids.begin(), ids.end());
    return t.record(std::move(out), {table}, [table, idx = std::move(idx), &t](const Tensor& g) {
        Tensor& buf = t.grad_buffer(table);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            auto dst = buf.row(static_cast<std::size_t>(idx[i]));
            auto src = g.row(i);
            for (std::size_t c = 0; c < src.size(); ++c) {
                dst[c] += src[c];
            }
        }
    });
}

Var gelu(Var x) {
    Tape& t = x.tape();
    Tensor out = x.value();
    for (auto& v : out.data()) {
        v = gelu(v);
    }
    return t.record(std::move(out), {x}, [x, &t](const Tensor& g) {
        Tensor gx = g;
        const Tensor& xv = x.value();
        const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
        for (std::size_t i = 0; i < gx.size(); ++i) {
            const double z = xv[i];
            const double cdf = 0.5 * (1.0 + std::erf(z / std::numbers::sqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * z * z);
            gx[i] *= cdf + z * pdf;
        }
        t.accumulate(x, gx);
    });
}

Var sigmoid(Var x) {
    Tape& t = x.tape();
    Tensor out = x.value();
    for (auto& v : out.data()) {
        v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    return t.record_with_output(std::move(out), {x}, [x, &t](const Tensor& g, const Tensor& s) {
        Tensor gx = g;
        for (std::size_t i = 0; i < gx.size(); ++i) {
            gx[i] *= s[i] * (1.0 - s[i]);
        }
        t.accumulate(x, gx);
    });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    Tape& t = x.tape();
    Tensor out = layer_norm(x.value(), gamma.value(), beta.value(), eps);
    return t.record(std::move(out), {x, gamma, beta}, [x, gamma, beta, eps, &t](const Tensor& g) {
        const Tensor& xv = x.value();
        const Tensor& gv = gamma.value();
        const std::size_t d = xv.cols();
        const double n = static_cast<double>(d);
        Tensor gx(xv.shape());
        Tensor ggamma = Tensor::zeros_like(gv);
        Tensor gbeta = Tensor::zeros_like(beta.value());
        std::vector<double> xhat(d), dxhat(d);
        for (std::size_t r = 0; r < xv.rows(); ++r) {
            auto in = xv.row(r);
            auto gr = g.row(r);
            double mean = 0.0;
            for (double v : in) {
                mean += v;
            }
            mean /= n;
            double var = 0.0;
            for (double v : in) {
                var += (v - mean) * (v - mean);
            }
            var /= n;
            const double inv = 1.0 / std::sqrt(var + eps);
            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                xhat[c] = (in[c] - mean) * inv;
                dxhat[c] = gr[c] * gv[c];
                mean_dxhat += dxhat[c];
                mean_dxhat_xhat += dxhat[c] * xhat[c];
                ggamma[c] += gr[c] * xhat[c];
                gbeta[c] += gr[c];
            }
            mean_dxhat /= n;
            mean_dxhat_xhat /= n;
            auto o = gx.row(r);
            for (std::size_t c = 0; c < d; ++c) {
                o[c] = inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
            }
        }
        t.accumulate(x, gx);
        t.accumulate(gamma, ggamma);
        t.accumulate(beta, gbeta);
    });
}

Var softmax_rows(Var m, const AttentionMask* mask) {
    Tape& t = m.tape();
    return t.record_with_output(softmax_rows(m.value(), mask), {m}, [m, &t](const Tensor& g, const Tensor& p) {
        Tensor gm(p.shape());
        for (std::size_t r = 0; r < p.rows(); ++r) {
            auto pr = p.row(r);
            auto gr = g.row(r);
            double dot = 0.0;
            for (std::size_t c = 0; c < pr.size(); ++c) {
                dot += pr[c] * gr[c];
            }
            auto o = gm.row(r);
            for (std::size_t c = 0; c < pr.size(); ++c) {
                o[c] = pr[c] * (gr[c] - dot);
            }
        }
        t.accumulate(m, gm);
    });
}

Var logsumexp_rows(Var m, const AttentionMask* mask) {
    Tape& t = m.tape();
    std::shared_ptr<const AttentionMask> held = mask ? std::make_shared<AttentionMask>(*mask) : nullptr;
    return t.record(logsumexp_rows(m.value(), mask), {m}, [m, held, &t](const Tensor& g) {
        Tensor p = softmax_rows(m.value(), held.get());
        for (std::size_t r = 0; r < p.rows(); ++r) {
            for (auto& v : p.row(r)) {
                v *= g[r];
            }
        }
        t.accumulate(m, p);
    });
}

Var dropout(Var x, double rate, bool train, Rng& rng) {
    if (!train || rate <= 0.0) {
        return x;
    }
    if (rate >= 1.0) {
        throw ConfigError("dropout rate must be below 1");
    }
    Tape& t = x.tape();
    const double keep_scale = 1.0 / (1.0 - rate);
    Tensor keep(x.value().shape());
    for (auto& k : keep.data()) {
        k = rng.uniform() >= rate ? keep_scale : 0.0;
    }
    Tensor out = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= keep[i];
    }
    return t.record(std::move(out), {x}, [x, keep = std::move(keep), &t](const Tensor& g) {
        Tensor gx = g;
        for (std::size_t i = 0; i < gx.size(); ++i) {
            gx[i] *= keep[i];
        }
        t.accumulate(x, gx);
    });
}

namespace {

// Fills probs ([row][allowed key][head]) and out = probs-weighted values.
PREFIXPROP_VECTOR_CLONES
void attention_forward(const Tensor& qv, const Tensor& kv, const Tensor& vv, const AttentionMask& mask,
                       std::size_t n_heads, std::size_t dh, double inv_scale,
                       const std::vector<std::size_t>& row_offset, double* probs, Tensor& out) {
    const std::size_t d = qv.cols();
    std::vector<double> mx(n_heads), total(n_heads);
    const double* kbase = kv.data().data();
    const double* vbase = vv.data().data();
    for (std::size_t i = 0; i < qv.rows(); ++i) {
        auto keys = mask.allowed_keys(i);
        const std::size_t na = keys.size();
        const double* __restrict qi = qv.row(i).data();
        double* __restrict oi = out.row(i).data();
        double* __restrict p = probs + row_offset[i];
        std::fill(mx.begin(), mx.end(), -std::numeric_limits<double>::infinity());
        for (std::size_t a = 0; a < na; ++a) {
            const double* __restrict kj = kbase + keys[a] * d;
            for (std::size_t h = 0; h < n_heads; ++h) {
                const double* __restrict qh = qi + h * dh;
                const double* __restrict kh = kj + h * dh;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) {
                    s += qh[c] * kh[c];
                }
                s *= inv_scale;
                p[a * n_heads + h] = s;
                mx[h] = std::max(mx[h], s);
            }
        }
        std::fill(total.begin(), total.end(), 0.0);
        for (std::size_t a = 0; a < na; ++a) {
            for (std::size_t h = 0; h < n_heads; ++h) {
                double& e = p[a * n_heads + h];
                e = std::exp(e - mx[h]);
                total[h] += e;
            }
        }
        for (std::size_t a = 0; a < na; ++a) {
            const double* __restrict vj = vbase + keys[a] * d;
            for (std::size_t h = 0; h < n_heads; ++h) {
                const double w = p[a * n_heads + h] /= total[h];
                double* __restrict oh = oi + h * dh;
                const double* __restrict vh = vj + h * dh;
                for (std::size_t c = 0; c < dh; ++c) {
                    oh[c] += w * vh[c];
                }
            }
        }
    }
}

// Accumulates into whichever of gq, gk, gv is non-null.
PREFIXPROP_VECTOR_CLONES
void attention_backward(const Tensor& g, const Tensor& qv, const Tensor& kv, const Tensor& vv,
                        const AttentionMask& mask, std::size_t n_heads, std::size_t dh, double inv_scale,
                        const std::vector<std::size_t>& row_offset, const double* probs, Tensor* gq, Tensor* gk,
                        Tensor* gv) {
    const std::size_t d = qv.cols();
    std::vector<double> dp, mean(n_heads);
    for (std::size_t i = 0; i < qv.rows(); ++i) {
        auto keys = mask.allowed_keys(i);
        const std::size_t na = keys.size();
        const double* __restrict gi = g.row(i).data();
        const double* __restrict qi = qv.row(i).data();
        const double* __restrict p = probs + row_offset[i];
        if (gv) {
            for (std::size_t a = 0; a < na; ++a) {
                double* __restrict gvj = gv->data().data() + keys[a] * d;
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const double w = p[a * n_heads + h];
                    double* __restrict gvh = gvj + h * dh;
                    const double* __restrict gh = gi + h * dh;
                    for (std::size_t c = 0; c < dh; ++c) {
                        gvh[c] += w * gh[c];
                    }
                }
            }
        }
        if (!gq && !gk) {
            continue;
        }
        // dp[a, h] = <g_i, v_a> restricted to head h.
        dp.resize(na * n_heads);
        std::fill(mean.begin(), mean.end(), 0.0);
        for (std::size_t a = 0; a < na; ++a) {
            const double* __restrict vj = vv.data().data() + keys[a] * d;
            for (std::size_t h = 0; h < n_heads; ++h) {
                const double* __restrict gh = gi + h * dh;
                const double* __restrict vh = vj + h * dh;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) {
                    s += gh[c] * vh[c];
                }
                dp[a * n_heads + h] = s;
                mean[h] += p[a * n_heads + h] * s;
            }
        }
        for (std::size_t a = 0; a < na; ++a) {
            for (std::size_t h = 0; h < n_heads; ++h) {
                const std::size_t x = a * n_heads + h;
                dp[x] = p[x] * (dp[x] - mean[h]) * inv_scale;
            }
        }
        if (gq) {
            double* __restrict gqi = gq->data().data() + i * d;
            for (std::size_t a = 0; a < na; ++a) {
                const double* __restrict kj = kv.data().data() + keys[a] * d;
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const double w = dp[a * n_heads + h];
                    double* __restrict gqh = gqi + h * dh;
                    const double* __restrict kh = kj + h * dh;
                    for (std::size_t c = 0; c < dh; ++c) {
                        gqh[c] += w * kh[c];
                    }
                }
            }
        }
        if (gk) {
            for (std::size_t a = 0; a < na; ++a) {
                double* __restrict gkj = gk->data().data() + keys[a] * d;
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const double w = dp[a * n_heads + h];
                    double* __restrict gkh = gkj + h * dh;
                    const double* __restrict qh = qi + h * dh;
                    for (std::size_t c = 0; c < dh; ++c) {
                        gkh[c] += w * qh[c];
                    }
                }
            }
        }
    }
}

}  // namespace

Var masked_attention(Var q, Var k, Var v, const AttentionMask& mask, std::size_t n_heads) {
    Tape& t = q.tape();
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    require_matrix(qv, "attention queries");
    require_matrix(kv, "attention keys");
    require_matrix(vv, "attention values");
    const std::size_t nq = qv.rows(), nk = kv.rows(), d = qv.cols();
    if (kv.cols() != d || vv.cols() != d || vv.rows() != nk) {
        throw ShapeError("attention: q " + shape_string(qv.shape()) + ", k " + shape_string(kv.shape()) +
                         ", v " + shape_string(vv.shape()) + " do not conform");
    }
    if (mask.rows() != nq || mask.cols() != nk) {
        throw ShapeError("attention: mask [" + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                         "] does not match scores [" + std::to_string(nq) + "x" + std::to_string(nk) + "]");
    }
    if (n_heads == 0 || d % n_heads != 0) {
        throw ShapeError("attention: width " + std::to_string(d) + " not divisible into " +
                         std::to_string(n_heads) + " heads");
    }
    const std::size_t dh = d / n_heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // Probabilities laid out [row][allowed key][head].
    std::vector<std::size_t> row_offset(nq + 1, 0);
    for (std::size_t i = 0; i < nq; ++i) {
        const std::size_t n_allowed = mask.allowed_keys(i).size();
        if (n_allowed == 0) {
            degenerate(i);
        }
        row_offset[i + 1] = row_offset[i] + n_allowed * n_heads;
    }
    auto probs = std::make_shared<std::vector<double>>(row_offset[nq]);
    Tensor out({nq, d});
    attention_forward(qv, kv, vv, mask, n_heads, dh, inv_scale, row_offset, probs->data(), out);

    return t.record(std::move(out), {q, k, v},
                    [q, k, v, mask, probs, row_offset = std::move(row_offset), n_heads, dh, inv_scale,
                     &t](const Tensor& g) {
                        const Tensor& qv = q.value();
                        Tensor gq = q.requires_grad() ? Tensor(qv.shape()) : Tensor();
                        Tensor gk = k.requires_grad() ? Tensor(k.value().shape()) : Tensor();
                        Tensor gv = v.requires_grad() ? Tensor(v.value().shape()) : Tensor();
                        attention_backward(g, qv, k.value(), v.value(), mask, n_heads, dh, inv_scale, row_offset,
                                           probs->data(), q.requires_grad() ? &gq : nullptr,
                                           k.requires_grad() ? &gk : nullptr, v.requires_grad() ? &gv : nullptr);
                        if (q.requires_grad()) {
                            t.accumulate(q, gq);
                        }
                        if (k.requires_grad()) {
                            t.accumulate(k, gk);
                        }
                        if (v.requires_grad()) {
                            t.accumulate(v, gv);
                        }
                    });
}

Var cross_entropy(Var logits, std::size_t label) {
    Tape& t = logits.tape();
    const Tensor& z = logits.value();
    if (label >= z.size()) {
        throw LabelError("label " + std::to_string(label) + " outside " + std::to_string(z.size()) + " classes");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : z.data()) {
        mx = std::max(mx, v);
    }
    double total = 0.0;
    for (double v : z.data()) {
        total += std::exp(v - mx);
    }
    const double lse = mx + std::log(total);
    Tensor loss({1}, lse - z[label]);
    return t.record(std::move(loss), {logits}, [logits, label, lse, &t](const Tensor& g) {
        Tensor gz = logits.value();
        for (std::size_t i = 0; i < gz.size(); ++i) {
            gz[i] = (std::exp(gz[i] - lse) - (i == label ? 1.0 : 0.0)) * g[0];
        }
        t.accumulate(logits, gz);
    });
}

Var sum(Var a) {
    Tape& t = a.tape();
    double s = 0.0;
    for (double v : a.value().data()) {
        s += v;
    }
    return t.record(Tensor({1}, s), {a}, [a, &t](const Tensor& g) {
        Tensor ga = ones_like(a.value());
        for (auto& v : ga.data()) {
            v *= g[0];
        }
        t.accumulate(a, ga);
    });
}

Var sum_squares(Var a) {
    Tape& t = a.tape();
    double s = 0.0;
    for (double v : a.value().data()) {
        s += v * v;
    }
    return t.record(Tensor({1}, s), {a}, [a, &t](const Tensor& g) { t.accumulate(a, scale(a.value(), 2.0 * g[0])); });
}

}  // namespace prefixprop
