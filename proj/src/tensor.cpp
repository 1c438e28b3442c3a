#include "prefixprop/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "prefixprop/errors.hpp"
#include "vector_clones.hpp"

namespace prefixprop {

std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out << (i ? "x" : "") << shape[i];
    }
    out << ']';
    return out.str();
}

std::size_t shape_product(const Shape& shape) {
    std::size_t n = 1;
    for (auto s : shape) {
        n *= s;
    }
    return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_product(shape_), fill) {
    if (shape_.empty()) {
        throw ShapeError("tensor shape must have at least one dimension");
    }
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_.empty()) {
        throw ShapeError("tensor shape must have at least one dimension");
    }
    if (shape_product(shape_) != data_.size()) {
        throw ShapeError("shape " + shape_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
    }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) {
            throw ShapeError("ragged matrix literal");
        }
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
}

std::size_t Tensor::rows() const noexcept {
    return shape_.size() == 1 ? 1 : shape_[0];
}

std::size_t Tensor::cols() const noexcept {
    return shape_.size() == 1 ? shape_[0] : shape_[1];
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void require_matrix(const Tensor& t, const char* what) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(what) + ": expected a matrix, got shape " + shape_string(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(what) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
    }
}

namespace {

void require_2d_or_1d(const Tensor& t, const char* what) {
    if (t.rank() > 2) {
        throw ShapeError(std::string(what) + ": unsupported rank, shape " + shape_string(t.shape()));
    }
}

}  // namespace

namespace {

// out[m x n] += a[m x k] * b[k x n], four output rows at a time. Each output
// element accumulates over k in order, as in the plain i-k-j loop.
PREFIXPROP_VECTOR_CLONES
void gemm_accumulate(const double* __restrict pa, const double* __restrict pb, double* __restrict po, std::size_t m,
                     std::size_t k, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        double* __restrict o0 = po + i * n;
        double* __restrict o1 = o0 + n;
        double* __restrict o2 = o1 + n;
        double* __restrict o3 = o2 + n;
        for (std::size_t p = 0; p < k; ++p) {
            const double a0 = pa[i * k + p], a1 = pa[(i + 1) * k + p], a2 = pa[(i + 2) * k + p],
                         a3 = pa[(i + 3) * k + p];
            const double* __restrict brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double b = brow[j];
                o0[j] += a0 * b;
                o1[j] += a1 * b;
                o2[j] += a2 * b;
                o3[j] += a3 * b;
            }
        }
    }
    for (; i < m; ++i) {
        double* __restrict orow = po + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            const double* __restrict brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
}

// out[m x n] += a^T * b with a stored [k x m]. Zero entries of a are skipped.
PREFIXPROP_VECTOR_CLONES
void gemm_tn_accumulate(const double* __restrict pa, const double* __restrict pb, double* __restrict po,
                        std::size_t k, std::size_t m, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* __restrict brow = pb + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = pa[p * m + i];
            if (av == 0.0) {
                continue;
            }
            double* __restrict orow = po + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d_or_1d(a, "matmul");
    require_2d_or_1d(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw ShapeError("matmul: inner dimensions disagree for " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
    }
    Tensor out({m, n});
    gemm_accumulate(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_2d_or_1d(a, "matmul_nt");
    require_2d_or_1d(b, "matmul_nt");
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: inner dimensions disagree for " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + "^T");
    }
    return matmul(a, transpose(b));
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    require_2d_or_1d(a, "matmul_tn");
    require_2d_or_1d(b, "matmul_tn");
    const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw ShapeError("matmul_tn: inner dimensions disagree for " + shape_string(a.shape()) + "^T x " +
                         shape_string(b.shape()));
    }
    Tensor out({m, n});
    gemm_tn_accumulate(a.data().data(), b.data().data(), out.data().data(), k, m, n);
    return out;
}

Tensor transpose(const Tensor& a) {
    require_2d_or_1d(a, "transpose");
    const std::size_t r = a.rows(), c = a.cols();
    Tensor out({c, r});
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            out(j, i) = a(i, j);
        }
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += b[i];
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] -= b[i];
    }
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out = a;
    for (auto& v : out.data()) {
        v *= s;
    }
    return out;
}

Tensor concat_rows(const Tensor& top, const Tensor& bottom) {
    require_matrix(top, "concat_rows");
    require_matrix(bottom, "concat_rows");
    if (top.cols() != bottom.cols()) {
        throw ShapeError("concat_rows: column counts differ for " + shape_string(top.shape()) + " and " +
                         shape_string(bottom.shape()));
    }
    std::vector<double> data;
    data.reserve(top.size() + bottom.size());
    data.insert(data.end(), top.data().begin(), top.data().end());
    data.insert(data.end(), bottom.data().begin(), bottom.data().end());
    return Tensor({top.rows() + bottom.rows(), top.cols()}, std::move(data));
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
    require_matrix(a, "slice_rows");
    if (begin > end || end > a.rows()) {
        throw IndexError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside " + shape_string(a.shape()));
    }
    const std::size_t c = a.cols();
    std::vector<double> data(a.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                             a.data().begin() + static_cast<std::ptrdiff_t>(end * c));
    return Tensor({end - begin, c}, std::move(data));
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
    require_matrix(a, "slice_cols");
    if (begin > end || end > a.cols()) {
        throw IndexError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside " + shape_string(a.shape()));
    }
    Tensor out({a.rows(), end - begin});
    for (std::size_t r = 0; r < a.rows(); ++r) {
        std::copy(a.row(r).begin() + static_cast<std::ptrdiff_t>(begin),
                  a.row(r).begin() + static_cast<std::ptrdiff_t>(end), out.row(r).begin());
    }
    return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a[i] - b[i]));
    }
    return worst;
}

}  // namespace prefixprop
