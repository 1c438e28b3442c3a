#include "prefixprop/mask.hpp"

#include <string>

#include "prefixprop/errors.hpp"

namespace prefixprop {

AttentionMask::AttentionMask() : data_(std::make_shared<const Data>()) {}

AttentionMask::AttentionMask(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> allow) {
    if (allow.size() != rows * cols) {
        throw ShapeError("mask data has " + std::to_string(allow.size()) + " entries, expected " +
                         std::to_string(rows * cols));
    }
    auto data = std::make_shared<Data>();
    data->rows = rows;
    data->cols = cols;
    data->allow = std::move(allow);
    data->offsets.reserve(rows + 1);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            if (data->allow[r * cols + c]) {
                data->keys.push_back(static_cast<std::uint32_t>(c));
            }
        }
        data->offsets.push_back(data->keys.size());
    }
    data_ = std::move(data);
}

bool AttentionMask::columns_allowed(std::size_t begin, std::size_t end) const noexcept {
    for (std::size_t r = 0; r < rows(); ++r) {
        for (std::size_t c = begin; c < end; ++c) {
            if (!allowed(r, c)) {
                return false;
            }
        }
    }
    return true;
}

AttentionMask AttentionMask::full(std::size_t rows, std::size_t cols) {
    return AttentionMask(rows, cols, std::vector<std::uint8_t>(rows * cols, 1));
}

AttentionMask AttentionMask::select_rows(std::size_t begin, std::size_t end) const {
    if (begin > end || end > rows()) {
        throw IndexError("mask row range out of bounds");
    }
    const auto& src = data_->allow;
    std::vector<std::uint8_t> allow(src.begin() + static_cast<std::ptrdiff_t>(begin * cols()),
                                    src.begin() + static_cast<std::ptrdiff_t>(end * cols()));
    return AttentionMask(end - begin, cols(), std::move(allow));
}

AttentionMask AttentionMask::select_cols(std::size_t begin, std::size_t end) const {
    if (begin > end || end > cols()) {
        throw IndexError("mask column range out of bounds");
    }
    const std::size_t cols = end - begin;
    std::vector<std::uint8_t> allow(rows() * cols);
    for (std::size_t r = 0; r < rows(); ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            allow[r * cols + c] = allowed(r, begin + c);
        }
    }
    return AttentionMask(rows(), cols, std::move(allow));
}

AttentionMask AttentionMask::with_leading_columns(std::size_t count) const {
    const std::size_t cols = this->cols() + count;
    std::vector<std::uint8_t> allow(rows() * cols, 1);
    for (std::size_t r = 0; r < rows(); ++r) {
        for (std::size_t c = 0; c < this->cols(); ++c) {
            allow[r * cols + count + c] = allowed(r, c);
        }
    }
    return AttentionMask(rows(), cols, std::move(allow));
}

}  // namespace prefixprop
