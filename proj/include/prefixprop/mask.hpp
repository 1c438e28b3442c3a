#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

namespace prefixprop {

/// Boolean allow-matrix [query rows x key columns].
///
/// Immutable once built; copies share storage. The per-row lists of allowed
/// key indices are precomputed so masked attention only visits admissible entries.
class AttentionMask {
public:
    AttentionMask();
    AttentionMask(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> allow);

    static AttentionMask full(std::size_t rows, std::size_t cols);

    std::size_t rows() const noexcept { return data_->rows; }
    std::size_t cols() const noexcept { return data_->cols; }
    bool allowed(std::size_t r, std::size_t c) const noexcept { return data_->allow[r * data_->cols + c] != 0; }
    std::span<const std::uint32_t> allowed_keys(std::size_t r) const noexcept {
        return {data_->keys.data() + data_->offsets[r], data_->offsets[r + 1] - data_->offsets[r]};
    }
    bool is_full() const noexcept { return data_->keys.size() == data_->rows * data_->cols; }
    // True if every row allows columns [begin, end).
    bool columns_allowed(std::size_t begin, std::size_t end) const noexcept;

    AttentionMask select_rows(std::size_t begin, std::size_t end) const;
    AttentionMask select_cols(std::size_t begin, std::size_t end) const;
    // Prepends `count` always-allowed key columns.
    AttentionMask with_leading_columns(std::size_t count) const;

    friend bool operator==(const AttentionMask& a, const AttentionMask& b) {
        return a.rows() == b.rows() && a.cols() == b.cols() && a.data_->allow == b.data_->allow;
    }

private:
    struct Data {
        std::size_t rows = 0;
        std::size_t cols = 0;
        std::vector<std::uint8_t> allow;
        std::vector<std::uint32_t> keys;
        std::vector<std::size_t> offsets{0};
    };
    std::shared_ptr<const Data> data_;
};

}  // namespace prefixprop
