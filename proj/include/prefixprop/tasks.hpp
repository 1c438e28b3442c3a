#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace prefixprop {

enum class Split { train, dev, test };

std::string_view to_string(Split split);

struct Example {
    std::vector<int> tokens;
    int label = 0;

    friend bool operator==(const Example&, const Example&) = default;
};

struct Dataset {
    std::vector<Example> examples;
    std::size_t n_classes = 0;
    Split split = Split::train;
    std::uint64_t seed = 0;
    // Class names for loaded corpora, index-aligned with labels; empty for generators.
    std::vector<std::string> label_names;

    std::size_t size() const noexcept { return examples.size(); }
    bool empty() const noexcept { return examples.empty(); }

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Token layout of the synthetic generators: one reserved class token per
// class, then filler words up to the vocabulary size.
inline constexpr std::size_t kMaxClasses = 16;
inline constexpr int kFillerToken = 3 + static_cast<int>(kMaxClasses);

int class_token(std::size_t cls);
// Class of a class token, or nullopt for any other id.
std::optional<std::size_t> token_class(int token);

struct NeedleOptions {
    // Needles are planted strictly more than `window` positions after [CLS].
    std::size_t window = 32;
    std::size_t vocab_size = 1000;
};

struct MajorityOptions {
    // Per-position probability of drawing a class token instead of filler.
    double class_token_rate = 0.25;
    std::size_t vocab_size = 1000;
};

/// [CLS] followed by filler, with exactly one class token at a uniform
/// position in (window, seq_len). Labels are exactly balanced up to n mod K
/// and shuffled. Example i draws from its own sub-stream of `seed`.
Dataset gen_needle(std::size_t seq_len, std::size_t n_classes, std::size_t n, std::uint64_t seed,
                   const NeedleOptions& options = {}, Split split = Split::train);

/// Class tokens scattered through filler; the label is the class with the
/// strictly largest count. Draws that tie or miss the target label are redrawn.
Dataset gen_majority(std::size_t seq_len, std::size_t n_classes, std::size_t n, std::uint64_t seed,
                     const MajorityOptions& options = {}, Split split = Split::train);

// Class with the strictly largest class-token count, or nullopt on a tie.
std::optional<std::size_t> majority_label(std::span<const int> tokens, std::size_t n_classes);

enum class TaskKind { needle, majority };

std::string_view to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view name);

struct TaskSpec {
    TaskKind kind = TaskKind::needle;
    std::size_t seq_len = 256;
    std::size_t n_classes = 4;
    std::size_t n_train = 2000;
    std::size_t n_dev = 500;
    std::size_t n_test = 500;
    std::size_t window = 32;
    std::size_t vocab_size = 1000;
    std::uint64_t seed = 1234;
};

struct DatasetSplits {
    Dataset train;
    Dataset dev;
    Dataset test;
};

// Each split comes from an independently forked stream of spec.seed.
DatasetSplits generate_splits(const TaskSpec& spec);

enum class TokenizerKind { whitespace, byte };

struct TokenizerSpec {
    TokenizerKind kind = TokenizerKind::whitespace;
    // One word per line; word k gets id kFirstWordToken + k. Unused for byte-level.
    std::filesystem::path vocab_file;
    std::size_t max_len = 512;
};

/// Reads a UTF-8 CSV with header `text,label` (double-quoted fields, "" escapes).
/// Labels are indexed in lexicographic order. With `known_labels`, that
/// ordering is used instead and any other label raises LabelError.
/// Every sequence starts with [CLS] and is cut to max_len tokens.
Dataset load_labeled_text(const std::filesystem::path& path, const TokenizerSpec& tokenizer,
                          const std::vector<std::string>* known_labels = nullptr);

// {"tokens": [...], "label": k} per line.
std::string to_jsonl(const Dataset& data);
void write_jsonl(const Dataset& data, const std::filesystem::path& path);

}  // namespace prefixprop
