#include "prefixprop/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "prefixprop/errors.hpp"
#include "prefixprop/model.hpp"
#include "prefixprop/rng.hpp"

namespace prefixprop {

std::string_view to_string(Split split) {
    switch (split) {
    case Split::train:
        return "train";
    case Split::dev:
        return "dev";
    case Split::test:
        return "test";
    }
    return "unknown";
}

int class_token(std::size_t cls) {
    if (cls >= kMaxClasses) {
        throw ConfigError("class index " + std::to_string(cls) + " has no reserved token");
    }
    return kFirstWordToken + static_cast<int>(cls);
}

std::optional<std::size_t> token_class(int token) {
    if (token >= kFirstWordToken && token < kFillerToken) {
        return static_cast<std::size_t>(token - kFirstWordToken);
    }
    return std::nullopt;
}

namespace {

void check_generator_args(std::size_t seq_len, std::size_t n_classes, std::size_t vocab_size) {
    if (seq_len < 16) {
        throw ConfigError("seq_len must be at least 16");
    }
    if (n_classes < 2) {
        throw ConfigError("n_classes must be at least 2");
    }
    if (n_classes > kMaxClasses) {
        throw ConfigError("n_classes " + std::to_string(n_classes) + " exceeds the " +
                          std::to_string(kMaxClasses) + " reserved class tokens");
    }
    if (vocab_size <= static_cast<std::size_t>(kFillerToken)) {
        throw ConfigError("vocab_size leaves no filler tokens");
    }
}

// Balanced labels i mod K in a seeded random order.
std::vector<int> balanced_labels(std::size_t n, std::size_t n_classes, const Rng& stream) {
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        labels[i] = static_cast<int>(i % n_classes);
    }
    Rng rng = stream.fork("labels");
    shuffle(labels.begin(), labels.end(), rng);
    return labels;
}

int filler(Rng& rng, std::size_t vocab_size) {
    return kFillerToken + static_cast<int>(rng.below(vocab_size - static_cast<std::size_t>(kFillerToken)));
}

}  // namespace

Dataset gen_needle(std::size_t seq_len, std::size_t n_classes, std::size_t n, std::uint64_t seed,
                   const NeedleOptions& options, Split split) {
    check_generator_args(seq_len, n_classes, options.vocab_size);
    if (options.window + 1 >= seq_len) {
        throw ConfigError("window leaves no needle position beyond it");
    }
    const Rng stream(seed);
    const std::vector<int> labels = balanced_labels(n, n_classes, stream);
    const Rng examples = stream.fork("examples");

    Dataset data{{}, n_classes, split, seed, {}};
    data.examples.reserve(n);
    const std::size_t first = options.window + 1;
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng = examples.fork(i);
        Example ex{std::vector<int>(seq_len), labels[i]};
        ex.tokens[0] = kClsToken;
        for (std::size_t p = 1; p < seq_len; ++p) {
            ex.tokens[p] = filler(rng, options.vocab_size);
        }
        const std::size_t pos = first + rng.below(seq_len - first);
        ex.tokens[pos] = class_token(static_cast<std::size_t>(labels[i]));
        data.examples.push_back(std::move(ex));
    }
    return data;
}

std::optional<std::size_t> majority_label(std::span<const int> tokens, std::size_t n_classes) {
    std::vector<std::size_t> counts(n_classes, 0);
    for (int t : tokens) {
        if (auto c = token_class(t); c && *c < n_classes) {
            ++counts[*c];
        }
    }
    const auto best = std::max_element(counts.begin(), counts.end());
    if (std::count(counts.begin(), counts.end(), *best) != 1) {
        return std::nullopt;
    }
    return static_cast<std::size_t>(best - counts.begin());
}

Dataset gen_majority(std::size_t seq_len, std::size_t n_classes, std::size_t n, std::uint64_t seed,
                     const MajorityOptions& options, Split split) {
    check_generator_args(seq_len, n_classes, options.vocab_size);
    if (!(options.class_token_rate > 0.0 && options.class_token_rate <= 1.0)) {
        throw ConfigError("class_token_rate must be in (0, 1]");
    }
    const Rng stream(seed);
    const std::vector<int> labels = balanced_labels(n, n_classes, stream);
    const Rng examples = stream.fork("examples");

    Dataset data{{}, n_classes, split, seed, {}};
    data.examples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng = examples.fork(i);
        Example ex{std::vector<int>(seq_len), labels[i]};
        ex.tokens[0] = kClsToken;
        do {
            for (std::size_t p = 1; p < seq_len; ++p) {
                ex.tokens[p] = rng.uniform() < options.class_token_rate
                                   ? class_token(rng.below(n_classes))
                                   : filler(rng, options.vocab_size);
            }
        } while (majority_label(ex.tokens, n_classes) != static_cast<std::size_t>(ex.label));
        data.examples.push_back(std::move(ex));
    }
    return data;
}

std::string_view to_string(TaskKind kind) {
    return kind == TaskKind::needle ? "needle" : "majority";
}

TaskKind parse_task_kind(std::string_view name) {
    if (name == "needle") {
        return TaskKind::needle;
    }
    if (name == "majority") {
        return TaskKind::majority;
    }
    throw ConfigError("unknown task generator '" + std::string(name) + "'");
}

DatasetSplits generate_splits(const TaskSpec& spec) {
    const Rng root(spec.seed);
    const auto make = [&](std::size_t n, Split split) {
        const std::uint64_t seed = root.fork(to_string(split)).next_u64();
        if (spec.kind == TaskKind::needle) {
            return gen_needle(spec.seq_len, spec.n_classes, n, seed, {spec.window, spec.vocab_size}, split);
        }
        MajorityOptions options;
        options.vocab_size = spec.vocab_size;
        return gen_majority(spec.seq_len, spec.n_classes, n, seed, options, split);
    };
    return {make(spec.n_train, Split::train), make(spec.n_dev, Split::dev), make(spec.n_test, Split::test)};
}

// ---------------------------------------------------------------------------
// Labeled text
// ---------------------------------------------------------------------------

namespace {

struct CsvRecord {
    std::vector<std::string> fields;
    std::size_t line = 0;
};

// RFC 4180 records; quoted fields may span lines.
std::vector<CsvRecord> parse_csv(std::istream& in) {
    std::vector<CsvRecord> records;
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::size_t line = 1;
    std::size_t i = 0;
    while (i < text.size()) {
        CsvRecord rec;
        rec.line = line;
        std::string field;
        bool done = false;
        while (!done) {
            field.clear();
            if (i < text.size() && text[i] == '"') {
                ++i;
                while (true) {
                    if (i >= text.size()) {
                        throw ParseError("unterminated quoted field", rec.line);
                    }
                    if (text[i] == '"') {
                        if (i + 1 < text.size() && text[i + 1] == '"') {
                            field += '"';
                            i += 2;
                            continue;
                        }
                        ++i;
                        break;
                    }
                    if (text[i] == '\n') {
                        ++line;
                    }
                    field += text[i++];
                }
                if (i < text.size() && text[i] != ',' && text[i] != '\n' && text[i] != '\r') {
                    throw ParseError("unexpected character after closing quote", line);
                }
            } else {
                while (i < text.size() && text[i] != ',' && text[i] != '\n' && text[i] != '\r') {
                    if (text[i] == '"') {
                        throw ParseError("quote inside unquoted field", line);
                    }
                    field += text[i++];
                }
            }
            rec.fields.push_back(field);
            if (i < text.size() && text[i] == ',') {
                ++i;
                continue;
            }
            if (i < text.size() && text[i] == '\r') {
                ++i;
            }
            if (i < text.size() && text[i] == '\n') {
                ++i;
                ++line;
            }
            done = true;
        }
        if (!(rec.fields.size() == 1 && rec.fields[0].empty())) {
            records.push_back(std::move(rec));
        }
    }
    return records;
}

std::unordered_map<std::string, int> read_vocab(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open vocabulary file " + path.string());
    }
    std::unordered_map<std::string, int> vocab;
    std::string word;
    int next = kFirstWordToken;
    std::size_t line = 0;
    while (std::getline(in, word)) {
        ++line;
        if (!word.empty() && word.back() == '\r') {
            word.pop_back();
        }
        if (word.empty()) {
            continue;
        }
        if (!vocab.emplace(word, next).second) {
            throw ParseError("duplicate vocabulary entry '" + word + "'", line);
        }
        ++next;
    }
    return vocab;
}

}  // namespace

Dataset load_labeled_text(const std::filesystem::path& path, const TokenizerSpec& tokenizer,
                          const std::vector<std::string>* known_labels) {
    if (tokenizer.max_len == 0) {
        throw ConfigError("tokenizer max_len must be positive");
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open corpus " + path.string());
    }
    const std::vector<CsvRecord> records = parse_csv(in);
    if (records.empty() || records[0].fields != std::vector<std::string>{"text", "label"}) {
        throw ParseError("expected header 'text,label'", records.empty() ? 1 : records[0].line);
    }
    for (std::size_t r = 1; r < records.size(); ++r) {
        if (records[r].fields.size() != 2) {
            throw ParseError("expected 2 fields, found " + std::to_string(records[r].fields.size()), records[r].line);
        }
    }

    std::vector<std::string> names;
    if (known_labels) {
        names = *known_labels;
    } else {
        for (std::size_t r = 1; r < records.size(); ++r) {
            names.push_back(records[r].fields[1]);
        }
        std::sort(names.begin(), names.end());
        names.erase(std::unique(names.begin(), names.end()), names.end());
    }
    std::map<std::string, int> index;
    for (std::size_t k = 0; k < names.size(); ++k) {
        index[names[k]] = static_cast<int>(k);
    }

    std::unordered_map<std::string, int> vocab;
    if (tokenizer.kind == TokenizerKind::whitespace) {
        vocab = read_vocab(tokenizer.vocab_file);
    }

    Dataset data;
    data.n_classes = names.size();
    data.label_names = names;
    for (std::size_t r = 1; r < records.size(); ++r) {
        const std::string& text = records[r].fields[0];
        const auto it = index.find(records[r].fields[1]);
        if (it == index.end()) {
            throw LabelError("line " + std::to_string(records[r].line) + ": unknown label '" + records[r].fields[1] +
                             "'");
        }
        Example ex;
        ex.label = it->second;
        ex.tokens.push_back(kClsToken);
        if (tokenizer.kind == TokenizerKind::byte) {
            for (unsigned char c : text) {
                if (ex.tokens.size() == tokenizer.max_len) {
                    break;
                }
                ex.tokens.push_back(kFirstWordToken + c);
            }
        } else {
            std::istringstream words(text);
            std::string word;
            while (ex.tokens.size() < tokenizer.max_len && words >> word) {
                const auto v = vocab.find(word);
                ex.tokens.push_back(v == vocab.end() ? kUnkToken : v->second);
            }
        }
        data.examples.push_back(std::move(ex));
    }
    return data;
}

std::string to_jsonl(const Dataset& data) {
    std::string out;
    for (const Example& ex : data.examples) {
        out += nlohmann::json{{"tokens", ex.tokens}, {"label", ex.label}}.dump();
        out += '\n';
    }
    return out;
}

void write_jsonl(const Dataset& data, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
    out << to_jsonl(data);
}

}  // namespace prefixprop
