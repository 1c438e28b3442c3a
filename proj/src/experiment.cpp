#include "prefixprop/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "prefixprop/config_io.hpp"
#include "prefixprop/errors.hpp"
#include "prefixprop/ops.hpp"

namespace prefixprop {

using nlohmann::json;

namespace {

json task_to_json(const TaskSpec& t) {
    return json{{"kind", std::string(to_string(t.kind))},
                {"seq_len", t.seq_len},
                {"n_classes", t.n_classes},
                {"n_train", t.n_train},
                {"n_dev", t.n_dev},
                {"n_test", t.n_test},
                {"window", t.window},
                {"vocab_size", t.vocab_size},
                {"seed", t.seed}};
}

TaskSpec task_from_json(const json& j) {
    reject_unknown_fields(j, {"kind", "seq_len", "n_classes", "n_train", "n_dev", "n_test", "window", "vocab_size",
                              "seed"});
    TaskSpec t;
    if (j.contains("kind")) {
        std::string name;
        read_field(j, "kind", name);
        try {
            t.kind = parse_task_kind(name);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("kind: ") + e.what());
        }
    }
    read_field(j, "seq_len", t.seq_len);
    read_field(j, "n_classes", t.n_classes);
    read_field(j, "n_train", t.n_train);
    read_field(j, "n_dev", t.n_dev);
    read_field(j, "n_test", t.n_test);
    read_field(j, "window", t.window);
    read_field(j, "vocab_size", t.vocab_size);
    read_field(j, "seed", t.seed);
    return t;
}

json corpus_to_json(const CorpusSpec& c) {
    return json{{"train", c.train.string()},
                {"dev", c.dev.string()},
                {"test", c.test.string()},
                {"tokenizer",
                 {{"kind", c.tokenizer.kind == TokenizerKind::byte ? "byte" : "whitespace"},
                  {"vocab_file", c.tokenizer.vocab_file.string()},
                  {"max_len", c.tokenizer.max_len}}}};
}

CorpusSpec corpus_from_json(const json& j) {
    reject_unknown_fields(j, {"train", "dev", "test", "tokenizer"});
    CorpusSpec c;
    std::string path;
    for (auto [key, dst] : {std::pair{"train", &c.train}, std::pair{"dev", &c.dev}, std::pair{"test", &c.test}}) {
        if (!j.contains(key)) {
            throw ConfigError(std::string(key) + ": required");
        }
        read_field(j, key, path);
        *dst = path;
    }
    if (j.contains("tokenizer")) {
        with_field_path("tokenizer", [&] {
            const json& t = j.at("tokenizer");
            reject_unknown_fields(t, {"kind", "vocab_file", "max_len"});
            std::string kind = "whitespace";
            read_field(t, "kind", kind);
            if (kind == "byte") {
                c.tokenizer.kind = TokenizerKind::byte;
            } else if (kind != "whitespace") {
                throw ConfigError("kind: unknown tokenizer '" + kind + "'");
            }
            std::string vocab;
            read_field(t, "vocab_file", vocab);
            c.tokenizer.vocab_file = vocab;
            read_field(t, "max_len", c.tokenizer.max_len);
        });
    }
    return c;
}

void validate_task(const TaskSpec& t) {
    if (t.n_train == 0 || t.n_dev == 0 || t.n_test == 0) {
        throw ConfigError("n_train, n_dev and n_test must be positive");
    }
    if (t.n_classes < 2 || t.n_classes > kMaxClasses) {
        throw ConfigError("n_classes must be in [2, " + std::to_string(kMaxClasses) + "]");
    }
}

void check_task_fits_model(const TaskSpec& t, const ModelConfig& m) {
    if (t.n_classes != m.n_classes) {
        throw ConfigError("n_classes: model has " + std::to_string(m.n_classes) + " classes but the task has " +
                          std::to_string(t.n_classes));
    }
    if (t.seq_len > m.max_len) {
        throw ConfigError("max_len: task sequences of length " + std::to_string(t.seq_len) + " exceed it");
    }
    if (t.vocab_size > m.vocab_size) {
        throw ConfigError("vocab_size: smaller than the task vocabulary " + std::to_string(t.vocab_size));
    }
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
    out << text;
    if (!out) {
        throw std::runtime_error("write failed for " + path.string());
    }
}

double mean_of(const std::vector<double>& xs) {
    double s = 0.0;
    for (double x : xs) {
        s += x;
    }
    return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

// Sample standard deviation; 0 for fewer than two values.
double std_of(const std::vector<double>& xs) {
    if (xs.size() < 2) {
        return 0.0;
    }
    const double m = mean_of(xs);
    double s = 0.0;
    for (double x : xs) {
        s += (x - m) * (x - m);
    }
    return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

json metrics_json(const ClassificationMetrics& m) {
    return json{{"accuracy", m.accuracy},
                {"f1_micro", m.f1_micro},
                {"precision_macro", m.precision_macro},
                {"recall_macro", m.recall_macro},
                {"loss", m.mean_loss},
                {"ece", m.ece}};
}

double median_of(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace

void ExperimentConfig::validate() const {
    with_field_path("model", [&] { model.validate(); });
    with_field_path("train", [&] { train.validate(); });
    if (!corpus) {
        with_field_path("task", [&] { validate_task(task); });
        with_field_path("model", [&] { check_task_fits_model(task, model); });
    }
    if (modes.empty()) {
        throw ConfigError("modes: at least one mode is required");
    }
    if (seeds.empty()) {
        throw ConfigError("seeds: at least one seed is required");
    }
    if (backbone.warm_phase) {
        with_field_path("backbone.warm_phase.task", [&] { validate_task(backbone.warm_phase->task); });
        with_field_path("backbone.warm_phase.train", [&] { backbone.warm_phase->train.validate(); });
        const TaskSpec& warm = backbone.warm_phase->task;
        if (warm.seq_len > model.max_len || warm.vocab_size > model.vocab_size) {
            throw ConfigError("backbone.warm_phase.task: sequences or vocabulary exceed the model's");
        }
    }
    if (output_dir.empty()) {
        throw ConfigError("output_dir: must be nonempty");
    }
}

json to_json(const ExperimentConfig& cfg) {
    json modes = json::array();
    for (TuningMode m : cfg.modes) {
        modes.push_back(std::string(to_string(m)));
    }
    json warm = nullptr;
    if (cfg.backbone.warm_phase) {
        warm = json{{"task", task_to_json(cfg.backbone.warm_phase->task)}, {"train", cfg.backbone.warm_phase->train}};
    }
    return json{{"task", task_to_json(cfg.task)},
                {"corpus", cfg.corpus ? corpus_to_json(*cfg.corpus) : json(nullptr)},
                {"model", cfg.model},
                {"modes", modes},
                {"train", cfg.train},
                {"backbone", {{"seed", cfg.backbone.seed}, {"warm_phase", warm}}},
                {"output_dir", cfg.output_dir.string()},
                {"seeds", cfg.seeds}};
}

ExperimentConfig experiment_from_json(const json& j) {
    reject_unknown_fields(j, {"task", "corpus", "model", "mode", "modes", "train", "backbone", "output_dir", "seeds"});
    ExperimentConfig cfg;
    if (j.contains("task")) {
        with_field_path("task", [&] { cfg.task = task_from_json(j.at("task")); });
    }
    if (j.contains("corpus") && !j.at("corpus").is_null()) {
        with_field_path("corpus", [&] { cfg.corpus = corpus_from_json(j.at("corpus")); });
    }
    if (j.contains("model")) {
        with_field_path("model", [&] { j.at("model").get_to(cfg.model); });
    }
    if (j.contains("mode") && j.contains("modes")) {
        throw ConfigError("mode: give either mode or modes, not both");
    }
    for (const char* key : {"mode", "modes"}) {
        if (!j.contains(key)) {
            continue;
        }
        with_field_path(key, [&] {
            std::vector<std::string> names;
            if (j.at(key).is_string()) {
                names.push_back(j.at(key).get<std::string>());
            } else {
                j.at(key).get_to(names);
            }
            cfg.modes.clear();
            for (std::size_t i = 0; i < names.size(); ++i) {
                with_field_path(std::to_string(i), [&] { cfg.modes.push_back(parse_tuning_mode(names[i])); });
            }
        });
    }
    if (j.contains("train")) {
        with_field_path("train", [&] { j.at("train").get_to(cfg.train); });
    }
    if (j.contains("backbone")) {
        with_field_path("backbone", [&] {
            const json& b = j.at("backbone");
            reject_unknown_fields(b, {"seed", "warm_phase"});
            read_field(b, "seed", cfg.backbone.seed);
            if (b.contains("warm_phase") && !b.at("warm_phase").is_null()) {
                with_field_path("warm_phase", [&] {
                    const json& w = b.at("warm_phase");
                    reject_unknown_fields(w, {"task", "train"});
                    WarmPhase phase;
                    if (w.contains("task")) {
                        with_field_path("task", [&] { phase.task = task_from_json(w.at("task")); });
                    }
                    if (w.contains("train")) {
                        with_field_path("train", [&] { w.at("train").get_to(phase.train); });
                    }
                    cfg.backbone.warm_phase = phase;
                });
            }
        });
    }
    if (j.contains("output_dir")) {
        std::string dir;
        read_field(j, "output_dir", dir);
        cfg.output_dir = dir;
    }
    read_field(j, "seeds", cfg.seeds);
    cfg.validate();
    return cfg;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return experiment_from_json(j);
}

void apply_override(json& doc, std::string_view assignment) {
    const std::size_t eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) {
        throw ConfigError("override '" + std::string(assignment) + "' must look like key=value");
    }
    const std::string key(assignment.substr(0, eq));
    const std::string text(assignment.substr(eq + 1));
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) {
        value = text;
    }
    json* node = &doc;
    std::size_t begin = 0;
    while (true) {
        const std::size_t dot = key.find('.', begin);
        const std::string part = key.substr(begin, dot == std::string::npos ? std::string::npos : dot - begin);
        if (part.empty()) {
            throw ConfigError("override key '" + key + "' has an empty component");
        }
        if (node->is_null()) {
            *node = json::object();
        }
        if (!node->is_object()) {
            throw ConfigError("override key '" + key + "': '" + part + "' is inside a non-object value");
        }
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        node = &(*node)[part];
        begin = dot + 1;
    }
}

DatasetSplits load_splits(const ExperimentConfig& cfg) {
    if (!cfg.corpus) {
        return generate_splits(cfg.task);
    }
    DatasetSplits out;
    out.train = load_labeled_text(cfg.corpus->train, cfg.corpus->tokenizer);
    out.train.split = Split::train;
    out.dev = load_labeled_text(cfg.corpus->dev, cfg.corpus->tokenizer, &out.train.label_names);
    out.dev.split = Split::dev;
    out.test = load_labeled_text(cfg.corpus->test, cfg.corpus->tokenizer, &out.train.label_names);
    out.test.split = Split::test;
    if (out.train.n_classes != cfg.model.n_classes) {
        throw ConfigError("model.n_classes: the corpus has " + std::to_string(out.train.n_classes) + " labels");
    }
    return out;
}

EncoderModel build_backbone(const ExperimentConfig& cfg) {
    ModelConfig base = cfg.model;
    base.attention.prefix_len = 0;
    if (cfg.backbone.warm_phase) {
        base.n_classes = cfg.backbone.warm_phase->task.n_classes;
    }
    EncoderModel model = EncoderModel::create(base, TuningMode::fine_tuning, cfg.backbone.seed, 0);
    if (cfg.backbone.warm_phase) {
        const DatasetSplits warm = generate_splits(cfg.backbone.warm_phase->task);
        train(model, warm.train, warm.dev, cfg.backbone.warm_phase->train);
    }
    return model;
}

json to_json(const ExperimentSummary& summary) {
    json modes = json::array();
    std::map<TuningMode, std::size_t> prefix_counts;
    for (const ModeSummary& ms : summary.modes) {
        json runs = json::array();
        std::map<std::string, std::vector<double>> columns;
        for (const RunSummary& r : ms.runs) {
            json row = metrics_json(r.test);
            for (const auto& item : row.items()) {
                columns[item.key()].push_back(item.value().get<double>());
            }
            row["seed"] = r.seed;
            row["best_epoch"] = r.best_epoch;
            row["epochs_run"] = r.epochs_run;
            row["best_dev_metric"] = r.best_dev_metric;
            runs.push_back(row);
        }
        json mean = json::object();
        json spread = json::object();
        for (const auto& [name, xs] : columns) {
            mean[name] = mean_of(xs);
            spread[name] = std_of(xs);
        }
        prefix_counts[ms.mode] = ms.partition.prefix_count;
        modes.push_back(json{{"mode", std::string(to_string(ms.mode))},
                             {"n_runs", ms.runs.size()},
                             {"runs", runs},
                             {"mean", mean},
                             {"std", spread},
                             {"prefix_param_count", ms.partition.prefix_count},
                             {"trainable_param_count", ms.partition.trainable_count},
                             {"frozen_param_count", ms.partition.frozen_count},
                             {"trainable_fraction", ms.partition.trainable_fraction}});
    }
    json out{{"modes", modes}};
    const auto prop = prefix_counts.find(TuningMode::prefix_propagation);
    const auto tune = prefix_counts.find(TuningMode::prefix_tuning);
    if (prop != prefix_counts.end() && tune != prefix_counts.end() && tune->second > 0) {
        out["prefix_param_ratio_propagation_over_tuning"] =
            static_cast<double>(prop->second) / static_cast<double>(tune->second);
    }
    return out;
}

ExperimentSummary run_experiment(const ExperimentConfig& cfg, std::ostream* progress) {
    cfg.validate();
    const DatasetSplits data = load_splits(cfg);
    if (progress && cfg.backbone.warm_phase) {
        *progress << "warm phase: fine-tuning the backbone on " << to_string(cfg.backbone.warm_phase->task.kind)
                  << '\n';
    }
    const EncoderModel backbone = build_backbone(cfg);
    std::filesystem::create_directories(cfg.output_dir);

    ExperimentSummary summary;
    for (TuningMode mode : cfg.modes) {
        ModeSummary ms;
        ms.mode = mode;
        for (std::uint64_t seed : cfg.seeds) {
            EncoderModel model = EncoderModel::with_backbone(backbone, cfg.model, mode, seed);
            if (ms.runs.empty()) {
                ms.partition = model.partition();
            }
            TrainConfig tc = cfg.train;
            tc.seed = seed;
            std::string lines;
            const TrainedResult result = train(model, data.train, data.dev, tc, [&](const EpochLog& log) {
                json line = to_json(log);
                line["split"] = "dev";
                lines += line.dump() + '\n';
                if (progress) {
                    *progress << '[' << to_string(mode) << " seed " << seed << "] epoch " << log.epoch
                              << " loss " << log.train_loss << " dev " << log.dev_metric << " ece " << log.dev_ece
                              << '\n';
                }
            });
            const Evaluation test = evaluate(model, data.test, cfg.train.ece_bins);
            json line = metrics_json(test.metrics);
            line["split"] = "test";
            line["mode"] = std::string(to_string(mode));
            line["seed"] = seed;
            line["best_epoch"] = result.best_epoch;
            lines += line.dump() + '\n';

            const std::filesystem::path dir = cfg.output_dir / std::string(to_string(mode)) / std::to_string(seed);
            std::filesystem::create_directories(dir);
            write_file(dir / "metrics.jsonl", lines);
            write_reliability_csv(test.calibration, dir / "reliability.csv");
            save_checkpoint(model, dir / "model.ckpt");
            if (progress) {
                *progress << '[' << to_string(mode) << " seed " << seed << "] test accuracy "
                          << test.metrics.accuracy << " ece " << test.metrics.ece << '\n';
            }

            RunSummary run;
            run.mode = mode;
            run.seed = seed;
            run.test = test.metrics;
            run.best_epoch = result.best_epoch;
            run.epochs_run = result.log.size();
            run.best_dev_metric = result.best_dev_metric;
            ms.runs.push_back(run);
        }
        summary.modes.push_back(std::move(ms));
    }
    write_file(cfg.output_dir / "summary.json", to_json(summary).dump(2) + '\n');
    write_file(cfg.output_dir / "config.json", to_json(cfg).dump(2) + '\n');
    return summary;
}

namespace {

Tensor gaussian_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
    Tensor t({rows, cols});
    for (double& x : t.data()) {
        x = rng.normal();
    }
    return t;
}

// Multi-head softmax attention of queries Q = q_in Wq over keys/values from kv_in.
Tensor dense_attention(const Tensor& q_in, const Tensor& kv_in, const LayerWeights& w, std::size_t n_heads) {
    const std::size_t dh = w.wq.value.rows() / n_heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const Tensor q = matmul(q_in, w.wq.value);
    const Tensor k = matmul(kv_in, w.wk.value);
    const Tensor v = matmul(kv_in, w.wv.value);
    Tensor heads({q.rows(), dh * n_heads});
    for (std::size_t h = 0; h < n_heads; ++h) {
        const Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        const Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        const Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        const Tensor out = matmul(softmax_rows(scale(matmul(qh, transpose(kh)), inv_scale)), vh);
        for (std::size_t r = 0; r < out.rows(); ++r) {
            for (std::size_t c = 0; c < dh; ++c) {
                heads(r, h * dh + c) = out(r, c);
            }
        }
    }
    return matmul(heads, w.wo.value);
}

}  // namespace

KernelVerification verify_kernel(const KernelVerifyOptions& options) {
    if (!(options.tol >= 0.0)) {
        throw ConfigError("tol must be non-negative");
    }
    if (options.min_prefix > options.max_prefix) {
        throw ConfigError("min_prefix must not exceed max_prefix");
    }
    static constexpr std::size_t kWidths[] = {4, 8, 16};
    KernelVerification report;
    report.tol = options.tol;
    const Rng root(options.seed);
    for (std::size_t t = 0; t < options.trials; ++t) {
        Rng rng = root.fork(t);
        KernelTrial trial;
        trial.prefix_len = options.min_prefix + rng.below(options.max_prefix - options.min_prefix + 1);
        trial.seq_len = 2 + rng.below(15);
        trial.d_model = kWidths[rng.below(3)];
        trial.n_heads = 1 + rng.below(2);
        Rng weight_rng = rng.fork("weights");
        const LayerWeights w = LayerWeights::random(trial.d_model, trial.d_model, weight_rng, "verify.", 0.5);
        const Tensor prefix = gaussian_matrix(trial.prefix_len, trial.d_model, rng);
        const Tensor sequence = gaussian_matrix(trial.seq_len, trial.d_model, rng);

        Tape tape(false);
        const AttentionVars vars = bind_attention_constant(tape, w);
        const Tensor smooth = kernel_decomposed_attention(tape.constant_ref(prefix), tape.constant_ref(sequence),
                                                          vars, nullptr, trial.n_heads, std::nullopt)
                                  .value();
        if (trial.prefix_len == 0) {
            // The decomposition reduces to the sequence module alone.
            trial.error = max_abs_diff(smooth, dense_attention(sequence, sequence, w, trial.n_heads));
        } else {
            const Tensor composed = concat_rows(prefix, sequence);
            const Tensor reference = dense_attention(composed, composed, w, trial.n_heads);
            const Tensor literal = kernel_decomposed_attention(prefix, sequence, w, trial.n_heads, std::nullopt);
            trial.error = std::max(max_abs_diff(literal, reference), max_abs_diff(smooth, reference));
        }
        report.max_error = std::max(report.max_error, trial.error);
        report.trials.push_back(trial);
    }
    report.passed = report.max_error < options.tol;
    return report;
}

json to_json(const KernelVerification& report) {
    json trials = json::array();
    for (const KernelTrial& t : report.trials) {
        trials.push_back(json{{"j", t.prefix_len},
                              {"m", t.seq_len},
                              {"d", t.d_model},
                              {"heads", t.n_heads},
                              {"error", t.error}});
    }
    return json{{"passed", report.passed},
                {"max_error", report.max_error},
                {"tol", report.tol},
                {"n_trials", report.trials.size()},
                {"trials", trials}};
}

BenchReport bench_inference(const BenchOptions& options) {
    if (options.repeats < 5) {
        throw ConfigError("repeats must be at least 5");
    }
    if (options.n_inputs == 0 || options.seq_len == 0) {
        throw ConfigError("n_inputs and seq_len must be positive");
    }
    if (options.model.attention.prefix_len == 0) {
        throw ConfigError("prefix_len must be positive to compare prefix modes");
    }
    options.model.validate();
    ModelConfig standard_cfg = options.model;
    standard_cfg.attention.prefix_len = 0;
    const EncoderModel base = EncoderModel::create(standard_cfg, TuningMode::fine_tuning, options.backbone_seed, 0);

    struct Entry {
        std::string name;
        EncoderModel model;
    };
    std::vector<Entry> entries;
    entries.push_back({"standard", EncoderModel::with_backbone(base, standard_cfg, TuningMode::fine_tuning, 0)});
    entries.push_back({"prefix_tuning", EncoderModel::with_backbone(base, options.model, TuningMode::prefix_tuning,
                                                                    options.seed)});
    entries.push_back(
        {"prefix_propagation",
         EncoderModel::with_backbone(base, options.model, TuningMode::prefix_propagation, options.seed)});

    Rng rng(options.seed);
    std::vector<std::vector<int>> inputs(options.n_inputs);
    for (auto& tokens : inputs) {
        tokens.push_back(kClsToken);
        for (std::size_t i = 1; i < options.seq_len; ++i) {
            tokens.push_back(kFirstWordToken +
                             static_cast<int>(rng.below(options.model.vocab_size - kFirstWordToken)));
        }
    }

    // Keeps the optimizer from discarding the forward passes.
    double sink = 0.0;
    const auto run_all = [&](const EncoderModel& model) {
        for (const auto& tokens : inputs) {
            sink += model.logits(tokens)[0];
        }
    };
    for (const Entry& e : entries) {
        run_all(e.model);
    }

    BenchReport report;
    for (const Entry& e : entries) {
        report.modes.push_back(ModeTiming{e.name, {}, 0.0, 0.0, 0.0, 0.0});
    }
    for (std::size_t r = 0; r < options.repeats; ++r) {
        // Rotate the order so no mode always runs first.
        for (std::size_t k = 0; k < entries.size(); ++k) {
            const std::size_t idx = (r + k) % entries.size();
            const auto start = std::chrono::steady_clock::now();
            run_all(entries[idx].model);
            const auto stop = std::chrono::steady_clock::now();
            report.modes[idx].samples.push_back(std::chrono::duration<double>(stop - start).count() /
                                                static_cast<double>(inputs.size()));
        }
    }
    if (!std::isfinite(sink)) {
        throw DivergenceError("non-finite logits in benchmark", 0);
    }
    for (ModeTiming& t : report.modes) {
        t.median = median_of(t.samples);
        std::vector<double> dev;
        for (double s : t.samples) {
            dev.push_back(std::abs(s - t.median));
        }
        t.mad = median_of(dev);
        t.min = *std::min_element(t.samples.begin(), t.samples.end());
        t.max = *std::max_element(t.samples.begin(), t.samples.end());
    }
    report.propagation_over_tuning = report.modes[2].median / report.modes[1].median;
    return report;
}

json to_json(const BenchReport& report) {
    json modes = json::array();
    for (const ModeTiming& t : report.modes) {
        modes.push_back(json{{"mode", t.mode},
                             {"median_s", t.median},
                             {"mad_s", t.mad},
                             {"min_s", t.min},
                             {"max_s", t.max},
                             {"samples_s", t.samples}});
    }
    return json{{"modes", modes}, {"ratio_propagation_over_tuning", report.propagation_over_tuning}};
}

ReportOutput build_report(const std::filesystem::path& output_dir) {
    json summary;
    try {
        summary = json::parse(read_file(output_dir / "summary.json"));
    } catch (const json::parse_error& e) {
        throw InputError("summary.json: " + std::string(e.what()));
    }
    ReportOutput out;
    std::ostringstream table;
    table << std::fixed << std::setprecision(4);
    table << std::left << std::setw(20) << "mode" << std::right << std::setw(6) << "runs" << std::setw(18)
          << "accuracy" << std::setw(18) << "f1_micro" << std::setw(18) << "precision_macro" << std::setw(18)
          << "recall_macro" << std::setw(18) << "ece" << std::setw(12) << "prefix" << std::setw(12) << "trainable"
          << '\n';
    std::ostringstream csv;
    csv << "mode,seed,epoch,dev_metric,dev_ece\n";
    for (const json& m : summary.at("modes")) {
        const std::string mode = m.at("mode").get<std::string>();
        table << std::left << std::setw(20) << mode << std::right << std::setw(6) << m.at("n_runs").get<std::size_t>();
        for (const char* key : {"accuracy", "f1_micro", "precision_macro", "recall_macro", "ece"}) {
            std::ostringstream cell;
            cell << std::fixed << std::setprecision(4) << m.at("mean").at(key).get<double>() << " +- "
                 << m.at("std").at(key).get<double>();
            table << std::setw(18) << cell.str();
        }
        table << std::setw(12) << m.at("prefix_param_count").get<std::size_t>() << std::setw(12)
              << m.at("trainable_param_count").get<std::size_t>() << '\n';

        for (const json& run : m.at("runs")) {
            const auto seed = run.at("seed").get<std::uint64_t>();
            std::ifstream in(output_dir / mode / std::to_string(seed) / "metrics.jsonl");
            if (!in) {
                throw InputError("missing metrics.jsonl for " + mode + " seed " + std::to_string(seed));
            }
            std::string line;
            while (std::getline(in, line)) {
                const json rec = json::parse(line);
                if (rec.value("split", "") != "dev") {
                    continue;
                }
                csv << mode << ',' << seed << ',' << rec.at("epoch").get<std::size_t>() << ','
                    << rec.at("dev_metric").dump() << ',' << rec.at("dev_ece").dump() << '\n';
            }
        }
    }
    if (summary.contains("prefix_param_ratio_propagation_over_tuning")) {
        table << "prefix parameter ratio propagation/tuning: "
              << summary.at("prefix_param_ratio_propagation_over_tuning").get<double>() << '\n';
    }
    out.table = table.str();
    out.calibration_csv = csv.str();
    return out;
}

}  // namespace prefixprop
