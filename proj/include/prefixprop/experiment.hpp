#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "prefixprop/model.hpp"
#include "prefixprop/tasks.hpp"
#include "prefixprop/training.hpp"

namespace prefixprop {

struct CorpusSpec {
    std::filesystem::path train;
    std::filesystem::path dev;
    std::filesystem::path test;
    TokenizerSpec tokenizer;
};

// Full-model fine-tuning applied to the freshly initialized backbone before it is frozen.
struct WarmPhase {
    TaskSpec task;
    TrainConfig train;
};

struct BackboneSpec {
    std::uint64_t seed = 7;
    std::optional<WarmPhase> warm_phase;
};

/// Everything that determines a run. Saved as JSON next to the results so
/// a rerun from the saved file reproduces the metrics files byte for byte.
struct ExperimentConfig {
    TaskSpec task;
    // When set, replaces the synthetic task.
    std::optional<CorpusSpec> corpus;
    ModelConfig model;
    std::vector<TuningMode> modes{TuningMode::prefix_propagation};
    TrainConfig train;
    BackboneSpec backbone;
    std::filesystem::path output_dir = "runs";
    std::vector<std::uint64_t> seeds{0};

    void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
// Throws ConfigError naming the offending field path, e.g. "train.lr: ...".
ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment(const std::filesystem::path& path);

/// Applies "a.b.c=value" to a JSON document. The value is parsed as JSON when
/// possible and taken as a string otherwise. Intermediate objects are created.
void apply_override(nlohmann::json& doc, std::string_view assignment);

// Train/dev/test data for the configured task or corpus.
DatasetSplits load_splits(const ExperimentConfig& cfg);

// Randomly initialized backbone, fine-tuned by the warm phase when configured.
EncoderModel build_backbone(const ExperimentConfig& cfg);

struct RunSummary {
    TuningMode mode = TuningMode::prefix_propagation;
    std::uint64_t seed = 0;
    ClassificationMetrics test;
    std::size_t best_epoch = 0;
    std::size_t epochs_run = 0;
    double best_dev_metric = 0.0;
};

struct ModeSummary {
    TuningMode mode = TuningMode::prefix_propagation;
    std::vector<RunSummary> runs;
    ParameterPartition partition;
};

struct ExperimentSummary {
    std::vector<ModeSummary> modes;
};

nlohmann::json to_json(const ExperimentSummary& summary);

/// For each mode and seed: trains, scores the test split, and writes
/// <out>/<mode>/<seed>/{metrics.jsonl, model.ckpt, reliability.csv}; then
/// writes <out>/summary.json and <out>/config.json. `progress` receives
/// human-readable lines and may be null.
ExperimentSummary run_experiment(const ExperimentConfig& cfg, std::ostream* progress = nullptr);

struct KernelTrial {
    std::size_t prefix_len = 0;
    std::size_t seq_len = 0;
    std::size_t d_model = 0;
    std::size_t n_heads = 0;
    double error = 0.0;
};

struct KernelVerification {
    std::vector<KernelTrial> trials;
    double max_error = 0.0;
    double tol = 0.0;
    bool passed = false;
};

struct KernelVerifyOptions {
    std::size_t trials = 100;
    std::uint64_t seed = 0;
    double tol = 1e-10;
    std::size_t min_prefix = 1;
    std::size_t max_prefix = 4;
};

/// Draws random (j, m, d, heads) with m in [2, 16], d in {4, 8, 16}, heads in
/// {1, 2} and compares both kernel-decomposition routes (exact lambda) with
/// dense softmax attention over cat(P, C). With j = 0 the reference is the
/// sequence kernel module alone. Passes iff max error < tol.
KernelVerification verify_kernel(const KernelVerifyOptions& options = {});

nlohmann::json to_json(const KernelVerification& report);

struct BenchOptions {
    ModelConfig model;
    std::size_t seq_len = 256;
    std::size_t n_inputs = 8;
    std::size_t repeats = 7;
    std::uint64_t seed = 0;
    std::uint64_t backbone_seed = 7;
};

struct ModeTiming {
    std::string mode;
    // Seconds per forward pass, one sample per repeat.
    std::vector<double> samples;
    double median = 0.0;
    // Median absolute deviation from the median.
    double mad = 0.0;
    double min = 0.0;
    double max = 0.0;
};

struct BenchReport {
    std::vector<ModeTiming> modes;
    double propagation_over_tuning = 0.0;
};

/// Times evaluation-mode forward passes for standard attention (no prefix),
/// prefix_tuning and prefix_propagation on the same backbone and inputs.
/// Modes are interleaved within each repeat. Throws ConfigError if repeats < 5.
BenchReport bench_inference(const BenchOptions& options);

nlohmann::json to_json(const BenchReport& report);

// Table and per-epoch calibration series from an output directory.
struct ReportOutput {
    std::string table;
    std::string calibration_csv;
};

ReportOutput build_report(const std::filesystem::path& output_dir);

}  // namespace prefixprop
