#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "prefixprop/autodiff.hpp"
#include "prefixprop/calibration.hpp"
#include "prefixprop/model.hpp"
#include "prefixprop/tasks.hpp"

namespace prefixprop {

enum class Metric { accuracy, f1_micro };

std::string_view to_string(Metric metric);
Metric parse_metric(std::string_view name);

// Learning-rate presets selectable by index or by value.
inline constexpr double kPrefixLrGrid[] = {1e-2, 5e-2, 1e-3, 5e-3, 5e-4};
inline constexpr double kFineTuneLrGrid[] = {3e-5, 5e-5};
inline constexpr double kDefaultPrefixLr = 5e-3;
inline constexpr double kDefaultFineTuneLr = 5e-5;

struct TrainConfig {
    std::size_t epochs = 15;
    std::size_t batch_size = 32;
    double lr = kDefaultPrefixLr;
    double warmup_fraction = 0.1;
    double dropout = 0.1;
    double weight_decay = 0.01;
    std::uint64_t seed = 0;
    // Stop after this many epochs without a dev improvement.
    std::optional<std::size_t> early_stop_patience;
    // Stop as soon as the dev metric reaches this value.
    std::optional<double> target_metric;
    Metric metric = Metric::accuracy;
    // Micro-batches per optimizer step.
    std::size_t grad_accum = 1;
    // When false, prefix parameters are excluded from weight decay.
    bool decay_prefixes = true;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t ece_bins = 10;

    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);

// Linear ramp from 0 to cfg.lr over warmup_fraction * total_steps, then linear
// decay to 0 at total_steps. Throws ConfigError unless 0 <= step <= total_steps.
double lr_at(long step, long total_steps, const TrainConfig& cfg);

struct OptimizerSlot {
    Tensor m;
    Tensor v;
    bool decay = true;
};

struct OptimizerState {
    std::vector<OptimizerSlot> slots;
    long step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Zero moments shaped like each parameter; `decay` mirrors the weight-decay eligibility.
OptimizerState make_optimizer_state(std::span<Parameter* const> params, const TrainConfig& cfg,
                                    std::span<const bool> decay = {});

/// One AdamW update from each parameter's accumulated grad:
/// p <- p * (1 - lr * wd), then p <- p - lr * m_hat / (sqrt(v_hat) + eps)
/// with bias-corrected moments. Throws ShapeError when slots and parameters disagree.
void adamw_step(std::span<Parameter* const> params, OptimizerState& state, double lr_now);

struct ClassificationMetrics {
    double accuracy = 0.0;
    double f1_micro = 0.0;
    double precision_macro = 0.0;
    double recall_macro = 0.0;
    double mean_loss = 0.0;
    double ece = 0.0;
};

// Classes never predicted count as precision 0; classes absent from the labels as recall 0.
ClassificationMetrics classification_metrics(std::span<const int> predicted, std::span<const int> labels,
                                             std::size_t n_classes);

struct Evaluation {
    ClassificationMetrics metrics;
    std::vector<PredictionRecord> records;
    CalibrationReport calibration;
};

Evaluation evaluate(const EncoderModel& model, const Dataset& data, std::size_t ece_bins = 10);
double metric_value(const ClassificationMetrics& m, Metric metric);

struct EpochLog {
    std::size_t epoch = 0;
    long step = 0;
    double train_loss = 0.0;
    double dev_metric = 0.0;
    double dev_ece = 0.0;
    double lr = 0.0;
    std::string mode;
    std::uint64_t seed = 0;
};

nlohmann::json to_json(const EpochLog& log);

struct TrainedResult {
    std::vector<EpochLog> log;
    // 1-based epoch whose parameters were restored.
    std::size_t best_epoch = 0;
    double best_dev_metric = 0.0;
    long steps = 0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Minibatch AdamW over the model's trainable parameters. Examples are
/// shuffled per epoch and run one tape each; gradients are averaged over the
/// effective batch. After each epoch the dev split is scored and the best
/// trainable values are kept; they are restored before returning.
/// Throws DivergenceError on a non-finite loss and InputError on empty splits.
TrainedResult train(EncoderModel& model, const Dataset& train_data, const Dataset& dev_data, const TrainConfig& cfg,
                    const EpochCallback& on_epoch = {});

}  // namespace prefixprop
