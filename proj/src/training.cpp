#include "prefixprop/training.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "prefixprop/config_io.hpp"
#include "prefixprop/errors.hpp"
#include "prefixprop/ops.hpp"

namespace prefixprop {

using nlohmann::json;

std::string_view to_string(Metric metric) {
    return metric == Metric::accuracy ? "accuracy" : "f1_micro";
}

Metric parse_metric(std::string_view name) {
    if (name == "accuracy") {
        return Metric::accuracy;
    }
    if (name == "f1_micro") {
        return Metric::f1_micro;
    }
    throw ConfigError("unknown metric '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
    if (!(lr > 0.0)) {
        throw ConfigError("lr must be positive");
    }
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) {
        throw ConfigError("warmup_fraction must be in [0, 1)");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) {
        throw ConfigError("dropout must be in [0, 1)");
    }
    if (!(weight_decay >= 0.0)) {
        throw ConfigError("weight_decay must be non-negative");
    }
    if (epochs == 0 || batch_size == 0 || grad_accum == 0 || ece_bins == 0) {
        throw ConfigError("epochs, batch_size, grad_accum and ece_bins must be positive");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && eps > 0.0)) {
        throw ConfigError("need 0 <= beta < 1 and eps > 0");
    }
}

void to_json(json& j, const TrainConfig& cfg) {
    j = json{{"epochs", cfg.epochs},
             {"batch_size", cfg.batch_size},
             {"lr", cfg.lr},
             {"warmup_fraction", cfg.warmup_fraction},
             {"schedule", "linear"},
             {"dropout", cfg.dropout},
             {"weight_decay", cfg.weight_decay},
             {"seed", cfg.seed},
             {"metric", std::string(to_string(cfg.metric))},
             {"grad_accum", cfg.grad_accum},
             {"decay_prefixes", cfg.decay_prefixes},
             {"beta1", cfg.beta1},
             {"beta2", cfg.beta2},
             {"eps", cfg.eps},
             {"ece_bins", cfg.ece_bins}};
    j["early_stop_patience"] = cfg.early_stop_patience ? json(*cfg.early_stop_patience) : json(nullptr);
    j["target_metric"] = cfg.target_metric ? json(*cfg.target_metric) : json(nullptr);
}

void from_json(const json& j, TrainConfig& cfg) {
    reject_unknown_fields(j, {"epochs", "batch_size", "lr", "warmup_fraction", "schedule", "dropout", "weight_decay",
                              "seed", "early_stop_patience", "target_metric", "metric", "grad_accum", "decay_prefixes",
                              "beta1", "beta2", "eps", "ece_bins"});
    TrainConfig out;
    const auto get = [&](const char* key, auto& dst) { read_field(j, key, dst); };
    get("epochs", out.epochs);
    get("batch_size", out.batch_size);
    get("lr", out.lr);
    get("warmup_fraction", out.warmup_fraction);
    get("dropout", out.dropout);
    get("weight_decay", out.weight_decay);
    get("seed", out.seed);
    get("grad_accum", out.grad_accum);
    get("decay_prefixes", out.decay_prefixes);
    get("beta1", out.beta1);
    get("beta2", out.beta2);
    get("eps", out.eps);
    get("ece_bins", out.ece_bins);
    if (j.contains("schedule") && j.at("schedule") != "linear") {
        throw ConfigError("schedule: only \"linear\" is supported");
    }
    if (j.contains("metric")) {
        std::string name;
        get("metric", name);
        try {
            out.metric = parse_metric(name);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("metric: ") + e.what());
        }
    }
    if (j.contains("early_stop_patience") && !j.at("early_stop_patience").is_null()) {
        get("early_stop_patience", out.early_stop_patience.emplace());
    }
    if (j.contains("target_metric") && !j.at("target_metric").is_null()) {
        get("target_metric", out.target_metric.emplace());
    }
    cfg = out;
}

double lr_at(long step, long total_steps, const TrainConfig& cfg) {
    if (total_steps <= 0 || step < 0 || step > total_steps) {
        throw ConfigError("lr_at needs 0 <= step <= total_steps with total_steps > 0");
    }
    const double s = static_cast<double>(step);
    const double total = static_cast<double>(total_steps);
    const double warmup = cfg.warmup_fraction * total;
    if (s < warmup) {
        return cfg.lr * s / warmup;
    }
    return cfg.lr * (total - s) / (total - warmup);
}

OptimizerState make_optimizer_state(std::span<Parameter* const> params, const TrainConfig& cfg,
                                    std::span<const bool> decay) {
    if (!decay.empty() && decay.size() != params.size()) {
        throw ShapeError("decay flags must match the parameter list");
    }
    OptimizerState state;
    state.beta1 = cfg.beta1;
    state.beta2 = cfg.beta2;
    state.eps = cfg.eps;
    state.weight_decay = cfg.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.slots.push_back(
            {Tensor::zeros_like(params[i]->value), Tensor::zeros_like(params[i]->value), decay.empty() || decay[i]});
    }
    return state;
}

void adamw_step(std::span<Parameter* const> params, OptimizerState& state, double lr_now) {
    if (params.size() != state.slots.size()) {
        throw ShapeError("optimizer state has " + std::to_string(state.slots.size()) + " slots for " +
                         std::to_string(params.size()) + " parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Parameter& p = *params[i];
        if (p.value.shape() != state.slots[i].m.shape() || p.grad.shape() != p.value.shape()) {
            throw ShapeError("optimizer slot shape mismatch for " + p.name);
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = *params[i];
        OptimizerSlot& slot = state.slots[i];
        const double shrink = slot.decay ? 1.0 - lr_now * state.weight_decay : 1.0;
        auto value = p.value.data();
        auto grad = p.grad.data();
        auto m = slot.m.data();
        auto v = slot.v.data();
        for (std::size_t k = 0; k < value.size(); ++k) {
            const double g = grad[k];
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g;
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g * g;
            value[k] *= shrink;
            value[k] -= lr_now * (m[k] / c1) / (std::sqrt(v[k] / c2) + state.eps);
        }
    }
}

ClassificationMetrics classification_metrics(std::span<const int> predicted, std::span<const int> labels,
                                             std::size_t n_classes) {
    if (predicted.size() != labels.size() || predicted.empty()) {
        throw InputError("metrics need matching, nonempty prediction and label lists");
    }
    std::vector<double> tp(n_classes, 0.0), pred_count(n_classes, 0.0), label_count(n_classes, 0.0);
    double correct = 0.0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        const int p = predicted[i];
        const int y = labels[i];
        if (p < 0 || y < 0 || static_cast<std::size_t>(p) >= n_classes || static_cast<std::size_t>(y) >= n_classes) {
            throw LabelError("class index outside [0, " + std::to_string(n_classes) + ")");
        }
        pred_count[p] += 1.0;
        label_count[y] += 1.0;
        if (p == y) {
            tp[p] += 1.0;
            correct += 1.0;
        }
    }
    ClassificationMetrics m;
    const double n = static_cast<double>(predicted.size());
    m.accuracy = correct / n;
    // Single-label: micro precision and micro recall both equal accuracy.
    m.f1_micro = m.accuracy;
    for (std::size_t k = 0; k < n_classes; ++k) {
        m.precision_macro += pred_count[k] > 0 ? tp[k] / pred_count[k] : 0.0;
        m.recall_macro += label_count[k] > 0 ? tp[k] / label_count[k] : 0.0;
    }
    m.precision_macro /= static_cast<double>(n_classes);
    m.recall_macro /= static_cast<double>(n_classes);
    return m;
}

Evaluation evaluate(const EncoderModel& model, const Dataset& data, std::size_t ece_bins) {
    if (data.empty()) {
        throw InputError("cannot evaluate on an empty dataset");
    }
    Evaluation out;
    std::vector<int> predicted, labels;
    double loss = 0.0;
    for (const Example& ex : data.examples) {
        const Tensor logits = model.logits(ex.tokens);
        out.records.push_back(make_record(logits, ex.label));
        predicted.push_back(out.records.back().predicted);
        labels.push_back(ex.label);
        const double top = *std::max_element(logits.data().begin(), logits.data().end());
        double z = 0.0;
        for (double v : logits.data()) {
            z += std::exp(v - top);
        }
        loss += top + std::log(z) - logits[static_cast<std::size_t>(ex.label)];
    }
    out.metrics = classification_metrics(predicted, labels, model.config().n_classes);
    out.metrics.mean_loss = loss / static_cast<double>(data.size());
    out.calibration = ece(out.records, ece_bins);
    out.metrics.ece = out.calibration.ece;
    return out;
}

double metric_value(const ClassificationMetrics& m, Metric metric) {
    return metric == Metric::accuracy ? m.accuracy : m.f1_micro;
}

json to_json(const EpochLog& log) {
    return json{{"epoch", log.epoch},          {"step", log.step},   {"train_loss", log.train_loss},
                {"dev_metric", log.dev_metric}, {"dev_ece", log.dev_ece}, {"lr", log.lr},
                {"mode", log.mode},             {"seed", log.seed}};
}

TrainedResult train(EncoderModel& model, const Dataset& train_data, const Dataset& dev_data, const TrainConfig& cfg,
                    const EpochCallback& on_epoch) {
    cfg.validate();
    if (train_data.empty() || dev_data.empty()) {
        throw InputError("training and dev splits must be nonempty");
    }
    std::vector<Parameter*> params = model.trainable_parameters();
    auto decay = std::make_unique<bool[]>(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        decay[i] = cfg.decay_prefixes || !params[i]->name.starts_with("prefix.");
    }
    OptimizerState state = make_optimizer_state(params, cfg, std::span<const bool>(decay.get(), params.size()));

    const std::size_t n = train_data.size();
    const std::size_t batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t steps_per_epoch = (batches_per_epoch + cfg.grad_accum - 1) / cfg.grad_accum;
    const long total_steps = static_cast<long>(steps_per_epoch * cfg.epochs);

    const Rng root(cfg.seed);
    Rng dropout_rng = root.fork("dropout");
    const Rng shuffle_root = root.fork("shuffle");
    const ForwardOptions fwd{true, cfg.dropout, &dropout_rng};

    TrainedResult result;
    std::vector<Tensor> best_values;
    std::size_t since_best = 0;
    std::vector<std::size_t> order(n);

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng = shuffle_root.fork(epoch);
        shuffle(order.begin(), order.end(), shuffle_rng);

        double loss_sum = 0.0;
        double last_lr = 0.0;
        model.zero_grad();
        for (std::size_t b = 0; b < batches_per_epoch; ++b) {
            const std::size_t begin = b * cfg.batch_size;
            const std::size_t end = std::min(n, begin + cfg.batch_size);
            const std::size_t group = b / cfg.grad_accum;
            const std::size_t group_first = group * cfg.grad_accum;
            const std::size_t group_last = std::min(batches_per_epoch, group_first + cfg.grad_accum);
            const std::size_t group_size = std::min(n, group_last * cfg.batch_size) - group_first * cfg.batch_size;
            for (std::size_t i = begin; i < end; ++i) {
                const Example& ex = train_data.examples[order[i]];
                Tape tape;
                Var loss = cross_entropy(model.forward(tape, ex.tokens, fwd), static_cast<std::size_t>(ex.label));
                const double value = loss.value()[0];
                if (!std::isfinite(value)) {
                    throw DivergenceError("non-finite training loss", state.step + 1);
                }
                loss_sum += value;
                tape.backward(scale(loss, 1.0 / static_cast<double>(group_size)));
            }
            if (b + 1 == group_last) {
                last_lr = lr_at(state.step, total_steps, cfg);
                adamw_step(params, state, last_lr);
                model.zero_grad();
            }
        }

        const Evaluation dev = evaluate(model, dev_data, cfg.ece_bins);
        EpochLog log;
        log.epoch = epoch;
        log.step = state.step;
        log.train_loss = loss_sum / static_cast<double>(n);
        log.dev_metric = metric_value(dev.metrics, cfg.metric);
        log.dev_ece = dev.metrics.ece;
        log.lr = last_lr;
        log.mode = std::string(to_string(model.mode()));
        log.seed = cfg.seed;
        result.log.push_back(log);
        if (on_epoch) {
            on_epoch(log);
        }

        if (result.best_epoch == 0 || log.dev_metric > result.best_dev_metric) {
            result.best_epoch = epoch;
            result.best_dev_metric = log.dev_metric;
            best_values.clear();
            for (const Parameter* p : params) {
                best_values.push_back(p->value);
            }
            since_best = 0;
        } else {
            ++since_best;
        }
        if (cfg.target_metric && log.dev_metric >= *cfg.target_metric) {
            break;
        }
        if (cfg.early_stop_patience && since_best > *cfg.early_stop_patience) {
            break;
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        params[i]->value = best_values[i];
    }
    result.steps = state.step;
    return result;
}

}  // namespace prefixprop
