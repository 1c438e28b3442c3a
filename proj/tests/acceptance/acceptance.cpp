#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "prefixprop/attention.hpp"
#include "prefixprop/calibration.hpp"
#include "prefixprop/errors.hpp"
#include "prefixprop/experiment.hpp"
#include "prefixprop/gradcheck.hpp"
#include "prefixprop/model.hpp"
#include "prefixprop/ops.hpp"
#include "prefixprop/rng.hpp"
#include "prefixprop/training.hpp"

namespace {

using namespace prefixprop;
using nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* format, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), format, v);
    return buf;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot read " + path.string());
    }
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("prefixprop_acceptance_" + name);
    fs::remove_all(dir);
    return dir;
}

ExperimentConfig config_from(const char* file, const fs::path& out) {
    ExperimentConfig cfg = load_experiment(fs::path(PREFIXPROP_CONFIG_DIR) / file);
    cfg.output_dir = out;
    return cfg;
}

Tensor gaussian(std::size_t rows, std::size_t cols, Rng& rng) {
    Tensor t({rows, cols});
    for (double& v : t.data()) {
        v = rng.normal();
    }
    return t;
}

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
    std::vector<int> t{kClsToken};
    while (t.size() < n) {
        t.push_back(static_cast<int>(rng.below(vocab)));
    }
    return t;
}

Outcome kernel_identity() {
    const auto start = Clock::now();
    KernelVerifyOptions opts;
    opts.trials = 100;
    opts.tol = 1e-10;
    opts.min_prefix = 1;
    opts.max_prefix = 4;
    const KernelVerification r = verify_kernel(opts);
    const double t = seconds_since(start);
    return {r.passed && r.trials.size() >= 100 && t < 10.0,
            std::to_string(r.trials.size()) + " trials, max error " + fmt("%.3e", r.max_error) + " (< 1e-10), " +
                fmt("%.2f", t) + " s (< 10 s)"};
}

Outcome parameter_halving() {
    std::size_t checked = 0;
    bool all = true;
    for (std::size_t layers : {1, 2, 3, 4}) {
        for (std::size_t j : {1, 2, 4, 8, 16}) {
            for (std::size_t d : {8, 16, 32}) {
                ModelConfig cfg;
                cfg.attention.d_model = d;
                cfg.attention.n_heads = 2;
                cfg.attention.prefix_len = j;
                cfg.n_layers = layers;
                cfg.d_ff = 2 * d;
                cfg.vocab_size = 50;
                cfg.max_len = 32;
                const auto prop = EncoderModel::create(cfg, TuningMode::prefix_propagation, 1, 2).partition();
                const auto tune = EncoderModel::create(cfg, TuningMode::prefix_tuning, 1, 2).partition();
                const bool ok = prop.prefix_count == layers * j * d && tune.prefix_count == 2 * layers * j * d &&
                                static_cast<double>(prop.prefix_count) / static_cast<double>(tune.prefix_count) == 0.5;
                all = all && ok;
                ++checked;
            }
        }
    }
    return {all, std::to_string(checked) + " (L, j, d) settings, ratio exactly 0.5 in each"};
}

Outcome reduction() {
    const ExperimentConfig exp = config_from("trainability.json", "unused");
    ModelConfig cfg = exp.model;
    cfg.attention.prefix_len = 0;
    EncoderModel base = EncoderModel::create(cfg, TuningMode::fine_tuning, 7, 0);
    Rng rng(2024);
    for (Parameter* p : base.parameters()) {
        for (double& v : p->value.data()) {
            v += 0.05 * rng.normal();
        }
    }
    std::vector<EncoderModel> reduced;
    for (TuningMode mode :
         {TuningMode::prefix_tuning, TuningMode::prefix_propagation, TuningMode::propagation_kernel}) {
        reduced.push_back(EncoderModel::with_backbone(base, cfg, mode, 3));
        // The head is fresh in with_backbone; copy it so the whole forward is comparable.
        reduced.back().find("head.weight")->value = base.find("head.weight")->value;
        reduced.back().find("head.bias")->value = base.find("head.bias")->value;
        reduced.back().find("embed.cls")->value = base.find("embed.cls")->value;
    }
    std::size_t identical = 0;
    for (int i = 0; i < 20; ++i) {
        const auto tokens = random_tokens(2 + rng.below(255), cfg.vocab_size, rng);
        const Tensor expect = base.logits(tokens);
        bool same = true;
        for (const EncoderModel& m : reduced) {
            const Tensor got = m.logits(tokens);
            same = same && std::equal(got.data().begin(), got.data().end(), expect.data().begin(), expect.data().end());
        }
        identical += same ? 1 : 0;
    }
    return {identical == 20, std::to_string(identical) + "/20 inputs bit-identical in prefix_tuning, "
                                                        "prefix_propagation and propagation_kernel"};
}

Outcome gradients() {
    const auto start = Clock::now();
    double worst = 0.0;
    bool all = true;
    std::size_t checks = 0;
    const auto record = [&](const GradCheckReport& r) {
        worst = std::max(worst, r.max_relative_error);
        all = all && r.passed && r.max_relative_error < 1e-5;
        ++checks;
    };

    Rng rng(77);
    for (int trial = 0; trial < 6; ++trial) {
        const std::size_t j = 1 + rng.below(4), m = 2 + rng.below(15), heads = 1 + rng.below(2);
        const std::size_t d = std::size_t{4} << rng.below(3);
        LayerWeights w = LayerWeights::random(d, 2 * d, rng, "g.", 0.5);
        for (Parameter* p : w.parameters()) {
            p->trainable = false;
        }
        AttentionConfig cfg;
        cfg.d_model = d;
        cfg.n_heads = heads;
        cfg.prefix_len = j;
        cfg.window = 2;
        const AttentionMask mask = build_mask(cfg, m);
        const AttentionMask tuning_mask = build_tuning_mask(cfg, m);
        const AttentionMask seq_cols = mask.select_cols(j, j + m);
        const Tensor seq = gaussian(m, d, rng);
        const Tensor proj_prop = gaussian(j + m, d, rng);
        const Tensor proj_tune = gaussian(m, d, rng);
        Parameter prefix("prefix.0", gaussian(j, d, rng));
        Parameter keys("prefix.0.key", gaussian(j, d, rng));
        Parameter values("prefix.0.value", gaussian(j, d, rng));
        std::vector<Parameter*> prop_params{&prefix};
        std::vector<Parameter*> tune_params{&keys, &values};

        record(grad_check(
            [&](Tape& t) {
                Var composed = compose_propagation_input(t.constant_ref(seq), t.bind(prefix), 1);
                return sum(mul(prefix_propagation_attention(composed, bind_attention(t, w), mask, heads),
                               t.constant_ref(proj_prop)));
            },
            prop_params));
        record(grad_check(
            [&](Tape& t) {
                return sum(mul(prefix_tuning_attention(t.constant_ref(seq), t.bind(keys), t.bind(values),
                                                       bind_attention(t, w), tuning_mask, heads),
                               t.constant_ref(proj_tune)));
            },
            tune_params));
        for (std::optional<double> alpha : {std::optional<double>{}, std::optional<double>{0.5}}) {
            record(grad_check(
                [&](Tape& t) {
                    return sum(mul(kernel_decomposed_attention(t.bind(prefix), t.constant_ref(seq),
                                                               bind_attention(t, w), &seq_cols, heads, alpha),
                                   t.constant_ref(proj_prop)));
                },
                prop_params));
        }
    }

    const ExperimentConfig exp = config_from("trainability.json", "unused");
    for (TuningMode mode : {TuningMode::fine_tuning, TuningMode::prefix_tuning, TuningMode::prefix_propagation,
                            TuningMode::propagation_kernel}) {
        ModelConfig cfg = exp.model;
        if (mode == TuningMode::propagation_kernel) {
            cfg.alpha = 0.5;
        }
        EncoderModel model = EncoderModel::create(cfg, mode, 7, 1);
        const auto tokens = random_tokens(48, cfg.vocab_size, rng);
        std::vector<Parameter*> params = model.trainable_parameters();
        GradCheckOptions opts;
        // Every coordinate of the prefix modes; a sample of each tensor for full fine-tuning.
        opts.max_coords_per_param = mode == TuningMode::fine_tuning ? 16 : 0;
        record(grad_check([&](Tape& t) { return cross_entropy(model.forward(t, tokens), 2); }, params, 1e-5, opts));
    }
    const double t = seconds_since(start);
    return {all && t < 60.0, std::to_string(checks) + " checks (attention variants and full model in 4 modes), " +
                                 "max relative error " + fmt("%.3e", worst) + " (< 1e-5), " + fmt("%.1f", t) +
                                 " s (< 60 s)"};
}

Outcome freeze() {
    const fs::path out = scratch("freeze");
    const ExperimentConfig cfg = config_from("smoke.json", out);
    run_experiment(cfg);
    EncoderModel backbone = build_backbone(cfg);
    double worst = 0.0, moved = 0.0;
    std::size_t frozen = 0;
    for (TuningMode mode : cfg.modes) {
        for (std::uint64_t seed : cfg.seeds) {
            EncoderModel trained =
                load_checkpoint(out / std::string(to_string(mode)) / std::to_string(seed) / "model.ckpt");
            EncoderModel fresh = EncoderModel::with_backbone(backbone, cfg.model, mode, seed);
            for (Parameter* p : trained.parameters()) {
                if (p->trainable) {
                    if (p->name.starts_with("prefix.")) {
                        moved = std::max(moved, max_abs_diff(p->value, fresh.find(p->name)->value));
                    }
                    continue;
                }
                ++frozen;
                worst = std::max(worst, max_abs_diff(p->value, backbone.find(p->name)->value));
            }
        }
    }
    fs::remove_all(out);
    return {worst == 0.0 && frozen > 0 && moved > 0.0,
            "max |delta| over " + std::to_string(frozen) + " frozen tensors = " + fmt("%g", worst) +
                " after full runs in 3 prefix modes x 2 seeds (prefixes moved by up to " + fmt("%.3g", moved) + ")"};
}

Outcome trainability() {
    const auto start = Clock::now();
    const fs::path out = scratch("trainability");
    const ExperimentConfig cfg = config_from("trainability.json", out);
    const ExperimentSummary summary = run_experiment(cfg);
    const double t = seconds_since(start);
    bool all = true;
    std::ostringstream detail;
    detail << "task needle seq_len " << cfg.task.seq_len << ", window " << cfg.task.window << ", "
           << cfg.task.n_classes << " classes, " << cfg.task.n_train << " train, j=" << cfg.model.attention.prefix_len
           << ", " << cfg.seeds.size() << " seeds";
    for (const ModeSummary& ms : summary.modes) {
        double dev_sum = 0.0, test_sum = 0.0, epochs_sum = 0.0, ece_sum = 0.0;
        double dev_min = 1.0;
        std::size_t reached = 0;
        for (const RunSummary& r : ms.runs) {
            const bool ok = r.best_dev_metric >= 0.9 && r.epochs_run <= 15;
            reached += ok ? 1 : 0;
            all = all && ok;
            dev_min = std::min(dev_min, r.best_dev_metric);
            dev_sum += r.best_dev_metric;
            test_sum += r.test.accuracy;
            ece_sum += r.test.ece;
            epochs_sum += static_cast<double>(r.epochs_run);
        }
        const double n = static_cast<double>(ms.runs.size());
        detail << "\n      " << to_string(ms.mode) << ": " << reached << "/" << ms.runs.size()
               << " reach dev >= 0.9 (min " << fmt("%.3f", dev_min) << "), mean epochs " << fmt("%.1f", epochs_sum / n)
               << ", mean test acc " << fmt("%.3f", test_sum / n) << ", mean test ECE " << fmt("%.3f", ece_sum / n)
               << ", trainable " << ms.partition.trainable_count;
    }
    detail << "\n      runtime " << fmt("%.0f", t) << " s (< 900 s)";
    fs::remove_all(out);
    return {all && t < 900.0, detail.str()};
}

PredictionRecord rec(double confidence, bool correct) {
    return {confidence, 1, correct ? 1 : 0};
}

Outcome ece_correctness() {
    struct HandSet {
        std::vector<PredictionRecord> records;
        std::size_t bins;
        double expect;
    };
    const std::vector<HandSet> sets{
        {{rec(0.95, true), rec(0.95, false)}, 10, 0.45},
        {{rec(1.0, true), rec(1.0, false), rec(0.0, false), rec(0.0, true)}, 10, 0.5},
        {{rec(0.25, true), rec(0.35, false), rec(0.6, true), rec(0.6, true), rec(0.8, false)}, 10, 0.54},
        {{rec(1.0, true), rec(1.0, true)}, 10, 0.0},
        {{rec(0.0, false), rec(0.0, false), rec(1.0, false)}, 5, 1.0 / 3.0},
    };
    double worst = 0.0;
    for (const HandSet& s : sets) {
        worst = std::max(worst, std::abs(ece(s.records, s.bins).ece - s.expect));
    }

    ExperimentConfig cfg = config_from("smoke.json", scratch("ece_series"));
    cfg.modes = {TuningMode::prefix_propagation};
    cfg.seeds = {0};
    cfg.train.epochs = 4;
    const DatasetSplits data = load_splits(cfg);
    EncoderModel model = EncoderModel::with_backbone(build_backbone(cfg), cfg.model, TuningMode::prefix_propagation, 0);
    std::vector<double> series;
    bool monotone = true;
    const TrainedResult r = train(model, data.train, data.dev, cfg.train, [&](const EpochLog& log) {
        const std::size_t before = series.size();
        series.push_back(log.dev_ece);
        monotone = monotone && series.size() == before + 1 && log.epoch == series.size() && log.dev_ece >= 0.0 &&
                   log.dev_ece <= 1.0;
    });
    const bool series_ok = monotone && series.size() == r.log.size() && series.size() == cfg.train.epochs;
    return {worst < 1e-12 && series_ok, std::to_string(sets.size()) + " hand sets, max error " + fmt("%.1e", worst) +
                                            " (< 1e-12); per-epoch ECE series of length " +
                                            std::to_string(series.size()) + " for " + std::to_string(r.log.size()) +
                                            " epochs"};
}

Outcome runtime_direction() {
    const ExperimentConfig exp = config_from("trainability.json", "unused");
    BenchOptions opts;
    opts.model = exp.model;
    opts.seq_len = exp.task.seq_len;
    opts.backbone_seed = exp.backbone.seed;
    std::ostringstream detail;
    bool pass = false;
    for (int attempt = 1; attempt <= 3 && !pass; ++attempt) {
        opts.seed = static_cast<std::uint64_t>(attempt);
        const BenchReport r = bench_inference(opts);
        pass = r.propagation_over_tuning <= 1.05;
        detail << (attempt > 1 ? "; " : "") << "attempt " << attempt << ": ratio "
               << fmt("%.3f", r.propagation_over_tuning) << " (standard " << fmt("%.3e", r.modes[0].median)
               << " s, tuning " << fmt("%.3e", r.modes[1].median) << " s, propagation "
               << fmt("%.3e", r.modes[2].median) << " s)";
    }
    return {pass, detail.str() + ", gate <= 1.05"};
}

Outcome determinism() {
    const fs::path first = scratch("determinism_a");
    const fs::path second = scratch("determinism_b");
    run_experiment(config_from("smoke.json", first));
    ExperimentConfig again = load_experiment(first / "config.json");
    again.output_dir = second;
    run_experiment(again);
    std::size_t compared = 0, equal = 0;
    for (const auto& entry : fs::recursive_directory_iterator(first)) {
        if (!entry.is_regular_file() || entry.path().filename() == "config.json") {
            continue;
        }
        const fs::path rel = fs::relative(entry.path(), first);
        ++compared;
        if (fs::exists(second / rel) && slurp(entry.path()) == slurp(second / rel)) {
            ++equal;
        }
    }
    json a = json::parse(slurp(first / "config.json")), b = json::parse(slurp(second / "config.json"));
    a.erase("output_dir");
    b.erase("output_dir");
    const bool config_same = a == b;
    fs::remove_all(first);
    fs::remove_all(second);
    return {compared > 0 && equal == compared && config_same,
            std::to_string(equal) + "/" + std::to_string(compared) +
                " files byte-identical on rerun from saved config.json (metrics.jsonl, reliability.csv, "
                "model.ckpt, summary.json)"};
}

}  // namespace

// With arguments, runs only the listed criterion numbers.
int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"kernel identity", kernel_identity},
        {"parameter halving", parameter_halving},
        {"reduction at j=0", reduction},
        {"gradient suite", gradients},
        {"freeze suite", freeze},
        {"trainability", trainability},
        {"ECE correctness", ece_correctness},
        {"runtime direction", runtime_direction},
        {"determinism", determinism},
    };
    std::vector<bool> selected(criteria.size(), argc <= 1);
    for (int a = 1; a < argc; ++a) {
        const int n = std::atoi(argv[a]);
        if (n < 1 || n > static_cast<int>(criteria.size())) {
            std::fprintf(stderr, "unknown criterion '%s'\n", argv[a]);
            return 2;
        }
        selected[n - 1] = true;
    }
    int failures = 0, ran = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        if (!selected[i]) {
            continue;
        }
        ++ran;
        Outcome outcome;
        try {
            outcome = criteria[i].second();
        } catch (const std::exception& e) {
            outcome = {false, std::string("threw: ") + e.what()};
        }
        failures += outcome.pass ? 0 : 1;
        std::printf("%s criterion %zu (%s): %s\n", outcome.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                    outcome.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%d/%d criteria passed\n", ran - failures, ran);
    return failures == 0 ? 0 : 1;
}
