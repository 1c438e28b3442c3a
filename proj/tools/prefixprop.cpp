#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "prefixprop/errors.hpp"
#include "prefixprop/experiment.hpp"

namespace {

using nlohmann::json;
using namespace prefixprop;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitVerification = 2;
constexpr int kExitDivergence = 3;

struct ConfigArgs {
    std::string path;
    std::vector<std::string> overrides;
};

void add_config_args(CLI::App& cmd, ConfigArgs& args, bool required) {
    auto* opt = cmd.add_option("-c,--config", args.path, "Experiment config (JSON)");
    if (required) {
        opt->required();
    }
    cmd.add_option("--set", args.overrides, "Override a config field, e.g. --set train.lr=0.01")->take_all();
}

json read_config_doc(const ConfigArgs& args) {
    json doc = json::object();
    if (!args.path.empty()) {
        std::ifstream in(args.path);
        if (!in) {
            throw ConfigError("cannot open config " + args.path);
        }
        try {
            doc = json::parse(in);
        } catch (const json::parse_error& e) {
            throw ConfigError(args.path + ": " + e.what());
        }
    }
    for (const std::string& o : args.overrides) {
        apply_override(doc, o);
    }
    return doc;
}

// --seed flags, then config seeds, then PREFIXPROP_SEED, then seed 0.
void resolve_seeds(json& doc, const std::vector<std::uint64_t>& flag_seeds) {
    if (!flag_seeds.empty()) {
        doc["seeds"] = flag_seeds;
        return;
    }
    if (doc.contains("seeds")) {
        return;
    }
    if (const char* env = std::getenv("PREFIXPROP_SEED"); env && *env) {
        try {
            std::size_t used = 0;
            const unsigned long long seed = std::stoull(env, &used);
            if (used != std::string(env).size()) {
                throw std::invalid_argument("trailing characters");
            }
            doc["seeds"] = json::array({seed});
        } catch (const std::exception&) {
            throw ConfigError("PREFIXPROP_SEED must be an unsigned integer, got '" + std::string(env) + "'");
        }
    }
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out || !(out << text)) {
        throw std::runtime_error("cannot write " + path);
    }
}

int run_train(const ConfigArgs& args, const std::vector<std::uint64_t>& seeds, const std::vector<std::string>& modes,
              const std::string& output, bool quiet) {
    json doc = read_config_doc(args);
    resolve_seeds(doc, seeds);
    if (!modes.empty()) {
        doc.erase("mode");
        doc["modes"] = modes;
    }
    if (!output.empty()) {
        doc["output_dir"] = output;
    }
    const ExperimentConfig cfg = experiment_from_json(doc);
    run_experiment(cfg, quiet ? nullptr : &std::cerr);
    std::cout << build_report(cfg.output_dir).table;
    return kExitOk;
}

int run_eval(const ConfigArgs& args, const std::string& checkpoint, const std::string& split_name,
             std::size_t bins, const std::string& reliability) {
    const ExperimentConfig cfg = experiment_from_json(read_config_doc(args));
    const DatasetSplits splits = load_splits(cfg);
    const Dataset* data = nullptr;
    if (split_name == "train") {
        data = &splits.train;
    } else if (split_name == "dev") {
        data = &splits.dev;
    } else if (split_name == "test") {
        data = &splits.test;
    } else {
        throw ConfigError("--split must be train, dev or test");
    }
    const EncoderModel model = load_checkpoint(checkpoint);
    const Evaluation result = evaluate(model, *data, bins);
    const ClassificationMetrics& m = result.metrics;
    std::cout << json{{"split", split_name},
                      {"mode", std::string(to_string(model.mode()))},
                      {"accuracy", m.accuracy},
                      {"f1_micro", m.f1_micro},
                      {"precision_macro", m.precision_macro},
                      {"recall_macro", m.recall_macro},
                      {"loss", m.mean_loss},
                      {"ece", m.ece}}
                     .dump()
              << '\n';
    if (!reliability.empty()) {
        write_reliability_csv(result.calibration, reliability);
    }
    return kExitOk;
}

int run_verify(const KernelVerifyOptions& options, const std::string& json_out) {
    const KernelVerification report = verify_kernel(options);
    std::cout << (report.passed ? "PASS" : "FAIL") << " kernel identity: " << report.trials.size()
              << " trials, max error " << report.max_error << " (tol " << report.tol << ")\n";
    if (!json_out.empty()) {
        write_text(json_out, to_json(report).dump(2) + '\n');
    }
    return report.passed ? kExitOk : kExitVerification;
}

int run_bench(const ConfigArgs& args, BenchOptions options, bool seq_len_given, const std::string& json_out) {
    if (!args.path.empty() || !args.overrides.empty()) {
        const json doc = read_config_doc(args);
        const ExperimentConfig cfg = experiment_from_json(doc);
        options.model = cfg.model;
        options.backbone_seed = cfg.backbone.seed;
        if (!seq_len_given) {
            options.seq_len = cfg.task.seq_len;
        }
    }
    const BenchReport report = bench_inference(options);
    std::cout.setf(std::ios::scientific);
    for (const ModeTiming& t : report.modes) {
        std::cout << t.mode << ": median " << t.median << " s, mad " << t.mad << " s, min " << t.min << " s, max "
                  << t.max << " s\n";
    }
    std::cout.unsetf(std::ios::scientific);
    std::cout << "ratio propagation/tuning: " << report.propagation_over_tuning << '\n';
    if (!json_out.empty()) {
        write_text(json_out, to_json(report).dump(2) + '\n');
    }
    return kExitOk;
}

int run_report(const std::string& dir) {
    const ReportOutput report = build_report(dir);
    std::cout << report.table;
    write_text((std::filesystem::path(dir) / "calibration_by_epoch.csv").string(), report.calibration_csv);
    return kExitOk;
}

int run_gen_data(const ConfigArgs& args, const std::string& out_dir) {
    const ExperimentConfig cfg = experiment_from_json(read_config_doc(args));
    if (cfg.corpus) {
        throw ConfigError("corpus: gen-data exports synthetic tasks only");
    }
    const DatasetSplits splits = generate_splits(cfg.task);
    std::filesystem::create_directories(out_dir);
    const std::filesystem::path dir(out_dir);
    write_jsonl(splits.train, dir / "train.jsonl");
    write_jsonl(splits.dev, dir / "dev.jsonl");
    write_jsonl(splits.test, dir / "test.jsonl");
    std::cout << "wrote " << splits.train.size() << '/' << splits.dev.size() << '/' << splits.test.size()
              << " examples to " << out_dir << '\n';
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Prefix-propagation and prefix-tuning experiments on a from-scratch encoder"};
    app.require_subcommand(1);

    ConfigArgs train_args;
    std::vector<std::uint64_t> train_seeds;
    std::vector<std::string> train_modes;
    std::string train_output;
    bool quiet = false;
    auto* train_cmd = app.add_subcommand("train", "Train every configured mode and seed and write results");
    add_config_args(*train_cmd, train_args, false);
    train_cmd->add_option("--seed", train_seeds, "Seed(s); overrides config seeds and PREFIXPROP_SEED");
    train_cmd->add_option("--mode", train_modes, "Tuning mode(s); overrides the config");
    train_cmd->add_option("-o,--output", train_output, "Output directory; overrides the config");
    train_cmd->add_flag("-q,--quiet", quiet, "No progress lines");

    ConfigArgs eval_args;
    std::string checkpoint;
    std::string split = "test";
    std::size_t bins = 10;
    std::string reliability;
    auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on a split of the configured data");
    add_config_args(*eval_cmd, eval_args, false);
    eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    eval_cmd->add_option("--split", split, "train, dev or test");
    eval_cmd->add_option("--bins", bins, "ECE bins")->check(CLI::PositiveNumber);
    eval_cmd->add_option("--reliability", reliability, "Write the reliability table (CSV) here");

    KernelVerifyOptions verify_options;
    std::string verify_json;
    auto* verify_cmd = app.add_subcommand("verify-kernel", "Check the kernel decomposition against dense attention");
    verify_cmd->add_option("--trials", verify_options.trials, "Random configurations");
    verify_cmd->add_option("--seed", verify_options.seed, "Seed");
    verify_cmd->add_option("--tol", verify_options.tol, "Pass iff max error < tol");
    verify_cmd->add_option("--min-prefix", verify_options.min_prefix, "Smallest prefix length (0 allowed)");
    verify_cmd->add_option("--max-prefix", verify_options.max_prefix, "Largest prefix length");
    verify_cmd->add_option("--json", verify_json, "Write the full report here");

    ConfigArgs bench_args;
    BenchOptions bench_options;
    bench_options.model.attention.d_model = 32;
    bench_options.model.attention.prefix_len = 8;
    bench_options.model.attention.window = 32;
    std::string bench_json;
    auto* bench_cmd = app.add_subcommand("bench", "Time inference of standard, prefix_tuning and prefix_propagation");
    add_config_args(*bench_cmd, bench_args, false);
    bench_cmd->add_option("--repeats", bench_options.repeats, "Timed repeats per mode (>= 5)");
    bench_cmd->add_option("--inputs", bench_options.n_inputs, "Inputs per repeat");
    auto* seq_len_opt = bench_cmd->add_option("--seq-len", bench_options.seq_len, "Input length including [CLS]");
    bench_cmd->add_option("--seed", bench_options.seed, "Seed for inputs and prefixes");
    bench_cmd->add_option("--json", bench_json, "Write the timing report here");

    std::string report_dir;
    auto* report_cmd = app.add_subcommand("report", "Summary table and per-epoch calibration CSV for a run directory");
    report_cmd->add_option("dir", report_dir, "Output directory of a train run")->required();

    ConfigArgs gen_args;
    std::string gen_out;
    auto* gen_cmd = app.add_subcommand("gen-data", "Export the configured synthetic task as JSON Lines");
    add_config_args(*gen_cmd, gen_args, false);
    gen_cmd->add_option("-o,--output", gen_out, "Directory for train/dev/test.jsonl")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*train_cmd) {
            return run_train(train_args, train_seeds, train_modes, train_output, quiet);
        }
        if (*eval_cmd) {
            return run_eval(eval_args, checkpoint, split, bins, reliability);
        }
        if (*verify_cmd) {
            return run_verify(verify_options, verify_json);
        }
        if (*bench_cmd) {
            return run_bench(bench_args, bench_options, seq_len_opt->count() > 0, bench_json);
        }
        if (*report_cmd) {
            return run_report(report_dir);
        }
        if (*gen_cmd) {
            return run_gen_data(gen_args, gen_out);
        }
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitDivergence;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    }
    return kExitConfig;
}
