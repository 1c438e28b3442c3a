#include "prefixprop/calibration.hpp"

#include <charconv>
#include <cmath>
#include <fstream>

#include "prefixprop/errors.hpp"
#include "prefixprop/model.hpp"
#include "prefixprop/ops.hpp"
#include "prefixprop/tasks.hpp"

namespace prefixprop {

std::size_t bin_index(double confidence, std::size_t n_bins) {
    if (n_bins == 0) {
        throw ConfigError("n_bins must be at least 1");
    }
    if (!(confidence >= 0.0 && confidence <= 1.0)) {
        throw InputError("confidence " + std::to_string(confidence) + " outside [0, 1]");
    }
    const double b = std::ceil(confidence * static_cast<double>(n_bins));
    if (b <= 1.0) {
        return 0;
    }
    return std::min(static_cast<std::size_t>(b), n_bins) - 1;
}

CalibrationReport ece(std::span<const PredictionRecord> records, std::size_t n_bins) {
    if (n_bins == 0) {
        throw ConfigError("n_bins must be at least 1");
    }
    if (records.empty()) {
        throw InputError("ECE needs at least one prediction");
    }
    CalibrationReport report;
    report.n_bins = n_bins;
    report.total = records.size();
    report.bins.resize(n_bins);
    std::vector<double> conf_sum(n_bins, 0.0);
    std::vector<std::size_t> correct(n_bins, 0);
    for (const PredictionRecord& r : records) {
        const std::size_t b = bin_index(r.confidence, n_bins);
        ++report.bins[b].count;
        conf_sum[b] += r.confidence;
        correct[b] += r.predicted == r.label ? 1 : 0;
    }
    const double n = static_cast<double>(records.size());
    for (std::size_t b = 0; b < n_bins; ++b) {
        CalibrationBin& bin = report.bins[b];
        bin.low = static_cast<double>(b) / static_cast<double>(n_bins);
        bin.high = static_cast<double>(b + 1) / static_cast<double>(n_bins);
        if (bin.count == 0) {
            continue;
        }
        const double c = static_cast<double>(bin.count);
        bin.mean_confidence = conf_sum[b] / c;
        bin.accuracy = static_cast<double>(correct[b]) / c;
        report.ece += c / n * std::abs(bin.accuracy - bin.mean_confidence);
    }
    return report;
}

double ece_from_bins(const CalibrationReport& report) {
    double total = 0.0;
    for (const CalibrationBin& bin : report.bins) {
        total += static_cast<double>(bin.count);
    }
    double out = 0.0;
    for (const CalibrationBin& bin : report.bins) {
        if (bin.count) {
            out += static_cast<double>(bin.count) / total * std::abs(bin.accuracy - bin.mean_confidence);
        }
    }
    return out;
}

PredictionRecord make_record(const Tensor& logits, int label) {
    const Tensor row({1, logits.size()}, std::vector<double>(logits.data().begin(), logits.data().end()));
    const Tensor probs = softmax_rows(row);
    std::size_t best = 0;
    for (std::size_t k = 1; k < probs.size(); ++k) {
        if (probs[k] > probs[best]) {
            best = k;
        }
    }
    return {probs[best], static_cast<int>(best), label};
}

std::vector<PredictionRecord> collect_predictions(const EncoderModel& model, const Dataset& data) {
    std::vector<PredictionRecord> out;
    out.reserve(data.size());
    for (const Example& ex : data.examples) {
        out.push_back(make_record(model.logits(ex.tokens), ex.label));
    }
    return out;
}

namespace {

std::string format_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

}  // namespace

std::string reliability_csv(const CalibrationReport& report) {
    std::string out = "bin_low,bin_high,count,mean_confidence,accuracy\n";
    for (const CalibrationBin& bin : report.bins) {
        out += format_double(bin.low) + ',' + format_double(bin.high) + ',' + std::to_string(bin.count) + ',' +
               format_double(bin.mean_confidence) + ',' + format_double(bin.accuracy) + '\n';
    }
    return out;
}

void write_reliability_csv(const CalibrationReport& report, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
    out << reliability_csv(report);
}

}  // namespace prefixprop
