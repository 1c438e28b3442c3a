#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "prefixprop/tensor.hpp"

namespace prefixprop {

class EncoderModel;
struct Dataset;

struct PredictionRecord {
    // Largest class probability.
    double confidence = 0.0;
    int predicted = 0;
    int label = 0;
};

struct CalibrationBin {
    double low = 0.0;
    double high = 0.0;
    std::size_t count = 0;
    // Both 0 for an empty bin.
    double mean_confidence = 0.0;
    double accuracy = 0.0;
};

struct CalibrationReport {
    std::size_t n_bins = 0;
    std::size_t total = 0;
    std::vector<CalibrationBin> bins;
    double ece = 0.0;
};

/// Equal-width bins over (0, 1]: confidence c lands in bin ceil(c * n_bins)
/// (1-based), with c = 0 placed in the first bin. ECE is the count-weighted
/// mean of |accuracy - mean confidence| over nonempty bins.
/// Throws InputError on empty records or a confidence outside [0, 1], and
/// ConfigError if n_bins == 0.
CalibrationReport ece(std::span<const PredictionRecord> records, std::size_t n_bins = 10);

// 0-based bin index under the rule above.
std::size_t bin_index(double confidence, std::size_t n_bins);

// ECE from a report's bin table alone.
double ece_from_bins(const CalibrationReport& report);

// Confidence and argmax (first maximum on ties) of softmax(logits).
PredictionRecord make_record(const Tensor& logits, int label);

// Evaluation-mode predictions, one per example, in dataset order.
std::vector<PredictionRecord> collect_predictions(const EncoderModel& model, const Dataset& data);

// Header bin_low,bin_high,count,mean_confidence,accuracy; one row per bin.
std::string reliability_csv(const CalibrationReport& report);
void write_reliability_csv(const CalibrationReport& report, const std::filesystem::path& path);

}  // namespace prefixprop
