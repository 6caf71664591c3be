#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "m3dnca/checkpoint.hpp"
#include "m3dnca/inference.hpp"
#include "m3dnca/synth.hpp"

namespace m3dnca {

/// What the summed ensemble SD is divided by.
enum class NqmDenominator {
    mean_sum,    // sum of the voxelwise mean probability
    hard_count,  // number of voxels whose mean exceeds 0.5
};

NqmDenominator parse_denominator(const std::string& name);
const char* to_string(NqmDenominator d);

/// Summed voxelwise population SD over the chosen denominator; +inf when the
/// denominator is zero. Needs at least two members of equal shape.
double nqm(const std::vector<Tensor>& members, NqmDenominator denominator = NqmDenominator::mean_sum);
/// The same ratio from an already summarized ensemble.
double ensemble_nqm(const EnsembleResult& ensemble, NqmDenominator denominator = NqmDenominator::mean_sum);

/// Linear fit dice ~ slope * nqm + intercept, inverted at dice_target.
struct QcCalibration {
    double slope = 0.0;
    double intercept = 0.0;
    double dice_target = 0.8;
    double nqm_threshold = 0.0;
    int n_points = 0;
    double pearson_r = 0.0;
};

/// Ordinary least squares over the finite (nqm, dice) pairs. Calibration
/// error on fewer than three finite pairs, zero nqm variance or a fit that
/// cannot be inverted into a finite threshold.
QcCalibration calibrate(const std::vector<std::pair<double, double>>& nqm_dice, double dice_target = 0.8);

enum class Verdict { accept, flag };

/// Flags strictly above the threshold; an infinite nqm is always flagged.
Verdict classify(double nqm_value, const QcCalibration& calibration);

double pearson(const std::vector<double>& a, const std::vector<double>& b);
/// Pearson correlation of mid-ranks.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

struct QcCase {
    std::string case_id;
    std::string corruption;  // "clean" or the corruption's text form
    double dice = 0.0;
    double nqm = 0.0;
    bool flagged = false;
};

struct QcReport {
    std::vector<QcCase> cases;
    double dice_target = 0.8;
    int failures = 0;         // cases with dice below the target
    int detected = 0;         // failures that were flagged
    int false_negatives = 0;  // failures that were accepted
    int false_positives = 0;  // good cases that were flagged
    /// detected / failures (1 when there are no failures).
    double detection_rate = 1.0;
    /// false_negatives / cases and false_positives / cases.
    double fn_rate = 0.0;
    double fp_rate = 0.0;
    /// Rank correlation of nqm and dice over cases with finite nqm.
    double spearman = std::numeric_limits<double>::quiet_NaN();
};

/// Classifies `cases` and fills in the aggregates.
QcReport make_report(std::vector<QcCase> cases, const QcCalibration& calibration);

struct QcOptions {
    int members = 10;
    std::uint64_t seed = 0;
    bool include_clean = true;
    NqmDenominator denominator = NqmDenominator::mean_sum;
    EnsembleOptions ensemble{};
};

/// Ensemble Dice and nqm of every case, clean and under each corruption.
/// Corruption seeds are derived per case from the corruption's own seed.
std::vector<QcCase> qc_measure(const Checkpoint& model, const std::vector<Sample>& dataset,
                               const std::vector<CorruptionSpec>& corruptions, const QcOptions& options);

QcReport qc_evaluate(const Checkpoint& model, const std::vector<Sample>& dataset,
                     const std::vector<CorruptionSpec>& corruptions, const QcCalibration& calibration,
                     const QcOptions& options);

/// Header row plus one row per case.
std::string report_csv(const QcReport& report);
std::string report_summary(const QcReport& report);

/// Calibration as a small JSON document, and back.
std::string calibration_text(const QcCalibration& calibration);
QcCalibration parse_calibration(const std::string& text);

}  // namespace m3dnca
