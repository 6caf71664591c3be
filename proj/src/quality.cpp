#include "m3dnca/quality.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "m3dnca/error.hpp"
#include "m3dnca/rng.hpp"
#include "text.hpp"

namespace m3dnca {
namespace {

constexpr std::uint64_t kCaseTag = 0xca5e;
constexpr double kInf = std::numeric_limits<double>::infinity();

double ratio(double numerator, double denominator) { return denominator > 0.0 ? numerator / denominator : kInf; }

double denominator_of(const Tensor& mean, NqmDenominator d) {
    double total = 0.0;
    for (std::int64_t i = 0; i < mean.numel(); ++i)
        total += d == NqmDenominator::mean_sum ? static_cast<double>(mean[i]) : (mean[i] > 0.5f ? 1.0 : 0.0);
    return total;
}

std::vector<double> mid_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> rank(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
        i = j + 1;
    }
    return rank;
}

}  // namespace

NqmDenominator parse_denominator(const std::string& name) {
    if (name == "mean-sum" || name == "mean_sum") return NqmDenominator::mean_sum;
    if (name == "hard-count" || name == "hard_count") return NqmDenominator::hard_count;
    fail(ErrorKind::config, "unknown nqm denominator '" + name + "' (mean-sum, hard-count)");
}

const char* to_string(NqmDenominator d) { return d == NqmDenominator::mean_sum ? "mean-sum" : "hard-count"; }

double nqm(const std::vector<Tensor>& members, NqmDenominator denominator) {
    require(members.size() >= 2, ErrorKind::contract, "nqm needs at least two ensemble members");
    return ensemble_nqm(summarize_members(members), denominator);
}

double ensemble_nqm(const EnsembleResult& ensemble, NqmDenominator denominator) {
    require(ensemble.n_members >= 2, ErrorKind::contract, "nqm needs at least two ensemble members");
    double sd = 0.0;
    for (std::int64_t i = 0; i < ensemble.sd_map.numel(); ++i) sd += ensemble.sd_map[i];
    return ratio(sd, denominator_of(ensemble.mean_prob, denominator));
}

QcCalibration calibrate(const std::vector<std::pair<double, double>>& nqm_dice, double dice_target) {
    std::vector<double> x, y;
    for (const auto& [n, d] : nqm_dice)
        if (std::isfinite(n) && std::isfinite(d)) {
            x.push_back(n);
            y.push_back(d);
        }
    require(x.size() >= 3, ErrorKind::calibration,
            "calibration needs at least 3 finite (nqm, dice) pairs, got " + std::to_string(x.size()));
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    require(sxx > 0.0, ErrorKind::calibration, "all nqm values are equal; the regression is degenerate");
    QcCalibration c;
    c.slope = sxy / sxx;
    c.intercept = my - c.slope * mx;
    c.dice_target = dice_target;
    c.n_points = static_cast<int>(x.size());
    c.pearson_r = pearson(x, y);
    require(c.slope < 0.0, ErrorKind::calibration,
            "dice does not fall with nqm on this data (slope " + detail::format_number(c.slope) +
                "); the threshold would be meaningless");
    c.nqm_threshold = (dice_target - c.intercept) / c.slope;
    require(std::isfinite(c.nqm_threshold), ErrorKind::calibration, "calibration threshold is not finite");
    return c;
}

Verdict classify(double nqm_value, const QcCalibration& calibration) {
    if (std::isinf(nqm_value) || nqm_value > calibration.nqm_threshold) return Verdict::flag;
    return Verdict::accept;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    require(a.size() == b.size(), ErrorKind::shape, "correlation inputs differ in length");
    if (a.size() < 2) return std::numeric_limits<double>::quiet_NaN();
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
        sab += (a[i] - ma) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return sab / std::sqrt(saa * sbb);
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    require(a.size() == b.size(), ErrorKind::shape, "correlation inputs differ in length");
    return pearson(mid_ranks(a), mid_ranks(b));
}

QcReport make_report(std::vector<QcCase> cases, const QcCalibration& calibration) {
    QcReport r;
    r.dice_target = calibration.dice_target;
    std::vector<double> x, y;
    for (QcCase& c : cases) {
        c.flagged = classify(c.nqm, calibration) == Verdict::flag;
        const bool failure = c.dice < calibration.dice_target;
        if (failure) {
            ++r.failures;
            if (c.flagged) ++r.detected;
            else ++r.false_negatives;
        } else if (c.flagged) {
            ++r.false_positives;
        }
        if (std::isfinite(c.nqm)) {
            x.push_back(c.nqm);
            y.push_back(c.dice);
        }
    }
    const double total = static_cast<double>(cases.size());
    if (r.failures > 0) r.detection_rate = static_cast<double>(r.detected) / r.failures;
    if (!cases.empty()) {
        r.fn_rate = r.false_negatives / total;
        r.fp_rate = r.false_positives / total;
    }
    r.spearman = spearman(x, y);
    r.cases = std::move(cases);
    return r;
}

std::vector<QcCase> qc_measure(const Checkpoint& model, const std::vector<Sample>& dataset,
                               const std::vector<CorruptionSpec>& corruptions, const QcOptions& options) {
    require(options.members >= 2, ErrorKind::contract, "quality control needs at least two ensemble members");
    for (const CorruptionSpec& c : corruptions) c.validate();
    std::vector<QcCase> cases;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const Sample& s = dataset[i];
        const std::string id = "case" + std::to_string(i);
        auto measure = [&](const Tensor& image, std::string corruption) {
            const EnsembleResult e = ensemble_segment(image, model, options.members, options.seed, options.ensemble);
            cases.push_back({id, std::move(corruption), dice(e.mask, s.label), ensemble_nqm(e, options.denominator), false});
        };
        if (options.include_clean) measure(s.image, "clean");
        for (CorruptionSpec c : corruptions) {
            c.seed = rng::derive(c.seed, kCaseTag, i);
            measure(corrupt(s.image, c), to_string(c));
        }
    }
    return cases;
}

QcReport qc_evaluate(const Checkpoint& model, const std::vector<Sample>& dataset,
                     const std::vector<CorruptionSpec>& corruptions, const QcCalibration& calibration,
                     const QcOptions& options) {
    return make_report(qc_measure(model, dataset, corruptions, options), calibration);
}

std::string report_csv(const QcReport& report) {
    using detail::format_number;
    std::string out = "case_id,corruption,dice,nqm,flagged\n";
    for (const QcCase& c : report.cases)
        out += c.case_id + ",\"" + c.corruption + "\"," + format_number(c.dice) + "," + format_number(c.nqm) + "," +
               (c.flagged ? "1" : "0") + "\n";
    return out;
}

std::string report_summary(const QcReport& r) {
    using detail::format_number;
    std::ostringstream o;
    o << "cases: " << r.cases.size() << "\n"
      << "dice_target: " << format_number(r.dice_target) << "\n"
      << "failures: " << r.failures << "\n"
      << "detected: " << r.detected << "\n"
      << "false_negatives: " << r.false_negatives << "\n"
      << "false_positives: " << r.false_positives << "\n"
      << "detection_rate: " << format_number(r.detection_rate) << "\n"
      << "fn_rate: " << format_number(r.fn_rate) << "\n"
      << "fp_rate: " << format_number(r.fp_rate) << "\n"
      << "spearman: " << format_number(r.spearman) << "\n";
    return o.str();
}

std::string calibration_text(const QcCalibration& c) {
    nlohmann::ordered_json j;
    j["slope"] = c.slope;
    j["intercept"] = c.intercept;
    j["dice_target"] = c.dice_target;
    j["nqm_threshold"] = c.nqm_threshold;
    j["n_points"] = c.n_points;
    j["pearson_r"] = c.pearson_r;
    return j.dump(2) + "\n";
}

QcCalibration parse_calibration(const std::string& text) {
    try {
        const nlohmann::json j = nlohmann::json::parse(text);
        QcCalibration c;
        c.slope = j.at("slope").get<double>();
        c.intercept = j.at("intercept").get<double>();
        c.dice_target = j.at("dice_target").get<double>();
        c.nqm_threshold = j.at("nqm_threshold").get<double>();
        c.n_points = j.at("n_points").get<int>();
        c.pearson_r = j.value("pearson_r", std::numeric_limits<double>::quiet_NaN());
        require(std::isfinite(c.nqm_threshold), ErrorKind::corrupt_file, "calibration threshold is not finite");
        return c;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::corrupt_file, std::string("calibration file: ") + e.what());
    }
}

}  // namespace m3dnca
