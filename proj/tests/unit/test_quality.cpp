#include <doctest.h>

#include <cmath>
#include <limits>

#include "m3dnca/error.hpp"
#include "m3dnca/quality.hpp"
#include "oracle.hpp"

using namespace m3dnca;

namespace {

Tensor filled(std::int64_t n, float v) { return Tensor::volume(1, 1, {1, 1, n}, v); }

Tensor from_values(const std::vector<float>& v) {
    Tensor t = Tensor::volume(1, 1, {1, 1, static_cast<std::int64_t>(v.size())});
    for (std::size_t i = 0; i < v.size(); ++i) t[static_cast<std::int64_t>(i)] = v[i];
    return t;
}

// Straight from the definition: summed population SD over summed mean.
double nqm_oracle(const std::vector<Tensor>& m) {
    double sd = 0, mu_sum = 0;
    const double n = static_cast<double>(m.size());
    for (std::int64_t i = 0; i < m[0].numel(); ++i) {
        double mu = 0;
        for (const Tensor& t : m) mu += t[i];
        mu /= n;
        double var = 0;
        for (const Tensor& t : m) var += (t[i] - mu) * (t[i] - mu);
        sd += std::sqrt(var / n);
        mu_sum += mu;
    }
    return sd / mu_sum;
}

}  // namespace

TEST_CASE("nqm hand evaluations") {
    const Tensor p = oracle::random_tensor({1, 1, 3, 4, 5}, 1, 0.0, 1.0);
    CHECK(nqm({p, p, p}) == 0.0);

    // One member all zeros, the other all ones: mean 0.5, SD 0.5.
    CHECK(nqm({filled(37, 0.0f), filled(37, 1.0f)}) == 1.0);

    const std::vector<Tensor> members = {oracle::random_tensor({1, 1, 2, 3, 4}, 2, 0.0, 1.0),
                                         oracle::random_tensor({1, 1, 2, 3, 4}, 3, 0.0, 1.0),
                                         oracle::random_tensor({1, 1, 2, 3, 4}, 4, 0.0, 1.0)};
    CHECK(nqm(members) == doctest::Approx(nqm_oracle(members)).epsilon(1e-6));

    SUBCASE("replicating the pattern leaves nqm unchanged") {
        std::vector<Tensor> doubled;
        for (const Tensor& m : members) {
            Tensor t = Tensor::volume(1, 1, {2, 3, 8});
            for (std::int64_t z = 0; z < 2; ++z)
                for (std::int64_t y = 0; y < 3; ++y)
                    for (std::int64_t x = 0; x < 8; ++x) t[(z * 3 + y) * 8 + x] = m[(z * 3 + y) * 4 + x % 4];
            doubled.push_back(t);
        }
        CHECK(nqm(doubled) == doctest::Approx(nqm(members)).epsilon(1e-6));
    }

    SUBCASE("more disagreement, larger nqm") {
        const Tensor base = filled(200, 0.9f);
        double last = -1;
        for (int flipped = 0; flipped <= 200; flipped += 10) {
            Tensor other = base;
            for (int i = 0; i < flipped; ++i) other[i] = 0.1f;
            const double v = nqm({base, base, other});
            CHECK(v > last);
            last = v;
        }
    }

    SUBCASE("no foreground") {
        CHECK(std::isinf(nqm({filled(5, 0.0f), filled(5, 0.0f)})));
        CHECK(std::isinf(nqm({filled(5, 0.2f), filled(5, 0.4f)}, NqmDenominator::hard_count)));
    }

    SUBCASE("hard-count denominator") {
        // Means 0.8, 0.8, 0.3, 0.3; SDs 0.2, 0, 0.3, 0.1; two voxels above 0.5.
        const Tensor a = from_values({1.0f, 0.8f, 0.0f, 0.2f}), b = from_values({0.6f, 0.8f, 0.6f, 0.4f});
        CHECK(nqm({a, b}, NqmDenominator::hard_count) == doctest::Approx(0.6 / 2).epsilon(1e-6));
        CHECK(nqm({a, b}) == doctest::Approx(0.6 / 2.2).epsilon(1e-6));
        CHECK(parse_denominator("hard-count") == NqmDenominator::hard_count);
        CHECK_THROWS_AS(parse_denominator("voxels"), Error);
    }

    SUBCASE("errors") {
        CHECK_THROWS_AS(nqm({p}), Error);
        CHECK_THROWS_AS(nqm({p, filled(3, 0.0f)}), Error);
    }
}

TEST_CASE("calibration") {
    SUBCASE("exact line") {
        std::vector<std::pair<double, double>> pts;
        for (double x : {0.0, 0.05, 0.1, 0.2, 0.3}) pts.push_back({x, -2 * x + 1});
        const QcCalibration c = calibrate(pts, 0.8);
        CHECK(c.slope == doctest::Approx(-2).epsilon(1e-12));
        CHECK(c.intercept == doctest::Approx(1).epsilon(1e-12));
        CHECK(c.nqm_threshold == doctest::Approx(0.1).epsilon(1e-12));
        CHECK(c.pearson_r == doctest::Approx(-1).epsilon(1e-12));
        CHECK(c.n_points == 5);

        CHECK(classify(0.12, c) == Verdict::flag);
        CHECK(classify(c.nqm_threshold, c) == Verdict::accept);
        CHECK(classify(0.05, c) == Verdict::accept);
        CHECK(classify(std::numeric_limits<double>::infinity(), c) == Verdict::flag);
    }

    SUBCASE("normal-equations oracle, with multiplicity") {
        rng::Stream s(9);
        std::vector<std::pair<double, double>> pts;
        std::vector<double> w;
        for (int i = 0; i < 40; ++i) {
            const double x = s.uniform() * 0.5;
            const int copies = 1 + static_cast<int>(s.uniform() * 3);
            const double y = 0.95 - 0.8 * x + 0.05 * (s.uniform() - 0.5);
            for (int k = 0; k < copies; ++k) pts.push_back({x, y});
            w.push_back(copies);
        }
        // Weighted normal equations on the distinct points.
        double sw = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
        for (std::size_t i = 0, p = 0; i < w.size(); p += static_cast<std::size_t>(w[i]), ++i) {
            const auto [x, y] = pts[p];
            sw += w[i], sx += w[i] * x, sy += w[i] * y, sxx += w[i] * x * x, sxy += w[i] * x * y;
        }
        const double slope = (sw * sxy - sx * sy) / (sw * sxx - sx * sx);
        const double intercept = (sy - slope * sx) / sw;
        pts.push_back({std::numeric_limits<double>::infinity(), 0.0});  // excluded from the fit
        const QcCalibration c = calibrate(pts, 0.8);
        CHECK(std::abs(c.slope - slope) < 1e-9);
        CHECK(std::abs(c.intercept - intercept) < 1e-9);
        CHECK(c.n_points == static_cast<int>(pts.size()) - 1);
    }

    SUBCASE("degenerate inputs") {
        CHECK_THROWS_AS(calibrate({{0.1, 0.9}, {0.2, 0.8}}), Error);
        CHECK_THROWS_AS(calibrate({{0.1, 0.9}, {0.1, 0.8}, {0.1, 0.7}}), Error);
        // Dice rising with nqm cannot be inverted into a useful threshold.
        CHECK_THROWS_AS(calibrate({{0.1, 0.7}, {0.2, 0.8}, {0.3, 0.9}}), Error);
    }

    SUBCASE("text round trip") {
        const QcCalibration c = calibrate({{0.0, 1.0}, {0.1, 0.7}, {0.3, 0.35}}, 0.75);
        const QcCalibration r = parse_calibration(calibration_text(c));
        CHECK(r.slope == c.slope);
        CHECK(r.intercept == c.intercept);
        CHECK(r.nqm_threshold == c.nqm_threshold);
        CHECK(r.dice_target == c.dice_target);
        CHECK(r.n_points == c.n_points);
        CHECK_THROWS_AS(parse_calibration("{\"slope\": 1}"), Error);
        CHECK_THROWS_AS(parse_calibration("not json"), Error);
    }
}

TEST_CASE("rank correlation") {
    CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1));
    CHECK(spearman({1, 2, 3, 4}, {1, 8, 27, 64}) == doctest::Approx(1));
    CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1));
    // Ties take mid-ranks: x ranks 1, 2.5, 2.5, 4 against y ranks 1..4.
    const double rx[] = {1, 2.5, 2.5, 4}, ry[] = {1, 2, 3, 4};
    double sxy = 0, sxx = 0, syy = 0;
    for (int i = 0; i < 4; ++i) {
        sxy += (rx[i] - 2.5) * (ry[i] - 2.5);
        sxx += (rx[i] - 2.5) * (rx[i] - 2.5);
        syy += (ry[i] - 2.5) * (ry[i] - 2.5);
    }
    CHECK(spearman({1, 5, 5, 9}, {2, 3, 4, 5}) == doctest::Approx(sxy / std::sqrt(sxx * syy)));
}

TEST_CASE("report aggregates") {
    QcCalibration c;
    c.dice_target = 0.8;
    c.nqm_threshold = 0.1;
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<QcCase> cases = {
        {"a", "clean", 0.95, 0.02, false},  // good, accepted
        {"b", "clean", 0.90, 0.15, false},  // good, flagged
        {"c", "noise", 0.30, 0.40, false},  // failure, detected
        {"d", "noise", 0.50, 0.05, false},  // failure, missed
        {"e", "spike", 0.00, inf, false},   // failure, detected by the sentinel
    };
    const QcReport r = make_report(cases, c);
    CHECK(r.failures == 3);
    CHECK(r.detected == 2);
    CHECK(r.false_negatives == 1);
    CHECK(r.false_positives == 1);
    CHECK(r.detection_rate == doctest::Approx(2.0 / 3));
    CHECK(r.fn_rate == doctest::Approx(0.2));
    CHECK(r.fp_rate == doctest::Approx(0.2));
    CHECK(r.spearman == doctest::Approx(spearman({0.02, 0.15, 0.40, 0.05}, {0.95, 0.90, 0.30, 0.50})));
    CHECK(r.cases[4].flagged);

    const std::string csv = report_csv(r);
    CHECK(csv.rfind("case_id,corruption,dice,nqm,flagged\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
    CHECK(csv.find("e,\"spike\",0,inf,1\n") != std::string::npos);

    const QcReport empty = make_report({}, c);
    CHECK(empty.detection_rate == 1.0);
    CHECK(empty.fn_rate == 0.0);
    CHECK(empty.fp_rate == 0.0);
}

TEST_CASE("measurement over a dataset") {
    ModelConfig cfg;
    cfg.levels = 1;
    cfg.kernel_sizes = {3};
    cfg.channels = 4;
    cfg.hidden = 8;
    cfg.fixed_steps = {4};
    Checkpoint m = fresh_checkpoint(cfg, 2);
    m.layers[0].w2 = oracle::random_tensor(m.layers[0].w2.shape(), 5, -0.5, 0.5);
    m.layers[0].b2 = oracle::random_tensor(m.layers[0].b2.shape(), 6, 0.2, 0.4);
    SyntheticSpec spec;
    spec.extent = {12, 12, 12};
    spec.count = 2;
    const std::vector<Sample> data = generate(spec, 3);

    QcOptions opt;
    opt.members = 3;
    opt.seed = 4;
    const std::vector<CorruptionSpec> corruptions = {parse_corruption("noise:std=0.5"), parse_corruption("spike")};
    const std::vector<QcCase> cases = qc_measure(m, data, corruptions, opt);
    REQUIRE(cases.size() == 6);
    CHECK(cases[0].corruption == "clean");
    CHECK(cases[1].corruption == "noise:std=0.5");
    CHECK(cases[5].case_id == "case1");
    for (const QcCase& c : cases) {
        CHECK(c.dice >= 0.0);
        CHECK(c.dice <= 1.0);
        CHECK(c.nqm >= 0.0);
    }
    // The clean case is the ensemble of the untouched image.
    const EnsembleResult e = ensemble_segment(data[0].image, m, 3, 4);
    CHECK(cases[0].nqm == ensemble_nqm(e));
    CHECK(cases[0].dice == dice(e.mask, data[0].label));

    // Deterministic, and the two cases get different corruption draws.
    const std::vector<QcCase> again = qc_measure(m, data, corruptions, opt);
    for (std::size_t i = 0; i < cases.size(); ++i) CHECK(again[i].nqm == cases[i].nqm);

    opt.include_clean = false;
    CHECK(qc_measure(m, data, {}, opt).empty());
    opt.members = 1;
    CHECK_THROWS_AS(qc_measure(m, data, corruptions, opt), Error);
}
