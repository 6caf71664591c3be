#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <string>
#include <unistd.h>
#include <vector>

#include "m3dnca/m3dnca.h"

namespace fs = std::filesystem;

namespace {

// Only the C interface is linked here, so the fixtures are built through it.

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("m3dnca_capi_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& name) const { return (path / name).string(); }
};

m3dnca_volume* ramp_volume(std::int64_t n) {
    std::vector<float> data(static_cast<std::size_t>(n * n * n));
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>((i * 37) % 101) / 100.0f;
    const std::int64_t e[3] = {n, n, n};
    m3dnca_volume* v = nullptr;
    REQUIRE(m3dnca_volume_create(e, data.data(), &v) == M3DNCA_OK);
    return v;
}

std::size_t voxels(const m3dnca_volume* v) {
    std::int64_t e[3];
    m3dnca_volume_extent(v, e);
    return static_cast<std::size_t>(e[0] * e[1] * e[2]);
}

// A fresh model's output layer is zero, so ensembles need a trained one.
m3dnca_model* trained_model(const TempDir& dir) {
    const char* cfg = R"({"model": {"channels": 6, "hidden": 8, "kernel_sizes": [3, 3], "scale": 2},
                          "train": {"epochs": 3, "batch_size": 2, "dup_factor": 1},
                          "synth": {"extent": 12, "count": 3}})";
    REQUIRE(m3dnca_synth(cfg, 1, (dir / "fit").c_str()) == M3DNCA_OK);
    const std::uint64_t seed = 2;
    REQUIRE(m3dnca_train(cfg, &seed, (dir / "fit").c_str(), nullptr, (dir / "fit.ckpt").c_str(), nullptr, nullptr,
                         nullptr) == M3DNCA_OK);
    m3dnca_model* m = nullptr;
    REQUIRE(m3dnca_model_load((dir / "fit.ckpt").c_str(), &m) == M3DNCA_OK);
    return m;
}

bool same_bytes(const m3dnca_volume* a, const m3dnca_volume* b) {
    return voxels(a) == voxels(b) &&
           std::memcmp(m3dnca_volume_data(a), m3dnca_volume_data(b), voxels(a) * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("status codes and messages") {
    CHECK(std::string(m3dnca_status_name(M3DNCA_OK)) == "ok");
    CHECK(std::string(m3dnca_status_name(M3DNCA_ERR_ARGUMENT)) == "argument");
    CHECK(std::string(m3dnca_status_name(static_cast<m3dnca_status>(55))) == "unknown");

    m3dnca_model* m = nullptr;
    CHECK(m3dnca_model_load(nullptr, &m) == M3DNCA_ERR_ARGUMENT);
    CHECK(std::string(m3dnca_last_error()).find("path") != std::string::npos);
    CHECK(m3dnca_model_load("/nonexistent/model.ckpt", &m) == M3DNCA_ERR_IO);
    CHECK(m == nullptr);
    CHECK(m3dnca_model_create(R"({"model": {"levels": 0}})", 0, &m) == M3DNCA_ERR_CONFIG);
    CHECK(m3dnca_model_create(R"({"model": {"chanels": 4}})", 0, &m) == M3DNCA_ERR_CONFIG);
    CHECK(m3dnca_model_create("{ nope", 0, &m) == M3DNCA_ERR_CONFIG);

    // A successful call clears the message.
    REQUIRE(m3dnca_model_create(nullptr, 0, &m) == M3DNCA_OK);
    CHECK(std::string(m3dnca_last_error()).empty());
    CHECK(m3dnca_model_param_count(m) == 12480);
    m3dnca_model_free(m);
    CHECK(m3dnca_model_param_count(nullptr) == -1);
    CHECK(m3dnca_set_threads(-1) == M3DNCA_ERR_ARGUMENT);
    CHECK(m3dnca_set_threads(0) == M3DNCA_OK);
}

TEST_CASE("volumes through the C interface") {
    TempDir dir;
    m3dnca_volume* v = ramp_volume(6);
    REQUIRE(m3dnca_volume_write(v, (dir / "v.json").c_str(), nullptr) == M3DNCA_OK);
    m3dnca_volume* r = nullptr;
    REQUIRE(m3dnca_volume_read((dir / "v.json").c_str(), &r) == M3DNCA_OK);
    CHECK(same_bytes(v, r));
    double d = 0.0;
    REQUIRE(m3dnca_dice(v, r, &d) == M3DNCA_OK);
    CHECK(d == 1.0);
    CHECK(m3dnca_volume_write(v, (dir / "w.json").c_str(), "f16") == M3DNCA_ERR_UNSUPPORTED_FORMAT);

    m3dnca_volume *c1 = nullptr, *c2 = nullptr;
    REQUIRE(m3dnca_corrupt(v, "spike:intensity=5", 9, &c1) == M3DNCA_OK);
    REQUIRE(m3dnca_corrupt(v, "spike:intensity=5", 9, &c2) == M3DNCA_OK);
    CHECK(same_bytes(c1, c2));
    CHECK_FALSE(same_bytes(v, c1));
    m3dnca_volume* bad = nullptr;
    CHECK(m3dnca_corrupt(v, "blur", 9, &bad) == M3DNCA_ERR_SPEC);
    CHECK(bad == nullptr);

    const std::int64_t zero[3] = {0, 4, 4};
    CHECK(m3dnca_volume_create(zero, nullptr, &bad) == M3DNCA_ERR_SHAPE);
    for (auto* p : {v, r, c1, c2}) m3dnca_volume_free(p);
}

TEST_CASE("models, segmentation and ensembles") {
    TempDir dir;
    m3dnca_model* m = trained_model(dir);
    REQUIRE(m3dnca_model_save(m, (dir / "m.ckpt").c_str()) == M3DNCA_OK);
    m3dnca_model* loaded = nullptr;
    REQUIRE(m3dnca_model_load((dir / "m.ckpt").c_str(), &loaded) == M3DNCA_OK);
    CHECK(m3dnca_model_param_count(loaded) == m3dnca_model_param_count(m));

    m3dnca_volume* v = ramp_volume(12);
    m3dnca_volume *full = nullptr, *tiled = nullptr, *mask = nullptr, *again = nullptr;
    REQUIRE(m3dnca_segment(m, v, 3, 0, 0, &full, &mask) == M3DNCA_OK);
    REQUIRE(m3dnca_segment(loaded, v, 3, 0, 0, &again, nullptr) == M3DNCA_OK);
    CHECK(same_bytes(full, again));
    REQUIRE(m3dnca_segment(m, v, 3, 40000, 0, &tiled, nullptr) == M3DNCA_OK);
    CHECK(same_bytes(full, tiled));
    m3dnca_volume* none = nullptr;
    CHECK(m3dnca_segment(m, v, 3, 40000, M3DNCA_BATCH_STATS, &none, nullptr) == M3DNCA_ERR_CONTRACT);
    CHECK(m3dnca_segment(m, v, 3, 16, 0, &none, nullptr) == M3DNCA_ERR_MEMORY_PLAN);
    CHECK(std::string(m3dnca_last_error()).find("minimal") != std::string::npos);

    m3dnca_ensemble e{};
    REQUIRE(m3dnca_ensemble_run(m, v, 4, 7, 0, 0, 1, &e) == M3DNCA_OK);
    REQUIRE(e.n_members == 4);
    REQUIRE(e.members != nullptr);
    double from_members = 0.0, from_summary = 0.0;
    REQUIRE(m3dnca_nqm(e.members, 4, nullptr, &from_members) == M3DNCA_OK);
    REQUIRE(m3dnca_nqm_summary(e.mean, e.sd, nullptr, &from_summary) == M3DNCA_OK);
    CHECK(from_members == doctest::Approx(e.nqm).epsilon(1e-12));
    CHECK(from_summary == doctest::Approx(e.nqm).epsilon(1e-12));
    CHECK(e.nqm > 0.0);

    const m3dnca_volume* twins[2] = {e.mean, e.mean};
    double zero = -1.0;
    REQUIRE(m3dnca_nqm(twins, 2, nullptr, &zero) == M3DNCA_OK);
    CHECK(zero == 0.0);
    CHECK(m3dnca_nqm(twins, 1, nullptr, &zero) == M3DNCA_ERR_CONTRACT);
    CHECK(m3dnca_nqm(twins, 2, "median", &zero) == M3DNCA_ERR_CONFIG);
    m3dnca_ensemble_clear(&e);
    CHECK(e.mean == nullptr);
    CHECK(e.members == nullptr);

    for (auto* p : {v, full, tiled, mask, again}) m3dnca_volume_free(p);
    m3dnca_model_free(m);
    m3dnca_model_free(loaded);
}

TEST_CASE("descriptions and plans") {
    char* text = nullptr;
    REQUIRE(m3dnca_config_describe(nullptr, nullptr, &text) == M3DNCA_OK);
    const std::string standard = text;
    m3dnca_string_free(text);
    CHECK(standard.find("parameters: 12480\n") != std::string::npos);
    CHECK(standard.find("level 0: extent (16,16,16) kernel 7 steps 6") != std::string::npos);
    CHECK(standard.find("level 1: extent (64,64,64) kernel 3 steps 64") != std::string::npos);

    REQUIRE(m3dnca_config_describe(R"({"model": {"levels": 3, "kernel_sizes": [7, 3, 3]}})", nullptr, &text) ==
            M3DNCA_OK);
    CHECK(std::string(text).find("parameters: 16192\n") != std::string::npos);
    m3dnca_string_free(text);

    const std::int64_t e[3] = {24, 320, 320};
    REQUIRE(m3dnca_plan(nullptr, e, 64ull << 20, &text) == M3DNCA_OK);
    CHECK(std::string(text).find("tile: ") != std::string::npos);
    m3dnca_string_free(text);
    text = nullptr;
    CHECK(m3dnca_plan(nullptr, e, 1000, &text) == M3DNCA_ERR_MEMORY_PLAN);
    CHECK(text == nullptr);
}

TEST_CASE("synthesis, training and quality control") {
    TempDir dir;
    const char* cfg = R"({"model": {"channels": 6, "hidden": 8, "kernel_sizes": [3, 3], "scale": 2},
                          "train": {"epochs": 2, "batch_size": 2, "dup_factor": 1},
                          "synth": {"extent": 12, "count": 3}})";
    REQUIRE(m3dnca_synth(cfg, 1, (dir / "data").c_str()) == M3DNCA_OK);
    CHECK(fs::exists(dir / "data/dataset.json"));

    struct Seen {
        int epochs = 0;
    } seen;
    auto on_epoch = [](const m3dnca_epoch* e, void* user) {
        static_cast<Seen*>(user)->epochs = e->epoch;
        CHECK(std::isfinite(e->mean_loss));
    };
    const std::uint64_t seed = 4;
    REQUIRE(m3dnca_train(cfg, &seed, (dir / "data").c_str(), nullptr, (dir / "m.ckpt").c_str(),
                         (dir / "log.csv").c_str(), on_epoch, &seen) == M3DNCA_OK);
    CHECK(seen.epochs == 2);
    CHECK(fs::exists(dir / "log.csv"));

    m3dnca_model* m = nullptr;
    REQUIRE(m3dnca_model_load((dir / "m.ckpt").c_str(), &m) == M3DNCA_OK);
    m3dnca_qc_options opt = m3dnca_qc_defaults();
    CHECK(opt.members == 10);
    opt.members = 2;
    const char* corruptions[] = {"noise:std=0.5", "spike"};
    char* report = nullptr;
    char* summary = nullptr;
    const char* calibration = R"({"slope": -1, "intercept": 1, "dice_target": 0.8, "nqm_threshold": 0.2,
                                  "n_points": 3, "pearson_r": -0.9})";
    REQUIRE(m3dnca_qc_eval(m, (dir / "data").c_str(), corruptions, 2, &opt, calibration, &report, &summary) ==
            M3DNCA_OK);
    const std::string csv = report;
    CHECK(csv.rfind("case_id,corruption,dice,nqm,flagged\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 3 * 3);
    CHECK(std::string(summary).find("cases: 9") != std::string::npos);
    m3dnca_string_free(report);
    m3dnca_string_free(summary);

    const char* unknown[] = {"blur"};
    report = nullptr;
    CHECK(m3dnca_qc_eval(m, (dir / "data").c_str(), unknown, 1, &opt, calibration, &report, nullptr) ==
          M3DNCA_ERR_SPEC);
    CHECK(report == nullptr);
    CHECK(m3dnca_qc_eval(m, (dir / "data").c_str(), corruptions, 2, &opt, "{}", &report, nullptr) ==
          M3DNCA_ERR_CORRUPT_FILE);
    m3dnca_model_free(m);
}
