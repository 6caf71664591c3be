// Command-line front end. Everything goes through the C interface.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "m3dnca/m3dnca.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Failure {
    m3dnca_status status;
    std::string message;
};

void check(m3dnca_status s) {
    if (s != M3DNCA_OK) throw Failure{s, m3dnca_last_error()};
}

struct VolumeFree {
    void operator()(m3dnca_volume* v) const { m3dnca_volume_free(v); }
};
struct ModelFree {
    void operator()(m3dnca_model* m) const { m3dnca_model_free(m); }
};
using VolumePtr = std::unique_ptr<m3dnca_volume, VolumeFree>;
using ModelPtr = std::unique_ptr<m3dnca_model, ModelFree>;

struct OwnedString {
    char* p = nullptr;
    ~OwnedString() { m3dnca_string_free(p); }
    std::string str() const { return p ? p : ""; }
};

struct Ensemble {
    m3dnca_ensemble e{};
    ~Ensemble() { m3dnca_ensemble_clear(&e); }
};

VolumePtr read_volume(const std::string& path) {
    m3dnca_volume* v = nullptr;
    check(m3dnca_volume_read(path.c_str(), &v));
    return VolumePtr(v);
}

void write_volume(const m3dnca_volume* v, const fs::path& path, const char* type = "f32") {
    check(m3dnca_volume_write(v, path.string().c_str(), type));
}

ModelPtr load_model(const std::string& path) {
    m3dnca_model* m = nullptr;
    check(m3dnca_model_load(path.c_str(), &m));
    return ModelPtr(m);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Failure{M3DNCA_ERR_IO, "cannot open " + path};
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out.flush()) throw Failure{M3DNCA_ERR_IO, "cannot write " + path.string()};
}

std::string number(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

// One value is a cube; three are z, y, x.
std::vector<std::int64_t> cube_or_zyx(const std::vector<std::int64_t>& v) {
    if (v.size() == 1) return {v[0], v[0], v[0]};
    return v;
}

struct Globals {
    std::optional<std::uint64_t> seed;
    std::string config_path;
    bool quiet = false;
    int threads = 0;

    json config;  // the document after flag overrides

    std::uint64_t seed_or(std::uint64_t fallback) const { return seed.value_or(fallback); }
    std::string config_text() const { return config.dump(); }
    json& section(const char* name) {
        if (!config.contains(name)) config[name] = json::object();
        return config[name];
    }
};

void say(const Globals& g, const std::string& line) {
    if (!g.quiet) std::cout << line << "\n";
}

std::vector<const char*> c_strings(const std::vector<std::string>& v) {
    std::vector<const char*> out;
    for (const auto& s : v) out.push_back(s.c_str());
    return out;
}

// A prediction directory contributes its single-pass or ensemble-mean
// probability; anything else is read as a volume file.
std::string member_path(const std::string& path) {
    if (!fs::is_directory(path)) return path;
    for (const char* name : {"prob.json", "mean.json"})
        if (fs::exists(fs::path(path) / name)) return (fs::path(path) / name).string();
    throw Failure{M3DNCA_ERR_IO, path + " holds neither prob.json nor mean.json"};
}

struct QcFlags {
    std::string model, data;
    std::vector<std::string> corruptions;
    int members = 10;
    bool no_clean = false;
    std::string denominator = "mean-sum";
    std::uint64_t budget = 0;

    void add(CLI::App* c) {
        c->add_option("--model", model, "Checkpoint")->required();
        c->add_option("--data", data, "Dataset directory")->required();
        c->add_option("--corruption", corruptions, "Corruption, e.g. spike:intensity=5 (repeatable)");
        c->add_option("--members", members, "Ensemble size")->check(CLI::Range(2, 1000));
        c->add_flag("--no-clean", no_clean, "Skip the uncorrupted images");
        c->add_option("--denominator", denominator, "mean-sum or hard-count");
        c->add_option("--budget-bytes", budget, "Route ensembles through tiled execution");
    }
    m3dnca_qc_options options(const Globals& g) const {
        m3dnca_qc_options o = m3dnca_qc_defaults();
        o.members = members;
        o.seed = g.seed_or(0);
        o.include_clean = no_clean ? 0 : 1;
        o.denominator = denominator.c_str();
        o.budget_bytes = budget;
        return o;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-level neural cellular automata for 3D segmentation with quality control"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_version_flag("--version", m3dnca_version());
    Globals g;
    std::uint64_t seed_value = 0;
    CLI::Option* seed_opt = app.add_option("--seed", seed_value, "Base seed");
    app.add_option("--config", g.config_path, "JSON document with model, train and synth sections")
        ->check(CLI::ExistingFile);
    app.add_flag("--quiet", g.quiet, "Only print errors");
    app.add_option("--threads", g.threads, "Worker threads (0: all cores)")->check(CLI::NonNegativeNumber);

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
    std::string synth_out, synth_family;
    std::optional<int> synth_count;
    std::vector<std::int64_t> synth_extent;
    synth->add_option("--out", synth_out, "Output directory")->required();
    synth->add_option("--count", synth_count, "Number of cases");
    synth->add_option("--extent", synth_extent, "Volume extent: n or z,y,x")->delimiter(',')->expected(1, 3);
    synth->add_option("--family", synth_family, "sphere, ellipsoid or two_lobe");

    // train
    auto* train = app.add_subcommand("train", "Train a model");
    std::string train_data, train_val, train_out, train_log;
    std::optional<int> train_epochs;
    train->add_option("--data", train_data, "Training dataset directory")->required();
    train->add_option("--val", train_val, "Validation dataset directory");
    train->add_option("--out", train_out, "Checkpoint to write")->required();
    train->add_option("--log", train_log, "Per-epoch CSV log");
    train->add_option("--epochs", train_epochs, "Override the configured epoch count");

    // infer
    auto* infer = app.add_subcommand("infer", "Segment one volume");
    std::string infer_model, infer_input, infer_out;
    std::uint64_t infer_budget = 0;
    bool infer_batch_stats = false;
    infer->add_option("--model", infer_model, "Checkpoint")->required();
    infer->add_option("--input", infer_input, "Volume (.json or .nii)")->required();
    infer->add_option("--out", infer_out, "Prediction directory")->required();
    infer->add_option("--budget-bytes", infer_budget, "Route through tiled execution");
    infer->add_flag("--batch-stats", infer_batch_stats, "Normalize with batch statistics");

    // ensemble
    auto* ens = app.add_subcommand("ensemble", "Pseudo-ensemble of stochastic passes");
    std::string ens_model, ens_input, ens_out;
    int ens_n = 10;
    std::uint64_t ens_budget = 0;
    bool ens_keep = false, ens_batch_stats = false;
    ens->add_option("--model", ens_model, "Checkpoint")->required();
    ens->add_option("--input", ens_input, "Volume (.json or .nii)")->required();
    ens->add_option("--out", ens_out, "Prediction directory")->required();
    ens->add_option("--n", ens_n, "Members")->check(CLI::Range(1, 1000));
    ens->add_option("--budget-bytes", ens_budget, "Route through tiled execution");
    ens->add_flag("--keep-members", ens_keep, "Also write each member's probability");
    ens->add_flag("--batch-stats", ens_batch_stats, "Normalize with batch statistics");

    // nqm
    auto* nqm = app.add_subcommand("nqm", "Quality metric of member predictions");
    std::vector<std::string> nqm_inputs;
    std::string nqm_denominator = "mean-sum";
    nqm->add_option("inputs", nqm_inputs, "Member volumes or prediction directories; one ensemble directory")
        ->required();
    nqm->add_option("--denominator", nqm_denominator, "mean-sum or hard-count");

    // calibrate
    auto* cal = app.add_subcommand("calibrate", "Fit the NQM threshold for a Dice target");
    QcFlags cal_flags;
    std::string cal_out, cal_measurements;
    double cal_target = 0.8;
    cal_flags.add(cal);
    cal->add_option("--target", cal_target, "Dice target")->check(CLI::Range(0.0, 1.0));
    cal->add_option("--out", cal_out, "Calibration JSON")->required();
    cal->add_option("--measurements", cal_measurements, "Per-case CSV");

    // qc-eval
    auto* qc = app.add_subcommand("qc-eval", "Flag likely failures with a calibration");
    QcFlags qc_flags;
    std::string qc_calibration, qc_out, qc_summary;
    qc_flags.add(qc);
    qc->add_option("--calibration", qc_calibration, "Calibration JSON")->required()->check(CLI::ExistingFile);
    qc->add_option("--out", qc_out, "Report CSV")->required();
    qc->add_option("--summary", qc_summary, "Aggregate rates");

    // corrupt
    auto* cor = app.add_subcommand("corrupt", "Apply an artifact to a volume");
    std::string cor_input, cor_spec, cor_out;
    cor->add_option("--input", cor_input, "Volume")->required();
    cor->add_option("--spec", cor_spec, "e.g. noise:std=0.5, spike:intensity=5, ghost:count=6")->required();
    cor->add_option("--out", cor_out, "Output manifest")->required();

    // plan
    auto* plan = app.add_subcommand("plan", "Tile plan under a memory budget");
    std::vector<std::int64_t> plan_extent;
    std::uint64_t plan_budget = 0;
    plan->add_option("--extent", plan_extent, "Volume extent: n or z,y,x")->delimiter(',')->expected(1, 3)->required();
    plan->add_option("--budget-bytes", plan_budget, "Memory budget")->required();

    // info
    auto* info = app.add_subcommand("info", "Parameter count and step schedule");
    std::string info_model;
    std::vector<std::int64_t> info_extent;
    info->add_option("--model", info_model, "Describe a checkpoint instead of the config");
    info->add_option("--extent", info_extent, "Volume extent: n or z,y,x")->delimiter(',')->expected(1, 3);

    // convert
    auto* conv = app.add_subcommand("convert", "Convert a NIfTI-1 or manifest volume");
    std::string conv_input, conv_out, conv_type = "f32";
    conv->add_option("--input", conv_input, "Input volume")->required();
    conv->add_option("--out", conv_out, "Output manifest")->required();
    conv->add_option("--type", conv_type, "f32 or u8")->check(CLI::IsMember({"f32", "u8"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    if (seed_opt->count()) g.seed = seed_value;

    try {
        g.config = g.config_path.empty() ? json::object() : json::parse(read_file(g.config_path));
        if (!g.config.is_object()) throw Failure{M3DNCA_ERR_CONFIG, "config must be a JSON object"};
        if (g.threads) check(m3dnca_set_threads(g.threads));

        if (*synth) {
            json& s = g.section("synth");
            if (synth_count) s["count"] = *synth_count;
            if (!synth_extent.empty()) s["extent"] = cube_or_zyx(synth_extent);
            if (!synth_family.empty()) s["family"] = synth_family;
            check(m3dnca_synth(g.config_text().c_str(), g.seed_or(0), synth_out.c_str()));
            say(g, "wrote " + synth_out);
        } else if (*train) {
            if (train_epochs) g.section("train")["epochs"] = *train_epochs;
            const std::uint64_t seed = g.seed_or(0);
            auto progress = [](const m3dnca_epoch* e, void* user) {
                if (*static_cast<bool*>(user)) return;
                std::cout << "epoch " << e->epoch << " loss " << number(e->mean_loss);
                if (!std::isnan(e->eval_dice)) std::cout << " dice " << number(e->eval_dice);
                std::cout << std::endl;
            };
            check(m3dnca_train(g.config_text().c_str(), g.seed ? &seed : nullptr, train_data.c_str(),
                               train_val.empty() ? nullptr : train_val.c_str(), train_out.c_str(),
                               train_log.empty() ? nullptr : train_log.c_str(), progress, &g.quiet));
            say(g, "wrote " + train_out);
        } else if (*infer) {
            const ModelPtr model = load_model(infer_model);
            const VolumePtr input = read_volume(infer_input);
            m3dnca_volume *prob = nullptr, *mask = nullptr;
            check(m3dnca_segment(model.get(), input.get(), g.seed_or(0), infer_budget,
                                 infer_batch_stats ? M3DNCA_BATCH_STATS : 0u, &prob, &mask));
            const VolumePtr p(prob), m(mask);
            fs::create_directories(infer_out);
            write_volume(p.get(), fs::path(infer_out) / "prob.json");
            write_volume(m.get(), fs::path(infer_out) / "mask.json", "u8");
            say(g, "wrote " + infer_out);
        } else if (*ens) {
            const ModelPtr model = load_model(ens_model);
            const VolumePtr input = read_volume(ens_input);
            Ensemble r;
            check(m3dnca_ensemble_run(model.get(), input.get(), ens_n, g.seed_or(0), ens_budget,
                                      ens_batch_stats ? M3DNCA_BATCH_STATS : 0u, ens_keep ? 1 : 0, &r.e));
            const fs::path dir(ens_out);
            fs::create_directories(dir);
            write_volume(r.e.mean, dir / "mean.json");
            write_volume(r.e.sd, dir / "sd.json");
            write_volume(r.e.mask, dir / "mask.json", "u8");
            if (r.e.members)
                for (int i = 0; i < r.e.n_members; ++i)
                    write_volume(r.e.members[i], dir / ("member" + std::to_string(i) + ".json"));
            json summary = {{"members", r.e.n_members}};
            summary["nqm"] = std::isfinite(r.e.nqm) ? json(r.e.nqm) : json(number(r.e.nqm));
            write_file(dir / "ensemble.json", summary.dump(2) + "\n");
            say(g, "nqm: " + number(r.e.nqm));
        } else if (*nqm) {
            double value = 0.0;
            if (nqm_inputs.size() == 1 && fs::exists(fs::path(nqm_inputs[0]) / "sd.json")) {
                const fs::path dir(nqm_inputs[0]);
                const VolumePtr mean = read_volume((dir / "mean.json").string());
                const VolumePtr sd = read_volume((dir / "sd.json").string());
                check(m3dnca_nqm_summary(mean.get(), sd.get(), nqm_denominator.c_str(), &value));
            } else {
                std::vector<VolumePtr> owned;
                std::vector<const m3dnca_volume*> members;
                for (const auto& p : nqm_inputs) {
                    owned.push_back(read_volume(member_path(p)));
                    members.push_back(owned.back().get());
                }
                check(m3dnca_nqm(members.data(), members.size(), nqm_denominator.c_str(), &value));
            }
            std::cout << "nqm: " << number(value) << "\n";
        } else if (*cal) {
            const ModelPtr model = load_model(cal_flags.model);
            const auto corruptions = c_strings(cal_flags.corruptions);
            const m3dnca_qc_options opt = cal_flags.options(g);
            OwnedString calibration, measurements;
            check(m3dnca_calibrate(model.get(), cal_flags.data.c_str(), corruptions.data(), corruptions.size(), &opt,
                                   cal_target, &calibration.p, cal_measurements.empty() ? nullptr : &measurements.p));
            write_file(cal_out, calibration.str());
            if (!cal_measurements.empty()) write_file(cal_measurements, measurements.str());
            say(g, calibration.str());
        } else if (*qc) {
            const ModelPtr model = load_model(qc_flags.model);
            const auto corruptions = c_strings(qc_flags.corruptions);
            const m3dnca_qc_options opt = qc_flags.options(g);
            const std::string calibration = read_file(qc_calibration);
            OwnedString report, summary;
            check(m3dnca_qc_eval(model.get(), qc_flags.data.c_str(), corruptions.data(), corruptions.size(), &opt,
                                 calibration.c_str(), &report.p, &summary.p));
            write_file(qc_out, report.str());
            if (!qc_summary.empty()) write_file(qc_summary, summary.str());
            if (!g.quiet) std::cout << summary.str();
        } else if (*cor) {
            const VolumePtr input = read_volume(cor_input);
            m3dnca_volume* out = nullptr;
            check(m3dnca_corrupt(input.get(), cor_spec.c_str(), g.seed_or(0), &out));
            write_volume(VolumePtr(out).get(), cor_out);
            say(g, "wrote " + cor_out);
        } else if (*plan) {
            const auto e = cube_or_zyx(plan_extent);
            OwnedString text;
            check(m3dnca_plan(g.config_text().c_str(), e.data(), plan_budget, &text.p));
            std::cout << text.str();
        } else if (*info) {
            const auto e = cube_or_zyx(info_extent);
            const std::int64_t* extent = e.empty() ? nullptr : e.data();
            OwnedString text;
            if (!info_model.empty()) {
                const ModelPtr model = load_model(info_model);
                check(m3dnca_model_describe(model.get(), extent, &text.p));
            } else {
                check(m3dnca_config_describe(g.config_text().c_str(), extent, &text.p));
            }
            std::cout << text.str();
        } else if (*conv) {
            const VolumePtr v = read_volume(conv_input);
            write_volume(v.get(), conv_out, conv_type.c_str());
            say(g, "wrote " + conv_out);
        }
    } catch (const Failure& f) {
        std::cerr << "error [" << m3dnca_status_name(f.status) << "]: " << f.message << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
