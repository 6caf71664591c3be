#include "m3dnca/m3dnca.h"

#include <omp.h>

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <new>
#include <sstream>
#include <string>

#include "m3dnca/error.hpp"
#include "m3dnca/inference.hpp"
#include "m3dnca/io.hpp"
#include "m3dnca/pipeline.hpp"
#include "m3dnca/quality.hpp"
#include "m3dnca/rng.hpp"
#include "m3dnca/synth.hpp"
#include "text.hpp"

using namespace m3dnca;

struct m3dnca_volume {
    Tensor t;
};

struct m3dnca_model {
    Checkpoint ck;
};

namespace {

thread_local std::string last_error;

constexpr std::uint64_t kCorruptionTag = 0xc022;

struct ArgumentError {
    std::string what;
};

// Runs f, translating exceptions into status codes and the thread's message.
template <class F>
m3dnca_status guarded(F&& f) {
    try {
        f();
        last_error.clear();
        return M3DNCA_OK;
    } catch (const Error& e) {
        last_error = e.what();
        return static_cast<m3dnca_status>(static_cast<int>(e.kind()));
    } catch (const ArgumentError& e) {
        last_error = e.what;
        return M3DNCA_ERR_ARGUMENT;
    } catch (const std::bad_alloc&) {
        last_error = "out of memory";
        return M3DNCA_ERR_INTERNAL;
    } catch (const std::exception& e) {
        last_error = e.what();
        return M3DNCA_ERR_INTERNAL;
    } catch (...) {
        last_error = "unknown failure";
        return M3DNCA_ERR_INTERNAL;
    }
}

template <class T>
T& need(T* p, const char* name) {
    if (!p) throw ArgumentError{std::string(name) + " must not be NULL"};
    return *p;
}

std::string need_text(const char* p, const char* name) {
    if (!p) throw ArgumentError{std::string(name) + " must not be NULL"};
    return p;
}

std::string text_or_empty(const char* s) { return s ? s : "{}"; }

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (!out) throw std::bad_alloc();
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

m3dnca_volume* wrap(Tensor t) { return new m3dnca_volume{std::move(t)}; }

ModelConfig model_config_of(const char* config_json) {
    return io::parse_model_config(io::split_config(text_or_empty(config_json)).model);
}

Extent3 extent_of(const int64_t e[3]) { return {e[0], e[1], e[2]}; }

std::string describe(const ModelConfig& cfg, const Extent3& volume) {
    std::ostringstream o;
    o << "config: " << io::model_config_json(cfg) << "\n"
      << "parameters: " << param_count(cfg) << "\n"
      << "volume: " << to_string(volume) << "\n";
    for (int l = 0; l < cfg.levels; ++l) {
        const Extent3 e = level_extent(volume, cfg, l);
        o << "level " << l << ": extent " << to_string(e) << " kernel " << cfg.kernel_sizes[static_cast<std::size_t>(l)]
          << " steps " << level_steps(cfg, l, e) << "\n";
    }
    return o.str();
}

Extent3 describe_extent(const ModelConfig& cfg, const int64_t extent[3]) {
    if (extent) return extent_of(extent);
    if (cfg.training_extent.voxels() > 0) return cfg.training_extent;
    return {64, 64, 64};
}

QcOptions qc_options_of(const m3dnca_qc_options* o) {
    const m3dnca_qc_options opt = o ? *o : m3dnca_qc_defaults();
    QcOptions q;
    q.members = opt.members;
    q.seed = opt.seed;
    q.include_clean = opt.include_clean != 0;
    if (opt.denominator) q.denominator = parse_denominator(opt.denominator);
    q.ensemble.budget_bytes = static_cast<std::size_t>(opt.budget_bytes);
    return q;
}

std::vector<CorruptionSpec> corruptions_of(const char* const* texts, size_t n, std::uint64_t seed) {
    if (n > 0 && !texts) throw ArgumentError{"corruptions must not be NULL"};
    std::vector<CorruptionSpec> out;
    for (size_t j = 0; j < n; ++j) {
        CorruptionSpec c = parse_corruption(need_text(texts[j], "corruption"));
        c.seed = rng::derive(seed, kCorruptionTag, j);
        out.push_back(c);
    }
    return out;
}

std::vector<Sample> dataset_of(const char* dir) { return io::samples_of(io::read_dataset(need_text(dir, "dataset_dir"))); }

}  // namespace

extern "C" {

const char* m3dnca_version(void) { return "1.0.0"; }

const char* m3dnca_status_name(m3dnca_status status) {
    switch (status) {
        case M3DNCA_OK: return "ok";
        case M3DNCA_ERR_ARGUMENT: return "argument";
        case M3DNCA_ERR_INTERNAL: return "internal";
        default: break;
    }
    const int v = static_cast<int>(status);
    if (v >= static_cast<int>(ErrorKind::config) && v <= static_cast<int>(ErrorKind::io))
        return to_string(static_cast<ErrorKind>(v));
    return "unknown";
}

const char* m3dnca_last_error(void) { return last_error.c_str(); }

void m3dnca_string_free(char* s) { std::free(s); }

m3dnca_status m3dnca_set_threads(int threads) {
    return guarded([&] {
        if (threads < 0) throw ArgumentError{"thread count must not be negative"};
        omp_set_num_threads(threads == 0 ? omp_get_num_procs() : threads);
    });
}

m3dnca_status m3dnca_volume_create(const int64_t extent[3], const float* data, m3dnca_volume** out) {
    return guarded([&] {
        need(out, "out");
        const Extent3 e = extent_of(&need(extent, "extent"));
        require(e.z > 0 && e.y > 0 && e.x > 0, ErrorKind::shape, "volume extent must be positive, got " + to_string(e));
        Tensor t = Tensor::volume(1, 1, e);
        if (data) std::memcpy(t.data(), data, static_cast<std::size_t>(t.numel()) * sizeof(float));
        *out = wrap(std::move(t));
    });
}

m3dnca_status m3dnca_volume_read(const char* path, m3dnca_volume** out) {
    return guarded([&] {
        need(out, "out");
        *out = wrap(io::read_any(need_text(path, "path")).data);
    });
}

m3dnca_status m3dnca_volume_write(const m3dnca_volume* volume, const char* manifest_path, const char* element_type) {
    return guarded([&] {
        io::VolumeInfo info;
        if (element_type) info.element_type = io::parse_element_type(element_type);
        if (info.element_type == io::ElementType::u8) info.scale = 1.0 / 255;
        io::write_volume(need_text(manifest_path, "manifest_path"), need(volume, "volume").t, info);
    });
}

void m3dnca_volume_extent(const m3dnca_volume* volume, int64_t out[3]) {
    if (!out) return;
    const Extent3 e = volume ? volume->t.extent() : Extent3{};
    out[0] = e.z;
    out[1] = e.y;
    out[2] = e.x;
}

const float* m3dnca_volume_data(const m3dnca_volume* volume) { return volume ? volume->t.data() : nullptr; }

void m3dnca_volume_free(m3dnca_volume* volume) { delete volume; }

m3dnca_status m3dnca_dice(const m3dnca_volume* a, const m3dnca_volume* b, double* out) {
    return guarded([&] { need(out, "out") = dice(need(a, "a").t, need(b, "b").t); });
}

m3dnca_status m3dnca_corrupt(const m3dnca_volume* volume, const char* corruption, uint64_t seed, m3dnca_volume** out) {
    return guarded([&] {
        need(out, "out");
        CorruptionSpec c = parse_corruption(need_text(corruption, "corruption"));
        c.seed = seed;
        *out = wrap(corrupt(need(volume, "volume").t, c));
    });
}

m3dnca_status m3dnca_model_create(const char* config_json, uint64_t seed, m3dnca_model** out) {
    return guarded([&] {
        need(out, "out");
        *out = new m3dnca_model{fresh_checkpoint(model_config_of(config_json), seed)};
    });
}

m3dnca_status m3dnca_model_load(const char* path, m3dnca_model** out) {
    return guarded([&] {
        need(out, "out");
        *out = new m3dnca_model{io::load_checkpoint(need_text(path, "path"))};
    });
}

m3dnca_status m3dnca_model_save(const m3dnca_model* model, const char* path) {
    return guarded([&] { io::save_checkpoint(need(model, "model").ck, need_text(path, "path")); });
}

int64_t m3dnca_model_param_count(const m3dnca_model* model) { return model ? param_count(model->ck.config) : -1; }

m3dnca_status m3dnca_model_describe(const m3dnca_model* model, const int64_t extent[3], char** out) {
    return guarded([&] {
        const ModelConfig& cfg = need(model, "model").ck.config;
        need(out, "out") = dup_string(describe(cfg, describe_extent(cfg, extent)));
    });
}

void m3dnca_model_free(m3dnca_model* model) { delete model; }

m3dnca_status m3dnca_config_describe(const char* config_json, const int64_t extent[3], char** out) {
    return guarded([&] {
        need(out, "out");
        const ModelConfig cfg = model_config_of(config_json);
        *out = dup_string(describe(cfg, describe_extent(cfg, extent)));
    });
}

m3dnca_status m3dnca_plan(const char* config_json, const int64_t extent[3], uint64_t budget_bytes, char** out) {
    return guarded([&] {
        need(out, "out");
        const ModelConfig cfg = model_config_of(config_json);
        const TilePlan p = memory_plan(extent_of(&need(extent, "extent")), cfg, static_cast<std::size_t>(budget_bytes));
        std::ostringstream o;
        o << "volume: " << to_string(p.volume) << "\n"
          << "tile: " << to_string(p.tile) << "\n"
          << "peak_bytes: " << p.peak_bytes << "\n"
          << "param_bytes: " << p.param_bytes << "\n"
          << "tile_step_work: " << p.tile_step_work << "\n";
        for (std::size_t l = 0; l < p.level_extents.size(); ++l)
            o << "level " << l << ": extent " << to_string(p.level_extents[l]) << " halo " << p.halo[l] << " steps "
              << p.steps[l] << " tiles " << p.tiles_per_level[l] << "\n";
        *out = dup_string(o.str());
    });
}

m3dnca_status m3dnca_synth(const char* config_json, uint64_t seed, const char* out_dir) {
    return guarded([&] {
        const SyntheticSpec spec = io::parse_synthetic_spec(io::split_config(text_or_empty(config_json)).synth);
        io::write_dataset(need_text(out_dir, "out_dir"), generate(spec, seed));
    });
}

m3dnca_status m3dnca_train(const char* config_json, const uint64_t* seed, const char* train_dir, const char* val_dir,
                           const char* checkpoint_path, const char* log_csv, m3dnca_epoch_fn on_epoch, void* user) {
    return guarded([&] {
        need_text(checkpoint_path, "checkpoint_path");
        const io::ConfigSections sections = io::split_config(text_or_empty(config_json));
        const ModelConfig model = io::parse_model_config(sections.model);
        TrainConfig tc = io::parse_train_config(sections.train);
        if (seed) tc.seed = *seed;
        const std::vector<Sample> train_set = dataset_of(train_dir);
        const std::vector<Sample> validation = val_dir ? dataset_of(val_dir) : std::vector<Sample>{};

        using detail::format_number;
        std::string log = "epoch,mean_loss,loss_variance,eval_dice,optimizer_steps\n";
        const TrainResult result = train(train_set, validation, model, tc, [&](const EpochRecord& r) {
            log += std::to_string(r.epoch) + "," + format_number(r.mean_loss) + "," + format_number(r.loss_variance) +
                   "," + (std::isnan(r.eval_dice) ? std::string() : format_number(r.eval_dice)) + "," +
                   std::to_string(r.optimizer_steps) + "\n";
            if (on_epoch) {
                const m3dnca_epoch e{r.epoch, r.mean_loss, r.loss_variance, r.eval_dice, r.optimizer_steps};
                on_epoch(&e, user);
            }
        });
        io::save_checkpoint(result.best, checkpoint_path);
        if (log_csv) io::write_text(log_csv, log);
    });
}

m3dnca_status m3dnca_segment(const m3dnca_model* model, const m3dnca_volume* volume, uint64_t seed,
                             uint64_t budget_bytes, unsigned flags, m3dnca_volume** prob, m3dnca_volume** mask) {
    return guarded([&] {
        const Checkpoint& ck = need(model, "model").ck;
        const Tensor& v = need(volume, "volume").t;
        const bool batch_stats = (flags & M3DNCA_BATCH_STATS) != 0;
        require(!(batch_stats && budget_bytes), ErrorKind::contract,
                "batch statistics normalization is only available full-frame");
        Segmentation s = budget_bytes ? tiled_segment(v, ck, seed, static_cast<std::size_t>(budget_bytes))
                                      : segment(v, ck, seed, SegmentOptions{batch_stats});
        if (prob) *prob = wrap(std::move(s.prob));
        if (mask) *mask = wrap(std::move(s.mask));
    });
}

m3dnca_status m3dnca_ensemble_run(const m3dnca_model* model, const m3dnca_volume* volume, int n, uint64_t seed,
                                  uint64_t budget_bytes, unsigned flags, int keep_members, m3dnca_ensemble* out) {
    return guarded([&] {
        need(out, "out");
        *out = m3dnca_ensemble{};
        EnsembleOptions opt;
        opt.segment.batch_stats_bn = (flags & M3DNCA_BATCH_STATS) != 0;
        require(!(opt.segment.batch_stats_bn && budget_bytes), ErrorKind::contract,
                "batch statistics normalization is only available full-frame");
        opt.budget_bytes = static_cast<std::size_t>(budget_bytes);
        opt.keep_members = keep_members != 0;
        EnsembleResult e = ensemble_segment(need(volume, "volume").t, need(model, "model").ck, n, seed, opt);
        m3dnca_ensemble r{};
        r.nqm = e.n_members >= 2 ? ensemble_nqm(e) : std::nan("");
        r.n_members = e.n_members;
        try {
            r.mean = wrap(std::move(e.mean_prob));
            r.sd = wrap(std::move(e.sd_map));
            r.mask = wrap(std::move(e.mask));
            if (opt.keep_members) {
                r.members = new m3dnca_volume*[e.members.size()]();
                for (std::size_t i = 0; i < e.members.size(); ++i) r.members[i] = wrap(std::move(e.members[i]));
            }
        } catch (...) {
            m3dnca_ensemble_clear(&r);
            throw;
        }
        *out = r;
    });
}

void m3dnca_ensemble_clear(m3dnca_ensemble* ensemble) {
    if (!ensemble) return;
    delete ensemble->mean;
    delete ensemble->sd;
    delete ensemble->mask;
    if (ensemble->members) {
        for (int i = 0; i < ensemble->n_members; ++i) delete ensemble->members[i];
        delete[] ensemble->members;
    }
    *ensemble = m3dnca_ensemble{};
}

m3dnca_status m3dnca_nqm(const m3dnca_volume* const* members, size_t n, const char* denominator, double* out) {
    return guarded([&] {
        need(out, "out");
        if (n > 0 && !members) throw ArgumentError{"members must not be NULL"};
        std::vector<Tensor> ts;
        for (size_t i = 0; i < n; ++i) ts.push_back(need(members[i], "member").t);
        *out = nqm(ts, denominator ? parse_denominator(denominator) : NqmDenominator::mean_sum);
    });
}

m3dnca_status m3dnca_nqm_summary(const m3dnca_volume* mean, const m3dnca_volume* sd, const char* denominator,
                                 double* out) {
    return guarded([&] {
        need(out, "out");
        EnsembleResult e;
        e.mean_prob = need(mean, "mean").t;
        e.sd_map = need(sd, "sd").t;
        require_same_shape(e.mean_prob, e.sd_map, "nqm");
        e.n_members = 2;  // a stored summary always came from an ensemble
        *out = ensemble_nqm(e, denominator ? parse_denominator(denominator) : NqmDenominator::mean_sum);
    });
}

m3dnca_qc_options m3dnca_qc_defaults(void) {
    return m3dnca_qc_options{10, 0, 1, nullptr, 0};
}

m3dnca_status m3dnca_calibrate(const m3dnca_model* model, const char* dataset_dir, const char* const* corruptions,
                               size_t n_corruptions, const m3dnca_qc_options* options, double dice_target,
                               char** calibration, char** measurements) {
    return guarded([&] {
        need(calibration, "calibration");
        const QcOptions opt = qc_options_of(options);
        const std::vector<QcCase> cases = qc_measure(need(model, "model").ck, dataset_of(dataset_dir),
                                                     corruptions_of(corruptions, n_corruptions, opt.seed), opt);
        std::vector<std::pair<double, double>> points;
        for (const QcCase& c : cases) points.emplace_back(c.nqm, c.dice);
        const QcCalibration cal = calibrate(points, dice_target);
        char* text = dup_string(calibration_text(cal));
        if (measurements) {
            try {
                *measurements = dup_string(report_csv(make_report(cases, cal)));
            } catch (...) {
                std::free(text);
                throw;
            }
        }
        *calibration = text;
    });
}

m3dnca_status m3dnca_qc_eval(const m3dnca_model* model, const char* dataset_dir, const char* const* corruptions,
                             size_t n_corruptions, const m3dnca_qc_options* options, const char* calibration,
                             char** report, char** summary) {
    return guarded([&] {
        need(report, "report");
        const QcCalibration cal = parse_calibration(need_text(calibration, "calibration"));
        const QcOptions opt = qc_options_of(options);
        const QcReport r = qc_evaluate(need(model, "model").ck, dataset_of(dataset_dir),
                                       corruptions_of(corruptions, n_corruptions, opt.seed), cal, opt);
        const std::string csv = report_csv(r);
        const std::string text = summary ? report_summary(r) : std::string();
        *report = dup_string(csv);
        if (summary) {
            try {
                *summary = dup_string(text);
            } catch (...) {
                std::free(*report);
                *report = nullptr;
                throw;
            }
        }
    });
}

}  // extern "C"
