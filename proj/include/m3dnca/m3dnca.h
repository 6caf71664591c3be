/* C interface to the m3dnca library.
 *
 * Every fallible call returns an m3dnca_status; on failure the message is
 * available from m3dnca_last_error() on the same thread until the next call.
 * Handles are opaque and owned by the caller, who releases them with the
 * matching *_free. Strings returned through char** are released with
 * m3dnca_string_free. Configuration documents are JSON objects with optional
 * "model", "train" and "synth" sections; NULL means all defaults.
 */
#ifndef M3DNCA_H
#define M3DNCA_H

#include <stddef.h>
#include <stdint.h>

#if defined(M3DNCA_BUILDING)
#define M3DNCA_API __attribute__((visibility("default")))
#else
#define M3DNCA_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum m3dnca_status {
    M3DNCA_OK = 0,
    M3DNCA_ERR_CONFIG = 1,
    M3DNCA_ERR_SHAPE = 2,
    M3DNCA_ERR_CONTRACT = 3,
    M3DNCA_ERR_GEOMETRY = 4,
    M3DNCA_ERR_MEMORY_PLAN = 5,
    M3DNCA_ERR_DIVERGED = 6,
    M3DNCA_ERR_CORRUPT_FILE = 7,
    M3DNCA_ERR_UNSUPPORTED_FORMAT = 8,
    M3DNCA_ERR_CALIBRATION = 9,
    M3DNCA_ERR_SPEC = 10,
    M3DNCA_ERR_IO = 11,
    /* A NULL handle or out-pointer, or an out-of-range scalar argument. */
    M3DNCA_ERR_ARGUMENT = 100,
    /* Allocation failure or any other unexpected exception. */
    M3DNCA_ERR_INTERNAL = 101
} m3dnca_status;

M3DNCA_API const char* m3dnca_version(void);
M3DNCA_API const char* m3dnca_status_name(m3dnca_status status);
/* Message of the last failed call on this thread ("" if none). */
M3DNCA_API const char* m3dnca_last_error(void);
M3DNCA_API void m3dnca_string_free(char* s);
/* Worker threads for later calls; 0 restores the runtime default. */
M3DNCA_API m3dnca_status m3dnca_set_threads(int threads);

/* ---- volumes: single-channel float grids, z slowest ---- */

typedef struct m3dnca_volume m3dnca_volume;

M3DNCA_API m3dnca_status m3dnca_volume_create(const int64_t extent[3], const float* data, m3dnca_volume** out);
/* A volume manifest (.json) or an uncompressed NIfTI-1 file (.nii). */
M3DNCA_API m3dnca_status m3dnca_volume_read(const char* path, m3dnca_volume** out);
/* element_type is "f32" or "u8"; NULL means "f32". */
M3DNCA_API m3dnca_status m3dnca_volume_write(const m3dnca_volume* volume, const char* manifest_path,
                                             const char* element_type);
M3DNCA_API void m3dnca_volume_extent(const m3dnca_volume* volume, int64_t out[3]);
M3DNCA_API const float* m3dnca_volume_data(const m3dnca_volume* volume);
M3DNCA_API void m3dnca_volume_free(m3dnca_volume* volume);

/* Dice of the two volumes thresholded at 0.5. */
M3DNCA_API m3dnca_status m3dnca_dice(const m3dnca_volume* a, const m3dnca_volume* b, double* out);
/* Applies a corruption given in text form, e.g. "spike:intensity=5,count=1". */
M3DNCA_API m3dnca_status m3dnca_corrupt(const m3dnca_volume* volume, const char* corruption, uint64_t seed,
                                        m3dnca_volume** out);

/* ---- models ---- */

typedef struct m3dnca_model m3dnca_model;

/* Freshly initialized model from the "model" section of config_json. */
M3DNCA_API m3dnca_status m3dnca_model_create(const char* config_json, uint64_t seed, m3dnca_model** out);
M3DNCA_API m3dnca_status m3dnca_model_load(const char* path, m3dnca_model** out);
M3DNCA_API m3dnca_status m3dnca_model_save(const m3dnca_model* model, const char* path);
M3DNCA_API int64_t m3dnca_model_param_count(const m3dnca_model* model);
/* Human-readable summary of a model's configuration and step schedule for a
 * volume of the given extent (NULL: the training extent, else 64^3). */
M3DNCA_API m3dnca_status m3dnca_model_describe(const m3dnca_model* model, const int64_t extent[3], char** out);
M3DNCA_API void m3dnca_model_free(m3dnca_model* model);

/* The same summary for a configuration document. */
M3DNCA_API m3dnca_status m3dnca_config_describe(const char* config_json, const int64_t extent[3], char** out);
/* Tile plan for a volume under a memory budget, as text. */
M3DNCA_API m3dnca_status m3dnca_plan(const char* config_json, const int64_t extent[3], uint64_t budget_bytes,
                                     char** out);

/* ---- data synthesis and training ---- */

/* Writes the dataset described by the "synth" section to out_dir. */
M3DNCA_API m3dnca_status m3dnca_synth(const char* config_json, uint64_t seed, const char* out_dir);

typedef struct m3dnca_epoch {
    int epoch;
    double mean_loss;
    double loss_variance;
    double eval_dice; /* NaN when not evaluated */
    int64_t optimizer_steps;
} m3dnca_epoch;

typedef void (*m3dnca_epoch_fn)(const m3dnca_epoch* epoch, void* user);

/* Trains on the dataset in train_dir, keeping the checkpoint with the best
 * Dice on val_dir (may be NULL). seed, when non-NULL, replaces the training
 * seed of the config. log_csv (may be NULL) receives one row per epoch. */
M3DNCA_API m3dnca_status m3dnca_train(const char* config_json, const uint64_t* seed, const char* train_dir,
                                      const char* val_dir, const char* checkpoint_path, const char* log_csv,
                                      m3dnca_epoch_fn on_epoch, void* user);

/* ---- inference ---- */

/* Normalize with per-step batch statistics (full-frame only). */
#define M3DNCA_BATCH_STATS 1u

/* Probability and mask volumes; either out-pointer may be NULL. A non-zero
 * budget routes through tiled execution. */
M3DNCA_API m3dnca_status m3dnca_segment(const m3dnca_model* model, const m3dnca_volume* volume, uint64_t seed,
                                        uint64_t budget_bytes, unsigned flags, m3dnca_volume** prob,
                                        m3dnca_volume** mask);

typedef struct m3dnca_ensemble {
    m3dnca_volume* mean;
    m3dnca_volume* sd;
    m3dnca_volume* mask;
    double nqm;
    int n_members;
    /* Only filled when requested; n_members entries. */
    m3dnca_volume** members;
} m3dnca_ensemble;

M3DNCA_API m3dnca_status m3dnca_ensemble_run(const m3dnca_model* model, const m3dnca_volume* volume, int n,
                                             uint64_t seed, uint64_t budget_bytes, unsigned flags,
                                             int keep_members, m3dnca_ensemble* out);
/* Frees every volume in the ensemble and zeroes it. */
M3DNCA_API void m3dnca_ensemble_clear(m3dnca_ensemble* ensemble);

/* ---- quality ---- */

/* denominator is "mean-sum" (NULL) or "hard-count"; the result may be +inf. */
M3DNCA_API m3dnca_status m3dnca_nqm(const m3dnca_volume* const* members, size_t n, const char* denominator,
                                    double* out);
/* The same ratio from a stored ensemble mean and SD. */
M3DNCA_API m3dnca_status m3dnca_nqm_summary(const m3dnca_volume* mean, const m3dnca_volume* sd,
                                            const char* denominator, double* out);

typedef struct m3dnca_qc_options {
    int members;          /* ensemble size, at least 2 */
    uint64_t seed;        /* ensemble and corruption seed */
    int include_clean;    /* also measure the uncorrupted images */
    const char* denominator;
    uint64_t budget_bytes;
} m3dnca_qc_options;

M3DNCA_API m3dnca_qc_options m3dnca_qc_defaults(void);

/* Measures every case of dataset_dir under each corruption and fits the
 * NQM-to-Dice line. calibration receives the fit as JSON, measurements (may
 * be NULL) the per-case CSV. */
M3DNCA_API m3dnca_status m3dnca_calibrate(const m3dnca_model* model, const char* dataset_dir,
                                          const char* const* corruptions, size_t n_corruptions,
                                          const m3dnca_qc_options* options, double dice_target,
                                          char** calibration, char** measurements);

/* Classifies every case with a calibration document. report receives the
 * per-case CSV, summary (may be NULL) the aggregate rates. */
M3DNCA_API m3dnca_status m3dnca_qc_eval(const m3dnca_model* model, const char* dataset_dir,
                                        const char* const* corruptions, size_t n_corruptions,
                                        const m3dnca_qc_options* options, const char* calibration,
                                        char** report, char** summary);

#ifdef __cplusplus
}
#endif

#endif
