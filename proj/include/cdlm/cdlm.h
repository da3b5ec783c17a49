#ifndef CDLM_CDLM_H
#define CDLM_CDLM_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define CDLM_API __declspec(dllexport)
#else
#define CDLM_API __attribute__((visibility("default")))
#endif

typedef enum cdlm_status {
    CDLM_OK = 0,
    CDLM_ERR_DIMENSION = 1,
    CDLM_ERR_CONFIG = 2,
    CDLM_ERR_DOMAIN = 3,
    CDLM_ERR_USAGE = 4,
    CDLM_ERR_STATE = 5,
    CDLM_ERR_FORMAT = 6,
    CDLM_ERR_IO = 7,
    CDLM_ERR_NONFINITE = 8,
    CDLM_ERR_INTERNAL = 9
} cdlm_status;

/* Message of the last failure on the calling thread ("" if none). */
CDLM_API const char* cdlm_last_error(void);
/* Short lowercase name: "ok", "dimension", "config", ... */
CDLM_API const char* cdlm_status_name(cdlm_status status);
CDLM_API const char* cdlm_version(void);

/* ---- training configuration ---- */

typedef struct cdlm_config cdlm_config;

CDLM_API cdlm_status cdlm_config_new(cdlm_config** out);
CDLM_API cdlm_status cdlm_config_load(const char* path, cdlm_config** out);
/* key=value text; unknown keys fail with CDLM_ERR_USAGE listing all of them. */
CDLM_API cdlm_status cdlm_config_parse(const char* text, cdlm_config** out);
CDLM_API cdlm_status cdlm_config_set(cdlm_config* cfg, const char* key, const char* value);
CDLM_API cdlm_status cdlm_config_validate(const cdlm_config* cfg);
/* Copies the key=value text into buf (NUL-terminated) and stores the full
   length excluding the NUL in *needed. buf may be NULL when cap is 0. */
CDLM_API cdlm_status cdlm_config_text(const cdlm_config* cfg, char* buf, size_t cap, size_t* needed);
CDLM_API uint64_t cdlm_config_seed(const cdlm_config* cfg);
CDLM_API void cdlm_config_free(cdlm_config* cfg);

/* ---- paired-domain datasets ---- */

typedef struct cdlm_dataset cdlm_dataset;

typedef struct cdlm_dataset_info {
    size_t classes;
    size_t channels, height, width;
    size_t source_train, source_test, target_train, target_test;
} cdlm_dataset_info;

CDLM_API cdlm_status cdlm_dataset_synthetic(uint64_t seed, size_t classes, size_t size, size_t train_size,
                                            size_t test_size, cdlm_dataset** out);
/* Directory written by cdlm_dataset_export. */
CDLM_API cdlm_status cdlm_dataset_load_dir(const char* dir, cdlm_dataset** out);
/* MNIST-style IDX directories; target_dir NULL or "" composites the source
   over procedural backgrounds. Images are resized to size x size. */
CDLM_API cdlm_status cdlm_dataset_load_idx(const char* source_dir, const char* target_dir, size_t size,
                                           cdlm_dataset** out);
CDLM_API cdlm_status cdlm_dataset_export(const cdlm_dataset* data, const char* dir);
CDLM_API cdlm_status cdlm_dataset_get_info(const cdlm_dataset* data, cdlm_dataset_info* out);
CDLM_API void cdlm_dataset_free(cdlm_dataset* data);

/* ---- trained models ---- */

typedef struct cdlm_model cdlm_model;

typedef struct cdlm_losses {
    double rec, kl_st, kl_ts, adv, cons_s, cons_t, total_phi, total_theta;
} cdlm_losses;

typedef void (*cdlm_progress_fn)(long step, const cdlm_losses* losses, void* user);

typedef struct cdlm_train_options {
    /* Periodic evaluation into eval.csv at every checkpoint. */
    int periodic_eval;
    /* Continue from this checkpoint; NULL starts fresh. */
    const char* resume_checkpoint;
    cdlm_progress_fn progress;
    void* progress_user;
} cdlm_train_options;

CDLM_API void cdlm_train_options_init(cdlm_train_options* opts);
/* Writes loss_trace.csv, checkpoints, eval.csv and mosaics into out_dir. */
CDLM_API cdlm_status cdlm_train(const cdlm_config* cfg, const cdlm_dataset* data, const char* out_dir,
                                const cdlm_train_options* opts, cdlm_model** out);
CDLM_API cdlm_status cdlm_model_load(const char* checkpoint, cdlm_model** out);
CDLM_API cdlm_status cdlm_model_save(const cdlm_model* model, const char* path);
CDLM_API long cdlm_model_step(const cdlm_model* model);
/* Configuration stored with the model; caller frees. */
CDLM_API cdlm_status cdlm_model_config(const cdlm_model* model, cdlm_config** out);
CDLM_API void cdlm_model_free(cdlm_model* model);

/* ---- evaluation ---- */

#define CDLM_MAX_CLASSES 256

typedef struct cdlm_eval_options {
    int a_distance;
    int probe_images;
    /* Optional output paths; NULL skips. */
    const char* report_csv;
    const char* embeddings_csv;
    const char* mosaic_ppm;
} cdlm_eval_options;

typedef struct cdlm_eval_report {
    double source_only_acc, adapted_acc, target_only_acc;
    double a_distance_raw, a_distance_cdlm;
    double mse, psnr;
    int psnr_infinite;
    double sigma_mean;
    size_t classes;
    double per_class[CDLM_MAX_CLASSES];
} cdlm_eval_report;

CDLM_API void cdlm_eval_options_init(cdlm_eval_options* opts);
/* Classifiers are retrained deterministically from the model's seed, so the
   result matches the trainer's periodic evaluation of the same snapshot. */
CDLM_API cdlm_status cdlm_evaluate(const cdlm_model* model, const cdlm_dataset* data, const cdlm_eval_options* opts,
                                   cdlm_eval_report* out);

typedef struct cdlm_moment_report {
    double max_abs_z;
    size_t z_dim;
    size_t samples;
} cdlm_moment_report;

/* Monte-Carlo check of the modulated moments on target test images. */
CDLM_API cdlm_status cdlm_verify_moments(const cdlm_model* model, const cdlm_dataset* data, double gamma1,
                                         double gamma2, size_t samples, uint64_t seed, cdlm_moment_report* out);

/* grid: "gamma", "consistency" or "depth". Writes csv_path; per-cell
   failures land in its error column. */
CDLM_API cdlm_status cdlm_ablate(const cdlm_config* base, const cdlm_dataset* data, const char* grid,
                                 const char* out_dir, size_t jobs, const char* csv_path);

#ifdef __cplusplus
}
#endif

#endif
