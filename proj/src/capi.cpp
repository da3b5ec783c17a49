#include "cdlm/cdlm.h"

#include <cstring>
#include <fstream>
#include <memory>
#include <string>

#include "cdlm/eval.hpp"

struct cdlm_config {
    cdlm::TrainConfig cfg;
};

struct cdlm_dataset {
    cdlm::DomainPair pair;
};

struct cdlm_model {
    cdlm::TrainConfig cfg;
    cdlm::TrainState state;
};

namespace {

thread_local std::string g_last_error;

cdlm_status status_of(cdlm::ErrorKind k) {
    using cdlm::ErrorKind;
    switch (k) {
        case ErrorKind::Dimension: return CDLM_ERR_DIMENSION;
        case ErrorKind::Configuration: return CDLM_ERR_CONFIG;
        case ErrorKind::Domain: return CDLM_ERR_DOMAIN;
        case ErrorKind::Usage: return CDLM_ERR_USAGE;
        case ErrorKind::State: return CDLM_ERR_STATE;
        case ErrorKind::Format: return CDLM_ERR_FORMAT;
        case ErrorKind::Io: return CDLM_ERR_IO;
        case ErrorKind::NonFinite: return CDLM_ERR_NONFINITE;
    }
    return CDLM_ERR_INTERNAL;
}

template <typename F>
cdlm_status guarded(F&& f) {
    try {
        g_last_error.clear();
        f();
        return CDLM_OK;
    } catch (const cdlm::Error& e) {
        g_last_error = e.what();
        return status_of(e.kind());
    } catch (const std::bad_alloc&) {
        g_last_error = "out of memory";
    } catch (const std::exception& e) {
        g_last_error = e.what();
    } catch (...) {
        g_last_error = "unknown failure";
    }
    return CDLM_ERR_INTERNAL;
}

void require(const void* p, const char* what) {
    if (!p) cdlm::fail(cdlm::ErrorKind::Usage, std::string(what) + " must not be NULL");
}

cdlm_losses losses_of(const cdlm::LossReport& r) {
    return {r.rec, r.kl_st, r.kl_ts, r.adv, r.cons_s, r.cons_t, r.total_phi, r.total_theta};
}

cdlm::DatasetSpec synthetic_spec(std::uint64_t seed, std::size_t classes, std::size_t size, std::size_t train,
                                 std::size_t test) {
    cdlm::DatasetSpec spec;
    spec.seed = seed;
    spec.classes = classes;
    spec.height = spec.width = size;
    spec.train_size = train;
    spec.test_size = test;
    return spec;
}

}  // namespace

extern "C" {

const char* cdlm_last_error(void) { return g_last_error.c_str(); }

const char* cdlm_status_name(cdlm_status s) {
    switch (s) {
        case CDLM_OK: return "ok";
        case CDLM_ERR_DIMENSION: return "dimension";
        case CDLM_ERR_CONFIG: return "config";
        case CDLM_ERR_DOMAIN: return "domain";
        case CDLM_ERR_USAGE: return "usage";
        case CDLM_ERR_STATE: return "state";
        case CDLM_ERR_FORMAT: return "format";
        case CDLM_ERR_IO: return "io";
        case CDLM_ERR_NONFINITE: return "nonfinite";
        case CDLM_ERR_INTERNAL: return "internal";
    }
    return "unknown";
}

const char* cdlm_version(void) { return "1.0.0"; }

cdlm_status cdlm_config_new(cdlm_config** out) {
    return guarded([&] {
        require(out, "out");
        *out = new cdlm_config{};
    });
}

cdlm_status cdlm_config_load(const char* path, cdlm_config** out) {
    return guarded([&] {
        require(path, "path");
        require(out, "out");
        *out = new cdlm_config{cdlm::TrainConfig::load(path)};
    });
}

cdlm_status cdlm_config_parse(const char* text, cdlm_config** out) {
    return guarded([&] {
        require(text, "text");
        require(out, "out");
        *out = new cdlm_config{cdlm::TrainConfig::parse(text)};
    });
}

cdlm_status cdlm_config_set(cdlm_config* cfg, const char* key, const char* value) {
    return guarded([&] {
        require(cfg, "config");
        require(key, "key");
        require(value, "value");
        auto copy = cfg->cfg;
        copy.set(key, value);
        cfg->cfg = copy;
    });
}

cdlm_status cdlm_config_validate(const cdlm_config* cfg) {
    return guarded([&] {
        require(cfg, "config");
        cfg->cfg.validate();
    });
}

cdlm_status cdlm_config_text(const cdlm_config* cfg, char* buf, size_t cap, size_t* needed) {
    return guarded([&] {
        require(cfg, "config");
        const auto text = cfg->cfg.to_text();
        if (needed) *needed = text.size();
        if (buf && cap > 0) {
            const std::size_t n = std::min(cap - 1, text.size());
            std::memcpy(buf, text.data(), n);
            buf[n] = '\0';
        }
    });
}

uint64_t cdlm_config_seed(const cdlm_config* cfg) { return cfg ? cfg->cfg.seed : 0; }

void cdlm_config_free(cdlm_config* cfg) { delete cfg; }

cdlm_status cdlm_dataset_synthetic(uint64_t seed, size_t classes, size_t size, size_t train_size, size_t test_size,
                                   cdlm_dataset** out) {
    return guarded([&] {
        require(out, "out");
        *out = new cdlm_dataset{cdlm::gen_synthetic_pair(synthetic_spec(seed, classes, size, train_size, test_size))};
    });
}

cdlm_status cdlm_dataset_load_dir(const char* dir, cdlm_dataset** out) {
    return guarded([&] {
        require(dir, "dir");
        require(out, "out");
        *out = new cdlm_dataset{cdlm::load_dataset_dir(dir)};
    });
}

cdlm_status cdlm_dataset_load_idx(const char* source_dir, const char* target_dir, size_t size, cdlm_dataset** out) {
    return guarded([&] {
        require(source_dir, "source_dir");
        require(out, "out");
        *out = new cdlm_dataset{cdlm::load_idx_pair(source_dir, target_dir ? target_dir : "", size, size)};
    });
}

cdlm_status cdlm_dataset_export(const cdlm_dataset* data, const char* dir) {
    return guarded([&] {
        require(data, "dataset");
        require(dir, "dir");
        cdlm::export_dataset(data->pair, dir);
    });
}

cdlm_status cdlm_dataset_get_info(const cdlm_dataset* data, cdlm_dataset_info* out) {
    return guarded([&] {
        require(data, "dataset");
        require(out, "out");
        const auto& p = data->pair;
        const auto shape = p.source_train.image_shape();
        *out = {p.classes, shape[0], shape[1], shape[2],
                p.source_train.size(), p.source_test.size(), p.target_train.size(), p.target_test.size()};
    });
}

void cdlm_dataset_free(cdlm_dataset* data) { delete data; }

void cdlm_train_options_init(cdlm_train_options* opts) {
    if (opts) *opts = {1, nullptr, nullptr, nullptr};
}

cdlm_status cdlm_train(const cdlm_config* cfg, const cdlm_dataset* data, const char* out_dir,
                       const cdlm_train_options* opts, cdlm_model** out) {
    return guarded([&] {
        require(cfg, "config");
        require(data, "dataset");
        require(out, "out");
        cdlm_train_options o;
        cdlm_train_options_init(&o);
        if (opts) o = *opts;
        const auto& pair = data->pair;

        std::optional<cdlm::TrainState> start;
        auto train_cfg = cfg->cfg;
        if (o.resume_checkpoint && *o.resume_checkpoint) {
            auto ck = cdlm::resume(o.resume_checkpoint);
            const auto steps = train_cfg.steps;
            train_cfg = ck.config;
            train_cfg.steps = steps;
            start.emplace(std::move(ck.state));
        }
        train_cfg.validate();

        std::optional<cdlm::ReferenceClassifiers> refs;
        cdlm::FitHooks hooks;
        if (o.periodic_eval) {
            refs.emplace(cdlm::train_reference_classifiers(pair, train_cfg.seed));
            hooks.eval_header = cdlm::EvalReport::csv_header(pair.classes);
            hooks.eval = [&](const cdlm::TrainState& s) {
                return cdlm::evaluate(s.model, refs->source, &refs->target_only, pair, cdlm::eval_options_for(train_cfg))
                    .csv_row();
            };
        }
        if (o.progress) {
            hooks.on_step = [&](const cdlm::TrainState& s, const cdlm::LossReport& r) {
                const auto l = losses_of(r);
                o.progress(s.step, &l, o.progress_user);
            };
        }
        const auto preview = cdlm::strip_labels(pair.target_test);
        auto state = cdlm::fit(train_cfg, pair.source_train, cdlm::strip_labels(pair.target_train),
                               out_dir ? out_dir : "", hooks, std::move(start), &preview);
        *out = new cdlm_model{train_cfg, std::move(state)};
    });
}

cdlm_status cdlm_model_load(const char* checkpoint, cdlm_model** out) {
    return guarded([&] {
        require(checkpoint, "checkpoint");
        require(out, "out");
        auto ck = cdlm::load_checkpoint(checkpoint);
        *out = new cdlm_model{ck.config, std::move(ck.state)};
    });
}

cdlm_status cdlm_model_save(const cdlm_model* model, const char* path) {
    return guarded([&] {
        require(model, "model");
        require(path, "path");
        cdlm::save_checkpoint(path, model->state, model->cfg);
    });
}

long cdlm_model_step(const cdlm_model* model) { return model ? model->state.step : -1; }

cdlm_status cdlm_model_config(const cdlm_model* model, cdlm_config** out) {
    return guarded([&] {
        require(model, "model");
        require(out, "out");
        *out = new cdlm_config{model->cfg};
    });
}

void cdlm_model_free(cdlm_model* model) { delete model; }

void cdlm_eval_options_init(cdlm_eval_options* opts) {
    if (opts) *opts = {1, 0, nullptr, nullptr, nullptr};
}

cdlm_status cdlm_evaluate(const cdlm_model* model, const cdlm_dataset* data, const cdlm_eval_options* opts,
                          cdlm_eval_report* out) {
    return guarded([&] {
        require(model, "model");
        require(data, "dataset");
        require(out, "out");
        cdlm_eval_options o;
        cdlm_eval_options_init(&o);
        if (opts) o = *opts;
        const auto& pair = data->pair;
        if (pair.classes > CDLM_MAX_CLASSES) cdlm::fail(cdlm::ErrorKind::Configuration, "too many classes for the report");
        if (model->state.model.config().image_shape() != pair.source_train.image_shape()) {
            cdlm::fail(cdlm::ErrorKind::Configuration, "model image shape " +
                                                           cdlm::shape_str(model->state.model.config().image_shape()) +
                                                           " does not match dataset " +
                                                           cdlm::shape_str(pair.source_train.image_shape()));
        }
        const auto refs = cdlm::train_reference_classifiers(pair, model->cfg.seed);
        auto eo = cdlm::eval_options_for(model->cfg);
        eo.a_distance = o.a_distance != 0;
        eo.probe_images = o.probe_images != 0;
        const auto r = cdlm::evaluate(model->state.model, refs.source, &refs.target_only, pair, eo);

        *out = {};
        out->source_only_acc = r.source_only_acc;
        out->adapted_acc = r.adapted_acc;
        out->target_only_acc = r.target_only_acc;
        out->a_distance_raw = r.a_distance_raw;
        out->a_distance_cdlm = r.a_distance_cdlm;
        out->mse = r.mse;
        out->psnr = r.psnr;
        out->psnr_infinite = r.psnr_infinite ? 1 : 0;
        out->sigma_mean = r.sigma_mean;
        out->classes = r.per_class.size();
        std::copy(r.per_class.begin(), r.per_class.end(), out->per_class);

        if (o.report_csv) {
            std::ofstream os(o.report_csv);
            if (!os) cdlm::fail(cdlm::ErrorKind::Io, std::string("cannot write ") + o.report_csv);
            os << "step," << cdlm::EvalReport::csv_header(pair.classes) << '\n'
               << model->state.step << ',' << r.csv_row() << '\n';
            if (!os) cdlm::fail(cdlm::ErrorKind::Io, std::string("write failed for ") + o.report_csv);
        }
        if (o.embeddings_csv) {
            cdlm::export_embeddings(model->state.model, pair.source_test, pair.target_test, model->cfg.gamma1,
                                    model->cfg.gamma2, cdlm::Rng::derive(model->cfg.seed, 34), o.embeddings_csv);
        }
        if (o.mosaic_ppm) {
            const auto& tt = pair.target_test.images;
            const std::size_t n = std::min<std::size_t>(tt.dim(0), 16);
            const std::size_t per = tt.size() / tt.dim(0);
            cdlm::Shape shape = tt.shape();
            shape[0] = n;
            cdlm::Tensor<float> x(shape, std::vector<float>(tt.data().begin(), tt.data().begin() + n * per));
            const auto adapted = cdlm::adapt_images(model->state.model, x, model->cfg.gamma1, model->cfg.gamma2,
                                                    cdlm::Rng::derive(model->cfg.seed, 35));
            shape[0] = 2 * n;
            std::vector<float> both(x.data().begin(), x.data().end());
            both.insert(both.end(), adapted.data().begin(), adapted.data().end());
            cdlm::write_mosaic(o.mosaic_ppm, cdlm::Tensor<float>(shape, std::move(both)), n);
        }
    });
}

cdlm_status cdlm_verify_moments(const cdlm_model* model, const cdlm_dataset* data, double gamma1, double gamma2,
                                size_t samples, uint64_t seed, cdlm_moment_report* out) {
    return guarded([&] {
        require(model, "model");
        require(data, "dataset");
        require(out, "out");
        const auto& tt = data->pair.target_test.images;
        const std::size_t n = std::min<std::size_t>(tt.dim(0), 256);
        const auto per = tt.size() / tt.dim(0);
        cdlm::Shape shape = tt.shape();
        shape[0] = n;
        cdlm::Tensor<float> x(shape, std::vector<float>(tt.data().begin(), tt.data().begin() + n * per));
        const auto check = cdlm::verify_moments(model->state.model, x, gamma1, gamma2, samples, seed);
        *out = {check.max_abs_z, check.z_mean.size(), check.samples};
    });
}

cdlm_status cdlm_ablate(const cdlm_config* base, const cdlm_dataset* data, const char* grid, const char* out_dir,
                        size_t jobs, const char* csv_path) {
    return guarded([&] {
        require(base, "config");
        require(data, "dataset");
        require(grid, "grid");
        require(csv_path, "csv_path");
        base->cfg.validate();
        const auto cells = cdlm::ablation_cells(cdlm::parse_grid(grid), base->cfg);
        const auto refs = cdlm::train_reference_classifiers(data->pair, base->cfg.seed);
        const auto rows = cdlm::run_ablations(cells, data->pair, refs.source, out_dir ? out_dir : "", jobs);
        cdlm::write_ablation_csv(csv_path, rows);
    });
}

}  // extern "C"
