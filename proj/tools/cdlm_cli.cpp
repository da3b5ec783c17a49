#include <openssl/evp.h>

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cdlm/cdlm.h"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct CliError {
    cdlm_status status;
    std::string message;
};

void check(cdlm_status s) {
    if (s != CDLM_OK) throw CliError{s, cdlm_last_error()};
}

[[noreturn]] void usage(const std::string& msg) { throw CliError{CDLM_ERR_USAGE, msg}; }

std::string hex(const unsigned char* d, unsigned n) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < n; ++i) {
        out += digits[d[i] >> 4];
        out += digits[d[i] & 15];
    }
    return out;
}

std::string sha1(const std::string& data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned n = 0;
    EVP_Digest(data.data(), data.size(), md, &n, EVP_sha1(), nullptr);
    return hex(md, n);
}

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw CliError{CDLM_ERR_IO, "cannot read " + p.string()};
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string blob_hash(const std::string& content) {
    return sha1("blob " + std::to_string(content.size()) + '\0' + content);
}

/// Git-style hash over every regular file below dir (sorted relative paths).
std::string tree_hash(const fs::path& dir, std::map<std::string, std::string>* files = nullptr,
                      const std::string& skip = "") {
    std::map<std::string, std::string> entries;
    if (fs::exists(dir)) {
        for (const auto& e : fs::recursive_directory_iterator(dir)) {
            if (!e.is_regular_file()) continue;
            const auto rel = fs::relative(e.path(), dir).generic_string();
            if (rel == skip) continue;
            entries[rel] = blob_hash(read_bytes(e.path()));
        }
    }
    std::string body;
    for (const auto& [path, h] : entries) body += path + '\0' + h + '\n';
    if (files) *files = entries;
    return sha1("tree " + std::to_string(body.size()) + '\0' + body);
}

std::string now_utc() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void prepare_out(const fs::path& out, bool force) {
    if (out.empty()) usage("--out is required");
    if (fs::exists(out) && !fs::is_directory(out)) usage("--out " + out.string() + " exists and is not a directory");
    if (fs::exists(out) && !fs::is_empty(out)) {
        if (!force) usage("output directory " + out.string() + " is not empty (use --force to overwrite)");
        for (const auto& e : fs::directory_iterator(out)) fs::remove_all(e.path());
    }
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw CliError{CDLM_ERR_IO, "cannot create " + out.string() + ": " + ec.message()};
}

json config_json(const std::string& text) {
    json j = json::object();
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq != std::string::npos) j[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return j;
}

class Manifest {
   public:
    Manifest(std::string command, const std::vector<std::string>& argv, fs::path out)
        : out_(std::move(out)) {
        j_["command"] = std::move(command);
        j_["argv"] = argv;
        j_["output_dir"] = fs::absolute(out_).lexically_normal().string();
        j_["started_at"] = now_utc();
        j_["status"] = "running";
        write();
    }
    json& operator[](const char* key) { return j_[key]; }
    void finish() {
        std::map<std::string, std::string> files;
        j_["content_hash"] = tree_hash(out_, &files, "manifest.json");
        j_["files"] = files;
        j_["finished_at"] = now_utc();
        j_["status"] = "complete";
        write();
    }

   private:
    void write() {
        std::ofstream os(out_ / "manifest.json");
        os << j_.dump(2) << '\n';
        if (!os) throw CliError{CDLM_ERR_IO, "cannot write " + (out_ / "manifest.json").string()};
    }

    fs::path out_;
    json j_;
};

struct Owned {
    cdlm_config* cfg = nullptr;
    cdlm_dataset* data = nullptr;
    cdlm_model* model = nullptr;
    ~Owned() {
        cdlm_model_free(model);
        cdlm_dataset_free(data);
        cdlm_config_free(cfg);
    }
};

std::string config_text(const cdlm_config* cfg) {
    size_t n = 0;
    check(cdlm_config_text(cfg, nullptr, 0, &n));
    std::string s(n + 1, '\0');
    check(cdlm_config_text(cfg, s.data(), s.size(), &n));
    s.resize(n);
    return s;
}

struct DataFlags {
    std::string dir;
    std::string idx_source;
    std::string idx_target;
    std::size_t idx_size = 32;

    void add(CLI::App* app) {
        app->add_option("--data", dir, "Dataset directory from gen-data (default: $CDLM_DATA_DIR)");
        app->add_option("--idx-source", idx_source, "Directory with MNIST-style IDX files for the source");
        app->add_option("--idx-target", idx_target, "IDX directory for the target (default: composited source)");
        app->add_option("--idx-size", idx_size, "Square image size for IDX data")->check(CLI::PositiveNumber);
    }

    /// Loads the data and returns a hash identifying it.
    std::string load(cdlm_dataset** out) const {
        if (!idx_source.empty()) {
            check(cdlm_dataset_load_idx(idx_source.c_str(), idx_target.empty() ? nullptr : idx_target.c_str(), idx_size, out));
            return sha1(tree_hash(idx_source) + (idx_target.empty() ? "" : tree_hash(idx_target)) + std::to_string(idx_size));
        }
        std::string d = dir;
        if (d.empty()) {
            if (const char* env = std::getenv("CDLM_DATA_DIR")) d = env;
        }
        if (d.empty()) usage("no dataset given (use --data, --idx-source or set CDLM_DATA_DIR)");
        if (!fs::is_directory(d)) usage("dataset directory " + d + " does not exist");
        check(cdlm_dataset_load_dir(d.c_str(), out));
        return tree_hash(d, nullptr, "manifest.json");
    }
};

struct ConfigFlags {
    std::string file;
    std::vector<std::string> sets;
    std::map<std::string, std::string> direct;

    void add(CLI::App* app) {
        app->add_option("--config", file, "key=value configuration file");
        app->add_option("--set", sets, "Override one key (key=value); repeatable");
        const char* keys[][2] = {{"gamma1", "Weight of the other domain's h"},
                                 {"gamma2", "Weight of the noise"},
                                 {"lambda1", "KL weight"},
                                 {"lambda2", "Reconstruction weight in the encoder update"},
                                 {"beta1", "Source consistency weight"},
                                 {"beta2", "Target consistency weight"},
                                 {"eta1", "SGD rate (encoder, discriminator)"},
                                 {"eta2", "Adam rate (decoder)"},
                                 {"momentum", "SGD momentum"},
                                 {"batch-size", "Batch size"},
                                 {"steps", "Training steps"},
                                 {"seed", "Seed"},
                                 {"grl-scale", "Gradient reversal scale"},
                                 {"eval-every", "Checkpoint/eval interval"},
                                 {"recon", "bernoulli or gaussian"},
                                 {"conv", "Encoder stack, e.g. 16:3:2,32:3:2,64:3:2"},
                                 {"z-dim", "Latent width"},
                                 {"h-tap", "Conv layer feeding h (0 = last)"}};
        for (auto& k : keys) {
            std::string key = k[0];
            app->add_option_function<std::string>("--" + key, [this, key](const std::string& v) { direct[key] = v; }, k[1]);
        }
    }

    cdlm_config* build() const {
        cdlm_config* cfg = nullptr;
        if (!file.empty()) check(cdlm_config_load(file.c_str(), &cfg));
        else check(cdlm_config_new(&cfg));
        std::vector<std::string> unknown;
        auto apply = [&](std::string key, const std::string& value) {
            for (auto& c : key)
                if (c == '-') c = '_';
            const auto s = cdlm_config_set(cfg, key.c_str(), value.c_str());
            if (s == CDLM_ERR_USAGE) unknown.push_back(key);
            else if (s != CDLM_OK) {
                cdlm_config_free(cfg);
                check(s);
            }
        };
        for (const auto& [k, v] : direct) apply(k, v);
        for (const auto& kv : sets) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) {
                cdlm_config_free(cfg);
                usage("--set expects key=value, got '" + kv + "'");
            }
            apply(kv.substr(0, eq), kv.substr(eq + 1));
        }
        if (!unknown.empty()) {
            cdlm_config_free(cfg);
            std::string list;
            for (const auto& k : unknown) list += (list.empty() ? "" : ", ") + k;
            usage("unknown config keys: " + list);
        }
        const auto s = cdlm_config_validate(cfg);
        if (s != CDLM_OK) {
            const std::string msg = cdlm_last_error();
            cdlm_config_free(cfg);
            throw CliError{s, msg};
        }
        return cfg;
    }
};

void progress(long step, const cdlm_losses* l, void*) {
    if (step % 100 == 0) {
        std::fprintf(stderr, "step %ld rec %.4f kl %.3f/%.3f adv %.4f cons %.4f/%.4f\n", step, l->rec, l->kl_st,
                     l->kl_ts, l->adv, l->cons_s, l->cons_t);
    }
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    CLI::App app{"Cross-domain latent modulation: data, training, evaluation and ablations"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(cdlm_version()));

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Write a synthetic clean/noisy glyph domain pair");
    std::uint64_t gen_seed = 0;
    std::size_t gen_classes = 8, gen_size = 16, gen_train = 2000, gen_test = 500;
    std::string gen_out;
    bool gen_force = false;
    gen->add_option("--seed", gen_seed, "Seed");
    gen->add_option("--classes", gen_classes, "Number of glyph classes (2-10)");
    gen->add_option("--size", gen_size, "Image height and width");
    gen->add_option("--train", gen_train, "Training images per domain");
    gen->add_option("--test", gen_test, "Test images per domain");
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_flag("--force", gen_force, "Overwrite a non-empty output directory");

    // train
    auto* train = app.add_subcommand("train", "Train a model; writes loss trace, checkpoints, eval CSV and mosaics");
    DataFlags train_data;
    ConfigFlags train_cfg;
    std::string train_out, train_resume;
    bool train_force = false, train_no_eval = false, train_quiet = false;
    train_data.add(train);
    train_cfg.add(train);
    train->add_option("--out", train_out, "Run directory")->required();
    train->add_option("--resume", train_resume, "Continue from a checkpoint");
    train->add_flag("--force", train_force, "Overwrite a non-empty output directory");
    train->add_flag("--no-eval", train_no_eval, "Skip periodic evaluation");
    train->add_flag("--quiet", train_quiet, "No progress output");

    // eval
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    DataFlags eval_data;
    std::string eval_ckpt, eval_out;
    bool eval_force = false, eval_embed = false, eval_adist = false, eval_moments = false, eval_probe_images = false;
    std::size_t eval_samples = 100000;
    eval_data.add(eval);
    eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file");
    eval->add_option("--out", eval_out, "Report directory")->required();
    eval->add_flag("--force", eval_force, "Overwrite a non-empty output directory");
    eval->add_flag("--export-embeddings", eval_embed, "Write embeddings.csv");
    eval->add_flag("--a-distance", eval_adist, "Compute proxy A-distances");
    eval->add_flag("--probe-images", eval_probe_images, "A-distance on decoded images instead of h");
    eval->add_flag("--verify-moments", eval_moments, "Monte-Carlo check of the modulated moments");
    eval->add_option("--samples", eval_samples, "Draws for --verify-moments");

    // ablate
    auto* ablate = app.add_subcommand("ablate", "Retrain over an ablation grid");
    DataFlags abl_data;
    ConfigFlags abl_cfg;
    std::string abl_grid = "gamma", abl_out;
    std::size_t abl_jobs = 1;
    bool abl_force = false;
    abl_data.add(ablate);
    abl_cfg.add(ablate);
    ablate->add_option("--grid", abl_grid, "gamma, consistency, depth or all");
    ablate->add_option("--jobs", abl_jobs, "Cells trained in parallel")->check(CLI::PositiveNumber);
    ablate->add_option("--out", abl_out, "Output directory")->required();
    ablate->add_flag("--force", abl_force, "Overwrite a non-empty output directory");

    try {
        try {
            app.parse(argc, argv);
        } catch (const CLI::CallForHelp& e) {
            return app.exit(e);
        } catch (const CLI::CallForVersion& e) {
            return app.exit(e);
        } catch (const CLI::ParseError& e) {
            usage(e.what());
        }
        Owned own;

        if (*gen) {
            prepare_out(gen_out, gen_force);
            Manifest m("gen-data", args, gen_out);
            json spec = {{"seed", gen_seed}, {"classes", gen_classes}, {"size", gen_size}, {"train", gen_train}, {"test", gen_test}};
            m["config"] = spec;
            m["seed"] = gen_seed;
            m["input_hash"] = blob_hash(spec.dump());
            check(cdlm_dataset_synthetic(gen_seed, gen_classes, gen_size, gen_train, gen_test, &own.data));
            check(cdlm_dataset_export(own.data, gen_out.c_str()));
            m.finish();
        } else if (*train) {
            own.cfg = train_cfg.build();
            const auto data_hash = train_data.load(&own.data);
            if (!train_resume.empty() && !fs::exists(train_resume)) usage("checkpoint " + train_resume + " does not exist");
            prepare_out(train_out, train_force);
            Manifest m("train", args, train_out);
            const auto text = config_text(own.cfg);
            m["config"] = config_json(text);
            m["seed"] = cdlm_config_seed(own.cfg);
            m["input_hash"] = sha1(data_hash + text + (train_resume.empty() ? "" : blob_hash(read_bytes(train_resume))));
            if (!train_resume.empty()) m["resumed_from"] = fs::absolute(train_resume).string();
            cdlm_train_options opts;
            cdlm_train_options_init(&opts);
            opts.periodic_eval = train_no_eval ? 0 : 1;
            opts.resume_checkpoint = train_resume.empty() ? nullptr : train_resume.c_str();
            if (!train_quiet) opts.progress = progress;
            check(cdlm_train(own.cfg, own.data, train_out.c_str(), &opts, &own.model));
            m.finish();
        } else if (*eval) {
            if (eval_ckpt.empty()) usage("--checkpoint is required");
            if (!fs::is_regular_file(eval_ckpt)) usage("checkpoint " + eval_ckpt + " does not exist");
            check(cdlm_model_load(eval_ckpt.c_str(), &own.model));
            const auto data_hash = eval_data.load(&own.data);
            prepare_out(eval_out, eval_force);
            Manifest m("eval", args, eval_out);
            check(cdlm_model_config(own.model, &own.cfg));
            m["config"] = config_json(config_text(own.cfg));
            m["seed"] = cdlm_config_seed(own.cfg);
            m["input_hash"] = sha1(data_hash + blob_hash(read_bytes(eval_ckpt)));
            m["checkpoint"] = fs::absolute(eval_ckpt).string();

            const auto report = (fs::path(eval_out) / "eval_report.csv").string();
            const auto embed = (fs::path(eval_out) / "embeddings.csv").string();
            const auto mosaic = (fs::path(eval_out) / "adapted.ppm").string();
            cdlm_eval_options eo;
            cdlm_eval_options_init(&eo);
            eo.a_distance = eval_adist || eval_probe_images;
            eo.probe_images = eval_probe_images;
            eo.report_csv = report.c_str();
            eo.embeddings_csv = eval_embed ? embed.c_str() : nullptr;
            eo.mosaic_ppm = mosaic.c_str();
            cdlm_eval_report r;
            check(cdlm_evaluate(own.model, own.data, &eo, &r));
            std::printf("source_only_acc %.4f adapted_acc %.4f target_only_acc %.4f\n", r.source_only_acc, r.adapted_acc,
                        r.target_only_acc);
            if (eo.a_distance) std::printf("a_distance raw %.4f cdlm %.4f\n", r.a_distance_raw, r.a_distance_cdlm);
            if (eval_moments) {
                std::ofstream os(fs::path(eval_out) / "moments.csv");
                os << "gamma1,gamma2,samples,z_dim,max_abs_z,pass\n";
                bool all_pass = true;
                const double grid[][2] = {{0.0, 1.0}, {1.0, 0.1}, {1.0, 0.0}};
                for (auto& g : grid) {
                    cdlm_moment_report mr;
                    check(cdlm_verify_moments(own.model, own.data, g[0], g[1], eval_samples, cdlm_config_seed(own.cfg), &mr));
                    const bool pass = mr.max_abs_z <= 3.0;
                    all_pass = all_pass && pass;
                    os << g[0] << ',' << g[1] << ',' << mr.samples << ',' << mr.z_dim << ',' << mr.max_abs_z << ','
                       << (pass ? 1 : 0) << '\n';
                    std::printf("moments gamma=(%g,%g) max|z| %.3f %s\n", g[0], g[1], mr.max_abs_z, pass ? "pass" : "FAIL");
                }
                if (!os) throw CliError{CDLM_ERR_IO, "cannot write moments.csv"};
                m["moments_pass"] = all_pass;
            }
            m.finish();
        } else if (*ablate) {
            own.cfg = abl_cfg.build();
            const auto data_hash = abl_data.load(&own.data);
            std::vector<std::string> grids;
            if (abl_grid == "all") grids = {"gamma", "consistency", "depth"};
            else if (abl_grid == "gamma" || abl_grid == "consistency" || abl_grid == "depth") grids = {abl_grid};
            else usage("unknown grid '" + abl_grid + "' (expected gamma, consistency, depth or all)");
            prepare_out(abl_out, abl_force);
            Manifest m("ablate", args, abl_out);
            const auto text = config_text(own.cfg);
            m["config"] = config_json(text);
            m["seed"] = cdlm_config_seed(own.cfg);
            m["input_hash"] = sha1(data_hash + text + abl_grid);
            for (const auto& g : grids) {
                const auto csv = (fs::path(abl_out) / ("ablation_" + g + ".csv")).string();
                check(cdlm_ablate(own.cfg, own.data, g.c_str(), (fs::path(abl_out) / "cells").c_str(), abl_jobs, csv.c_str()));
            }
            m.finish();
        }
    } catch (const CliError& e) {
        std::string msg = e.message;
        for (auto& c : msg)
            if (c == '\n') c = ' ';
        std::fprintf(stderr, "cdlm: error kind=%s: %s\n", cdlm_status_name(e.status), msg.c_str());
        return e.status == CDLM_ERR_USAGE ? 2 : 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "cdlm: error kind=internal: %s\n", e.what());
        return 1;
    }
    return 0;
}
