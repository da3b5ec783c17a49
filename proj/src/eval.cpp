#include "cdlm/eval.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace cdlm {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kChunk = 256;

std::size_t conv_extent(std::size_t in) { return (in + 2 - 3) / 2 + 1; }

Tensor<float> rows_of(const Tensor<float>& x, std::size_t begin, std::size_t count) {
    const std::size_t per = x.size() / x.dim(0);
    Shape shape = x.shape();
    shape[0] = count;
    return {std::move(shape), std::vector<float>(x.data().begin() + begin * per, x.data().begin() + (begin + count) * per)};
}

void fill_uniform(Tensor<float>& t, double bound, Rng& rng) {
    for (auto& v : t.data()) v = static_cast<float>(rng.uniform(-bound, bound));
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

std::uint64_t content_hash(std::span<const float> data) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (float f : data) {
        std::uint32_t u;
        std::memcpy(&u, &f, 4);
        for (int i = 0; i < 4; ++i) {
            h ^= (u >> (8 * i)) & 0xff;
            h *= 0x100000001b3ull;
        }
    }
    return h;
}

}  // namespace

// ---- classifier ----------------------------------------------------------

Classifier::Classifier(const Shape& image_shape, std::size_t classes, std::uint64_t seed)
    : image_shape_(image_shape), classes_(classes) {
    if (image_shape.size() != 3) fail(ErrorKind::Dimension, "classifier image shape must be [c, h, w]");
    if (classes < 2) fail(ErrorKind::Configuration, "classifier needs at least two classes");
    Rng rng(seed);
    const std::size_t c = image_shape[0];
    const std::size_t h2 = conv_extent(conv_extent(image_shape[1])), w2 = conv_extent(conv_extent(image_shape[2]));
    const double he = std::sqrt(6.0 / (1.0 + 0.2 * 0.2));
    auto add = [&](const std::string& name, Shape shape, double bound) {
        Tensor<float> t(std::move(shape));
        fill_uniform(t, bound, rng);
        params_.add(name, Role::Auxiliary, std::move(t));
    };
    add("clf.conv1.w", {32, c, 3, 3}, he / std::sqrt(9.0 * c));
    add("clf.conv1.b", {32}, 0);
    add("clf.conv2.w", {64, 32, 3, 3}, he / std::sqrt(9.0 * 32));
    add("clf.conv2.b", {64}, 0);
    add("clf.fc1.w", {64 * h2 * w2, 128}, he / std::sqrt(64.0 * h2 * w2));
    add("clf.fc1.b", {128}, 0);
    add("clf.fc2.w", {128, classes}, 1.0 / std::sqrt(128.0));
    add("clf.fc2.b", {classes}, 0);
}

Var<float> Classifier::logits(Graph<float>& g, Var<float> x) const {
    if (x.shape().size() != 4 || Shape(x.shape().begin() + 1, x.shape().end()) != image_shape_) {
        fail(ErrorKind::Dimension, "classifier expects [n, " + shape_str(image_shape_).substr(1) + ", got " +
                                       shape_str(x.shape()));
    }
    auto& ps = const_cast<ParamSet<float>&>(params_);
    auto P = [&](const char* name) { return g.param(ps.at(name)); };
    auto a = ops::leaky_relu(ops::add_channel_bias(ops::conv2d(x, P("clf.conv1.w"), 2, 1), P("clf.conv1.b")), 0.2);
    a = ops::leaky_relu(ops::add_channel_bias(ops::conv2d(a, P("clf.conv2.w"), 2, 1), P("clf.conv2.b")), 0.2);
    a = ops::leaky_relu(ops::linear(ops::flatten(a), P("clf.fc1.w"), P("clf.fc1.b")), 0.2);
    return ops::linear(a, P("clf.fc2.w"), P("clf.fc2.b"));
}

std::vector<int> Classifier::predict(const Tensor<float>& images) const {
    std::vector<int> out;
    out.reserve(images.dim(0));
    for (std::size_t b = 0; b < images.dim(0); b += kChunk) {
        const std::size_t n = std::min(kChunk, images.dim(0) - b);
        Graph<float> g;
        const auto& z = logits(g, g.input(rows_of(images, b, n))).value();
        for (std::size_t i = 0; i < n; ++i) {
            const float* row = z.data().data() + i * classes_;
            out.push_back(static_cast<int>(std::max_element(row, row + classes_) - row));
        }
    }
    return out;
}

Classifier train_classifier(const DomainBatch& labeled, std::size_t classes, const ClassifierConfig& cfg) {
    if (!labeled.labels) fail(ErrorKind::Usage, "classifier training needs labels");
    labeled.validate(classes);
    Classifier clf(labeled.image_shape(), classes, Rng::derive(cfg.seed, 20));
    Adam adam(cfg.lr, 0.9, 0.999, 1e-8, RoleMask::all());
    BatchIterator it(labeled.size(), std::min(cfg.batch_size, labeled.size()), Rng::derive(cfg.seed, 21));
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const auto batch = labeled.gather(it.next());
        clf.params().zero_grad();
        Graph<float> g;
        auto loss = ops::softmax_cross_entropy(clf.logits(g, g.input(batch.images)), std::span<const int>(*batch.labels));
        g.backward(loss);
        adam.step(clf.params());
    }
    return clf;
}

Accuracy accuracy(const Classifier& clf, const Tensor<float>& images, const std::vector<int>& labels) {
    if (labels.size() != images.dim(0)) fail(ErrorKind::Dimension, "label count does not match image count");
    const auto pred = clf.predict(images);
    Accuracy acc;
    std::vector<std::size_t> hit(clf.classes(), 0), total(clf.classes(), 0);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto y = static_cast<std::size_t>(labels[i]);
        if (y >= clf.classes()) fail(ErrorKind::Configuration, "label " + std::to_string(y) + " exceeds classifier classes");
        ++total[y];
        if (pred[i] == labels[i]) {
            ++hit[y];
            ++correct;
        }
    }
    acc.overall = static_cast<double>(correct) / static_cast<double>(labels.size());
    for (std::size_t k = 0; k < clf.classes(); ++k) {
        acc.per_class.push_back(total[k] ? static_cast<double>(hit[k]) / static_cast<double>(total[k])
                                         : std::numeric_limits<double>::quiet_NaN());
    }
    return acc;
}

Tensor<float> adapt_images(const Model<float>& model, const Tensor<float>& target, double gamma1, double gamma2,
                           std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t n = target.dim(0), z = model.config().z_dim;
    std::vector<float> out;
    out.reserve(target.size());
    for (std::size_t b = 0; b < n; b += kChunk) {
        const std::size_t m = std::min(kChunk, n - b);
        const auto eps = rng.normal_tensor<float>({m, z});
        const auto y = model.test_mode_adapt(rows_of(target, b, m), eps, gamma1, gamma2);
        out.insert(out.end(), y.data().begin(), y.data().end());
    }
    return {target.shape(), std::move(out)};
}

Accuracy adaptation_accuracy(const Model<float>& model, const Classifier& clf, const DomainBatch& target_test,
                             double gamma1, double gamma2, std::uint64_t seed) {
    if (!target_test.labels) fail(ErrorKind::Usage, "adaptation accuracy needs held-back target labels for scoring");
    const auto adapted = adapt_images(model, strip_labels(target_test).images, gamma1, gamma2, seed);
    return accuracy(clf, adapted, *target_test.labels);
}

// ---- A-distance ----------------------------------------------------------

Tensor<float> flat_features(const Tensor<float>& images) {
    return images.reshaped({images.dim(0), images.size() / images.dim(0)});
}

Tensor<float> rep_features(const Model<float>& model, const Tensor<float>& images) {
    std::vector<float> out;
    for (std::size_t b = 0; b < images.dim(0); b += kChunk) {
        const std::size_t m = std::min(kChunk, images.dim(0) - b);
        const auto e = model.encode(rows_of(images, b, m));
        out.insert(out.end(), e.h.data().begin(), e.h.data().end());
    }
    return {{images.dim(0), model.config().z_dim}, std::move(out)};
}

ADistance a_distance(const Tensor<float>& fs_, const Tensor<float>& ft_, std::uint64_t seed) {
    if (fs_.rank() != 2 || ft_.rank() != 2 || fs_.dim(1) != ft_.dim(1)) {
        fail(ErrorKind::Dimension, "a_distance needs [n, d] features of equal width, got " + shape_str(fs_.shape()) +
                                       " and " + shape_str(ft_.shape()));
    }
    if (fs_.dim(0) < 2 || ft_.dim(0) < 2) fail(ErrorKind::Usage, "a_distance needs at least two samples per domain");
    const std::size_t d = fs_.dim(1);

    // The split of each domain depends only on the multiset of its rows, so
    // swapping the arguments or reordering rows leaves both splits unchanged.
    struct Part {
        std::vector<const float*> train, test;
    };
    auto split = [&](const Tensor<float>& f) {
        const std::size_t n = f.dim(0);
        const float* base = f.data().data();
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            return std::lexicographical_compare(base + a * d, base + (a + 1) * d, base + b * d, base + (b + 1) * d);
        });
        std::uint64_t h = 0;
        for (std::size_t i = 0; i < n; ++i) h += content_hash(std::span<const float>(base + i * d, d));
        Rng rng(Rng::derive(seed, h));
        for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
        Part p;
        for (std::size_t i = 0; i < n; ++i) (i < n / 2 ? p.train : p.test).push_back(f.data().data() + idx[i] * d);
        return p;
    };
    const auto ps = split(fs_), pt = split(ft_);

    std::vector<double> mean(d, 0.0), sd(d, 0.0);
    const double ntr = static_cast<double>(ps.train.size() + pt.train.size());
    for (const auto* set : {&ps.train, &pt.train})
        for (const float* r : *set)
            for (std::size_t j = 0; j < d; ++j) mean[j] += r[j] / ntr;
    for (const auto* set : {&ps.train, &pt.train})
        for (const float* r : *set)
            for (std::size_t j = 0; j < d; ++j) sd[j] += (r[j] - mean[j]) * (r[j] - mean[j]) / ntr;
    for (auto& s : sd) s = std::sqrt(s) + 1e-6;

    // Full-batch gradient descent (Adam) on the regularized logistic loss; labels source=1, target=0.
    std::vector<double> w(d, 0.0), m(d + 1, 0.0), v(d + 1, 0.0), grad(d + 1);
    double b = 0.0;
    const double lr = 0.05, l2 = 1e-3;
    auto score = [&](const float* r) {
        double a = b;
        for (std::size_t j = 0; j < d; ++j) a += w[j] * (r[j] - mean[j]) / sd[j];
        return a;
    };
    for (int it = 1; it <= 300; ++it) {
        std::fill(grad.begin(), grad.end(), 0.0);
        for (int dom = 0; dom < 2; ++dom) {
            const auto& set = dom == 0 ? ps.train : pt.train;
            const double y = dom == 0 ? 1.0 : 0.0;
            const double wgt = 0.5 / static_cast<double>(set.size());
            for (const float* r : set) {
                const double p = 1.0 / (1.0 + std::exp(-score(r)));
                const double gr = (p - y) * wgt;
                for (std::size_t j = 0; j < d; ++j) grad[j] += gr * (r[j] - mean[j]) / sd[j];
                grad[d] += gr;
            }
        }
        for (std::size_t j = 0; j < d; ++j) grad[j] += l2 * w[j];
        const double c1 = 1.0 - std::pow(0.9, it), c2 = 1.0 - std::pow(0.999, it);
        for (std::size_t j = 0; j <= d; ++j) {
            m[j] = 0.9 * m[j] + 0.1 * grad[j];
            v[j] = 0.999 * v[j] + 0.001 * grad[j] * grad[j];
            const double step = lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + 1e-8);
            if (j < d) w[j] -= step;
            else b -= step;
        }
    }
    // Balanced held-out error, so unequal domain sizes do not bias it.
    double err = 0.0;
    for (int dom = 0; dom < 2; ++dom) {
        const auto& set = dom == 0 ? ps.test : pt.test;
        std::size_t wrong = 0;
        for (const float* r : set) {
            const double a = score(r);
            if (dom == 0 ? a <= 0.0 : a > 0.0) ++wrong;
        }
        err += 0.5 * static_cast<double>(wrong) / static_cast<double>(set.size());
    }
    err = std::min(err, 0.5);
    return {std::clamp(2.0 * (1.0 - 2.0 * err), 0.0, 2.0), err};
}

// ---- moment identity -----------------------------------------------------

MomentCheck verify_moments(const Model<float>& model, const Tensor<float>& target, double gamma1, double gamma2,
                           std::size_t n_samples, std::uint64_t seed, const MomentFormula& formula) {
    if (n_samples < 1000) fail(ErrorKind::Usage, "verify_moments needs at least 1000 samples, got " + std::to_string(n_samples));
    const auto enc = model.encode(target);
    const std::size_t rows = enc.h.dim(0), z = enc.h.dim(1);
    const auto h = enc.h.cast<double>();

    MomentCheck out;
    out.samples = n_samples;
    out.rep.mu_h = Tensor<double>({z});
    out.rep.sigma_h = Tensor<double>({z});
    for (std::size_t j = 0; j < z; ++j) {
        double s = 0, s2 = 0;
        for (std::size_t i = 0; i < rows; ++i) s += h[i * z + j];
        const double mu = s / static_cast<double>(rows);
        for (std::size_t i = 0; i < rows; ++i) s2 += (h[i * z + j] - mu) * (h[i * z + j] - mu);
        out.rep.mu_h[j] = mu;
        out.rep.sigma_h[j] = std::sqrt(s2 / static_cast<double>(rows));
    }
    Tensor<double> mu0({z}), sigma0({z}), log_sigma0({z});
    for (std::size_t j = 0; j < z; ++j) {
        mu0[j] = enc.mu[j];
        log_sigma0[j] = enc.log_sigma[j];
        sigma0[j] = std::exp(static_cast<double>(enc.log_sigma[j]));
    }
    out.closed = formula(mu0, sigma0, out.rep.mu_h, out.rep.sigma_h, gamma1, gamma2);

    // Draws through the modulation op itself.
    Rng rng(seed);
    Tensor<double> mu_rows({n_samples, z}), ls_rows({n_samples, z}), h_rows({n_samples, z});
    for (std::size_t i = 0; i < n_samples; ++i) {
        const std::size_t r = rng.below(rows);
        for (std::size_t j = 0; j < z; ++j) {
            mu_rows[i * z + j] = mu0[j];
            ls_rows[i * z + j] = log_sigma0[j];
            h_rows[i * z + j] = h[r * z + j];
        }
    }
    auto eps = rng.normal_tensor<double>({n_samples, z});
    Graph<double> g;
    const DomainInfo<double> info{g.input(std::move(mu_rows)), g.input(std::move(ls_rows))};
    const DeepRep<double> rep{g.input(std::move(h_rows))};
    const auto zz = modulate(info, Domain::Source, rep, Domain::Target, g.input(std::move(eps)), gamma1, gamma2).z.value();

    const double n = static_cast<double>(n_samples);
    for (std::size_t j = 0; j < z; ++j) {
        double s = 0;
        for (std::size_t i = 0; i < n_samples; ++i) s += zz[i * z + j];
        const double mean = s / n;
        double m2 = 0, m4 = 0;
        for (std::size_t i = 0; i < n_samples; ++i) {
            const double dlt = zz[i * z + j] - mean;
            m2 += dlt * dlt;
            m4 += dlt * dlt * dlt * dlt;
        }
        m2 /= n;
        m4 /= n;
        const double var_closed = out.closed.sigma[j] * out.closed.sigma[j];
        const double se_mean = std::sqrt(m2 / n);
        const double se_var = std::sqrt(std::max(m4 - m2 * m2, 0.0) / n);
        const double dm = mean - out.closed.mu[j];
        const double dv = m2 * n / (n - 1) - var_closed;
        // A degenerate coordinate (zero spread) must match exactly.
        auto zscore = [](double diff, double se) {
            if (se > 0) return diff / se;
            return std::abs(diff) <= 1e-12 ? 0.0 : std::numeric_limits<double>::infinity();
        };
        out.z_mean.push_back(zscore(dm, se_mean));
        out.z_var.push_back(zscore(dv, se_var));
        out.max_abs_z = std::max({out.max_abs_z, std::abs(out.z_mean.back()), std::abs(out.z_var.back())});
    }
    return out;
}

// ---- image metrics and embeddings ----------------------------------------

ImageMetrics image_metrics(const Tensor<float>& a, const Tensor<float>& b) {
    if (a.shape() != b.shape()) {
        fail(ErrorKind::Dimension, "image_metrics shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
    }
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    ImageMetrics m;
    m.mse = s / static_cast<double>(a.size());
    if (m.mse == 0.0) {
        m.psnr_infinite = true;
        m.psnr = std::numeric_limits<double>::infinity();
    } else {
        m.psnr = 10.0 * std::log10(1.0 / m.mse);
    }
    return m;
}

void export_embeddings(const Model<float>& model, const DomainBatch& source, const DomainBatch& target, double gamma1,
                       double gamma2, std::uint64_t seed, const fs::path& path) {
    const auto es = model.encode(source.images);
    const auto et = model.encode(target.images);
    const std::size_t z = model.config().z_dim;
    std::ofstream os(path);
    if (!os) fail(ErrorKind::Io, "cannot write " + path.string());
    os << "domain,label";
    for (std::size_t j = 0; j < z; ++j) os << ",z" << j;
    os << '\n';
    Rng rng(seed);
    auto emit = [&](const char* tag, const EncodedBatch<float>& own, const EncodedBatch<float>& other,
                    const DomainBatch& batch) {
        const std::size_t n = own.mu.dim(0), m = other.h.dim(0);
        for (std::size_t i = 0; i < n; ++i) {
            os << tag << ',' << (batch.labels ? (*batch.labels)[i] : -1);
            const std::size_t r = i % m;
            for (std::size_t j = 0; j < z; ++j) {
                const double v = own.mu[i * z + j] + std::exp(static_cast<double>(own.log_sigma[i * z + j])) *
                                                         (gamma1 * other.h[r * z + j] + gamma2 * rng.normal());
                char buf[24];
                std::snprintf(buf, sizeof buf, ",%.6g", v);
                os << buf;
            }
            os << '\n';
        }
    };
    emit("source", es, et, source);
    emit("target", et, es, target);
    if (!os) fail(ErrorKind::Io, "write failed for " + path.string());
}

// ---- full report ---------------------------------------------------------

std::string EvalReport::csv_header(std::size_t classes) {
    std::string h = "source_only_acc,adapted_acc,target_only_acc,a_distance_raw,a_distance_cdlm,mse,psnr,psnr_infinite,sigma_mean";
    for (std::size_t k = 0; k < classes; ++k) h += ",acc_class" + std::to_string(k);
    return h;
}

std::string EvalReport::csv_row() const {
    std::string r = fmt(source_only_acc) + ',' + fmt(adapted_acc) + ',' + fmt(target_only_acc) + ',' +
                    fmt(a_distance_raw) + ',' + fmt(a_distance_cdlm) + ',' + fmt(mse) + ',' +
                    (psnr_infinite ? std::string("inf") : fmt(psnr)) + ',' + (psnr_infinite ? "1" : "0") + ',' +
                    fmt(sigma_mean);
    for (double a : per_class) r += ',' + fmt(a);
    return r;
}

EvalReport evaluate(const Model<float>& model, const Classifier& source_clf, const Classifier* target_only,
                    const DomainPair& data, const EvalOptions& opts) {
    if (source_clf.classes() != data.classes) {
        fail(ErrorKind::Configuration, "classifier has " + std::to_string(source_clf.classes()) + " classes, data " +
                                           std::to_string(data.classes));
    }
    const auto& tt = data.target_test;
    if (!tt.labels) fail(ErrorKind::Usage, "evaluation needs target test labels for scoring");
    EvalReport r;
    r.source_only_acc = accuracy(source_clf, tt.images, *tt.labels).overall;
    const auto adapted = adaptation_accuracy(model, source_clf, tt, opts.gamma1, opts.gamma2, Rng::derive(opts.seed, 30));
    r.adapted_acc = adapted.overall;
    r.per_class = adapted.per_class;
    r.target_only_acc = target_only ? accuracy(*target_only, tt.images, *tt.labels).overall
                                    : std::numeric_limits<double>::quiet_NaN();

    const auto& st = data.source_test;
    const auto regen = adapt_images(model, st.images, opts.gamma1, opts.gamma2, Rng::derive(opts.seed, 31));
    const auto im = image_metrics(regen, st.images);
    r.mse = im.mse;
    r.psnr = im.psnr;
    r.psnr_infinite = im.psnr_infinite;

    const auto enc = model.encode(rows_of(st.images, 0, std::min<std::size_t>(st.size(), kChunk)));
    double s = 0;
    for (float v : enc.log_sigma.data()) s += std::exp(static_cast<double>(v));
    r.sigma_mean = s / static_cast<double>(enc.log_sigma.size());

    if (opts.a_distance) {
        r.a_distance_raw = a_distance(flat_features(st.images), flat_features(tt.images), Rng::derive(opts.seed, 32)).value;
        if (opts.probe_images) {
            const auto gen_t = adapt_images(model, tt.images, opts.gamma1, opts.gamma2, Rng::derive(opts.seed, 33));
            r.a_distance_cdlm = a_distance(flat_features(regen), flat_features(gen_t), Rng::derive(opts.seed, 32)).value;
        } else {
            r.a_distance_cdlm = a_distance(rep_features(model, st.images), rep_features(model, tt.images),
                                           Rng::derive(opts.seed, 32)).value;
        }
    } else {
        r.a_distance_raw = r.a_distance_cdlm = std::numeric_limits<double>::quiet_NaN();
    }
    return r;
}

ReferenceClassifiers train_reference_classifiers(const DomainPair& data, std::uint64_t seed) {
    ClassifierConfig cc;
    cc.seed = Rng::derive(seed, 40);
    auto src = train_classifier(data.source_train, data.classes, cc);
    cc.seed = Rng::derive(seed, 41);
    auto tgt = train_classifier(data.target_train, data.classes, cc);
    return {std::move(src), std::move(tgt)};
}

EvalOptions eval_options_for(const TrainConfig& cfg) {
    EvalOptions o;
    o.gamma1 = cfg.gamma1;
    o.gamma2 = cfg.gamma2;
    o.seed = cfg.seed;
    return o;
}

// ---- ablations -----------------------------------------------------------

std::vector<AblationCell> ablation_cells(AblationGrid grid, const TrainConfig& base) {
    std::vector<AblationCell> cells;
    auto cell = [&](std::string g, std::string name, auto&& edit) {
        TrainConfig c = base;
        edit(c);
        cells.push_back({std::move(g), std::move(name), c});
    };
    switch (grid) {
        case AblationGrid::Gamma: {
            const std::pair<double, double> pairs[] = {{0.1, 1.0}, {0.5, 0.5}, {0.9, 0.1}, {1.0, 0.1}, {1.0, 0.0}};
            for (auto [g1, g2] : pairs) {
                cell("gamma", "g" + fmt(g1) + "_" + fmt(g2), [&](TrainConfig& c) {
                    c.gamma1 = g1;
                    c.gamma2 = g2;
                });
            }
            break;
        }
        case AblationGrid::Consistency:
            cell("consistency", "none", [](TrainConfig& c) { c.weights.beta1 = c.weights.beta2 = 0; });
            cell("consistency", "t_only", [](TrainConfig& c) { c.weights.beta1 = 0; });
            cell("consistency", "s_only", [](TrainConfig& c) { c.weights.beta2 = 0; });
            cell("consistency", "both", [](TrainConfig&) {});
            break;
        case AblationGrid::Depth: {
            const std::size_t last = base.net.conv.size();
            std::vector<std::size_t> taps;
            for (std::size_t k = last >= 3 ? last - 2 : 1; k <= last; ++k) taps.push_back(k);
            for (auto k : taps) {
                cell("depth", k == last ? "conv_last" : "conv" + std::to_string(k), [&](TrainConfig& c) { c.net.h_tap = k; });
            }
            break;
        }
    }
    return cells;
}

AblationGrid parse_grid(const std::string& name) {
    if (name == "gamma") return AblationGrid::Gamma;
    if (name == "consistency") return AblationGrid::Consistency;
    if (name == "depth") return AblationGrid::Depth;
    fail(ErrorKind::Usage, "unknown ablation grid '" + name + "' (expected gamma, consistency or depth)");
}

std::vector<AblationRow> run_ablations(const std::vector<AblationCell>& cells, const DomainPair& data,
                                       const Classifier& source_clf, const fs::path& out_dir, std::size_t jobs) {
    std::vector<AblationRow> rows(cells.size());
    const double source_only =
        data.target_test.labels ? accuracy(source_clf, data.target_test.images, *data.target_test.labels).overall
                                : std::numeric_limits<double>::quiet_NaN();
    const auto target = strip_labels(data.target_train);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) {
            auto& row = rows[i];
            row.cell = cells[i];
            row.source_only_acc = source_only;
            const auto t0 = std::chrono::steady_clock::now();
            try {
                const auto dir = out_dir.empty() ? fs::path() : out_dir / (cells[i].grid + "_" + cells[i].name);
                const auto& cfg = cells[i].config;
                const auto state = fit(cfg, data.source_train, target, dir);
                row.adapted_acc = adaptation_accuracy(state.model, source_clf, data.target_test, cfg.gamma1, cfg.gamma2,
                                                      Rng::derive(cfg.seed, 30))
                                      .overall;
            } catch (const std::exception& e) {
                row.adapted_acc = std::numeric_limits<double>::quiet_NaN();
                row.error = e.what();
            }
            row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        }
    };
    jobs = std::max<std::size_t>(1, std::min(jobs, cells.size()));
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    return rows;
}

void write_ablation_csv(const fs::path& path, const std::vector<AblationRow>& rows) {
    std::ofstream os(path);
    if (!os) fail(ErrorKind::Io, "cannot write " + path.string());
    os << "grid,cell,gamma1,gamma2,beta1,beta2,h_tap,adapted_acc,source_only_acc,error\n";
    for (const auto& r : rows) {
        std::string err = r.error;
        std::replace(err.begin(), err.end(), ',', ';');
        std::replace(err.begin(), err.end(), '\n', ' ');
        const auto& c = r.cell.config;
        os << r.cell.grid << ',' << r.cell.name << ',' << fmt(c.gamma1) << ',' << fmt(c.gamma2) << ','
           << fmt(c.weights.beta1) << ',' << fmt(c.weights.beta2) << ',' << c.net.tap_layer() << ','
           << fmt(r.adapted_acc) << ',' << fmt(r.source_only_acc) << ',' << err << '\n';
    }
    if (!os) fail(ErrorKind::Io, "write failed for " + path.string());
}

}  // namespace cdlm
