#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "cdlm/eval.hpp"
#include "support.hpp"

using namespace cdlm;
using cdlm::test::TempDir;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an error");
    return ErrorKind::Usage;
}

Tensor<float> gaussian_rows(std::size_t n, std::size_t d, double shift, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<float> t({n, d});
    for (auto& v : t.data()) v = static_cast<float>(shift + rng.normal());
    return t;
}

Model<float> random_model(std::uint64_t seed, std::size_t z_dim = 4) {
    auto net = test::tiny_net(3, 8);
    net.z_dim = z_dim;
    Model<float> m(net);
    m.initialize(seed);
    return m;
}

Tensor<float> random_images(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<float> t({n, 3, 8, 8});
    for (auto& v : t.data()) v = static_cast<float>(rng.uniform());
    return t;
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::vector<std::vector<std::string>> rows;
    for (std::string line; std::getline(in, line);) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
        rows.push_back(cells);
    }
    return rows;
}

}  // namespace

TEST_CASE("image metrics") {
    Tensor<float> a({2, 1, 3, 3}, 0.3f);
    Tensor<float> b({2, 1, 3, 3}, 0.4f);
    auto m = image_metrics(a, b);
    CHECK(m.mse == doctest::Approx(0.01).epsilon(1e-5));
    CHECK(m.psnr == doctest::Approx(20.0).epsilon(1e-4));
    CHECK_FALSE(m.psnr_infinite);

    auto same = image_metrics(a, a);
    CHECK(same.mse == 0.0);
    CHECK(same.psnr_infinite);

    // Scaling the error by c scales mse by c^2 and shifts PSNR by -10 log10(c^2).
    Tensor<float> c({2, 1, 3, 3}, 0.5f);
    auto m2 = image_metrics(a, c);
    CHECK(m2.mse / m.mse == doctest::Approx(4.0).epsilon(1e-4));
    CHECK(m2.psnr - m.psnr == doctest::Approx(-10 * std::log10(4.0)).epsilon(1e-4));

    CHECK(kind_of([&] { image_metrics(a, Tensor<float>({2, 1, 3, 4})); }) == ErrorKind::Dimension);
}

TEST_CASE("a-distance limits and symmetry") {
    const auto s = gaussian_rows(400, 5, 0.0, 1);
    const auto t = gaussian_rows(400, 5, 0.0, 2);
    const auto far = gaussian_rows(400, 5, 12.0, 3);
    const auto same = a_distance(s, t, 7);
    CHECK(same.value < 0.3);
    CHECK(same.error == doctest::Approx(0.5).epsilon(0.15));
    const auto sep = a_distance(s, far, 7);
    CHECK(sep.value > 1.95);
    CHECK(sep.value <= 2.0);
    CHECK(a_distance(far, s, 7).value == doctest::Approx(sep.value));
    CHECK(a_distance(t, s, 7).value == doctest::Approx(same.value));
    CHECK(kind_of([&] { a_distance(gaussian_rows(1, 5, 0, 1), t, 7); }) == ErrorKind::Usage);
    CHECK(kind_of([&] { a_distance(s, gaussian_rows(10, 4, 0, 1), 7); }) == ErrorKind::Dimension);
}

TEST_CASE("a-distance ignores sample order") {
    const auto s = gaussian_rows(200, 3, 0.0, 4);
    const auto t = gaussian_rows(200, 3, 0.8, 5);
    Tensor<float> rev({200, 3});
    for (std::size_t i = 0; i < 200; ++i)
        for (std::size_t j = 0; j < 3; ++j) rev[i * 3 + j] = t[(199 - i) * 3 + j];
    CHECK(a_distance(s, t, 1).value == doctest::Approx(a_distance(s, rev, 1).value));
}

TEST_CASE("moment verification on random encoders") {
    for (std::uint64_t seed : {1, 2}) {
        const auto model = random_model(seed);
        const auto target = random_images(64, seed + 10);
        for (auto [g1, g2] : {std::pair{1.0, 0.1}, std::pair{0.0, 1.0}, std::pair{0.7, 0.5}}) {
            const auto r = verify_moments(model, target, g1, g2, 100000, 3);
            CAPTURE(g1);
            CAPTURE(g2);
            CHECK(r.samples == 100000);
            CHECK(r.z_mean.size() == 4);
            CHECK(r.within(3.0));
        }
    }
    const auto model = random_model(1);
    CHECK(kind_of([&] { verify_moments(model, random_images(8, 1), 1, 0.1, 999, 1); }) == ErrorKind::Usage);
}

TEST_CASE("moment verification detects a dropped noise term") {
    const auto model = random_model(3);
    const auto target = random_images(64, 9);
    MomentFormula mutated = [](const Tensor<double>& mu, const Tensor<double>& ls, const Tensor<double>& mh,
                               const Tensor<double>& sh, double g1, double) {
        return closed_form_moments<double>(mu, ls, mh, sh, g1, 0.0);
    };
    const auto r = verify_moments(model, target, 1.0, 0.1, 100000, 3, mutated);
    CHECK(r.max_abs_z > 5.0);
}

TEST_CASE("embedding export") {
    TempDir dir("emb");
    const auto model = random_model(5, 6);
    DomainBatch s{random_images(7, 1), std::vector<int>{0, 1, 2, 3, 4, 5, 6}};
    DomainBatch t{random_images(5, 2), std::nullopt};
    export_embeddings(model, s, t, 1.0, 0.1, 3, dir / "e.csv");
    auto rows = read_csv(dir / "e.csv");
    REQUIRE(rows.size() == 1 + 7 + 5);
    for (const auto& r : rows) CHECK(r.size() == 6 + 2);
    CHECK(rows[1][0] == "source");
    CHECK(rows[1][1] == "0");
    CHECK(rows[8][0] == "target");
    CHECK(rows[8][1] == "-1");

    // Without noise every coordinate is mu + sigma * g1 * h_other, recomputed here.
    export_embeddings(model, s, t, 0.8, 0.0, 3, dir / "f.csv");
    rows = read_csv(dir / "f.csv");
    const auto es = model.encode(s.images), et = model.encode(t.images);
    double worst = 0;
    for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t j = 0; j < 6; ++j) {
            const double want = es.mu[i * 6 + j] + std::exp(double(es.log_sigma[i * 6 + j])) * 0.8 * et.h[(i % 5) * 6 + j];
            const double got = std::stod(rows[1 + i][2 + j]);
            worst = std::max(worst, std::abs(got - want) / std::max(std::abs(want), 1e-3));
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.6g", got);
            CHECK(rows[1 + i][2 + j] == buf);
        }
    CHECK(worst < 5e-6);
}

TEST_CASE("classifier on a separable toy") {
    Rng rng(2);
    DomainBatch toy;
    toy.images = Tensor<float>({200, 1, 8, 8});
    std::vector<int> labels(200);
    for (std::size_t i = 0; i < 200; ++i) {
        labels[i] = static_cast<int>(i % 2);
        for (std::size_t k = 0; k < 64; ++k)
            toy.images[i * 64 + k] =
                static_cast<float>(std::clamp((labels[i] ? 0.7 : 0.3) + 0.1 * rng.normal(), 0.0, 1.0));
    }
    toy.labels = labels;
    ClassifierConfig cc;
    cc.steps = 200;
    auto clf = train_classifier(toy, 2, cc);
    const auto acc = accuracy(clf, toy.images, labels);
    CHECK(acc.overall >= 0.99);
    CHECK(acc.per_class.size() == 2);
    auto again = train_classifier(toy, 2, cc);
    CHECK(again.predict(toy.images) == clf.predict(toy.images));
    for (const auto& p : clf.params()) {
        const auto& q = again.params().at(p.name);
        for (std::size_t i = 0; i < p.value.size(); ++i) REQUIRE(p.value[i] == q.value[i]);
    }
    DomainBatch unlabeled{toy.images, std::nullopt};
    CHECK(kind_of([&] { train_classifier(unlabeled, 2, cc); }) == ErrorKind::Usage);
}

TEST_CASE("adaptation accuracy checks class counts") {
    const auto model = random_model(1);
    Classifier clf(Shape{3, 8, 8}, 3, 1);
    DomainBatch target{random_images(6, 3), std::vector<int>{0, 1, 2, 3, 4, 0}};
    CHECK(kind_of([&] { adaptation_accuracy(model, clf, target, 1, 0.1, 0); }) == ErrorKind::Configuration);
    target.labels = std::vector<int>{0, 1, 2, 0, 1, 2};
    const auto a = adaptation_accuracy(model, clf, target, 1, 0.1, 0);
    CHECK(a.overall >= 0.0);
    CHECK(a.overall <= 1.0);
    CHECK(a.overall == adaptation_accuracy(model, clf, target, 1, 0.1, 0).overall);
}

TEST_CASE("ablation grids") {
    TrainConfig base;
    const auto gamma = ablation_cells(AblationGrid::Gamma, base);
    REQUIRE(gamma.size() == 5);
    CHECK(gamma[0].config.gamma1 == 0.1);
    CHECK(gamma[0].config.gamma2 == 1.0);
    CHECK(gamma[4].config.gamma1 == 1.0);
    CHECK(gamma[4].config.gamma2 == 0.0);
    const auto cons = ablation_cells(AblationGrid::Consistency, base);
    REQUIRE(cons.size() == 4);
    CHECK(cons[0].config.weights.beta1 == 0);
    CHECK(cons[0].config.weights.beta2 == 0);
    CHECK(cons[2].name == "s_only");
    CHECK(cons[2].config.weights.beta1 == 0.1);
    CHECK(cons[2].config.weights.beta2 == 0);
    const auto depth = ablation_cells(AblationGrid::Depth, base);
    REQUIRE(depth.size() == 3);
    CHECK(depth[0].config.net.h_tap == 1);
    CHECK(depth[2].config.net.tap_layer() == 3);
    CHECK(kind_of([] { parse_grid("width"); }) == ErrorKind::Usage);
}

TEST_CASE("a grid of one cell matches a single fit") {
    DatasetSpec spec;
    spec.height = 8;
    spec.width = 8;
    spec.train_size = 48;
    spec.test_size = 24;
    const auto data = gen_synthetic_pair(spec);
    TrainConfig cfg;
    cfg.net = test::tiny_net(3, 8);
    cfg.steps = 4;
    cfg.batch_size = 8;
    cfg.eta1 = 0.003;
    ClassifierConfig cc;
    cc.steps = 30;
    const auto clf = train_classifier(data.source_train, data.classes, cc);
    const auto rows = run_ablations({AblationCell{"single", "only", cfg}}, data, clf, {});
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].error.empty());
    const auto state = fit(cfg, data.source_train, strip_labels(data.target_train), {});
    const auto acc = adaptation_accuracy(state.model, clf, data.target_test, cfg.gamma1, cfg.gamma2, Rng::derive(cfg.seed, 30));
    CHECK(rows[0].adapted_acc == acc.overall);

    // A failing cell is recorded and the grid continues.
    auto bad = cfg;
    bad.batch_size = 0;
    TempDir dir("abl");
    const auto two = run_ablations({AblationCell{"g", "bad", bad}, AblationCell{"g", "ok", cfg}}, data, clf, dir.path, 2);
    CHECK_FALSE(two[0].error.empty());
    CHECK(std::isnan(two[0].adapted_acc));
    CHECK(two[1].adapted_acc == acc.overall);
    write_ablation_csv(dir / "a.csv", two);
    const auto csv = read_csv(dir / "a.csv");
    CHECK(csv.size() == 3);
    CHECK(csv[0][0] == "grid");
}
