#include <doctest.h>

#include <fstream>
#include <sstream>

#include "cdlm/trainer.hpp"
#include "support.hpp"

using namespace cdlm;
using cdlm::test::TempDir;

namespace {

TrainConfig tiny_config() {
    TrainConfig cfg;
    cfg.net = test::tiny_net(3, 8);
    cfg.batch_size = 6;
    cfg.steps = 6;
    cfg.eval_every = 3;
    cfg.seed = 17;
    cfg.eta1 = 0.003;
    return cfg;
}

DomainPair tiny_pair() {
    DatasetSpec spec;
    spec.height = 8;
    spec.width = 8;
    spec.train_size = 48;
    spec.test_size = 16;
    spec.seed = 4;
    return gen_synthetic_pair(spec);
}

std::vector<std::string> lines_of(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);) out.push_back(line);
    return out;
}

std::string bytes_of(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void put_bytes(const std::filesystem::path& p, const std::string& b) { std::ofstream(p, std::ios::binary) << b; }

bool same_params(const ParamSet<float>& a, const ParamSet<float>& b, RoleMask mask = RoleMask::all()) {
    for (const auto& p : a) {
        if (!mask.contains(p.role)) continue;
        const auto& q = b.at(p.name);
        for (std::size_t i = 0; i < p.value.size(); ++i)
            if (p.value[i] != q.value[i]) return false;
    }
    return true;
}

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an error");
    return ErrorKind::Usage;
}

struct Batches {
    Tensor<float> xs;
    UnlabeledImages xt;
};

Batches batches(const DomainPair& p, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    return {sample_rows(p.source_train.images, n, rng), {sample_rows(p.target_train.images, n, rng)}};
}

}  // namespace

TEST_CASE("config text round trip and defaults") {
    TrainConfig d;
    CHECK(d.gamma1 == 1.0);
    CHECK(d.gamma2 == 0.1);
    CHECK(d.weights.lambda1 == 1e-4);
    CHECK(d.weights.lambda2 == 1e-4);
    CHECK(d.weights.beta1 == 0.1);
    CHECK(d.weights.beta2 == 0.01);
    CHECK(d.batch_size == 64);
    CHECK(d.eta2 == 5e-4);
    CHECK(d.momentum == 0.9);

    auto cfg = tiny_config();
    cfg.gamma2 = 0.37;
    cfg.recon = ReconLikelihood::Gaussian;
    const auto back = TrainConfig::parse(cfg.to_text());
    CHECK(back.to_text() == cfg.to_text());
    // Geometry comes from the data, the rest of the network from the text.
    CHECK(back.net.conv == cfg.net.conv);
    CHECK(back.net.z_dim == cfg.net.z_dim);
    CHECK(back.net.disc_hidden == cfg.net.disc_hidden);

    const auto partial = TrainConfig::parse("# comment\n\ngamma1 = 0.5\nsteps=12  # trailing\n");
    CHECK(partial.gamma1 == 0.5);
    CHECK(partial.steps == 12);
    CHECK(partial.gamma2 == 0.1);
}

TEST_CASE("config rejects unknown keys and bad values") {
    try {
        TrainConfig::parse("gamma1=1\nfoo=2\nbar=3\n");
        FAIL("expected usage error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Usage);
        const std::string m = e.what();
        CHECK(m.find("foo") != std::string::npos);
        CHECK(m.find("bar") != std::string::npos);
    }
    CHECK(kind_of([] { TrainConfig::parse("gamma1=abc\n"); }) == ErrorKind::Configuration);
    CHECK(kind_of([] { TrainConfig::parse("batch_size=0\n").validate(); }) == ErrorKind::Configuration);
    CHECK(kind_of([] { TrainConfig::parse("gamma2=-1\n").validate(); }) == ErrorKind::Configuration);
    CHECK(kind_of([] { TrainConfig::parse("eta1=-0.1\n").validate(); }) == ErrorKind::Configuration);
    CHECK(kind_of([] { TrainConfig::parse("momentum=1\n").validate(); }) == ErrorKind::Configuration);
    TempDir dir("cfg");
    CHECK(kind_of([&] { TrainConfig::load(dir / "missing.cfg"); }) == ErrorKind::Io);
}

TEST_CASE("sgd momentum by hand") {
    ParamSet<float> ps;
    ps.add("e", Role::Encoder, Tensor<float>({2}, std::vector<float>{1.0f, -2.0f}));
    ps.add("d", Role::Decoder, Tensor<float>({1}, std::vector<float>{3.0f}));
    SgdMomentum sgd(0.1, 0.5, RoleMask::only(Role::Encoder));
    auto set_grads = [&] {
        ps.at("e").value.grad()[0] = 2.0f;
        ps.at("e").value.grad()[1] = -4.0f;
        ps.at("d").value.grad()[0] = 1.0f;
    };
    set_grads();
    sgd.step(ps);
    // v = g, w = w - 0.1 g
    CHECK(ps.at("e").value[0] == doctest::Approx(0.8));
    CHECK(ps.at("e").value[1] == doctest::Approx(-1.6));
    CHECK(ps.at("d").value[0] == 3.0f);
    set_grads();
    sgd.step(ps);
    // v = 0.5 * 2 + 2 = 3
    CHECK(ps.at("e").value[0] == doctest::Approx(0.5));
    CHECK(ps.at("e").value[1] == doctest::Approx(-1.0));
}

TEST_CASE("adam by hand") {
    ParamSet<float> ps;
    ps.add("d", Role::Decoder, Tensor<float>({1}, std::vector<float>{1.0f}));
    ps.add("e", Role::Encoder, Tensor<float>({1}, std::vector<float>{1.0f}));
    Adam adam(0.1, 0.9, 0.999, 1e-8, RoleMask::only(Role::Decoder));
    double m = 0, v = 0, w = 1.0;
    const double grads[] = {0.5, -0.2, 0.3};
    for (int t = 1; t <= 3; ++t) {
        const double g = grads[t - 1];
        ps.at("d").value.grad()[0] = static_cast<float>(g);
        ps.at("e").value.grad()[0] = 1.0f;
        adam.step(ps);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
        w -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
        CHECK(ps.at("d").value[0] == doctest::Approx(w).epsilon(1e-5));
    }
    CHECK(adam.steps() == 3);
    CHECK(ps.at("e").value[0] == 1.0f);
}

TEST_CASE("zero rates leave parameters unchanged but report losses") {
    auto cfg = tiny_config();
    cfg.eta1 = 0;
    cfg.eta2 = 0;
    const auto pair = tiny_pair();
    TrainState state(cfg, pair.source_train.image_shape());
    const auto before = state.model.params();
    const auto b = batches(pair, 6, 1);
    const auto report = train_step(state, cfg, b.xs, b.xt);
    CHECK(same_params(before, state.model.params()));
    CHECK(report.all_finite());
    CHECK(report.rec > 0);
    CHECK(report.kl_st > 0);
    CHECK(report.adv > 0);
    CHECK(state.step == 1);
}

TEST_CASE("single step is bit-identical across runs") {
    const auto cfg = tiny_config();
    const auto pair = tiny_pair();
    const auto b = batches(pair, 6, 2);
    TrainState a(cfg, pair.source_train.image_shape()), c(cfg, pair.source_train.image_shape());
    const auto ra = train_step(a, cfg, b.xs, b.xt);
    const auto rc = train_step(c, cfg, b.xs, b.xt);
    CHECK(ra.csv_row(1) == rc.csv_row(1));
    CHECK(same_params(a.model.params(), c.model.params()));
    CHECK(a.rng.next_u64() == c.rng.next_u64());
    CHECK_FALSE(same_params(a.model.params(), TrainState(cfg, pair.source_train.image_shape()).model.params()));
}

TEST_CASE("update partition") {
    auto cfg = tiny_config();
    cfg.weights.lambda1 = 0;
    cfg.weights.lambda2 = 0;
    const auto pair = tiny_pair();
    const auto b = batches(pair, 6, 3);
    const auto enc = RoleMask::only(Role::Encoder);
    const auto dec = RoleMask::only(Role::Decoder);
    {
        TrainState s(cfg, pair.source_train.image_shape());
        const auto before = s.model.params();
        for (int i = 0; i < 3; ++i) train_step(s, cfg, b.xs, b.xt, Detach{true, false, false});
        CHECK(same_params(before, s.model.params(), enc));
        CHECK_FALSE(same_params(before, s.model.params(), dec));
    }
    {
        auto cfg2 = tiny_config();
        TrainState s(cfg2, pair.source_train.image_shape());
        const auto before = s.model.params();
        for (int i = 0; i < 3; ++i) train_step(s, cfg2, b.xs, b.xt, Detach{false, true, true});
        CHECK(same_params(before, s.model.params(), dec));
        CHECK_FALSE(same_params(before, s.model.params(), enc));
        CHECK_FALSE(same_params(before, s.model.params(), RoleMask::only(Role::Discriminator)));
    }
}

TEST_CASE("train_step errors") {
    const auto cfg = tiny_config();
    const auto pair = tiny_pair();
    TrainState s(cfg, pair.source_train.image_shape());
    const auto b = batches(pair, 6, 4);
    const auto c = batches(pair, 5, 4);
    CHECK(kind_of([&] { train_step(s, cfg, b.xs, c.xt); }) == ErrorKind::Dimension);

    auto& w = s.model.params().at("enc.conv0.w").value;
    w[0] = std::numeric_limits<float>::quiet_NaN();
    const auto before = s.model.params();
    CHECK_THROWS_AS(train_step(s, cfg, b.xs, b.xt), NonFiniteLoss);
    try {
        train_step(s, cfg, b.xs, b.xt);
    } catch (const NonFiniteLoss& e) {
        CHECK(e.kind() == ErrorKind::NonFinite);
    }
    // Everything except the poisoned entry is untouched.
    w[0] = 0;
    auto after = s.model.params();
    auto expect = before;
    expect.at("enc.conv0.w").value[0] = 0;
    CHECK(same_params(expect, after));
    CHECK(s.step == 0);
}

TEST_CASE("checkpoint round trip") {
    TempDir dir("ckpt");
    auto cfg = tiny_config();
    const auto pair = tiny_pair();
    TrainState s(cfg, pair.source_train.image_shape());
    for (int i = 0; i < 3; ++i) {
        const auto b = batches(pair, 6, 10 + i);
        train_step(s, cfg, b.xs, b.xt);
    }
    save_checkpoint(dir / "a.bin", s, cfg);
    auto loaded = load_checkpoint(dir / "a.bin");
    CHECK(loaded.config.to_text() == cfg.to_text());
    CHECK(loaded.state.step == 3);
    CHECK(same_params(s.model.params(), loaded.state.model.params()));
    CHECK(loaded.state.sgd.velocity() == s.sgd.velocity());
    CHECK(loaded.state.adam.first() == s.adam.first());
    CHECK(loaded.state.adam.second() == s.adam.second());
    CHECK(loaded.state.adam.steps() == s.adam.steps());
    CHECK(loaded.state.model.config() == s.model.config());
    auto r1 = s.rng, r2 = loaded.state.rng;
    CHECK(r1.next_u64() == r2.next_u64());
    // Saving the loaded state reproduces the file byte for byte.
    save_checkpoint(dir / "b.bin", loaded.state, loaded.config);
    CHECK(bytes_of(dir / "a.bin") == bytes_of(dir / "b.bin"));
}

TEST_CASE("corrupt checkpoints are format errors") {
    TempDir dir("ckbad");
    const auto cfg = tiny_config();
    TrainState s(cfg, Shape{3, 8, 8});
    save_checkpoint(dir / "good.bin", s, cfg);
    const auto good = bytes_of(dir / "good.bin");
    auto load = [&](const std::string& bytes) {
        put_bytes(dir / "x.bin", bytes);
        return kind_of([&] { load_checkpoint(dir / "x.bin"); });
    };
    std::string b = good;
    b[0] = 'X';
    CHECK(load(b) == ErrorKind::Format);
    b = good;
    b[4] = 2;
    CHECK(load(b) == ErrorKind::Format);
    b = good;
    b[b.size() / 2] ^= 0x40;
    CHECK(load(b) == ErrorKind::Format);
    CHECK(load(good.substr(0, good.size() - 3)) == ErrorKind::Format);
    CHECK(load(good.substr(0, 10)) == ErrorKind::Format);
    CHECK(load("") == ErrorKind::Format);
    CHECK(kind_of([&] { load_checkpoint(dir / "absent.bin"); }) == ErrorKind::Io);
}

TEST_CASE("fit with zero steps writes the initial checkpoint only") {
    TempDir dir("fit0");
    auto cfg = tiny_config();
    cfg.steps = 0;
    const auto pair = tiny_pair();
    fit(cfg, pair.source_train, strip_labels(pair.target_train), dir.path);
    std::vector<std::string> ckpts;
    for (const auto& e : std::filesystem::directory_iterator(dir.path))
        if (e.path().extension() == ".bin") ckpts.push_back(e.path().filename().string());
    CHECK(ckpts == std::vector<std::string>{"checkpoint_000000.bin"});
    CHECK(lines_of(dir / "loss_trace.csv").size() == 1);
}

TEST_CASE("fit trace rows, checkpoints and periodic eval") {
    TempDir dir("fit");
    auto cfg = tiny_config();
    cfg.steps = 7;
    const auto pair = tiny_pair();
    const auto target = strip_labels(pair.target_train);
    FitHooks hooks;
    hooks.eval_header = "marker";
    hooks.eval = [](const TrainState& s) { return std::to_string(s.step * 10); };
    long seen = 0;
    hooks.on_step = [&](const TrainState&, const LossReport& r) {
        ++seen;
        CHECK(r.all_finite());
    };
    const auto preview = strip_labels(pair.target_test);
    const auto s = fit(cfg, pair.source_train, target, dir.path, hooks, std::nullopt, &preview);
    CHECK(s.step == 7);
    CHECK(seen == 7);
    const auto trace = lines_of(dir / "loss_trace.csv");
    REQUIRE(trace.size() == 8);
    CHECK(trace[0] == LossReport::csv_header());
    CHECK(trace[1].rfind("1,", 0) == 0);
    CHECK(trace[7].rfind("7,", 0) == 0);
    for (long k : {0, 3, 6, 7}) CHECK(std::filesystem::exists(dir / checkpoint_name(k)));
    CHECK_FALSE(std::filesystem::exists(dir / checkpoint_name(5)));
    CHECK(lines_of(dir / "eval.csv") == std::vector<std::string>{"step,marker", "0,0", "3,30", "6,60", "7,70"});
    CHECK(std::filesystem::exists(dir / "adapted_000007.ppm"));
    CHECK(kind_of([&] { fit(cfg, pair.source_train, UnlabeledImages{}, dir.path); }) == ErrorKind::Usage);
}

TEST_CASE("resume reproduces the uninterrupted run") {
    TempDir a("resume_a"), b("resume_b"), c("resume_c");
    auto cfg = tiny_config();
    cfg.steps = 6;
    const auto pair = tiny_pair();
    const auto target = strip_labels(pair.target_train);
    const auto full = fit(cfg, pair.source_train, target, a.path);

    auto half = cfg;
    half.steps = 3;
    fit(half, pair.source_train, target, b.path);
    auto ck = resume(b / checkpoint_name(3));
    const auto resumed = fit(cfg, pair.source_train, target, c.path, {}, std::move(ck.state));

    CHECK(same_params(full.model.params(), resumed.model.params()));
    const auto ta = lines_of(a / "loss_trace.csv"), tc = lines_of(c / "loss_trace.csv");
    REQUIRE(ta.size() == 7);
    REQUIRE(tc.size() == 4);
    for (int i = 1; i <= 3; ++i) CHECK(ta[3 + i] == tc[i]);
    CHECK(bytes_of(a / checkpoint_name(6)) == bytes_of(c / checkpoint_name(6)));
}

TEST_CASE("runs are fully determined by seed, config and data") {
    TempDir a("det_a"), b("det_b");
    const auto cfg = tiny_config();
    const auto pair = tiny_pair();
    const auto target = strip_labels(pair.target_train);
    fit(cfg, pair.source_train, target, a.path);
    fit(cfg, pair.source_train, target, b.path);
    for (const auto& e : std::filesystem::directory_iterator(a.path))
        CHECK(bytes_of(e.path()) == bytes_of(b / e.path().filename().string()));
}

TEST_CASE("total_theta halves within 500 steps on the synthetic pair") {
    TrainConfig cfg;
    cfg.steps = 500;
    cfg.eval_every = 500;
    const auto pair = gen_synthetic_pair(DatasetSpec{});
    std::vector<double> theta;
    FitHooks hooks;
    hooks.on_step = [&](const TrainState&, const LossReport& r) { theta.push_back(r.total_theta); };
    fit(cfg, pair.source_train, strip_labels(pair.target_train), {}, hooks);
    REQUIRE(theta.size() == 500);
    auto window = [&](std::size_t end) {
        double s = 0;
        for (std::size_t i = end - 10; i < end; ++i) s += theta[i];
        return s / 10;
    };
    MESSAGE("total_theta moving average " << window(10) << " -> " << window(500));
    CHECK(window(500) <= 0.5 * window(10));
}
