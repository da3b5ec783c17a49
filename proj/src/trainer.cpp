#include "cdlm/trainer.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>

namespace cdlm {

namespace fs = std::filesystem;

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr RoleMask kPhiXi = RoleMask::only(Role::Encoder) | Role::Discriminator;
constexpr RoleMask kTheta = RoleMask::only(Role::Decoder);

NetConfig net_for(const TrainConfig& cfg, const Shape& image_shape) {
    if (image_shape.size() != 3) fail(ErrorKind::Dimension, "image shape must be [c, h, w]");
    NetConfig net = cfg.net;
    net.channels = image_shape[0];
    net.height = image_shape[1];
    net.width = image_shape[2];
    return net;
}

}  // namespace

TrainState::TrainState(const TrainConfig& cfg, const Shape& image_shape)
    : model(net_for(cfg, image_shape)),
      sgd(cfg.eta1, cfg.momentum, kPhiXi),
      adam(cfg.eta2, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, kTheta),
      rng(Rng::derive(cfg.seed, 11)) {
    cfg.validate();
    model.initialize(Rng::derive(cfg.seed, 10));
}

TrainState::TrainState(const TrainConfig& cfg, Model<float> m)
    : model(std::move(m)),
      sgd(cfg.eta1, cfg.momentum, kPhiXi),
      adam(cfg.eta2, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, kTheta),
      rng(Rng::derive(cfg.seed, 11)) {}

template <typename T>
StepLosses<T> build_losses(const Model<T>& model, BoundParams<T>& p, Var<T> xs, Var<T> xt, Var<T> eps_s,
                           Var<T> eps_t, const TrainConfig& cfg, Detach detach) {
    const double g1 = cfg.gamma1, g2 = cfg.gamma2;
    const auto es = model.encode(p, xs);
    const auto et = model.encode(p, xt);

    const auto z_st = modulate(es.info, Domain::Source, et.rep, Domain::Target, eps_s, g1, g2);
    const auto z_ts = modulate(et.info, Domain::Target, es.rep, Domain::Source, eps_t, g1, g2);
    const auto xhat_st = model.decode(p, z_st.z);
    const auto xtilde_s = model.decode(p, rep_to_latent(es.rep, eps_s, g1, g2));
    const auto xhat_ts = model.decode(p, z_ts.z);
    const auto xtilde_t = model.decode(p, rep_to_latent(et.rep, eps_t, g1, g2));

    LossTerms<T> t;
    t.rec = reconstruction_loss(xhat_st, xs, cfg.recon);
    const auto [mu_st, sigma_st] = modulated_moments(es.info, et.rep, g1, g2);
    const auto [mu_ts, sigma_ts] = modulated_moments(et.info, es.rep, g1, g2);
    t.kl_st = kl_standard_normal(mu_st, sigma_st);
    t.kl_ts = kl_standard_normal(mu_ts, sigma_ts);
    t.adv = adversarial_loss(model.discriminate(p, es.rep, cfg.grl_scale), model.discriminate(p, et.rep, cfg.grl_scale));
    std::tie(t.cons_s, t.cons_t) = consistency_loss(xhat_st, xtilde_s, xhat_ts, xtilde_t);

    if (detach.adversarial) t.adv = ops::detach(t.adv);
    if (detach.reconstruction) t.rec = ops::detach(t.rec);
    if (detach.consistency) {
        t.cons_s = ops::detach(t.cons_s);
        t.cons_t = ops::detach(t.cons_t);
    }
    const auto [phi, theta] = aggregate(t, cfg.weights);
    return {t, phi, theta};
}

template StepLosses<float> build_losses(const Model<float>&, BoundParams<float>&, Var<float>, Var<float>,
                                        Var<float>, Var<float>, const TrainConfig&, Detach);
template StepLosses<double> build_losses(const Model<double>&, BoundParams<double>&, Var<double>, Var<double>,
                                         Var<double>, Var<double>, const TrainConfig&, Detach);

Tensor<float> sample_rows(const Tensor<float>& images, std::size_t count, Rng& rng) {
    const std::size_t n = images.dim(0), per = images.size() / n;
    Shape shape = images.shape();
    shape[0] = count;
    std::vector<float> out(count * per);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t r = rng.below(n);
        std::copy_n(images.data().data() + r * per, per, out.data() + i * per);
    }
    return {std::move(shape), std::move(out)};
}

LossReport train_step(TrainState& state, const TrainConfig& cfg, const Tensor<float>& source,
                      const UnlabeledImages& target, Detach detach) {
    if (source.rank() != 4 || target.images.rank() != 4 || source.dim(0) != target.images.dim(0)) {
        fail(ErrorKind::Dimension, "train_step needs equal-size [n, c, h, w] batches, got " +
                                       shape_str(source.shape()) + " and " + shape_str(target.images.shape()));
    }
    const std::size_t batch = source.dim(0), z = state.model.config().z_dim;
    auto eps_s = state.rng.normal_tensor<float>({batch, z});
    auto eps_t = state.rng.normal_tensor<float>({batch, z});

    auto& params = state.model.params();
    params.zero_grad();
    LossReport report;
    constexpr double nan = std::numeric_limits<double>::quiet_NaN();
    try {
        Graph<float> g;
        auto p = state.model.bind(g);
        const auto L = build_losses(state.model, p, g.input(source), g.input(target.images), g.input(std::move(eps_s)),
                                    g.input(std::move(eps_t)), cfg, detach);
        report = report_of(L.terms, L.total_phi, L.total_theta);
        if (!report.all_finite()) throw NonFiniteLoss("non-finite loss at step " + std::to_string(state.step), report);
        g.backward(L.total_phi, kPhiXi);
        g.backward(L.total_theta, kTheta);
    } catch (const NonFiniteLoss&) {
        params.zero_grad();
        throw;
    } catch (const Error& e) {
        if (e.kind() != ErrorKind::NonFinite) throw;
        params.zero_grad();
        report = {nan, nan, nan, nan, nan, nan, nan, nan};
        throw NonFiniteLoss("step " + std::to_string(state.step) + ": " + e.what(), report);
    }
    for (const auto& prm : params) {
        if (prm.value.has_grad() && !prm.value.all_finite()) {
            fail(ErrorKind::NonFinite, "parameter " + prm.name + " became non-finite");
        }
        for (float gv : prm.value.grad()) {
            if (!std::isfinite(gv)) throw NonFiniteLoss("non-finite gradient for " + prm.name, report);
        }
    }
    state.sgd.step(params);
    state.adam.step(params);
    ++state.step;
    return report;
}

// ---- checkpoints ---------------------------------------------------------

namespace {

class Writer {
   public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        buf_ += s;
    }
    void floats(std::span<const float> v) {
        for (float f : v) u32(std::bit_cast<std::uint32_t>(f));
    }
    void tensor(const std::string& name, const Shape& shape, std::span<const float> data) {
        str(name);
        u32(static_cast<std::uint32_t>(shape.size()));
        for (auto d : shape) u32(static_cast<std::uint32_t>(d));
        floats(data);
    }
    std::string& bytes() { return buf_; }

   private:
    std::string buf_;
};

class Reader {
   public:
    Reader(const std::string& bytes, std::size_t end, std::string path) : b_(bytes), end_(end), path_(std::move(path)) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        const std::uint64_t lo = u32();
        return lo | (std::uint64_t(u32()) << 32);
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        const auto n = u32();
        need(n);
        std::string s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::vector<float> floats(std::size_t n) {
        need(n * 4);
        std::vector<float> out(n);
        for (auto& f : out) f = std::bit_cast<float>(u32());
        return out;
    }
    std::size_t pos() const { return pos_; }
    [[noreturn]] void error(const std::string& what) const {
        fail(ErrorKind::Format, path_ + ": " + what + " at byte offset " + std::to_string(pos_));
    }

   private:
    void need(std::size_t n) {
        if (end_ - pos_ < n) error("truncated record (need " + std::to_string(n) + " bytes)");
    }

    const std::string& b_;
    std::size_t end_;
    std::size_t pos_ = 0;
    std::string path_;
};

std::uint64_t fnv1a(const char* data, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 0x100000001b3ull;
    }
    return h;
}

void write_slots(Writer& w, const std::string& prefix, const std::map<std::string, std::vector<float>>& slots,
                 const ParamSet<float>& params) {
    for (const auto& [name, v] : slots) w.tensor(prefix + name, params.at(name).value.shape(), v);
}

}  // namespace

void save_checkpoint(const fs::path& path, const TrainState& state, const TrainConfig& cfg) {
    Writer w;
    w.bytes() = "CDLM";
    w.u32(kCheckpointVersion);
    const auto& net = state.model.config();
    w.u32(static_cast<std::uint32_t>(net.channels));
    w.u32(static_cast<std::uint32_t>(net.height));
    w.u32(static_cast<std::uint32_t>(net.width));
    w.u32(static_cast<std::uint32_t>(net.conv.size()));
    for (const auto& l : net.conv) {
        w.u32(static_cast<std::uint32_t>(l.out_channels));
        w.u32(static_cast<std::uint32_t>(l.kernel));
        w.u32(static_cast<std::uint32_t>(l.stride));
    }
    w.u32(static_cast<std::uint32_t>(net.z_dim));
    w.u32(static_cast<std::uint32_t>(net.disc_hidden));
    w.f64(net.slope);
    w.u32(static_cast<std::uint32_t>(net.h_tap));

    w.str(cfg.to_text());
    w.u64(static_cast<std::uint64_t>(state.step));
    w.u64(static_cast<std::uint64_t>(state.adam.steps()));
    w.str(state.rng.state());

    const auto& params = state.model.params();
    const std::size_t count = params.size() + state.sgd.velocity().size() + state.adam.first().size() +
                              state.adam.second().size();
    w.u32(static_cast<std::uint32_t>(count));
    for (const auto& p : params) w.tensor("param/" + p.name, p.value.shape(), p.value.data());
    write_slots(w, "opt/momentum/", state.sgd.velocity(), params);
    write_slots(w, "opt/adam_m/", state.adam.first(), params);
    write_slots(w, "opt/adam_v/", state.adam.second(), params);
    w.u64(fnv1a(w.bytes().data(), w.bytes().size()));

    const auto tmp = fs::path(path.string() + ".tmp");
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) fail(ErrorKind::Io, "cannot write checkpoint " + tmp.string());
        os.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
        if (!os) fail(ErrorKind::Io, "write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) fail(ErrorKind::Io, "cannot move checkpoint to " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open checkpoint " + path.string());
    const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    const auto where = path.string();
    if (bytes.size() < 8 || bytes.compare(0, 4, "CDLM") != 0) {
        fail(ErrorKind::Format, where + ": bad magic at byte offset 0 (expected \"CDLM\")");
    }
    if (bytes.size() < 16) fail(ErrorKind::Format, where + ": truncated header");
    Reader r(bytes, bytes.size() - 8, where);
    r.u32();  // magic
    if (const auto version = r.u32(); version != kCheckpointVersion) {
        fail(ErrorKind::Format, where + ": unsupported version " + std::to_string(version) + " at byte offset 4 (expected " +
                                    std::to_string(kCheckpointVersion) + ")");
    }
    Reader tail(bytes, bytes.size(), where);
    std::uint64_t stored = 0;
    for (int i = 0; i < 8; ++i) stored |= std::uint64_t(static_cast<unsigned char>(bytes[bytes.size() - 8 + i])) << (8 * i);
    if (stored != fnv1a(bytes.data(), bytes.size() - 8)) {
        fail(ErrorKind::Format, where + ": checksum mismatch at byte offset " + std::to_string(bytes.size() - 8));
    }

    NetConfig net;
    net.channels = r.u32();
    net.height = r.u32();
    net.width = r.u32();
    const auto layers = r.u32();
    if (layers == 0 || layers > 64) r.error("implausible layer count " + std::to_string(layers));
    net.conv.resize(layers);
    for (auto& l : net.conv) {
        l.out_channels = r.u32();
        l.kernel = r.u32();
        l.stride = r.u32();
    }
    net.z_dim = r.u32();
    net.disc_hidden = r.u32();
    net.slope = r.f64();
    net.h_tap = r.u32();

    TrainConfig cfg;
    try {
        cfg = TrainConfig::parse(r.str());
        net.validate();
    } catch (const Error& e) {
        r.error(std::string("invalid embedded configuration (") + e.what() + ")");
    }
    cfg.net = net;
    cfg.net.channels = NetConfig{}.channels;
    cfg.net.height = NetConfig{}.height;
    cfg.net.width = NetConfig{}.width;

    Model<float> model(net);
    TrainState state(cfg, std::move(model));
    state.step = static_cast<long>(r.u64());
    state.adam.set_steps(static_cast<long>(r.u64()));
    try {
        state.rng.set_state(r.str());
    } catch (const Error&) {
        r.error("malformed generator state");
    }

    const auto count = r.u32();
    std::size_t loaded = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name = r.str();
        const auto rank = r.u32();
        if (rank == 0 || rank > 8) r.error("implausible rank " + std::to_string(rank) + " for " + name);
        Shape shape(rank);
        for (auto& d : shape) d = r.u32();
        const auto n = shape_size(shape);
        auto data = r.floats(n);
        auto take = [&](const std::string& prefix) -> const Param<float>* {
            if (name.rfind(prefix, 0) != 0) return nullptr;
            const auto* p = state.model.params().find(name.substr(prefix.size()));
            if (!p) r.error("unknown tensor " + name);
            if (p->value.shape() != shape) r.error("shape mismatch for " + name);
            return p;
        };
        if (take("param/")) {
            auto& p = state.model.params().at(name.substr(6));
            std::copy(data.begin(), data.end(), p.value.data().begin());
            ++loaded;
        } else if (take("opt/momentum/")) {
            state.sgd.velocity()[name.substr(13)] = std::move(data);
        } else if (take("opt/adam_m/")) {
            state.adam.first()[name.substr(11)] = std::move(data);
        } else if (take("opt/adam_v/")) {
            state.adam.second()[name.substr(11)] = std::move(data);
        } else {
            r.error("unknown tensor " + name);
        }
    }
    if (loaded != state.model.params().size()) r.error("checkpoint is missing parameters");
    if (r.pos() != bytes.size() - 8) r.error("trailing bytes before checksum");
    for (const auto& p : state.model.params()) {
        if (!p.value.all_finite()) fail(ErrorKind::Format, where + ": non-finite values in " + p.name);
    }
    state.model.mark_initialized();
    return {cfg, std::move(state)};
}

Checkpoint resume(const fs::path& checkpoint) { return load_checkpoint(checkpoint); }

std::string checkpoint_name(long step) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "checkpoint_%06ld.bin", step);
    return buf;
}

// ---- fit -----------------------------------------------------------------

namespace {

std::ofstream open_out(const fs::path& path) {
    std::ofstream os(path);
    if (!os) fail(ErrorKind::Io, "cannot write " + path.string());
    return os;
}

void write_preview(const fs::path& path, const TrainState& state, const TrainConfig& cfg, const UnlabeledImages& preview) {
    const std::size_t n = std::min<std::size_t>(preview.size(), 16);
    const std::size_t per = preview.images.size() / preview.size();
    Shape shape = preview.images.shape();
    shape[0] = n;
    Tensor<float> x(shape, std::vector<float>(preview.images.data().begin(), preview.images.data().begin() + n * per));
    Rng rng(Rng::derive(cfg.seed, 12));
    const auto eps = rng.normal_tensor<float>({n, state.model.config().z_dim});
    const auto adapted = state.model.test_mode_adapt(x, eps, cfg.gamma1, cfg.gamma2);
    shape[0] = 2 * n;
    std::vector<float> both(x.data().begin(), x.data().end());
    both.insert(both.end(), adapted.data().begin(), adapted.data().end());
    write_mosaic(path, Tensor<float>(shape, std::move(both)), n);
}

}  // namespace

TrainState fit(const TrainConfig& cfg, const DomainBatch& source, const UnlabeledImages& target, const fs::path& out_dir,
               const FitHooks& hooks, std::optional<TrainState> resume_from, const UnlabeledImages* preview) {
    cfg.validate();
    if (source.size() == 0 || target.size() == 0) fail(ErrorKind::Usage, "fit needs non-empty source and target data");
    if (source.image_shape() != Shape{target.images.dim(1), target.images.dim(2), target.images.dim(3)}) {
        fail(ErrorKind::Dimension, "source and target image shapes differ");
    }
    TrainState state = resume_from ? std::move(*resume_from) : TrainState(cfg, source.image_shape());
    if (state.model.config().image_shape() != source.image_shape()) {
        fail(ErrorKind::Configuration, "checkpoint image shape " + shape_str(state.model.config().image_shape()) +
                                           " does not match data " + shape_str(source.image_shape()));
    }

    const bool writing = !out_dir.empty();
    std::ofstream trace, evals;
    if (writing) {
        std::error_code ec;
        fs::create_directories(out_dir, ec);
        if (ec) fail(ErrorKind::Io, "cannot create " + out_dir.string() + ": " + ec.message());
        trace = open_out(out_dir / "loss_trace.csv");
        trace << LossReport::csv_header() << '\n';
        if (hooks.eval) {
            evals = open_out(out_dir / "eval.csv");
            evals << "step," << hooks.eval_header << '\n';
        }
    }
    auto checkpoint = [&] {
        if (!writing) return;
        save_checkpoint(out_dir / checkpoint_name(state.step), state, cfg);
        if (hooks.eval) evals << state.step << ',' << hooks.eval(state) << std::endl;
        if (preview && preview->size() > 0) {
            char name[40];
            std::snprintf(name, sizeof name, "adapted_%06ld.ppm", state.step);
            write_preview(out_dir / name, state, cfg, *preview);
        }
    };

    checkpoint();
    while (state.step < cfg.steps) {
        auto xs = sample_rows(source.images, cfg.batch_size, state.rng);
        UnlabeledImages xt{sample_rows(target.images, cfg.batch_size, state.rng)};
        const auto report = train_step(state, cfg, xs, xt);
        if (writing) {
            trace << report.csv_row(state.step) << '\n';
            if (!trace) fail(ErrorKind::Io, "write failed for " + (out_dir / "loss_trace.csv").string());
        }
        if (hooks.on_step) hooks.on_step(state, report);
        if (state.step % cfg.eval_every == 0 || state.step == cfg.steps) checkpoint();
    }
    if (writing) trace.flush();
    return state;
}

}  // namespace cdlm
