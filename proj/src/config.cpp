#include "cdlm/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace cdlm {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double to_double(const std::string& key, const std::string& v) {
    double out = 0;
    const auto* end = v.data() + v.size();
    auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || ptr != end) fail(ErrorKind::Configuration, key + ": '" + v + "' is not a number");
    return out;
}

template <typename I>
I to_int(const std::string& key, const std::string& v) {
    I out = 0;
    const auto* end = v.data() + v.size();
    auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || ptr != end) fail(ErrorKind::Configuration, key + ": '" + v + "' is not an integer");
    return out;
}

std::string conv_text(const std::vector<ConvLayerSpec>& conv) {
    std::string out;
    for (const auto& l : conv) {
        if (!out.empty()) out += ',';
        out += std::to_string(l.out_channels) + ':' + std::to_string(l.kernel) + ':' + std::to_string(l.stride);
    }
    return out;
}

std::vector<ConvLayerSpec> parse_conv(const std::string& v) {
    std::vector<ConvLayerSpec> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        ConvLayerSpec l;
        char c1 = 0, c2 = 0;
        std::istringstream is(trim(item));
        if (!(is >> l.out_channels >> c1 >> l.kernel >> c2 >> l.stride) || c1 != ':' || c2 != ':' || !is.eof()) {
            fail(ErrorKind::Configuration, "conv: layer '" + item + "' is not channels:kernel:stride");
        }
        out.push_back(l);
    }
    if (out.empty()) fail(ErrorKind::Configuration, "conv: empty layer list");
    return out;
}

}  // namespace

void TrainConfig::validate() const {
    auto bad = [](const std::string& m) { fail(ErrorKind::Configuration, m); };
    if (!(gamma1 >= 0) || !(gamma2 >= 0)) bad("gamma1 and gamma2 must be non-negative");
    if (!(weights.lambda1 >= 0) || !(weights.lambda2 >= 0) || !(weights.beta1 >= 0) || !(weights.beta2 >= 0)) {
        bad("loss weights must be non-negative");
    }
    // Zero rates are allowed: a frozen step still reports losses.
    if (!(eta1 >= 0) || !(eta2 >= 0)) bad("learning rates must be non-negative");
    if (!(momentum >= 0 && momentum < 1)) bad("momentum must lie in [0, 1)");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1)) bad("adam betas must lie in [0, 1)");
    if (!(adam_eps > 0)) bad("adam_eps must be positive");
    if (batch_size < 1) bad("batch_size must be at least 1");
    if (steps < 0) bad("steps must be non-negative");
    if (eval_every < 1) bad("eval_every must be at least 1");
    if (!(grl_scale >= 0)) bad("grl_scale must be non-negative");
    net.validate();
}

std::string TrainConfig::to_text() const {
    std::ostringstream os;
    os << "gamma1=" << fmt(gamma1) << '\n'
       << "gamma2=" << fmt(gamma2) << '\n'
       << "lambda1=" << fmt(weights.lambda1) << '\n'
       << "lambda2=" << fmt(weights.lambda2) << '\n'
       << "beta1=" << fmt(weights.beta1) << '\n'
       << "beta2=" << fmt(weights.beta2) << '\n'
       << "eta1=" << fmt(eta1) << '\n'
       << "eta2=" << fmt(eta2) << '\n'
       << "momentum=" << fmt(momentum) << '\n'
       << "adam_beta1=" << fmt(adam_beta1) << '\n'
       << "adam_beta2=" << fmt(adam_beta2) << '\n'
       << "adam_eps=" << fmt(adam_eps) << '\n'
       << "batch_size=" << batch_size << '\n'
       << "steps=" << steps << '\n'
       << "seed=" << seed << '\n'
       << "grl_scale=" << fmt(grl_scale) << '\n'
       << "eval_every=" << eval_every << '\n'
       << "recon=" << (recon == ReconLikelihood::Bernoulli ? "bernoulli" : "gaussian") << '\n'
       << "conv=" << conv_text(net.conv) << '\n'
       << "z_dim=" << net.z_dim << '\n'
       << "disc_hidden=" << net.disc_hidden << '\n'
       << "slope=" << fmt(net.slope) << '\n'
       << "h_tap=" << net.h_tap << '\n';
    return os.str();
}

void TrainConfig::set(const std::string& key, const std::string& raw) {
    const auto v = trim(raw);
    if (key == "gamma1") gamma1 = to_double(key, v);
    else if (key == "gamma2") gamma2 = to_double(key, v);
    else if (key == "lambda1") weights.lambda1 = to_double(key, v);
    else if (key == "lambda2") weights.lambda2 = to_double(key, v);
    else if (key == "beta1") weights.beta1 = to_double(key, v);
    else if (key == "beta2") weights.beta2 = to_double(key, v);
    else if (key == "eta1") eta1 = to_double(key, v);
    else if (key == "eta2") eta2 = to_double(key, v);
    else if (key == "momentum") momentum = to_double(key, v);
    else if (key == "adam_beta1") adam_beta1 = to_double(key, v);
    else if (key == "adam_beta2") adam_beta2 = to_double(key, v);
    else if (key == "adam_eps") adam_eps = to_double(key, v);
    else if (key == "batch_size") batch_size = to_int<std::size_t>(key, v);
    else if (key == "steps") steps = to_int<long>(key, v);
    else if (key == "seed") seed = to_int<std::uint64_t>(key, v);
    else if (key == "grl_scale") grl_scale = to_double(key, v);
    else if (key == "eval_every") eval_every = to_int<long>(key, v);
    else if (key == "recon") {
        if (v == "bernoulli") recon = ReconLikelihood::Bernoulli;
        else if (v == "gaussian") recon = ReconLikelihood::Gaussian;
        else fail(ErrorKind::Configuration, "recon: expected bernoulli or gaussian, got '" + v + "'");
    } else if (key == "conv") net.conv = parse_conv(v);
    else if (key == "z_dim") net.z_dim = to_int<std::size_t>(key, v);
    else if (key == "disc_hidden") net.disc_hidden = to_int<std::size_t>(key, v);
    else if (key == "slope") net.slope = to_double(key, v);
    else if (key == "h_tap") net.h_tap = to_int<std::size_t>(key, v);
    else fail(ErrorKind::Usage, "unknown config key: " + key);
}

TrainConfig TrainConfig::parse(const std::string& text) {
    TrainConfig cfg;
    std::istringstream in(text);
    std::string line, unknown;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            fail(ErrorKind::Configuration, "line " + std::to_string(lineno) + ": expected key=value");
        }
        const auto key = trim(line.substr(0, eq));
        try {
            cfg.set(key, line.substr(eq + 1));
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::Usage) throw;
            unknown += (unknown.empty() ? "" : ", ") + key;
        }
    }
    if (!unknown.empty()) fail(ErrorKind::Usage, "unknown config keys: " + unknown);
    return cfg;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Io, "cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

}  // namespace cdlm
