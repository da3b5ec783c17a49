#include "cdlm/model.hpp"

#include <cmath>

#include "cdlm/rng.hpp"

namespace cdlm {

const char* to_string(Domain d) { return d == Domain::Source ? "source" : "target"; }

namespace {

std::size_t conv_out(std::size_t in, std::size_t kernel, std::size_t stride) {
    const long span = static_cast<long>(in) + 2 * static_cast<long>(kernel / 2) - static_cast<long>(kernel);
    if (span < 0) return 0;
    return static_cast<std::size_t>(span) / stride + 1;
}

}  // namespace

void NetConfig::validate() const {
    auto bad = [](const std::string& msg) { fail(ErrorKind::Configuration, msg); };
    if (channels == 0 || height == 0 || width == 0) bad("image shape must be positive");
    if (conv.empty()) bad("encoder needs at least one conv layer");
    if (z_dim < 2) bad("z_dim must be >= 2");
    if (disc_hidden == 0) bad("discriminator hidden width must be positive");
    if (!(slope >= 0.0 && slope < 1.0)) bad("leaky-relu slope must lie in [0, 1)");
    if (h_tap > conv.size()) {
        bad("h_tap " + std::to_string(h_tap) + " exceeds the " + std::to_string(conv.size()) +
            "-layer encoder");
    }
    std::size_t h = height, w = width;
    for (std::size_t i = 0; i < conv.size(); ++i) {
        const auto& l = conv[i];
        if (l.out_channels == 0 || l.kernel == 0) bad("conv layer " + std::to_string(i) + " is empty");
        if (l.stride != 1 && l.stride != 2) {
            bad("conv layer " + std::to_string(i) + ": only strides 1 and 2 can be mirrored by the decoder");
        }
        if (l.kernel % 2 == 0) bad("conv layer " + std::to_string(i) + ": kernel must be odd");
        const std::size_t oh = conv_out(h, l.kernel, l.stride);
        const std::size_t ow = conv_out(w, l.kernel, l.stride);
        if (oh == 0 || ow == 0) bad("encoder output extent reaches zero at layer " + std::to_string(i));
        if (oh * l.stride != h || ow * l.stride != w) {
            bad("conv layer " + std::to_string(i) + " maps " + std::to_string(h) + "x" + std::to_string(w) +
                " to " + std::to_string(oh) + "x" + std::to_string(ow) +
                ", which the mirrored decoder cannot invert exactly");
        }
        h = oh;
        w = ow;
    }
}

Shape NetConfig::layer_shape(std::size_t i) const {
    std::size_t h = height, w = width;
    for (std::size_t k = 0; k <= i; ++k) {
        h = conv_out(h, conv[k].kernel, conv[k].stride);
        w = conv_out(w, conv[k].kernel, conv[k].stride);
    }
    return {conv[i].out_channels, h, w};
}

template <typename T>
Model<T>::Model(NetConfig config) : config_(std::move(config)) {
    config_.validate();
    auto add = [&](const std::string& name, Role role, Shape shape) {
        params_.add(name, role, Tensor<T>(std::move(shape)));
        return params_.size() - 1;
    };
    const auto& c = config_;
    std::size_t in_c = c.channels;
    for (std::size_t i = 0; i < c.conv.size(); ++i) {
        const auto& l = c.conv[i];
        const auto pre = "enc.conv" + std::to_string(i);
        enc_conv_.push_back({add(pre + ".w", Role::Encoder, {l.out_channels, in_c, l.kernel, l.kernel}),
                             add(pre + ".b", Role::Encoder, {l.out_channels})});
        in_c = l.out_channels;
    }
    const std::size_t hdim = shape_size(c.layer_shape(c.conv.size() - 1));
    const std::size_t tapdim = shape_size(c.layer_shape(c.tap_layer() - 1));
    head_mu_ = {add("enc.mu.w", Role::Encoder, {hdim, c.z_dim}), add("enc.mu.b", Role::Encoder, {c.z_dim})};
    head_log_sigma_ = {add("enc.log_sigma.w", Role::Encoder, {hdim, c.z_dim}),
                       add("enc.log_sigma.b", Role::Encoder, {c.z_dim})};
    head_h_ = {add("enc.h.w", Role::Encoder, {tapdim, c.z_dim}), add("enc.h.b", Role::Encoder, {c.z_dim})};

    dec_fc_ = {add("dec.fc.w", Role::Decoder, {c.z_dim, hdim}), add("dec.fc.b", Role::Decoder, {hdim})};
    for (std::size_t j = 0; j < c.conv.size(); ++j) {
        const std::size_t i = c.conv.size() - 1 - j;
        const std::size_t cin = c.conv[i].out_channels;
        const std::size_t cout = i == 0 ? c.channels : c.conv[i - 1].out_channels;
        const std::size_t k = c.conv[i].stride == 2 ? 4 : 3;
        const auto pre = "dec.tconv" + std::to_string(j);
        dec_conv_.push_back({add(pre + ".w", Role::Decoder, {cin, cout, k, k}), add(pre + ".b", Role::Decoder, {cout})});
        dec_stride_.push_back(static_cast<int>(c.conv[i].stride));
    }

    disc_hidden_ = {add("disc.fc1.w", Role::Discriminator, {c.z_dim, c.disc_hidden}),
                    add("disc.fc1.b", Role::Discriminator, {c.disc_hidden})};
    disc_out_ = {add("disc.fc2.w", Role::Discriminator, {c.disc_hidden, 1}),
                 add("disc.fc2.b", Role::Discriminator, {1})};
}

template <typename T>
void Model<T>::initialize(std::uint64_t seed) {
    Rng rng(seed);
    const double gain = 6.0 / (1.0 + config_.slope * config_.slope);
    auto nth = [&](std::size_t i) -> Tensor<T>& {
        auto it = params_.begin();
        std::advance(it, static_cast<long>(i));
        return it->value;
    };
    auto fill = [&](std::size_t idx, double bound) {
        for (auto& v : nth(idx).data()) v = static_cast<T>(rng.uniform(-bound, bound));
    };
    auto zero = [&](std::size_t idx) {
        for (auto& v : nth(idx).data()) v = T(0);
    };
    auto he = [&](std::size_t fan_in) { return std::sqrt(gain / static_cast<double>(fan_in)); };
    auto plain = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };

    for (const auto& l : enc_conv_) {
        const auto& s = nth(l.w).shape();
        fill(l.w, he(s[1] * s[2] * s[3]));
        zero(l.b);
    }
    for (const auto* head : {&head_mu_, &head_log_sigma_, &head_h_}) {
        fill(head->w, plain(nth(head->w).shape()[0]));
        zero(head->b);
    }
    fill(dec_fc_.w, he(config_.z_dim));
    zero(dec_fc_.b);
    for (std::size_t j = 0; j < dec_conv_.size(); ++j) {
        const auto& s = nth(dec_conv_[j].w).shape();
        const std::size_t stride = static_cast<std::size_t>(dec_stride_[j]);
        const std::size_t fan_in = s[0] * s[2] * s[3] / (stride * stride);
        fill(dec_conv_[j].w, j + 1 == dec_conv_.size() ? plain(fan_in) : he(fan_in));
        zero(dec_conv_[j].b);
    }
    fill(disc_hidden_.w, he(config_.z_dim));
    zero(disc_hidden_.b);
    fill(disc_out_.w, plain(config_.disc_hidden));
    zero(disc_out_.b);
    initialized_ = true;
}

template <typename T>
BoundParams<T> Model<T>::bind(Graph<T>& g) {
    BoundParams<T> b;
    b.graph = &g;
    for (auto& p : params_) b.vars.push_back(g.param(p));
    return b;
}

template <typename T>
void Model<T>::check_ready() const {
    if (!initialized_) fail(ErrorKind::State, "model parameters are not initialized");
}

template <typename T>
void Model<T>::check_images(const Shape& s) const {
    const auto& c = config_;
    if (s.size() != 4 || s[1] != c.channels || s[2] != c.height || s[3] != c.width) {
        fail(ErrorKind::Configuration, "image batch " + shape_str(s) + " does not match configured shape " +
                                           shape_str({c.channels, c.height, c.width}));
    }
}

template <typename T>
Encoding<T> Model<T>::encode(BoundParams<T>& p, Var<T> x) const {
    check_images(x.shape());
    const auto& c = config_;
    Var<T> act = x;
    Var<T> tap = x;
    for (std::size_t i = 0; i < c.conv.size(); ++i) {
        const auto& l = c.conv[i];
        act = ops::conv2d(act, p.vars[enc_conv_[i].w], static_cast<int>(l.stride), static_cast<int>(l.kernel / 2));
        act = ops::leaky_relu(ops::add_channel_bias(act, p.vars[enc_conv_[i].b]), c.slope);
        if (i + 1 == c.tap_layer()) tap = act;
    }
    auto hprime = ops::flatten(act);
    Encoding<T> e;
    e.info.mu = ops::linear(hprime, p.vars[head_mu_.w], p.vars[head_mu_.b]);
    e.info.log_sigma = ops::linear(hprime, p.vars[head_log_sigma_.w], p.vars[head_log_sigma_.b]);
    e.rep.h = ops::sigmoid(ops::linear(ops::flatten(tap), p.vars[head_h_.w], p.vars[head_h_.b]));
    return e;
}

template <typename T>
Var<T> Model<T>::decode(BoundParams<T>& p, Var<T> z) const {
    const auto& c = config_;
    const Shape s = z.shape();
    if (s.size() != 2 || s[1] != c.z_dim) {
        fail(ErrorKind::Configuration,
             "decoder input " + shape_str(s) + " does not have width z_dim=" + std::to_string(c.z_dim));
    }
    auto a = ops::leaky_relu(ops::linear(z, p.vars[dec_fc_.w], p.vars[dec_fc_.b]), c.slope);
    auto last = c.layer_shape(c.conv.size() - 1);
    a = ops::reshape(a, {s[0], last[0], last[1], last[2]});
    for (std::size_t j = 0; j < dec_conv_.size(); ++j) {
        const int stride = dec_stride_[j];
        a = ops::conv_transpose2d(a, p.vars[dec_conv_[j].w], stride, 1);
        a = ops::add_channel_bias(a, p.vars[dec_conv_[j].b]);
        a = j + 1 == dec_conv_.size() ? ops::sigmoid(a) : ops::leaky_relu(a, c.slope);
    }
    return a;
}

template <typename T>
Var<T> Model<T>::discriminate(BoundParams<T>& p, const DeepRep<T>& rep, double grl_scale) const {
    auto r = ops::grad_reverse(rep.h, grl_scale);
    auto a = ops::leaky_relu(ops::linear(r, p.vars[disc_hidden_.w], p.vars[disc_hidden_.b]), config_.slope);
    return ops::sigmoid(ops::linear(a, p.vars[disc_out_.w], p.vars[disc_out_.b]));
}

template <typename T>
EncodedBatch<T> Model<T>::encode(const Tensor<T>& x) const {
    check_ready();
    Graph<T> g;
    auto p = const_cast<Model*>(this)->bind(g);
    auto e = encode(p, g.input(x));
    return {e.info.mu.value(), e.info.log_sigma.value(), e.rep.h.value()};
}

template <typename T>
Tensor<T> Model<T>::decode(const Tensor<T>& z) const {
    check_ready();
    Graph<T> g;
    auto p = const_cast<Model*>(this)->bind(g);
    return decode(p, g.input(z)).value();
}

template <typename T>
Tensor<T> Model<T>::test_mode_adapt(const Tensor<T>& x_t, const Tensor<T>& eps, double gamma1,
                                    double gamma2) const {
    check_ready();
    Graph<T> g;
    auto p = const_cast<Model*>(this)->bind(g);
    auto e = encode(p, g.input(x_t));
    auto z = rep_to_latent(e.rep, g.input(eps), gamma1, gamma2);
    return decode(p, z).value();
}

namespace {

void require_same(const Shape& a, const Shape& b, const char* what) {
    if (a != b) {
        fail(ErrorKind::Dimension, std::string(what) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                                       " differ");
    }
}

void require_gammas(double g1, double g2) {
    if (!(g1 >= 0.0) || !(g2 >= 0.0)) fail(ErrorKind::Usage, "gamma1 and gamma2 must be non-negative");
}

}  // namespace

template <typename T>
TransferLatent<T> modulate(const DomainInfo<T>& info, Domain info_domain, const DeepRep<T>& rep_other,
                           Domain rep_domain, Var<T> eps, double gamma1, double gamma2, bool diagnostic) {
    require_gammas(gamma1, gamma2);
    require_same(info.mu.shape(), info.log_sigma.shape(), "modulate (mu vs log_sigma)");
    require_same(info.mu.shape(), rep_other.h.shape(), "modulate (mu vs h)");
    require_same(info.mu.shape(), eps.shape(), "modulate (mu vs eps)");
    if (info_domain == rep_domain && !diagnostic) {
        fail(ErrorKind::Usage, "modulate needs h from the other domain (pass diagnostic to override)");
    }
    auto noise = ops::add(ops::scale(rep_other.h, gamma1), ops::scale(eps, gamma2));
    auto z = ops::add(info.mu, ops::mul(ops::exp(info.log_sigma), noise));
    return {z, info_domain, rep_domain};
}

template <typename T>
Var<T> rep_to_latent(const DeepRep<T>& rep, Var<T> eps, double gamma1, double gamma2) {
    require_gammas(gamma1, gamma2);
    require_same(rep.h.shape(), eps.shape(), "rep_to_latent");
    return ops::add(ops::scale(rep.h, gamma1), ops::scale(eps, gamma2));
}

template <typename T>
LatentMoments<T> closed_form_moments(const Tensor<T>& mu, const Tensor<T>& sigma, const Tensor<T>& mu_h,
                                     const Tensor<T>& sigma_h, double gamma1, double gamma2) {
    require_same(mu.shape(), sigma.shape(), "closed_form_moments (mu vs sigma)");
    require_same(mu_h.shape(), sigma_h.shape(), "closed_form_moments (mu_h vs sigma_h)");
    const std::size_t width = mu_h.size();
    const bool per_row = mu_h.shape() == mu.shape();
    if (!per_row && (mu.rank() == 0 || mu.shape().back() != width)) {
        fail(ErrorKind::Dimension, "closed_form_moments: h moments " + shape_str(mu_h.shape()) +
                                       " do not match latent " + shape_str(mu.shape()));
    }
    for (T v : sigma_h.data()) {
        if (!(v >= T(0))) fail(ErrorKind::Domain, "closed_form_moments: sigma_h must be non-negative");
    }
    LatentMoments<T> out{Tensor<T>(mu.shape()), Tensor<T>(mu.shape())};
    const T g1 = static_cast<T>(gamma1), g2 = static_cast<T>(gamma2);
    for (std::size_t k = 0; k < mu.size(); ++k) {
        const std::size_t j = per_row ? k : k % width;
        out.mu[k] = mu[k] + g1 * sigma[k] * mu_h[j];
        out.sigma[k] = sigma[k] * std::sqrt(g1 * g1 * sigma_h[j] * sigma_h[j] + g2 * g2);
    }
    return out;
}

template class Model<float>;
template class Model<double>;

#define CDLM_INSTANTIATE_MODEL(T)                                                                        \
    template TransferLatent<T> modulate(const DomainInfo<T>&, Domain, const DeepRep<T>&, Domain, Var<T>, \
                                        double, double, bool);                                           \
    template Var<T> rep_to_latent(const DeepRep<T>&, Var<T>, double, double);                            \
    template LatentMoments<T> closed_form_moments(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                                  const Tensor<T>&, double, double);

CDLM_INSTANTIATE_MODEL(float)
CDLM_INSTANTIATE_MODEL(double)

#undef CDLM_INSTANTIATE_MODEL

}  // namespace cdlm
