#include "cdlm/losses.hpp"

#include <cmath>
#include <cstdio>

namespace cdlm {

bool LossReport::all_finite() const {
    for (double v : {rec, kl_st, kl_ts, adv, cons_s, cons_t, total_phi, total_theta}) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

std::string LossReport::csv_header() {
    return "step,rec,kl_st,kl_ts,adv,cons_s,cons_t,total_phi,total_theta";
}

std::string LossReport::csv_row(long step) const {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%ld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", step, rec, kl_st, kl_ts, adv,
                  cons_s, cons_t, total_phi, total_theta);
    return buf;
}

namespace {

template <typename T>
void require_open_unit(Var<T> p, const char* what) {
    const auto& v = p.value();
    for (std::size_t k = 0; k < v.size(); ++k) {
        if (!(v[k] > T(0) && v[k] < T(1))) {
            fail(ErrorKind::Domain, std::string(what) + ": probability " + std::to_string(v[k]) +
                                        " at flat index " + std::to_string(k) + " is outside (0, 1)");
        }
    }
}

template <typename T>
void require_same(Var<T> a, Var<T> b, const char* what) {
    if (a.shape() != b.shape()) {
        fail(ErrorKind::Dimension,
             std::string(what) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
    }
}

}  // namespace

template <typename T>
Var<T> kl_standard_normal(Var<T> mu, Var<T> sigma) {
    require_same(mu, sigma, "kl_standard_normal");
    const std::size_t batch = mu.shape().size() > 1 ? mu.shape()[0] : 1;
    auto terms = ops::sub(ops::add(ops::square(mu), ops::square(sigma)), ops::scale(ops::log(sigma), 2.0));
    return ops::scale(ops::add_scalar(ops::sum(terms), -static_cast<double>(mu.size())),
                      0.5 / static_cast<double>(batch));
}

template <typename T>
double kl_standard_normal(const Tensor<T>& mu, const Tensor<T>& sigma) {
    Graph<T> g;
    return static_cast<double>(kl_standard_normal(g.input(mu), g.input(sigma)).value()[0]);
}

template <typename T>
std::pair<Var<T>, Var<T>> modulated_moments(const DomainInfo<T>& info, const DeepRep<T>& rep_other,
                                            double gamma1, double gamma2) {
    auto h = rep_other.h;
    auto mu_h = ops::mean_rows(h);
    auto var_h = ops::mean_rows(ops::square(ops::sub(h, mu_h)));
    auto sigma = ops::exp(info.log_sigma);
    auto spread = ops::sqrt(ops::add_scalar(ops::scale(var_h, gamma1 * gamma1), gamma2 * gamma2 + kMomentVarianceFloor));
    auto mu_z = ops::add(info.mu, ops::mul(ops::scale(sigma, gamma1), mu_h));
    auto sigma_z = ops::mul(sigma, spread);
    return {mu_z, sigma_z};
}

template <typename T>
Var<T> reconstruction_loss(Var<T> x_hat, Var<T> x, ReconLikelihood kind) {
    require_same(x_hat, x, "reconstruction_loss");
    if (kind == ReconLikelihood::Gaussian) return mse(x_hat, x);
    require_open_unit(x_hat, "reconstruction_loss");
    auto pos = ops::mul(x, ops::log(x_hat));
    auto neg = ops::mul(ops::add_scalar(ops::scale(x, -1.0), 1.0),
                        ops::log(ops::add_scalar(ops::scale(x_hat, -1.0), 1.0)));
    return ops::scale(ops::mean(ops::add(pos, neg)), -1.0);
}

template <typename T>
Var<T> adversarial_loss(Var<T> p_s, Var<T> p_t) {
    require_open_unit(p_s, "adversarial_loss");
    require_open_unit(p_t, "adversarial_loss");
    auto real = ops::mean(ops::log(p_s));
    auto fake = ops::mean(ops::log(ops::add_scalar(ops::scale(p_t, -1.0), 1.0)));
    return ops::scale(ops::add(real, fake), -1.0);
}

template <typename T>
Var<T> mse(Var<T> a, Var<T> b) {
    require_same(a, b, "mse");
    return ops::mean(ops::square(ops::sub(a, b)));
}

template <typename T>
std::pair<Var<T>, Var<T>> consistency_loss(Var<T> xhat_st, Var<T> xtilde_s, Var<T> xhat_ts, Var<T> xtilde_t) {
    require_same(xhat_st, xtilde_s, "consistency_loss (source pair)");
    require_same(xhat_ts, xtilde_t, "consistency_loss (target pair)");
    return {mse(xhat_st, xtilde_s), mse(xhat_ts, xtilde_t)};
}

template <typename T>
std::pair<Var<T>, Var<T>> aggregate(const LossTerms<T>& t, const LossWeights& w) {
    auto phi = ops::add(ops::add(t.adv, ops::scale(ops::add(t.kl_st, t.kl_ts), w.lambda1)),
                        ops::scale(t.rec, w.lambda2));
    auto theta = ops::add(ops::add(t.rec, ops::scale(t.cons_s, w.beta1)), ops::scale(t.cons_t, w.beta2));
    return {phi, theta};
}

LossReport aggregate(LossReport c, const LossWeights& w) {
    c.total_phi = c.adv + w.lambda1 * (c.kl_st + c.kl_ts) + w.lambda2 * c.rec;
    c.total_theta = c.rec + w.beta1 * c.cons_s + w.beta2 * c.cons_t;
    return c;
}

template <typename T>
LossReport report_of(const LossTerms<T>& t, Var<T> total_phi, Var<T> total_theta) {
    auto v = [](Var<T> x) { return static_cast<double>(x.value()[0]); };
    return {v(t.rec), v(t.kl_st), v(t.kl_ts), v(t.adv), v(t.cons_s), v(t.cons_t), v(total_phi), v(total_theta)};
}

#define CDLM_INSTANTIATE_LOSSES(T)                                                                           \
    template Var<T> kl_standard_normal(Var<T>, Var<T>);                                                      \
    template double kl_standard_normal(const Tensor<T>&, const Tensor<T>&);                                  \
    template std::pair<Var<T>, Var<T>> modulated_moments(const DomainInfo<T>&, const DeepRep<T>&, double,    \
                                                         double);                                            \
    template Var<T> reconstruction_loss(Var<T>, Var<T>, ReconLikelihood);                                    \
    template Var<T> adversarial_loss(Var<T>, Var<T>);                                                        \
    template Var<T> mse(Var<T>, Var<T>);                                                                     \
    template std::pair<Var<T>, Var<T>> consistency_loss(Var<T>, Var<T>, Var<T>, Var<T>);                     \
    template std::pair<Var<T>, Var<T>> aggregate(const LossTerms<T>&, const LossWeights&);                   \
    template LossReport report_of(const LossTerms<T>&, Var<T>, Var<T>);

CDLM_INSTANTIATE_LOSSES(float)
CDLM_INSTANTIATE_LOSSES(double)

#undef CDLM_INSTANTIATE_LOSSES

}  // namespace cdlm
