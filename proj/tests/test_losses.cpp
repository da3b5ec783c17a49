#include <doctest.h>

#include <cmath>

#include "cdlm/losses.hpp"
#include "cdlm/trainer.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace cdlm;
using cdlm::test::random_tensor;

namespace {

double scalar(Var<double> v) { return v.value()[0]; }

}  // namespace

TEST_CASE("kl hand examples") {
    Graph<double> g;
    CHECK(scalar(kl_standard_normal(g.input(Tensor<double>({2, 3})), g.input(Tensor<double>({2, 3}, 1.0)))) == 0.0);
    CHECK(scalar(kl_standard_normal(g.input(Tensor<double>({1, 1}, {1.0})), g.input(Tensor<double>({1, 1}, {1.0})))) ==
          doctest::Approx(0.5));
    // Batch mean over rows, sum over coordinates.
    Tensor<double> mu({2, 2}, {1, 1, 0, 0}), sigma({2, 2}, 1.0);
    CHECK(kl_standard_normal(mu, sigma) == doctest::Approx(0.5));
    try {
        kl_standard_normal(g.input(Tensor<double>({1, 2})), g.input(Tensor<double>({1, 2}, {1.0, 0.0})));
        FAIL("expected domain error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Domain);
    }
}

TEST_CASE("kl is non-negative and zero only at the prior") {
    for (std::uint64_t s = 0; s < 50; ++s) {
        auto mu = random_tensor({3, 5}, s, -2, 2);
        auto sigma = random_tensor({3, 5}, s + 100, 0.1, 3.0);
        CHECK(kl_standard_normal(mu, sigma) > 0.0);
    }
    CHECK(kl_standard_normal(Tensor<double>({4, 4}), Tensor<double>({4, 4}, 1.0)) == 0.0);
}

TEST_CASE("kl agrees with a Monte-Carlo log-density ratio") {
    // E_q[log q(z) - log p(z)] for q = N(mu, diag sigma^2), p = N(0, I).
    Rng rng(77);
    for (std::uint64_t s = 0; s < 3; ++s) {
        auto mu = random_tensor({1, 6}, 300 + s, -1.5, 1.5);
        auto sigma = random_tensor({1, 6}, 400 + s, 0.4, 2.0);
        const std::size_t n = 200000;
        double acc = 0;
        for (std::size_t k = 0; k < n; ++k) {
            double lr = 0;
            for (std::size_t j = 0; j < 6; ++j) {
                const double e = rng.normal(), z = mu[j] + sigma[j] * e;
                lr += -0.5 * e * e - std::log(sigma[j]) + 0.5 * z * z;
            }
            acc += lr;
        }
        CHECK(kl_standard_normal(mu, sigma) == doctest::Approx(acc / n).epsilon(0.02));
    }
}

TEST_CASE("modulated moments use the batch statistics of the other domain's h") {
    Graph<double> g;
    auto mu = random_tensor({4, 3}, 1), ls = random_tensor({4, 3}, 2, -0.5, 0.5);
    auto h = random_tensor({4, 3}, 3, 0.05, 0.95);
    auto [m, s] = modulated_moments(DomainInfo<double>{g.input(mu), g.input(ls)}, DeepRep<double>{g.input(h)}, 1.0, 0.1);
    for (std::size_t j = 0; j < 3; ++j) {
        double mh = 0, vh = 0;
        for (std::size_t r = 0; r < 4; ++r) mh += h[r * 3 + j] / 4;
        for (std::size_t r = 0; r < 4; ++r) vh += (h[r * 3 + j] - mh) * (h[r * 3 + j] - mh) / 4;
        for (std::size_t r = 0; r < 4; ++r) {
            const double sig = std::exp(ls[r * 3 + j]);
            CHECK(m.value()[r * 3 + j] == doctest::Approx(mu[r * 3 + j] + sig * mh));
            CHECK(s.value()[r * 3 + j] == doctest::Approx(sig * std::sqrt(vh + kMomentVarianceFloor + 0.01)));
        }
    }
}

TEST_CASE("reconstruction loss examples") {
    Graph<double> g;
    auto half = g.input(Tensor<double>({2, 3, 2, 2}, 0.5));
    CHECK(scalar(reconstruction_loss(half, half)) == doctest::Approx(std::log(2.0)));
    Tensor<double> x({1, 4}, {0, 1, 1, 0});
    Tensor<double> near({1, 4}, {1e-9, 1 - 1e-9, 1 - 1e-9, 1e-9});
    CHECK(scalar(reconstruction_loss(g.input(near), g.input(x))) < 1e-8);
    try {
        reconstruction_loss(g.input(Tensor<double>({1, 4}, {0.0, 0.5, 0.5, 0.5})), g.input(x));
        FAIL("expected domain error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Domain);
    }
    CHECK_THROWS_AS(reconstruction_loss(g.input(Tensor<double>({1, 3}, 0.5)), g.input(x)), Error);
    CHECK(scalar(reconstruction_loss(g.input(Tensor<double>({1, 2}, {0.2, 0.9})), g.input(Tensor<double>({1, 2}, {0.0, 1.0})),
                                     ReconLikelihood::Gaussian)) == doctest::Approx((0.04 + 0.01) / 2));
}

TEST_CASE("adversarial loss examples") {
    Graph<double> g;
    auto half = g.input(Tensor<double>({4, 1}, 0.5));
    CHECK(scalar(adversarial_loss(half, half)) == doctest::Approx(2 * std::log(2.0)));
    CHECK(scalar(adversarial_loss(g.input(Tensor<double>({2, 1}, 1 - 1e-12)), g.input(Tensor<double>({2, 1}, 1e-12)))) < 1e-10);
    CHECK_THROWS_AS(adversarial_loss(g.input(Tensor<double>({1, 1}, 1.0)), half), Error);
}

TEST_CASE("consistency loss examples") {
    Graph<double> g;
    auto a = g.input(random_tensor({2, 3, 2, 2}, 4, 0, 1));
    auto b = g.input(random_tensor({2, 3, 2, 2}, 5, 0, 1));
    auto [s0, t0] = consistency_loss(a, a, b, b);
    CHECK(scalar(s0) == 0.0);
    CHECK(scalar(t0) == 0.0);
    auto c1 = g.input(Tensor<double>({1, 3, 2, 2}, 0.3)), c2 = g.input(Tensor<double>({1, 3, 2, 2}, 0.4));
    auto [s1, t1] = consistency_loss(c1, c2, c2, c1);
    CHECK(scalar(s1) == doctest::Approx(0.01));
    CHECK(scalar(t1) == doctest::Approx(0.01));
    // Symmetric in each pair.
    auto [sa, ta] = consistency_loss(a, b, b, a);
    CHECK(scalar(sa) == scalar(ta));
    CHECK_THROWS_AS(consistency_loss(a, g.input(Tensor<double>({2, 3})), b, b), Error);
}

TEST_CASE("aggregate examples") {
    LossReport zero;
    auto z = aggregate(zero, LossWeights{});
    CHECK(z.total_phi == 0.0);
    CHECK(z.total_theta == 0.0);
    LossReport r{0.7, 3.0, 4.0, 1.2, 0.05, 0.02, 0, 0};
    auto only_adv = aggregate(r, LossWeights{0, 0, 0.1, 0.01});
    CHECK(only_adv.total_phi == 1.2);
    auto d = aggregate(r, LossWeights{});
    CHECK(d.total_phi == doctest::Approx(1.2 + 1e-4 * 7.0 + 1e-4 * 0.7));
    CHECK(d.total_theta == doctest::Approx(0.7 + 0.1 * 0.05 + 0.01 * 0.02));
    // Both KL terms enter total_phi.
    auto no_st = r, no_ts = r;
    no_st.kl_st = 0;
    no_ts.kl_ts = 0;
    CHECK(aggregate(no_st, LossWeights{}).total_phi != d.total_phi);
    CHECK(aggregate(no_ts, LossWeights{}).total_phi != d.total_phi);
}

TEST_CASE("default weights and modulation strengths") {
    // gamma1 = 1.0, gamma2 = 0.1, lambda1 = lambda2 = 0.0001, beta1 = 0.1, beta2 = 0.01.
    LossWeights w;
    CHECK(w.lambda1 == 1e-4);
    CHECK(w.lambda2 == 1e-4);
    CHECK(w.beta1 == 0.1);
    CHECK(w.beta2 == 0.01);
    TrainConfig cfg;
    CHECK(cfg.gamma1 == 1.0);
    CHECK(cfg.gamma2 == 0.1);
    CHECK(cfg.batch_size == 64);
}

TEST_CASE("loss report csv") {
    CHECK(LossReport::csv_header() == "step,rec,kl_st,kl_ts,adv,cons_s,cons_t,total_phi,total_theta");
    LossReport r{1, 2, 3, 4, 5, 6, 7, 8};
    auto row = r.csv_row(12);
    CHECK(row.rfind("12,", 0) == 0);
    CHECK(std::count(row.begin(), row.end(), ',') == 8);
    CHECK(r.all_finite());
    r.adv = std::nan("");
    CHECK_FALSE(r.all_finite());
}

TEST_CASE("loss primitives pass finite differences") {
    for (const auto& c : cdlm::test::op_gradchecks()) {
        CAPTURE(c.name);
        CHECK(c.error < 1e-4);
    }
}

TEST_CASE("full composed objective passes finite differences") {
    auto r = cdlm::test::full_graph_gradcheck();
    CAPTURE(r.worst);
    CHECK(r.coordinates > 50);
    CHECK(r.max_error < 1e-3);
}

TEST_CASE("consistency gradient reaches the decoder only") {
    TrainConfig cfg;
    cfg.net = cdlm::test::tiny_net();
    Model<double> m(cfg.net);
    m.initialize(3);
    Graph<double> g;
    auto p = m.bind(g);
    auto xs = g.input(random_tensor({2, 3, 8, 8}, 6, 0, 1)), xt = g.input(random_tensor({2, 3, 8, 8}, 7, 0, 1));
    auto es = g.input(random_tensor({2, 4}, 8)), et = g.input(random_tensor({2, 4}, 9));
    cfg.weights.lambda1 = cfg.weights.lambda2 = 0;
    auto L = build_losses(m, p, xs, xt, es, et, cfg, Detach{true, true, false});
    m.params().zero_grad();
    g.backward(L.total_phi, RoleMask::only(Role::Encoder) | Role::Discriminator);
    g.backward(L.total_theta, RoleMask::only(Role::Decoder));
    double enc = 0, dec = 0;
    for (auto& prm : m.params()) {
        double n = 0;
        for (double v : prm.value.grad()) n += std::abs(v);
        (prm.role == Role::Decoder ? dec : enc) += n;
    }
    CHECK(enc == 0.0);
    CHECK(dec > 0.0);
}

TEST_CASE("losses are pure") {
    Graph<double> g;
    auto a = g.input(random_tensor({3, 2}, 10, 0.1, 0.9)), b = g.input(random_tensor({3, 2}, 11, 0, 1));
    CHECK(scalar(reconstruction_loss(a, b)) == scalar(reconstruction_loss(a, b)));
    CHECK(scalar(mse(a, b)) == scalar(mse(b, a)));
}
