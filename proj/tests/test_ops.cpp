#include <doctest.h>

#include "cdlm/ops.hpp"
#include "support.hpp"

using namespace cdlm;
using cdlm::test::contract;
using cdlm::test::gradcheck;
using cdlm::test::random_tensor;

namespace {

constexpr double kOpTol = 1e-4;

template <typename F>
double check_unary(Shape shape, F op, double lo = -1.5, double hi = 1.5, std::uint64_t seed = 1) {
    return gradcheck({random_tensor(shape, seed, lo, hi)},
                     [&](Graph<double>& g, std::vector<Var<double>>& v) { return contract(g, op(v[0])); });
}

template <typename F>
double check_binary(Shape a, Shape b, F op) {
    return gradcheck({random_tensor(a, 2), random_tensor(b, 3)},
                     [&](Graph<double>& g, std::vector<Var<double>>& v) { return contract(g, op(v[0], v[1])); });
}

}  // namespace

TEST_CASE("tensor basics") {
    Tensor<float> t({2, 3}, 1.5f);
    CHECK(t.size() == 6);
    CHECK(t.rank() == 2);
    CHECK(t.all_finite());
    auto r = t.reshaped({3, 2});
    CHECK(r.dim(0) == 3);
    CHECK_THROWS_AS(t.reshaped({4, 2}), Error);
    t[4] = std::numeric_limits<float>::infinity();
    CHECK_FALSE(t.all_finite());
    CHECK_THROWS_AS(Tensor<float>({2, 2}, std::vector<float>(3)), Error);
    CHECK(shape_str({2, 3, 4}) == "[2, 3, 4]");
}

TEST_CASE("broadcast shapes") {
    CHECK(ops::broadcast_shape({4, 3}, {3}) == Shape{4, 3});
    CHECK(ops::broadcast_shape({4, 1}, {1, 5}) == Shape{4, 5});
    CHECK(ops::broadcast_shape({}, {2, 2}) == Shape{2, 2});
    try {
        ops::broadcast_shape({4, 3}, {2});
        FAIL("expected dimension error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Dimension);
    }
}

TEST_CASE("elementwise forward values") {
    Graph<double> g;
    auto a = g.input(Tensor<double>({2}, {1.0, 4.0}));
    auto b = g.input(Tensor<double>({2}, {2.0, -1.0}));
    CHECK(ops::add(a, b).value()[1] == doctest::Approx(3.0));
    CHECK(ops::sub(a, b).value()[0] == doctest::Approx(-1.0));
    CHECK(ops::mul(a, b).value()[1] == doctest::Approx(-4.0));
    CHECK(ops::sqrt(a).value()[1] == doctest::Approx(2.0));
    CHECK(ops::log(a).value()[0] == doctest::Approx(0.0));
    CHECK(ops::leaky_relu(b, 0.2).value()[1] == doctest::Approx(-0.2));
    CHECK(ops::mean(a).value()[0] == doctest::Approx(2.5));
    CHECK(ops::sigmoid(g.input(Tensor<double>({1}, {0.0}))).value()[0] == doctest::Approx(0.5));
}

TEST_CASE("domain and dimension errors") {
    Graph<double> g;
    auto neg = g.input(Tensor<double>({2}, {1.0, -1.0}));
    CHECK_THROWS_AS(ops::log(neg), Error);
    CHECK_THROWS_AS(ops::sqrt(neg), Error);
    auto a = g.input(Tensor<double>({2, 3}));
    auto b = g.input(Tensor<double>({4, 2}));
    try {
        ops::matmul(a, b);
        FAIL("expected dimension error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Dimension);
    }
    CHECK_THROWS_AS(ops::add(a, b), Error);
    CHECK_THROWS_AS(ops::grad_reverse(a, -1.0), Error);
}

TEST_CASE("non-finite forward results raise") {
    Graph<double> g;
    auto big = g.input(Tensor<double>({1}, {1000.0}));
    try {
        ops::exp(big);
        FAIL("expected non-finite error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::NonFinite);
    }
}

TEST_CASE("sigmoid stays strictly inside (0, 1) in float") {
    Graph<float> g;
    auto y = ops::sigmoid(g.input(Tensor<float>({2}, {80.0f, -200.0f})));
    CHECK(y.value()[0] < 1.0f);
    CHECK(y.value()[1] > 0.0f);
}

TEST_CASE("finite differences: elementwise ops") {
    CHECK(check_binary({3, 4}, {3, 4}, [](auto a, auto b) { return ops::add(a, b); }) < kOpTol);
    CHECK(check_binary({3, 4}, {4}, [](auto a, auto b) { return ops::add(a, b); }) < kOpTol);
    CHECK(check_binary({3, 1}, {1, 4}, [](auto a, auto b) { return ops::sub(a, b); }) < kOpTol);
    CHECK(check_binary({2, 3}, {2, 3}, [](auto a, auto b) { return ops::mul(a, b); }) < kOpTol);
    CHECK(check_binary({2, 3}, {3}, [](auto a, auto b) { return ops::mul(a, b); }) < kOpTol);
    CHECK(check_unary({2, 3}, [](auto x) { return ops::broadcast_to(x, {4, 2, 3}); }) < kOpTol);
    CHECK(check_unary({1, 3}, [](auto x) { return ops::broadcast_to(x, {5, 3}); }) < kOpTol);
    CHECK(check_unary({5}, [](auto x) { return ops::scale(x, -2.5); }) < kOpTol);
    CHECK(check_unary({5}, [](auto x) { return ops::add_scalar(x, 0.7); }) < kOpTol);
    CHECK(check_unary({2, 5}, [](auto x) { return ops::exp(x); }) < kOpTol);
    CHECK(check_unary({2, 5}, [](auto x) { return ops::log(x); }, 0.2, 3.0) < kOpTol);
    CHECK(check_unary({2, 5}, [](auto x) { return ops::sigmoid(x); }, -4.0, 4.0) < kOpTol);
    CHECK(check_unary({2, 5}, [](auto x) { return ops::tanh(x); }) < kOpTol);
    CHECK(check_unary({3, 5}, [](auto x) { return ops::leaky_relu(x, 0.2); }, -2.0, 2.0, 7) < kOpTol);
    CHECK(check_unary({2, 5}, [](auto x) { return ops::square(x); }) < kOpTol);
    CHECK(check_unary({2, 5}, [](auto x) { return ops::sqrt(x); }, 0.2, 3.0) < kOpTol);
}

TEST_CASE("finite differences: reductions and reshapes") {
    CHECK(check_unary({3, 4}, [](auto x) { return ops::sum(x); }) < kOpTol);
    CHECK(check_unary({3, 4}, [](auto x) { return ops::mean(x); }) < kOpTol);
    CHECK(check_unary({5, 2, 3}, [](auto x) { return ops::mean_rows(x); }) < kOpTol);
    CHECK(check_unary({2, 6}, [](auto x) { return ops::reshape(x, {3, 4}); }) < kOpTol);
    CHECK(check_unary({2, 3, 2, 2}, [](auto x) { return ops::flatten(x); }) < kOpTol);
}

TEST_CASE("finite differences: dense and convolution ops") {
    CHECK(check_binary({3, 4}, {4, 5}, [](auto a, auto b) { return ops::matmul(a, b); }) < kOpTol);
    CHECK(gradcheck({random_tensor({3, 4}, 4), random_tensor({4, 2}, 5), random_tensor({2}, 6)},
                    [](Graph<double>& g, std::vector<Var<double>>& v) {
                        return contract(g, ops::linear(v[0], v[1], v[2]));
                    }) < kOpTol);
    for (int stride : {1, 2}) {
        for (int pad : {0, 1}) {
            CAPTURE(stride);
            CAPTURE(pad);
            CHECK(gradcheck({random_tensor({2, 3, 6, 5}, 7), random_tensor({4, 3, 3, 3}, 8)},
                            [&](Graph<double>& g, std::vector<Var<double>>& v) {
                                return contract(g, ops::conv2d(v[0], v[1], stride, pad));
                            }) < kOpTol);
            CHECK(gradcheck({random_tensor({2, 3, 3, 4}, 9), random_tensor({3, 2, 4, 4}, 10)},
                            [&](Graph<double>& g, std::vector<Var<double>>& v) {
                                return contract(g, ops::conv_transpose2d(v[0], v[1], stride, pad));
                            }) < kOpTol);
        }
    }
    CHECK(gradcheck({random_tensor({2, 3, 2, 2}, 11), random_tensor({3}, 12)},
                    [](Graph<double>& g, std::vector<Var<double>>& v) {
                        return contract(g, ops::add_channel_bias(v[0], v[1]));
                    }) < kOpTol);
}

TEST_CASE("finite differences: softmax cross-entropy") {
    const std::vector<int> labels = {2, 0, 1};
    CHECK(gradcheck({random_tensor({3, 4}, 13, -2, 2)},
                    [&](Graph<double>&, std::vector<Var<double>>& v) {
                        return ops::softmax_cross_entropy(v[0], labels);
                    }) < kOpTol);
    Graph<double> g;
    CHECK_THROWS_AS(ops::softmax_cross_entropy(g.input(Tensor<double>({2, 3})), std::vector<int>{0, 3}), Error);
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
    // <conv(x, k), y> == <x, convT(y, k)> for matching geometry.
    auto x = random_tensor({1, 2, 6, 6}, 20);
    auto k = random_tensor({3, 2, 4, 4}, 21);
    auto y = random_tensor({1, 3, 3, 3}, 22);
    Graph<double> g;
    auto fwd = ops::conv2d(g.input(x), g.input(k), 2, 1);
    REQUIRE(fwd.shape() == y.shape());
    // Same kernel tensor: conv reads it as [out, in, ...], the transpose as [in, out, ...].
    auto back = ops::conv_transpose2d(g.input(y), g.input(k), 2, 1);
    REQUIRE(back.shape() == x.shape());
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < y.size(); ++i) lhs += fwd.value()[i] * y[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += back.value()[i] * x[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("gradient reversal flips and scales the adjoint") {
    auto x = random_tensor({4}, 30);
    for (double s : {0.0, 1.0, 0.25}) {
        Graph<double> g;
        auto v = g.variable(x);
        auto y = ops::grad_reverse(v, s);
        CHECK(y.value()[2] == x[2]);
        g.backward(contract(g, y, 31));
        auto w = random_tensor({4}, 31);
        for (std::size_t i = 0; i < 4; ++i) CHECK(v.grad()[i] == doctest::Approx(-s * w[i]));
    }
}

TEST_CASE("detach blocks gradient") {
    Graph<double> g;
    auto v = g.variable(random_tensor({3}, 40));
    auto y = ops::add(ops::detach(ops::square(v)), v);
    g.backward(ops::sum(y));
    for (double d : v.grad()) CHECK(d == doctest::Approx(1.0));
}

TEST_CASE("backward mask reaches only selected roles") {
    ParamSet<double> ps;
    auto& a = ps.add("a", Role::Encoder, random_tensor({2}, 50));
    auto& b = ps.add("b", Role::Decoder, random_tensor({2}, 51));
    a.value.set_requires_grad(true);
    b.value.set_requires_grad(true);
    Graph<double> g;
    auto loss = ops::sum(ops::mul(g.param(a), g.param(b)));
    g.backward(loss, RoleMask::only(Role::Decoder));
    CHECK(b.value.has_grad());
    CHECK(b.value.grad()[0] == doctest::Approx(a.value[0]));
    bool a_touched = a.value.has_grad() && (a.value.grad()[0] != 0 || a.value.grad()[1] != 0);
    CHECK_FALSE(a_touched);
    // Gradients accumulate until zeroed.
    g.backward(loss, RoleMask::only(Role::Decoder));
    CHECK(b.value.grad()[0] == doctest::Approx(2 * a.value[0]));
    ps.zero_grad();
    CHECK(b.value.grad()[0] == 0.0);
    CHECK(ps.count(Role::Encoder) == 1);
}

TEST_CASE("duplicate parameter names are rejected") {
    ParamSet<float> ps;
    ps.add("w", Role::Encoder, Tensor<float>({1}));
    CHECK_THROWS_AS(ps.add("w", Role::Decoder, Tensor<float>({1})), Error);
    CHECK_THROWS_AS(ps.at("missing"), Error);
}
