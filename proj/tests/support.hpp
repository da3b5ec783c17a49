#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cdlm/graph.hpp"
#include "cdlm/model.hpp"
#include "cdlm/rng.hpp"

namespace cdlm::test {

inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Rng rng(seed);
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

// |a - n| / max(|a|, |n|, floor). The floor keeps coordinates whose true
// gradient is ~0 from turning roundoff into a huge ratio.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

using ScalarFn = std::function<Var<double>(Graph<double>&, std::vector<Var<double>>&)>;

/// Central differences on every element of every input; returns the largest
/// relative error against one reverse sweep.
inline double gradcheck(const std::vector<Tensor<double>>& inputs, const ScalarFn& f, double h = 1e-6) {
    std::vector<Tensor<double>> analytic;
    {
        Graph<double> g;
        std::vector<Var<double>> vars;
        for (const auto& t : inputs) vars.push_back(g.variable(t));
        auto out = f(g, vars);
        g.backward(out);
        for (auto& v : vars) {
            Tensor<double> grad(v.shape());
            auto src = v.grad();
            std::copy(src.begin(), src.end(), grad.data().begin());
            analytic.push_back(std::move(grad));
        }
    }
    auto eval = [&](const std::vector<Tensor<double>>& xs) {
        Graph<double> g;
        std::vector<Var<double>> vars;
        for (const auto& t : xs) vars.push_back(g.input(t));
        return f(g, vars).value()[0];
    };
    double worst = 0;
    auto xs = inputs;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        for (std::size_t i = 0; i < xs[k].size(); ++i) {
            const double x0 = xs[k][i];
            xs[k][i] = x0 + h;
            const double up = eval(xs);
            xs[k][i] = x0 - h;
            const double down = eval(xs);
            xs[k][i] = x0;
            worst = std::max(worst, rel_error(analytic[k][i], (up - down) / (2 * h)));
        }
    }
    return worst;
}

/// Contracts a tensor-valued op to a scalar with fixed random weights, so
/// every output element contributes a distinct adjoint.
inline Var<double> contract(Graph<double>& g, Var<double> y, std::uint64_t seed = 99) {
    return ops::sum(ops::mul(y, g.input(random_tensor(y.shape(), seed))));
}

inline NetConfig tiny_net(std::size_t channels = 3, std::size_t size = 8) {
    NetConfig n;
    n.channels = channels;
    n.height = size;
    n.width = size;
    n.conv = {{4, 3, 2}, {6, 3, 2}};
    n.z_dim = 4;
    n.disc_hidden = 5;
    return n;
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path = std::filesystem::temp_directory_path() /
               ("cdlm_test_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

}  // namespace cdlm::test
