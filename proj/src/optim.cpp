#include "cdlm/optim.hpp"

#include <cmath>

namespace cdlm {

namespace {

std::vector<float>& slot(std::map<std::string, std::vector<float>>& slots, const Param<float>& p) {
    auto& s = slots[p.name];
    if (s.empty()) s.assign(p.value.size(), 0.0f);
    if (s.size() != p.value.size()) fail(ErrorKind::State, "optimizer slot for " + p.name + " has the wrong size");
    return s;
}

}  // namespace

void SgdMomentum::step(ParamSet<float>& params) {
    const auto lr = static_cast<float>(lr_);
    const auto mu = static_cast<float>(momentum_);
    for (auto& p : params) {
        if (!mask_.contains(p.role)) continue;
        auto& v = slot(velocity_, p);
        auto w = p.value.data();
        auto g = p.value.grad();
        for (std::size_t i = 0; i < w.size(); ++i) {
            v[i] = mu * v[i] + g[i];
            w[i] -= lr * v[i];
        }
    }
}

void Adam::step(ParamSet<float>& params) {
    ++t_;
    const auto b1 = static_cast<float>(beta1_);
    const auto b2 = static_cast<float>(beta2_);
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const auto step = static_cast<float>(lr_ * std::sqrt(c2) / c1);
    const auto eps = static_cast<float>(eps_ * std::sqrt(c2));
    for (auto& p : params) {
        if (!mask_.contains(p.role)) continue;
        auto& m = slot(m_, p);
        auto& v = slot(v_, p);
        auto w = p.value.data();
        auto g = p.value.grad();
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = b1 * m[i] + (1.0f - b1) * g[i];
            v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
            w[i] -= step * m[i] / (std::sqrt(v[i]) + eps);
        }
    }
}

}  // namespace cdlm
