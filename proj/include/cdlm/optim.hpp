#pragma once

#include <map>
#include <string>
#include <vector>

#include "cdlm/tensor.hpp"

namespace cdlm {

/// v = momentum * v + g;  p -= lr * v.  Touches only parameters in `mask`.
class SgdMomentum {
   public:
    SgdMomentum(double lr, double momentum, RoleMask mask) : lr_(lr), momentum_(momentum), mask_(mask) {}

    void step(ParamSet<float>& params);

    RoleMask mask() const { return mask_; }
    std::map<std::string, std::vector<float>>& velocity() { return velocity_; }
    const std::map<std::string, std::vector<float>>& velocity() const { return velocity_; }

   private:
    double lr_, momentum_;
    RoleMask mask_;
    std::map<std::string, std::vector<float>> velocity_;
};

/// Adam with bias correction.
class Adam {
   public:
    Adam(double lr, double beta1, double beta2, double eps, RoleMask mask)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), mask_(mask) {}

    void step(ParamSet<float>& params);

    RoleMask mask() const { return mask_; }
    long steps() const { return t_; }
    void set_steps(long t) { t_ = t; }
    std::map<std::string, std::vector<float>>& first() { return m_; }
    std::map<std::string, std::vector<float>>& second() { return v_; }
    const std::map<std::string, std::vector<float>>& first() const { return m_; }
    const std::map<std::string, std::vector<float>>& second() const { return v_; }

   private:
    double lr_, beta1_, beta2_, eps_;
    RoleMask mask_;
    long t_ = 0;
    std::map<std::string, std::vector<float>> m_, v_;
};

}  // namespace cdlm
