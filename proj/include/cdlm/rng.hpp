#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "cdlm/tensor.hpp"

namespace cdlm {

/// Seeded generator whose full state round-trips through a string, so that
/// checkpoints resume bit-exactly. Normal draws use Box-Muller without a
/// cached spare, keeping the state a pure function of the engine.
class Rng {
   public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    /// Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n).
    std::size_t below(std::size_t n);
    double normal();

    template <typename T>
    Tensor<T> normal_tensor(Shape shape) {
        Tensor<T> t(std::move(shape));
        for (auto& v : t.data()) v = static_cast<T>(normal());
        return t;
    }

    std::string state() const;
    void set_state(const std::string& state);

    /// Independent stream for a sub-component (seed + fixed offset).
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t offset) {
        return seed * 0x9E3779B97F4A7C15ull + offset * 0xBF58476D1CE4E5B9ull + 1;
    }

   private:
    std::mt19937_64 engine_;
};

}  // namespace cdlm
