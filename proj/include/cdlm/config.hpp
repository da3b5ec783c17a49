#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "cdlm/losses.hpp"
#include "cdlm/model.hpp"

namespace cdlm {

struct TrainConfig {
    double gamma1 = 1.0;
    double gamma2 = 0.1;
    LossWeights weights;
    double eta1 = 0.003;
    double eta2 = 5e-4;
    double momentum = 0.9;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t batch_size = 64;
    long steps = 5000;
    std::uint64_t seed = 0;
    double grl_scale = 1.0;
    long eval_every = 500;
    ReconLikelihood recon = ReconLikelihood::Bernoulli;
    /// Image geometry is taken from the data at fit time.
    NetConfig net;

    /// Throws ErrorKind::Configuration.
    void validate() const;

    /// key=value lines, one per field, in a fixed order.
    std::string to_text() const;
    /// Keys absent from `text` keep their defaults. Unknown keys raise
    /// ErrorKind::Usage listing every offender; bad values ErrorKind::Configuration.
    static TrainConfig parse(const std::string& text);
    static TrainConfig load(const std::filesystem::path& path);

    /// Applies one key=value assignment (same rules as parse).
    void set(const std::string& key, const std::string& value);
};

}  // namespace cdlm
