#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cdlm/graph.hpp"
#include "cdlm/ops.hpp"

namespace cdlm {

struct ConvLayerSpec {
    std::size_t out_channels = 16;
    std::size_t kernel = 3;
    std::size_t stride = 2;

    bool operator==(const ConvLayerSpec&) const = default;
};

/// Desk-scale architecture. The decoder mirrors the encoder: stride-2 layers
/// become 4x4/stride-2 transposed convolutions, stride-1 layers 3x3/stride-1.
struct NetConfig {
    std::size_t channels = 3;
    std::size_t height = 16;
    std::size_t width = 16;
    std::vector<ConvLayerSpec> conv = {{16, 3, 2}, {32, 3, 2}, {64, 3, 2}};
    std::size_t z_dim = 64;
    std::size_t disc_hidden = 256;
    double slope = 0.2;
    /// 1-based conv layer whose activations feed the h head; 0 means the last.
    std::size_t h_tap = 0;

    bool operator==(const NetConfig&) const = default;

    /// Throws ErrorKind::Configuration.
    void validate() const;
    Shape image_shape() const { return {channels, height, width}; }
    /// [channels, h, w] produced by encoder layer i (0-based).
    Shape layer_shape(std::size_t i) const;
    std::size_t tap_layer() const { return h_tap == 0 ? conv.size() : h_tap; }
};

enum class Domain : std::uint8_t { Source, Target };
const char* to_string(Domain d);

/// Variational moments of one batch; sigma = exp(log_sigma).
template <typename T>
struct DomainInfo {
    Var<T> mu;
    Var<T> log_sigma;
};

/// Sigmoid-bounded deep representation, every element in (0, 1).
template <typename T>
struct DeepRep {
    Var<T> h;
};

template <typename T>
struct TransferLatent {
    Var<T> z;
    Domain info_domain;
    Domain rep_domain;
};

template <typename T>
struct Encoding {
    DomainInfo<T> info;
    DeepRep<T> rep;
};

/// Plain-tensor view of an encoding, for evaluation code.
template <typename T>
struct EncodedBatch {
    Tensor<T> mu;
    Tensor<T> log_sigma;
    Tensor<T> h;
};

/// Parameters of a Model registered as leaves of one graph.
template <typename T>
struct BoundParams {
    Graph<T>* graph = nullptr;
    std::vector<Var<T>> vars;
};

template <typename T>
class Model {
   public:
    explicit Model(NetConfig config);

    /// Fan-in scaled uniform weights, zero biases.
    void initialize(std::uint64_t seed);
    bool initialized() const { return initialized_; }
    /// Marks parameters as loaded from a checkpoint.
    void mark_initialized() { initialized_ = true; }

    const NetConfig& config() const { return config_; }
    ParamSet<T>& params() { return params_; }
    const ParamSet<T>& params() const { return params_; }

    BoundParams<T> bind(Graph<T>& g);

    /// Unified inference model: one parameter set for both domains.
    Encoding<T> encode(BoundParams<T>& p, Var<T> x) const;
    Var<T> decode(BoundParams<T>& p, Var<T> z) const;
    /// Gradient reversal, then a two-layer MLP with sigmoid output.
    Var<T> discriminate(BoundParams<T>& p, const DeepRep<T>& rep, double grl_scale) const;

    EncodedBatch<T> encode(const Tensor<T>& x) const;
    Tensor<T> decode(const Tensor<T>& z) const;
    /// Target image -> source-styled image through decode(g1*h + g2*eps).
    Tensor<T> test_mode_adapt(const Tensor<T>& x_t, const Tensor<T>& eps, double gamma1, double gamma2) const;

    template <typename U>
    Model<U> cast() const {
        Model<U> out(config_);
        for (auto& p : out.params()) {
            p.value = params_.at(p.name).value.template cast<U>();
            p.value.set_requires_grad(true);
        }
        if (initialized_) out.mark_initialized();
        return out;
    }

   private:
    void check_ready() const;
    void check_images(const Shape& s) const;

    NetConfig config_;
    ParamSet<T> params_;
    bool initialized_ = false;

    struct LayerIdx {
        std::size_t w, b;
    };
    std::vector<LayerIdx> enc_conv_;
    LayerIdx head_mu_{}, head_log_sigma_{}, head_h_{};
    LayerIdx dec_fc_{};
    std::vector<LayerIdx> dec_conv_;
    std::vector<int> dec_stride_;
    LayerIdx disc_hidden_{}, disc_out_{};
};

/// z = mu + exp(log_sigma) * (gamma1 * h_other + gamma2 * eps). Cross-domain
/// pairs are required unless `diagnostic` is set.
template <typename T>
TransferLatent<T> modulate(const DomainInfo<T>& info, Domain info_domain, const DeepRep<T>& rep_other,
                           Domain rep_domain, Var<T> eps, double gamma1, double gamma2,
                           bool diagnostic = false);

/// gamma1 * h + gamma2 * eps.
template <typename T>
Var<T> rep_to_latent(const DeepRep<T>& rep, Var<T> eps, double gamma1, double gamma2);

template <typename T>
struct LatentMoments {
    Tensor<T> mu;
    Tensor<T> sigma;
};

/// Mean and standard deviation of the modulated latent when h is drawn from
/// a distribution with per-coordinate moments (mu_h, sigma_h):
///   mu_z    = mu + gamma1 * sigma * mu_h
///   sigma_z = sigma * sqrt(gamma1^2 * sigma_h^2 + gamma2^2)
/// mu_h and sigma_h either match the shape of mu or its trailing dimension.
template <typename T>
LatentMoments<T> closed_form_moments(const Tensor<T>& mu, const Tensor<T>& sigma, const Tensor<T>& mu_h,
                                     const Tensor<T>& sigma_h, double gamma1, double gamma2);

}  // namespace cdlm
