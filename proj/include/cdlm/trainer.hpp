#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include "cdlm/config.hpp"
#include "cdlm/data.hpp"
#include "cdlm/optim.hpp"
#include "cdlm/rng.hpp"

namespace cdlm {

/// Encoder and discriminator follow SGD with momentum, the decoder Adam.
struct TrainState {
    long step = 0;
    Model<float> model;
    SgdMomentum sgd;
    Adam adam;
    Rng rng;

    /// Fresh model for images of `image_shape` ([c, h, w]); seeds derive from cfg.seed.
    TrainState(const TrainConfig& cfg, const Shape& image_shape);
    /// Wraps an existing model with empty optimizer slots.
    TrainState(const TrainConfig& cfg, Model<float> model);
};

/// Terms excluded from every gradient while still being reported.
struct Detach {
    bool adversarial = false;
    bool reconstruction = false;
    bool consistency = false;
};

template <typename T>
struct StepLosses {
    LossTerms<T> terms;
    Var<T> total_phi;
    Var<T> total_theta;
};

/// The full objective on one source/target batch pair. eps_s is shared by
/// the reconstruction and generation branches of the source, eps_t likewise.
template <typename T>
StepLosses<T> build_losses(const Model<T>& model, BoundParams<T>& p, Var<T> xs, Var<T> xt, Var<T> eps_s,
                           Var<T> eps_t, const TrainConfig& cfg, Detach detach = {});

/// Raised when a step produces a non-finite value; parameters are left untouched.
class NonFiniteLoss : public Error {
   public:
    NonFiniteLoss(const std::string& what, LossReport report)
        : Error(ErrorKind::NonFinite, what), report_(report) {}
    const LossReport& report() const { return report_; }

   private:
    LossReport report_;
};

/// One update: total_phi drives encoder and discriminator, total_theta the decoder.
LossReport train_step(TrainState& state, const TrainConfig& cfg, const Tensor<float>& source,
                      const UnlabeledImages& target, Detach detach = {});

/// Rows drawn with replacement from the state's generator.
Tensor<float> sample_rows(const Tensor<float>& images, std::size_t count, Rng& rng);

void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const TrainConfig& cfg);

struct Checkpoint {
    TrainConfig config;
    TrainState state;
};

/// Throws ErrorKind::Format on bad magic, version, checksum or truncation.
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct FitHooks {
    /// Columns after "step" in eval.csv; empty disables periodic evaluation.
    std::string eval_header;
    std::function<std::string(const TrainState&)> eval;
    /// Called after every step.
    std::function<void(const TrainState&, const LossReport&)> on_step;
};

/// Runs state.step .. cfg.steps. Writes loss_trace.csv (one row per step run),
/// checkpoint_NNNNNN.bin at the start, every eval_every steps and at the end,
/// eval.csv and adapted_NNNNNN.ppm mosaics when target previews are given.
/// With an empty out_dir nothing is written.
TrainState fit(const TrainConfig& cfg, const DomainBatch& source, const UnlabeledImages& target,
               const std::filesystem::path& out_dir, const FitHooks& hooks = {},
               std::optional<TrainState> resume_from = std::nullopt, const UnlabeledImages* preview = nullptr);

/// Loads a checkpoint for continued training.
Checkpoint resume(const std::filesystem::path& checkpoint);

std::string checkpoint_name(long step);

}  // namespace cdlm
