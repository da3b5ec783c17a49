#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cdlm/trainer.hpp"

namespace cdlm {

struct ClassifierConfig {
    std::size_t steps = 600;
    std::size_t batch_size = 64;
    double lr = 1e-3;
    std::uint64_t seed = 0;
};

/// Two strided conv layers and a two-layer head, softmax output.
class Classifier {
   public:
    Classifier(const Shape& image_shape, std::size_t classes, std::uint64_t seed);

    std::size_t classes() const { return classes_; }
    const Shape& image_shape() const { return image_shape_; }
    ParamSet<float>& params() { return params_; }

    Var<float> logits(Graph<float>& g, Var<float> x) const;
    std::vector<int> predict(const Tensor<float>& images) const;

   private:
    Shape image_shape_;
    std::size_t classes_;
    ParamSet<float> params_;
};

/// Adam on softmax cross-entropy. Throws ErrorKind::Usage without labels.
Classifier train_classifier(const DomainBatch& labeled, std::size_t classes, const ClassifierConfig& cfg = {});

struct Accuracy {
    double overall = 0;
    std::vector<double> per_class;
};

Accuracy accuracy(const Classifier& clf, const Tensor<float>& images, const std::vector<int>& labels);

/// Test-mode images for the whole batch, generated in chunks.
Tensor<float> adapt_images(const Model<float>& model, const Tensor<float>& target, double gamma1, double gamma2,
                           std::uint64_t seed);

/// Classifier accuracy on test_mode_adapt(x_t). Labels are read only for scoring.
Accuracy adaptation_accuracy(const Model<float>& model, const Classifier& clf, const DomainBatch& target_test,
                             double gamma1, double gamma2, std::uint64_t seed);

/// Proxy A-distance 2(1 - 2 err) from a linear logistic probe trained on half
/// of each domain and scored on the other half; clamped to [0, 2].
struct ADistance {
    double value = 0;
    double error = 0;
};
ADistance a_distance(const Tensor<float>& features_s, const Tensor<float>& features_t, std::uint64_t seed);

/// Rows flattened to [n, rest].
Tensor<float> flat_features(const Tensor<float>& images);
/// Deep representations h of a batch.
Tensor<float> rep_features(const Model<float>& model, const Tensor<float>& images);

struct MomentEstimate {
    Tensor<double> mu_h;
    Tensor<double> sigma_h;
};

using MomentFormula = std::function<LatentMoments<double>(const Tensor<double>&, const Tensor<double>&,
                                                          const Tensor<double>&, const Tensor<double>&, double, double)>;

struct MomentCheck {
    MomentEstimate rep;
    LatentMoments<double> closed;
    std::vector<double> z_mean;
    std::vector<double> z_var;
    double max_abs_z = 0;
    std::size_t samples = 0;

    bool within(double bound) const { return max_abs_z <= bound; }
};

/// Monte-Carlo moments of modulate against a closed form. The (mu, sigma) of
/// the first image are held fixed while h is bootstrapped from the batch, so
/// the h distribution's moments are known exactly. Throws ErrorKind::Usage
/// when n_samples < 1000.
MomentCheck verify_moments(const Model<float>& model, const Tensor<float>& target, double gamma1, double gamma2,
                           std::size_t n_samples, std::uint64_t seed,
                           const MomentFormula& formula = closed_form_moments<double>);

struct ImageMetrics {
    double mse = 0;
    double psnr = 0;
    bool psnr_infinite = false;
};

/// PSNR = 10 log10(1 / mse) for images in [0, 1].
ImageMetrics image_metrics(const Tensor<float>& a, const Tensor<float>& b);

/// Rows "domain,label,z0,...": source rows carry z_st (paired with target
/// rows in order), target rows z_ts. Missing labels are written as -1.
void export_embeddings(const Model<float>& model, const DomainBatch& source, const DomainBatch& target,
                       double gamma1, double gamma2, std::uint64_t seed, const std::filesystem::path& path);

struct EvalReport {
    double source_only_acc = 0;
    double adapted_acc = 0;
    double target_only_acc = 0;
    double a_distance_raw = 0;
    double a_distance_cdlm = 0;
    double mse = 0;
    double psnr = 0;
    bool psnr_infinite = false;
    double sigma_mean = 0;
    std::vector<double> per_class;

    static std::string csv_header(std::size_t classes);
    std::string csv_row() const;
};

struct EvalOptions {
    double gamma1 = 1.0;
    double gamma2 = 0.1;
    std::uint64_t seed = 0;
    bool a_distance = true;
    /// Probe decoded test-mode images instead of h.
    bool probe_images = false;
};

/// target_only may be null, in which case target_only_acc is NaN.
EvalReport evaluate(const Model<float>& model, const Classifier& source_clf, const Classifier* target_only,
                    const DomainPair& data, const EvalOptions& opts);

/// Source classifier and target-only bound, both derived from one seed so
/// that every evaluation of a snapshot sees the same classifiers.
struct ReferenceClassifiers {
    Classifier source;
    Classifier target_only;
};
ReferenceClassifiers train_reference_classifiers(const DomainPair& data, std::uint64_t seed);
EvalOptions eval_options_for(const TrainConfig& cfg);

// ---- ablations -----------------------------------------------------------

enum class AblationGrid { Gamma, Consistency, Depth };

struct AblationCell {
    std::string grid;
    std::string name;
    TrainConfig config;
};

/// Gamma: (0.1,1) (0.5,0.5) (0.9,0.1) (1,0.1) (1,0). Consistency: none, t, s,
/// both. Depth: h read from layers L-2, L-1 and L of the base conv stack.
std::vector<AblationCell> ablation_cells(AblationGrid grid, const TrainConfig& base);
AblationGrid parse_grid(const std::string& name);

struct AblationRow {
    AblationCell cell;
    double adapted_acc = 0;
    double source_only_acc = 0;
    double seconds = 0;
    std::string error;
};

/// Trains and scores every cell; a failing cell records its error and the
/// grid continues. Cells write into out_dir/<grid>_<name> when out_dir is set.
std::vector<AblationRow> run_ablations(const std::vector<AblationCell>& cells, const DomainPair& data,
                                       const Classifier& source_clf, const std::filesystem::path& out_dir,
                                       std::size_t jobs = 1);

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);

}  // namespace cdlm
