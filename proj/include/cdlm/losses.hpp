#pragma once

#include <string>
#include <utility>

#include "cdlm/model.hpp"

namespace cdlm {

enum class ReconLikelihood { Bernoulli, Gaussian };

/// Per-batch means of every training objective.
struct LossReport {
    double rec = 0, kl_st = 0, kl_ts = 0, adv = 0, cons_s = 0, cons_t = 0;
    double total_phi = 0, total_theta = 0;

    bool all_finite() const;
    static std::string csv_header();  // "step,rec,kl_st,..."
    std::string csv_row(long step) const;
};

struct LossWeights {
    double lambda1 = 1e-4;
    double lambda2 = 1e-4;
    double beta1 = 0.1;
    double beta2 = 0.01;
};

/// Floor added to the batch variance of h before the square root, so that
/// gamma2 = 0 with a collapsed representation still yields a finite KL.
inline constexpr double kMomentVarianceFloor = 1e-6;

/// Batch mean over samples of 0.5 * sum_i (mu^2 + sigma^2 - 2 log sigma - 1).
/// Throws ErrorKind::Domain when sigma <= 0.
template <typename T>
Var<T> kl_standard_normal(Var<T> mu, Var<T> sigma);
template <typename T>
double kl_standard_normal(const Tensor<T>& mu, const Tensor<T>& sigma);

/// Moments of q(z | x_own, x_other) when the other domain's h is treated as a
/// random draw whose per-coordinate mean and variance are the batch statistics.
template <typename T>
std::pair<Var<T>, Var<T>> modulated_moments(const DomainInfo<T>& info, const DeepRep<T>& rep_other,
                                            double gamma1, double gamma2);

/// Mean per-pixel negative log-likelihood. Bernoulli (BCE) requires x_hat in (0, 1).
template <typename T>
Var<T> reconstruction_loss(Var<T> x_hat, Var<T> x, ReconLikelihood kind = ReconLikelihood::Bernoulli);

/// -mean log p_s - mean log(1 - p_t); throws ErrorKind::Domain outside (0, 1).
template <typename T>
Var<T> adversarial_loss(Var<T> p_s, Var<T> p_t);

template <typename T>
Var<T> mse(Var<T> a, Var<T> b);

/// (MSE(xhat_st, xtilde_s), MSE(xhat_ts, xtilde_t)); weighting happens in aggregate.
template <typename T>
std::pair<Var<T>, Var<T>> consistency_loss(Var<T> xhat_st, Var<T> xtilde_s, Var<T> xhat_ts, Var<T> xtilde_t);

template <typename T>
struct LossTerms {
    Var<T> rec, kl_st, kl_ts, adv, cons_s, cons_t;
};

/// total_phi   = adv + lambda1 (kl_st + kl_ts) + lambda2 rec
/// total_theta = rec + beta1 cons_s + beta2 cons_t
template <typename T>
std::pair<Var<T>, Var<T>> aggregate(const LossTerms<T>& terms, const LossWeights& w);
LossReport aggregate(LossReport components, const LossWeights& w);

template <typename T>
LossReport report_of(const LossTerms<T>& terms, Var<T> total_phi, Var<T> total_theta);

}  // namespace cdlm
