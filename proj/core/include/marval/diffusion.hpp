#pragma once

#include <functional>
#include <span>
#include <vector>

#include "marval/autodiff.hpp"
#include "marval/rng.hpp"

namespace marval::diffusion {

using ad::Mat;
using ad::Vec;

/// Discrete variance-preserving cosine schedule.
///
/// Index t runs over 0..T. alpha_bar[0] == 1, alpha_bar strictly decreases.
/// g_sq[t] = -(log alpha_bar[t] - log alpha_bar[t-1]) is the per-unit-step
/// diffusion coefficient used to weight Fisher integrals; lambda_w[t] is the
/// score-matching weight. For a respaced schedule, `timesteps[i]` gives the
/// training step a network should be queried at for index i.
struct NoiseSchedule {
    int T = 0;
    double s = 0.0;
    std::vector<double> alpha_bar;
    std::vector<double> lambda_w;
    std::vector<double> g_sq;
    std::vector<int> timesteps;

    double sqrt_alpha_bar(int t) const;
    double sqrt_one_minus(int t) const;
    /// beta_t = 1 - alpha_bar[t] / alpha_bar[t-1]
    double beta(int t) const;
    /// Variance of q(x_{t-1} | x_t, x_0).
    double posterior_variance(int t) const;
};

/// Throws ConfigError("T"/"s") on T < 2 or s <= 0.
NoiseSchedule build_schedule(int T, double s = 0.008);

/// Strided sub-schedule with n_steps entries, alpha_bar'[i] = alpha_bar[round(i*T/n)].
NoiseSchedule respace(const NoiseSchedule& base, int n_steps);

struct NoisySample {
    Mat x_t;
    std::vector<int> t;  // one step per row
    Mat eps;
};

NoisySample perturb(const Mat& x0, int t, const Mat& eps, const NoiseSchedule& sched);
NoisySample perturb(const Mat& x0, std::span<const int> t, const Mat& eps, const NoiseSchedule& sched);

/// grad log p_t(x_t | x_0) = -(x_t - sqrt(ab) x0) / (1 - ab). DomainError at t = 0.
Mat conditional_score(const NoisySample& sample, const Mat& x0, const NoiseSchedule& sched);

/// Per-row factors, convenient for converting between eps and score.
Vec sqrt_alpha_bar_rows(std::span<const int> t, const NoiseSchedule& sched);
Vec sqrt_one_minus_rows(std::span<const int> t, const NoiseSchedule& sched);
/// score = -eps / sqrt(1 - ab_t)
Mat eps_to_score(const Mat& eps, std::span<const int> t, const NoiseSchedule& sched);

/// A score network as seen by the loss: (x_t, per-row steps) -> score.
using ScoreFn = std::function<Mat(const Mat& x_t, std::span<const int> t)>;

/// Monte-Carlo weighted denoising score matching with t ~ U{1..T} per row.
/// NumericError (naming the step) if the network returns a non-finite value.
double dsm_loss(const ScoreFn& score, const Mat& x0, const NoiseSchedule& sched, Rng& rng);

/// One reverse step t -> t-1 from a noise prediction. At t == 1 returns the
/// x0 estimate with no noise. DomainError at t == 0. A positive x0_clip clamps
/// the x0 estimate to [-x0_clip, x0_clip]; near t = T alpha_bar is tiny and the
/// unclamped estimate amplifies any eps error by 1/sqrt(alpha_bar).
Mat ancestral_step(const Mat& x_t, int t, const Mat& eps_hat, const NoiseSchedule& sched, Rng& rng,
                   bool stochastic, double x0_clip = 0.0);

Mat gaussian(ad::Index rows, ad::Index cols, Rng& rng);

}  // namespace marval::diffusion
