#include "marval/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "marval/errors.hpp"

namespace marval::diffusion {

namespace {

constexpr double kBetaMin = 1e-5;
constexpr double kBetaMax = 0.999;

void check_step(const NoiseSchedule& sched, int t) {
    if (t < 0 || t > sched.T) {
        throw ContractError("step " + std::to_string(t) + " outside [0, " + std::to_string(sched.T) + "]");
    }
}

void fill_derived(NoiseSchedule& sched) {
    sched.lambda_w.assign(static_cast<std::size_t>(sched.T + 1), 1.0);
    sched.lambda_w[0] = 0.0;
    sched.g_sq.assign(static_cast<std::size_t>(sched.T + 1), 0.0);
    for (int t = 1; t <= sched.T; ++t) {
        sched.g_sq[static_cast<std::size_t>(t)] =
            -(std::log(sched.alpha_bar[static_cast<std::size_t>(t)]) -
              std::log(sched.alpha_bar[static_cast<std::size_t>(t - 1)]));
    }
}

}  // namespace

double NoiseSchedule::sqrt_alpha_bar(int t) const {
    check_step(*this, t);
    return std::sqrt(alpha_bar[static_cast<std::size_t>(t)]);
}

double NoiseSchedule::sqrt_one_minus(int t) const {
    check_step(*this, t);
    return std::sqrt(1.0 - alpha_bar[static_cast<std::size_t>(t)]);
}

double NoiseSchedule::beta(int t) const {
    check_step(*this, t);
    if (t == 0) return 0.0;
    return 1.0 - alpha_bar[static_cast<std::size_t>(t)] / alpha_bar[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::posterior_variance(int t) const {
    if (t <= 1) return 0.0;
    const double ab = alpha_bar[static_cast<std::size_t>(t)];
    const double ab_prev = alpha_bar[static_cast<std::size_t>(t - 1)];
    return beta(t) * (1.0 - ab_prev) / (1.0 - ab);
}

NoiseSchedule build_schedule(int T, double s) {
    if (T < 2) throw ConfigError("T", "step count must be >= 2, got " + std::to_string(T));
    if (!(s > 0.0)) throw ConfigError("s", "cosine offset must be > 0");
    auto f = [&](double t) {
        const double c = std::cos((t / T + s) / (1.0 + s) * std::numbers::pi / 2.0);
        return c * c;
    };
    NoiseSchedule sched;
    sched.T = T;
    sched.s = s;
    sched.alpha_bar.resize(static_cast<std::size_t>(T + 1));
    sched.alpha_bar[0] = 1.0;
    const double f0 = f(0.0);
    double prev = 1.0;
    for (int t = 1; t <= T; ++t) {
        // Per-step ratio clipped so the final alpha_bar stays positive.
        const double raw = f(t) / f0;
        const double beta = std::clamp(1.0 - raw / prev, kBetaMin, kBetaMax);
        prev *= 1.0 - beta;
        sched.alpha_bar[static_cast<std::size_t>(t)] = prev;
    }
    sched.timesteps.resize(static_cast<std::size_t>(T + 1));
    for (int t = 0; t <= T; ++t) sched.timesteps[static_cast<std::size_t>(t)] = t;
    fill_derived(sched);
    return sched;
}

NoiseSchedule respace(const NoiseSchedule& base, int n_steps) {
    if (n_steps < 1 || n_steps > base.T) {
        throw ConfigError("n_diff", "respaced step count must be in [1, " + std::to_string(base.T) + "]");
    }
    NoiseSchedule out;
    out.T = n_steps;
    out.s = base.s;
    out.alpha_bar.resize(static_cast<std::size_t>(n_steps + 1));
    out.timesteps.resize(static_cast<std::size_t>(n_steps + 1));
    for (int i = 0; i <= n_steps; ++i) {
        const int t = static_cast<int>(std::lround(static_cast<double>(i) * base.T / n_steps));
        out.timesteps[static_cast<std::size_t>(i)] = base.timesteps[static_cast<std::size_t>(t)];
        out.alpha_bar[static_cast<std::size_t>(i)] = base.alpha_bar[static_cast<std::size_t>(t)];
    }
    fill_derived(out);
    return out;
}

NoisySample perturb(const Mat& x0, int t, const Mat& eps, const NoiseSchedule& sched) {
    std::vector<int> steps(static_cast<std::size_t>(x0.rows()), t);
    return perturb(x0, steps, eps, sched);
}

NoisySample perturb(const Mat& x0, std::span<const int> t, const Mat& eps, const NoiseSchedule& sched) {
    if (eps.rows() != x0.rows() || eps.cols() != x0.cols()) throw ContractError("perturb: eps shape != x0 shape");
    if (static_cast<ad::Index>(t.size()) != x0.rows()) throw ContractError("perturb: one step per row required");
    NoisySample out;
    out.t.assign(t.begin(), t.end());
    out.eps = eps;
    out.x_t.resize(x0.rows(), x0.cols());
    for (ad::Index i = 0; i < x0.rows(); ++i) {
        const int step = t[static_cast<std::size_t>(i)];
        out.x_t.row(i) = sched.sqrt_alpha_bar(step) * x0.row(i) + sched.sqrt_one_minus(step) * eps.row(i);
    }
    return out;
}

Mat conditional_score(const NoisySample& sample, const Mat& x0, const NoiseSchedule& sched) {
    if (x0.rows() != sample.x_t.rows() || x0.cols() != sample.x_t.cols()) {
        throw ContractError("conditional_score: x0 shape != x_t shape");
    }
    Mat out(x0.rows(), x0.cols());
    for (ad::Index i = 0; i < x0.rows(); ++i) {
        const int t = sample.t[static_cast<std::size_t>(i)];
        if (t == 0) throw DomainError("conditional score is degenerate at t = 0");
        const double var = 1.0 - sched.alpha_bar[static_cast<std::size_t>(t)];
        out.row(i) = -(sample.x_t.row(i) - sched.sqrt_alpha_bar(t) * x0.row(i)) / var;
    }
    return out;
}

Vec sqrt_alpha_bar_rows(std::span<const int> t, const NoiseSchedule& sched) {
    Vec v(static_cast<ad::Index>(t.size()));
    for (std::size_t i = 0; i < t.size(); ++i) v(static_cast<ad::Index>(i)) = sched.sqrt_alpha_bar(t[i]);
    return v;
}

Vec sqrt_one_minus_rows(std::span<const int> t, const NoiseSchedule& sched) {
    Vec v(static_cast<ad::Index>(t.size()));
    for (std::size_t i = 0; i < t.size(); ++i) v(static_cast<ad::Index>(i)) = sched.sqrt_one_minus(t[i]);
    return v;
}

Mat eps_to_score(const Mat& eps, std::span<const int> t, const NoiseSchedule& sched) {
    const Vec inv = sqrt_one_minus_rows(t, sched).cwiseInverse();
    return -(eps.array().colwise() * inv.array()).matrix();
}

double dsm_loss(const ScoreFn& score, const Mat& x0, const NoiseSchedule& sched, Rng& rng) {
    if (x0.rows() == 0) throw ContractError("dsm_loss: empty batch");
    std::vector<int> t(static_cast<std::size_t>(x0.rows()));
    for (auto& step : t) step = static_cast<int>(rng.uniform_int(1, sched.T));
    const Mat eps = gaussian(x0.rows(), x0.cols(), rng);
    const NoisySample sample = perturb(x0, t, eps, sched);
    const Mat target = conditional_score(sample, x0, sched);
    const Mat pred = score(sample.x_t, sample.t);
    if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
        throw ContractError("dsm_loss: score output shape mismatch");
    }
    double total = 0.0;
    for (ad::Index i = 0; i < pred.rows(); ++i) {
        if (!pred.row(i).allFinite()) {
            throw NumericError("dsm_loss: non-finite score at step " + std::to_string(t[static_cast<std::size_t>(i)]));
        }
        total += sched.lambda_w[static_cast<std::size_t>(t[static_cast<std::size_t>(i)])] *
                 (pred.row(i) - target.row(i)).squaredNorm();
    }
    return total / static_cast<double>(pred.rows());
}

Mat ancestral_step(const Mat& x_t, int t, const Mat& eps_hat, const NoiseSchedule& sched, Rng& rng,
                   bool stochastic, double x0_clip) {
    if (t == 0) throw DomainError("ancestral_step: no reverse step from t = 0");
    check_step(sched, t);
    if (eps_hat.rows() != x_t.rows() || eps_hat.cols() != x_t.cols()) {
        throw ContractError("ancestral_step: eps_hat shape != x_t shape");
    }
    const double ab = sched.alpha_bar[static_cast<std::size_t>(t)];
    Mat x0_hat = (x_t - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab);
    if (x0_clip > 0.0) x0_hat = x0_hat.cwiseMax(-x0_clip).cwiseMin(x0_clip);
    if (t == 1) return x0_hat;
    const double ab_prev = sched.alpha_bar[static_cast<std::size_t>(t - 1)];
    const double beta = sched.beta(t);
    const double coef_x0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double coef_xt = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
    Mat mean = coef_x0 * x0_hat + coef_xt * x_t;
    if (stochastic) mean += std::sqrt(sched.posterior_variance(t)) * gaussian(x_t.rows(), x_t.cols(), rng);
    return mean;
}

Mat gaussian(ad::Index rows, ad::Index cols, Rng& rng) {
    Mat m(rows, cols);
    // Row-major fill so a row's draws stay contiguous in the stream.
    for (ad::Index i = 0; i < rows; ++i) {
        for (ad::Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
    }
    return m;
}

}  // namespace marval::diffusion
