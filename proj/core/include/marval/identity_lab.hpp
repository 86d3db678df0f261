#pragma once

#include <functional>
#include <string>
#include <vector>

#include "marval/diffusion.hpp"
#include "marval/gsim.hpp"

namespace marval::lab {

using ad::Mat;
using ad::Vec;
using diffusion::NoiseSchedule;

/// Data distribution N(mu, diag(sigma^2)) pushed through the VP forward process.
struct AnalyticGaussianFlow {
    Vec mu;
    Vec sigma;
    const NoiseSchedule* schedule = nullptr;

    int dim() const { return static_cast<int>(mu.size()); }
    Vec marginal_mean(int t) const;
    Vec marginal_var(int t) const;
    /// Exact marginal score at step t, row by row.
    Mat score_at(const Mat& x, int t) const;
    Mat sample_x0(ad::Index n, Rng& rng) const;
};

enum class Verdict { pass, fail, inconclusive };
const char* to_string(Verdict v);

struct IdentityReport {
    double estimate = 0.0;
    double std_error = 0.0;
    long n_samples = 0;
    Verdict verdict = Verdict::inconclusive;
    // Gradient checks only: surrogate gradient, finite-difference oracle,
    // pathwise autodiff gradient and the per-component standard errors.
    std::vector<double> surrogate;
    std::vector<double> finite_difference;
    std::vector<double> pathwise;
    std::vector<double> surrogate_se;
};

using TestFunction = std::function<Mat(const Mat& x)>;

/// Monte-Carlo estimate of E[u(x_t)^T (s_q(x_t) - grad log p_t(x_t | x_0))].
/// Pass iff |estimate| <= 3 SE. DomainError at t = 0; ConfigError if n < 1000.
IdentityReport score_projection_residual(const AnalyticGaussianFlow& flow, const TestFunction& u, int t, long n,
                                         Rng& rng);

/// Compares the surrogate-objective gradient (student score under stop-gradient,
/// gradient only through x_t) with central finite differences, using common random
/// numbers, of E[d(s_q - s_p)] at step t. Gradients are over (mu, sigma) in that order.
/// `estimate` is |surrogate - fd| / |fd|; when the true gradient is zero the check
/// instead requires every component of both within 3 SE.
IdentityReport gradient_equivalence_check(const Vec& mu, const Vec& sigma, const AnalyticGaussianFlow& teacher,
                                          gsim::Distance mode, int t, long n, Rng& rng, double r = 1e-5,
                                          double tolerance = 0.05);

struct KlEstimate {
    double value = 0.0;
    double std_error = 0.0;
};

/// (1/2) sum_k g^2(k) E_student[|s_q - s_p|^2] on a cosine schedule with n_t steps
/// (right-endpoint rule, same offset s as the flows' schedule).
KlEstimate kl_fisher_quadrature(const AnalyticGaussianFlow& student, const AnalyticGaussianFlow& teacher, int n_t,
                                long n, Rng& rng);

struct SuiteRow {
    std::string name;
    double estimate = 0.0;
    double reference = 0.0;
    double tolerance = 0.0;
    Verdict verdict = Verdict::inconclusive;
};

/// The standard verification table used by the verify-identities stage.
std::vector<SuiteRow> run_identity_suite(std::uint64_t seed, long projection_samples = 100000,
                                         long gradient_samples = 1000000, int projection_configs = 20);

}  // namespace marval::lab
