#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "marval/errors.hpp"
#include "marval/identity_lab.hpp"

using namespace marval;
using namespace marval::lab;

namespace {

const diffusion::NoiseSchedule& schedule() {
    static const auto s = diffusion::build_schedule(1000);
    return s;
}

Mat identity_u(const Mat& x) { return x; }

}  // namespace

TEST_CASE("analytic flow marginals") {
    const AnalyticGaussianFlow flow{(Vec(2) << 0.7, -1.0).finished(), (Vec(2) << 1.3, 0.4).finished(), &schedule()};
    CHECK(flow.marginal_mean(0).isApprox(flow.mu));
    CHECK(flow.marginal_var(0).isApprox(Vec(flow.sigma.array().square())));
    const double ab = schedule().alpha_bar[300];
    CHECK(flow.marginal_var(300)(1) == doctest::Approx(ab * 0.16 + 1 - ab));
    const Mat x = (Mat(1, 2) << 0.2, 0.3).finished();
    CHECK(flow.score_at(x, 300)(0, 1) ==
          doctest::Approx(-(0.3 - std::sqrt(ab) * -1.0) / (ab * 0.16 + 1 - ab)));
}

TEST_CASE("projection residual vanishes for the exact marginal score") {
    Rng rng(1);
    const AnalyticGaussianFlow flow{Vec::Constant(1, 0.7), Vec::Constant(1, 1.3), &schedule()};
    const auto rep = score_projection_residual(flow, identity_u, 500, 100000, rng);
    CHECK(rep.verdict == Verdict::pass);
    CHECK(std::abs(rep.estimate) <= 3 * rep.std_error);
    CHECK(rep.n_samples == 100000);

    CHECK_THROWS_AS(score_projection_residual(flow, identity_u, 0, 100000, rng), DomainError);
    CHECK_THROWS_AS(score_projection_residual(flow, identity_u, 10, 999, rng), ConfigError);
}

TEST_CASE("projection residual holds across random Gaussians, steps and test functions") {
    Rng rng(2);
    int passes = 0;
    const int cases = 100;
    const std::vector<TestFunction> tests = {
        identity_u,
        [](const Mat& x) { return Mat(x.array().sin()); },
        [](const Mat& x) { return Mat((2.0 * x.array()).tanh()); },
    };
    for (int i = 0; i < cases; ++i) {
        const int dim = 1 + static_cast<int>(rng.uniform_int(0, 1));
        Vec mu(dim), sigma(dim);
        for (int j = 0; j < dim; ++j) {
            mu(j) = -2.0 + 4.0 * rng.uniform();
            sigma(j) = 0.3 + 1.7 * rng.uniform();
        }
        const AnalyticGaussianFlow flow{mu, sigma, &schedule()};
        const int t = static_cast<int>(rng.uniform_int(1, 1000));
        const auto rep = score_projection_residual(flow, tests[static_cast<std::size_t>(i % 3)], t, 20000, rng);
        if (rep.verdict == Verdict::pass) ++passes;
    }
    // A 3-SE band fails about 0.3% of the time under the null.
    CHECK(passes >= cases - 3);
}

TEST_CASE("surrogate gradient matches finite differences") {
    Rng rng(3);
    const AnalyticGaussianFlow teacher{Vec::Zero(1), Vec::Ones(1), &schedule()};
    for (const auto mode : {gsim::Distance::squared, gsim::Distance::pseudo_huber}) {
        const auto rep = gradient_equivalence_check(Vec::Constant(1, 0.5), Vec::Ones(1), teacher, mode, 500, 200000, rng);
        INFO("relative error " << rep.estimate);
        CHECK(rep.verdict == Verdict::pass);
        CHECK(rep.surrogate.size() == 2);
        CHECK(rep.finite_difference.size() == 2);
        CHECK(rep.pathwise.size() == 2);
        // The pathwise gradient is the same quantity by a different route.
        CHECK(rep.pathwise[0] == doctest::Approx(rep.finite_difference[0]).epsilon(0.05));
    }
}

TEST_CASE("gradient vanishes at the optimum") {
    Rng rng(4);
    const AnalyticGaussianFlow teacher{(Vec(2) << 0.3, -0.2).finished(), (Vec(2) << 1.0, 0.5).finished(), &schedule()};
    const auto rep = gradient_equivalence_check(teacher.mu, teacher.sigma, teacher, gsim::Distance::squared, 300, 50000, rng);
    INFO("surrogate " << rep.surrogate[0] << " " << rep.surrogate[1] << " fd " << rep.finite_difference[0] << " "
                      << rep.finite_difference[1] << " se " << rep.std_error << " est " << rep.estimate << " sse " << rep.surrogate_se[0] << " " << rep.surrogate_se[1]);
    CHECK(rep.verdict == Verdict::pass);
    for (std::size_t k = 0; k < rep.surrogate.size(); ++k) {
        CHECK(std::abs(rep.surrogate[k]) <= 3 * rep.surrogate_se[k] + 1e-12);
    }
}

TEST_CASE("KL quadrature") {
    Rng rng(5);
    const AnalyticGaussianFlow teacher{Vec::Zero(1), Vec::Ones(1), &schedule()};
    const auto same = kl_fisher_quadrature(teacher, teacher, 200, 2000, rng);
    CHECK(same.value == doctest::Approx(0.0).epsilon(1e-12));

    // KL(N(m, 1) || N(0, 1)) = m^2 / 2.
    const AnalyticGaussianFlow shifted{Vec::Constant(1, 0.5), Vec::Ones(1), &schedule()};
    const auto kl = kl_fisher_quadrature(shifted, teacher, 1000, 4000, rng);
    CHECK(std::abs(kl.value - 0.125) <= 0.05 * 0.125);

    // Gradient in the student mean by central differences on common noise: d/dm (m^2/2) = m.
    Rng a(6);
    Rng b(6);
    const double h = 1e-3;
    const AnalyticGaussianFlow up{Vec::Constant(1, 0.5 + h), Vec::Ones(1), &schedule()};
    const AnalyticGaussianFlow down{Vec::Constant(1, 0.5 - h), Vec::Ones(1), &schedule()};
    const double grad = (kl_fisher_quadrature(up, teacher, 1000, 4000, a).value -
                         kl_fisher_quadrature(down, teacher, 1000, 4000, b).value) / (2 * h);
    CHECK(grad == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("verification suite") {
    const auto rows = run_identity_suite(7, 20000, 100000, 5);
    CHECK(rows.size() >= 10);
    int failures = 0;
    for (const auto& row : rows) {
        INFO(row.name << " estimate " << row.estimate << " reference " << row.reference);
        if (row.verdict == Verdict::fail) ++failures;
        CHECK(std::string(to_string(row.verdict)).size() > 0);
    }
    CHECK(failures == 0);
}
