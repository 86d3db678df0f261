#include "marval/identity_lab.hpp"

#include <algorithm>
#include <cmath>

#include "marval/errors.hpp"

namespace marval::lab {

namespace {

using ad::Var;

struct StepCoefs {
    double a;
    double b;
};

StepCoefs coefs(const NoiseSchedule& s, int t) { return {s.sqrt_alpha_bar(t), s.sqrt_one_minus(t)}; }

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double std_error_of(const std::vector<double>& v) {
    const double m = mean_of(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

// Plain-Eigen distance, kept separate from the graph version used by the surrogate.
double mean_distance(const Mat& y, gsim::Distance mode, double r) {
    double total = 0.0;
    for (ad::Index i = 0; i < y.rows(); ++i) {
        const double sq = y.row(i).squaredNorm();
        total += mode == gsim::Distance::squared ? sq : std::sqrt(sq + r * r) - r;
    }
    return total / static_cast<double>(y.rows());
}

// E_samples d(s_q(x_t) - s_p(x_t)) with the student (mu, sigma) packed in p.
double objective(const Vec& p, const Mat& z, const Mat& eps, const AnalyticGaussianFlow& teacher, int t,
                 gsim::Distance mode, double r) {
    const int dim = teacher.dim();
    AnalyticGaussianFlow student{p.head(dim), p.tail(dim), teacher.schedule};
    const auto [a, b] = coefs(*teacher.schedule, t);
    Mat x0 = (z.array().rowwise() * student.sigma.transpose().array()).rowwise() + student.mu.transpose().array();
    const Mat x_t = a * x0 + b * eps;
    return mean_distance(student.score_at(x_t, t) - teacher.score_at(x_t, t), mode, r);
}

// Student score -(x - a mu) / (a^2 sigma^2 + b^2) as a graph in (x, mu, sigma).
Var student_score(const Var& x_t, const Var& mean, const Var& scale, StepCoefs c) {
    Var var = ad::add_scalar(ad::scale(ad::square(scale), c.a * c.a), c.b * c.b);
    return ad::neg(ad::mul_row(ad::add_row(x_t, ad::scale(mean, -c.a)), ad::reciprocal(var)));
}

Var teacher_score(const Var& x_t, const AnalyticGaussianFlow& teacher, int t) {
    const Vec m = teacher.marginal_mean(t);
    const Vec v = teacher.marginal_var(t);
    return ad::add_row(ad::mul_row(x_t, ad::constant(-v.cwiseInverse().transpose())),
                       ad::constant(m.cwiseQuotient(v).transpose()));
}

struct ChunkGradients {
    Vec surrogate;
    Vec pathwise;
    Vec fd;
};

Vec packed_grad(nn::ParamStore& st) {
    const Mat& gm = st.at("mean").grad;
    const Mat& gs = st.at("scale").grad;
    Vec out(gm.size() + gs.size());
    out << gm.transpose(), gs.transpose();
    return out;
}

ChunkGradients chunk_gradients(const Vec& p, const AnalyticGaussianFlow& teacher, gsim::Distance mode, int t,
                               ad::Index m, Rng& rng, double r) {
    const int dim = teacher.dim();
    const Mat z = diffusion::gaussian(m, dim, rng);
    const Mat eps = diffusion::gaussian(m, dim, rng);
    const StepCoefs c = coefs(*teacher.schedule, t);
    ChunkGradients out;

    nn::ParamStore st;
    st.add("mean", p.head(dim).transpose());
    st.add("scale", p.tail(dim).transpose());
    const auto live = nn::tracked(st);
    const auto cut = nn::frozen(st);

    // Pathwise: differentiate d(s_q - s_p) with every theta dependence live.
    {
        st.zero_grad();
        Var x_t = ad::scale(ad::add_row(ad::mul_row(ad::constant(z), live("scale")), live("mean")), c.a) +
                  ad::constant(c.b * eps);
        Var y = student_score(x_t, live("mean"), live("scale"), c) - teacher_score(x_t, teacher, t);
        Var loss = ad::mean(gsim::distance_terms(y, mode, r).d);
        ad::backward(loss);
        out.pathwise = packed_grad(st);
    }
    // Surrogate: student score under stop-gradient, theta reaches the loss only through x_t.
    {
        st.zero_grad();
        Var x_t = ad::scale(ad::add_row(ad::mul_row(ad::constant(z), live("scale")), live("mean")), c.a) +
                  ad::constant(c.b * eps);
        Var s_q = student_score(x_t, cut("mean"), cut("scale"), c);
        Var y = s_q - teacher_score(x_t, teacher, t);
        const auto terms = gsim::distance_terms(y, mode, r);
        const Mat cond_score = -eps / c.b;
        Var l1 = ad::neg(ad::row_sum(ad::mul(terms.d_prime, s_q - ad::constant(cond_score))));
        Var loss = ad::mean(l1 + terms.d);
        ad::backward(loss);
        out.surrogate = packed_grad(st);
    }
    // Central differences on the same draws, Richardson-extrapolated so the
    // O(h^2) truncation term does not masquerade as gradient near an optimum.
    out.fd.resize(p.size());
    for (ad::Index i = 0; i < p.size(); ++i) {
        auto central = [&](double h) {
            Vec up = p;
            Vec dn = p;
            up(i) += h;
            dn(i) -= h;
            return (objective(up, z, eps, teacher, t, mode, r) - objective(dn, z, eps, teacher, t, mode, r)) / (2 * h);
        };
        const double h = 1e-3 * std::max(std::abs(p(i)), 1.0e-3);
        out.fd(i) = (4.0 * central(h / 2) - central(h)) / 3.0;
    }
    return out;
}

}  // namespace

const char* to_string(Verdict v) {
    switch (v) {
        case Verdict::pass:
            return "pass";
        case Verdict::fail:
            return "fail";
        default:
            return "inconclusive";
    }
}

Vec AnalyticGaussianFlow::marginal_mean(int t) const { return schedule->sqrt_alpha_bar(t) * mu; }

Vec AnalyticGaussianFlow::marginal_var(int t) const {
    const double ab = schedule->alpha_bar[static_cast<std::size_t>(t)];
    return (ab * sigma.array().square() + (1.0 - ab)).matrix();
}

Mat AnalyticGaussianFlow::score_at(const Mat& x, int t) const {
    const Vec m = marginal_mean(t);
    const Vec v = marginal_var(t);
    if ((v.array() <= 0.0).any()) throw DomainError("score_at: degenerate marginal variance at t=" + std::to_string(t));
    return -((x.rowwise() - m.transpose()).array().rowwise() / v.transpose().array()).matrix();
}

Mat AnalyticGaussianFlow::sample_x0(ad::Index n, Rng& rng) const {
    const Mat z = diffusion::gaussian(n, dim(), rng);
    return ((z.array().rowwise() * sigma.transpose().array()).rowwise() + mu.transpose().array()).matrix();
}

IdentityReport score_projection_residual(const AnalyticGaussianFlow& flow, const TestFunction& u, int t, long n,
                                         Rng& rng) {
    if (t < 1) throw DomainError("score_projection_residual: the conditional score is degenerate at t=0");
    if (n < 1000) throw ConfigError("n", "score-projection check needs at least 1000 samples");
    const auto [a, b] = coefs(*flow.schedule, t);
    const Mat x0 = flow.sample_x0(n, rng);
    const Mat eps = diffusion::gaussian(n, flow.dim(), rng);
    const Mat x_t = a * x0 + b * eps;
    const Mat residual = flow.score_at(x_t, t) + eps / b;  // s_q - (-eps / b)
    const Mat ux = u(x_t);
    if (ux.rows() != x_t.rows() || ux.cols() != x_t.cols()) throw ContractError("test function changed the shape");
    std::vector<double> per_sample(static_cast<std::size_t>(n));
    for (long i = 0; i < n; ++i) per_sample[static_cast<std::size_t>(i)] = ux.row(i).dot(residual.row(i));
    IdentityReport rep;
    rep.estimate = mean_of(per_sample);
    rep.std_error = std_error_of(per_sample);
    rep.n_samples = n;
    rep.verdict = std::abs(rep.estimate) <= 3.0 * rep.std_error ? Verdict::pass : Verdict::fail;
    return rep;
}

IdentityReport gradient_equivalence_check(const Vec& mu, const Vec& sigma, const AnalyticGaussianFlow& teacher,
                                          gsim::Distance mode, int t, long n, Rng& rng, double r,
                                          double tolerance) {
    if (mu.size() != teacher.dim() || sigma.size() != teacher.dim()) throw ContractError("student/teacher dims differ");
    if (t < 1) throw DomainError("gradient_equivalence_check: t must be >= 1");
    const int chunks = static_cast<int>(std::clamp<long>(n / 1000, 2, 20));
    const ad::Index per_chunk = n / chunks;
    Vec p(2 * teacher.dim());
    p << mu, sigma;

    std::vector<ChunkGradients> parts;
    for (int c = 0; c < chunks; ++c) parts.push_back(chunk_gradients(p, teacher, mode, t, per_chunk, rng, r));

    const auto k = p.size();
    IdentityReport rep;
    rep.n_samples = static_cast<long>(per_chunk) * chunks;
    Vec sur = Vec::Zero(k), fd = Vec::Zero(k), path = Vec::Zero(k);
    Vec se_sur(k), se_fd(k), se_diff(k);
    for (ad::Index i = 0; i < k; ++i) {
        std::vector<double> s, f, d;
        for (const auto& g : parts) {
            s.push_back(g.surrogate(i));
            f.push_back(g.fd(i));
            d.push_back(g.surrogate(i) - g.fd(i));
            path(i) += g.pathwise(i) / chunks;
        }
        sur(i) = mean_of(s);
        fd(i) = mean_of(f);
        se_sur(i) = std_error_of(s);
        se_fd(i) = std_error_of(f);
        se_diff(i) = std_error_of(d);
    }
    rep.surrogate.assign(sur.data(), sur.data() + k);
    rep.finite_difference.assign(fd.data(), fd.data() + k);
    rep.pathwise.assign(path.data(), path.data() + k);
    rep.surrogate_se.assign(se_sur.data(), se_sur.data() + k);

    if (mu == teacher.mu && sigma == teacher.sigma) {
        rep.estimate = std::max(sur.cwiseAbs().maxCoeff(), fd.cwiseAbs().maxCoeff());
        rep.std_error = std::max(se_sur.maxCoeff(), se_fd.maxCoeff());
        const bool ok = ((sur.cwiseAbs() - 3.0 * se_sur).array() <= 1e-12).all() &&
                        ((fd.cwiseAbs() - 3.0 * se_fd).array() <= 1e-12).all();
        rep.verdict = ok ? Verdict::pass : Verdict::fail;
        return rep;
    }
    const double norm = fd.norm();
    rep.estimate = (sur - fd).norm() / norm;
    rep.std_error = se_diff.norm() / norm;
    if (3.0 * rep.std_error > tolerance) {
        rep.verdict = Verdict::inconclusive;
    } else {
        rep.verdict = rep.estimate <= tolerance ? Verdict::pass : Verdict::fail;
    }
    return rep;
}

KlEstimate kl_fisher_quadrature(const AnalyticGaussianFlow& student, const AnalyticGaussianFlow& teacher, int n_t,
                                long n, Rng& rng) {
    if (student.schedule == nullptr || teacher.schedule == nullptr) throw ContractError("flow without schedule");
    if (student.schedule->s != teacher.schedule->s) throw ContractError("flows must share a schedule");
    if (student.dim() != teacher.dim()) throw ContractError("flow dimensions differ");
    if (n < 2) throw ConfigError("n", "need at least 2 samples per node");
    const NoiseSchedule sched = diffusion::build_schedule(n_t, student.schedule->s);
    AnalyticGaussianFlow q{student.mu, student.sigma, &sched};
    AnalyticGaussianFlow p{teacher.mu, teacher.sigma, &sched};
    KlEstimate out;
    double var_sum = 0.0;
    for (int k = 1; k <= n_t; ++k) {
        const Vec m = q.marginal_mean(k);
        const Vec sd = q.marginal_var(k).cwiseSqrt();
        const Mat xi = diffusion::gaussian(n, q.dim(), rng);
        const Mat x = ((xi.array().rowwise() * sd.transpose().array()).rowwise() + m.transpose().array()).matrix();
        const Vec f = (q.score_at(x, k) - p.score_at(x, k)).rowwise().squaredNorm();
        const double mean = f.mean();
        const double var = n > 1 ? (f.array() - mean).square().sum() / static_cast<double>(n - 1) : 0.0;
        const double w = 0.5 * sched.g_sq[static_cast<std::size_t>(k)];
        out.value += w * mean;
        var_sum += w * w * var / static_cast<double>(n);
    }
    out.std_error = std::sqrt(var_sum);
    return out;
}

std::vector<SuiteRow> run_identity_suite(std::uint64_t seed, long projection_samples, long gradient_samples,
                                         int projection_configs) {
    Rng rng(seed);
    const NoiseSchedule sched = diffusion::build_schedule(1000);
    std::vector<SuiteRow> rows;

    const std::vector<std::pair<std::string, TestFunction>> tests = {
        {"u=1", [](const Mat& x) { return Mat::Ones(x.rows(), x.cols()); }},
        {"u=x", [](const Mat& x) { return x; }},
        {"u=sin(x)", [](const Mat& x) { return Mat(x.array().sin()); }},
        {"u=x^2", [](const Mat& x) { return Mat(x.array().square()); }},
        {"u=tanh(2x)", [](const Mat& x) { return Mat((2.0 * x.array()).tanh()); }},
    };
    {
        AnalyticGaussianFlow flow{Vec::Constant(1, 0.7), Vec::Constant(1, 1.3), &sched};
        for (int i = 1; i <= 2; ++i) {
            const auto rep = score_projection_residual(flow, tests[static_cast<std::size_t>(i)].second, 500,
                                                       projection_samples, rng);
            rows.push_back({"projection N(0.7,1.3^2) t=500 " + tests[static_cast<std::size_t>(i)].first, rep.estimate,
                            0.0, 3.0 * rep.std_error, rep.verdict});
        }
    }
    for (int c = 0; c < projection_configs; ++c) {
        const int dim = 1 + static_cast<int>(rng.uniform_int(0, 1));
        Vec mu(dim), sigma(dim);
        for (int j = 0; j < dim; ++j) {
            mu(j) = -2.0 + 4.0 * rng.uniform();
            sigma(j) = 0.3 + 1.7 * rng.uniform();
        }
        const int t = static_cast<int>(rng.uniform_int(1, sched.T));
        const auto& test = tests[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(tests.size()) - 1))];
        AnalyticGaussianFlow flow{mu, sigma, &sched};
        const auto rep = score_projection_residual(flow, test.second, t, projection_samples, rng);
        rows.push_back({"projection random #" + std::to_string(c) + " d=" + std::to_string(dim) +
                            " t=" + std::to_string(t) + " " + test.first,
                        rep.estimate, 0.0, 3.0 * rep.std_error, rep.verdict});
    }

    const AnalyticGaussianFlow standard{Vec::Zero(1), Vec::Ones(1), &sched};
    for (auto mode : {gsim::Distance::squared, gsim::Distance::pseudo_huber}) {
        const auto rep = gradient_equivalence_check(Vec::Constant(1, 0.5), Vec::Ones(1), standard, mode, sched.T / 2,
                                                    gradient_samples, rng);
        rows.push_back({std::string("gradient equivalence ") +
                            (mode == gsim::Distance::squared ? "squared" : "pseudo-huber") + " rel. error",
                        rep.estimate, 0.0, 0.05, rep.verdict});
    }
    {
        const auto rep = gradient_equivalence_check(Vec::Zero(1), Vec::Ones(1), standard, gsim::Distance::squared,
                                                    sched.T / 2, std::min<long>(gradient_samples, 100000), rng);
        rows.push_back({"gradient at optimum max |g|", rep.estimate, 0.0, 3.0 * rep.std_error, rep.verdict});
    }

    for (double m : {0.5, 1.0}) {
        const AnalyticGaussianFlow student{Vec::Constant(1, m), Vec::Ones(1), &sched};
        const double reference = 0.5 * m * m;
        double previous_error = 0.0;
        for (int n_t : {125, 250, 500, 1000}) {
            const auto kl = kl_fisher_quadrature(student, standard, n_t, 2000, rng);
            const double err = std::abs(kl.value - reference);
            Verdict v = Verdict::pass;
            if (n_t == 1000) v = err <= 0.05 * reference ? Verdict::pass : Verdict::fail;
            if (n_t > 125 && err > previous_error + 3.0 * kl.std_error) v = Verdict::fail;
            previous_error = err;
            rows.push_back({"KL quadrature mean=" + std::to_string(m).substr(0, 3) + " steps=" + std::to_string(n_t),
                            kl.value, reference, 0.05 * reference, v});
        }
    }
    return rows;
}

}  // namespace marval::lab
