#include "marval/gsim.hpp"

#include <chrono>
#include <cmath>

#include "marval/errors.hpp"

namespace marval::gsim {

namespace {

Mat column(std::span<const int> t, double (NoiseSchedule::*f)(int) const, const NoiseSchedule& sched) {
    Mat c(static_cast<ad::Index>(t.size()), 1);
    for (std::size_t i = 0; i < t.size(); ++i) c(static_cast<ad::Index>(i), 0) = (sched.*f)(t[i]);
    return c;
}

std::vector<int> uniform_steps(std::size_t rows, const NoiseSchedule& sched, Rng& rng) {
    std::vector<int> t(rows);
    for (auto& s : t) s = static_cast<int>(rng.uniform_int(1, sched.T));
    return t;
}

// Noise prediction -> score, -eps / sqrt(1 - ab_t), as a graph op.
Var eps_to_score(const Var& eps, std::span<const int> t, const NoiseSchedule& sched) {
    Vec f(static_cast<ad::Index>(t.size()));
    for (std::size_t i = 0; i < t.size(); ++i) f(static_cast<ad::Index>(i)) = -1.0 / sched.sqrt_one_minus(t[i]);
    return ad::scale_rows(eps, f);
}

}  // namespace

ScoreResidual pseudo_huber(const Mat& y, double r) {
    if (!(r > 0.0)) throw ConfigError("r", "Pseudo-Huber constant must be > 0");
    ScoreResidual out;
    out.y = y;
    out.d.resize(y.rows());
    out.d_prime.resize(y.rows(), y.cols());
    for (ad::Index i = 0; i < y.rows(); ++i) {
        const double root = std::sqrt(y.row(i).squaredNorm() + r * r);
        out.d(i) = root - r;
        out.d_prime.row(i) = y.row(i) / root;
    }
    return out;
}

DistanceTerms distance_terms(const Var& y, Distance mode, double r) {
    if (mode == Distance::squared) return {ad::row_sum(ad::square(y)), ad::scale(y, 2.0)};
    if (!(r > 0.0)) throw ConfigError("r", "Pseudo-Huber constant must be > 0");
    Var root = ad::sqrt(ad::add_scalar(ad::row_sum(ad::square(y)), r * r));
    return {ad::add_scalar(root, -r), ad::mul_col(y, ad::reciprocal(root))};
}

Mat guided_teacher_score(const Mat& cond_score, const Mat& null_score, double w) {
    return mar::cfg_combine(cond_score, null_score, w);
}

Var student_generate(const mar::MarModel& model, const nn::Binding& theta, const GridBatch& ctx,
                     std::span<const int> rows, const Var& z, const NoiseSchedule& sched, int t_star) {
    if (z.rows() != static_cast<ad::Index>(rows.size())) throw ContractError("student_generate: z rows != selected tokens");
    if (t_star < 1 || t_star > sched.T) throw ConfigError("t_star", "must lie in [1, T]");
    const auto context = model.encode(theta, ctx, false);
    const std::vector<int> steps(rows.size(), t_star);
    Var eps = model.predict_eps(theta, z, steps, ad::gather_rows(context.per_token, rows));
    return ad::scale(z - ad::scale(eps, sched.sqrt_one_minus(t_star)), 1.0 / sched.sqrt_alpha_bar(t_star));
}

MarDistillModel::MarDistillModel(const mar::MarModel& model, const data::TokenDataset& data,
                                 const NoiseSchedule& sched, int t_star, mar::TeacherTrainConfig masking)
    : model_(model), data_(data), sched_(sched), t_star_(t_star), masking_(masking) {
    if (data.n != model.config().n || data.d != model.config().d) {
        throw ContractError("MarDistillModel: dataset shape does not match the model");
    }
}

GridBatch MarDistillModel::draw_contexts(int batch, Rng& rng) const {
    std::vector<mar::TokenGrid> grids(static_cast<std::size_t>(batch));
    for (auto& g : grids) {
        const int i = static_cast<int>(rng.uniform_int(0, data_.count() - 1));
        g.tokens = data_.sample(i);
        g.mask.assign(static_cast<std::size_t>(data_.n), 0);
        g.class_id = data_.labels[static_cast<std::size_t>(i)];
    }
    GridBatch ctx = mar::to_batch(grids);
    mar::apply_random_masking(ctx, masking_.mask_min, masking_.mask_max, rng);
    return ctx;
}

Var MarDistillModel::generate(const nn::Binding& theta, const GridBatch& ctx, const Var& z) const {
    return student_generate(model_, theta, ctx, mar::masked_rows(ctx), z, sched_, t_star_);
}

Var MarDistillModel::predict_eps(const nn::Binding& params, const GridBatch& ctx, const Var& x_t,
                                 std::span<const int> t, bool null) const {
    const auto context = model_.encode(params, ctx, null);
    return model_.predict_eps(params, x_t, t, ad::gather_rows(context.per_token, mar::masked_rows(ctx)));
}

void GaussianDistillModel::init_params(nn::ParamStore& store, const Vec& mean, const Vec& scale,
                                       const std::string& prefix) {
    store.add(prefix + "mean", mean.transpose());
    store.add(prefix + "scale", scale.transpose());
}

GridBatch GaussianDistillModel::draw_contexts(int batch, Rng&) const {
    GridBatch ctx;
    ctx.tokens = ad::constant(Mat::Zero(batch, dim_));
    ctx.mask.assign(static_cast<std::size_t>(batch), 1);
    ctx.class_ids.assign(static_cast<std::size_t>(batch), 0);
    ctx.n = 1;
    return ctx;
}

Var GaussianDistillModel::generate(const nn::Binding& theta, const GridBatch&, const Var& z) const {
    return ad::add_row(ad::mul_row(z, theta("scale")), theta("mean"));
}

Var GaussianDistillModel::predict_eps(const nn::Binding& params, const GridBatch&, const Var& x_t,
                                      std::span<const int> t, bool null) const {
    const std::string prefix = (null && params.store->contains("null.mean")) ? "null." : "";
    const Mat a = column(t, &NoiseSchedule::sqrt_alpha_bar, sched_);
    const Mat b = column(t, &NoiseSchedule::sqrt_one_minus, sched_);
    const Mat b2 = b.array().square().matrix() * Mat::Ones(1, dim_);
    Var centered = x_t - ad::matmul(ad::constant(a), params(prefix + "mean"));
    Var var = ad::matmul(ad::constant(a.array().square().matrix()), ad::square(params(prefix + "scale"))) +
              ad::constant(b2);
    return ad::mul(ad::mul_col(centered, ad::constant(b)), ad::reciprocal(var));
}

DistillState init_state(const nn::ParamStore& teacher, const DistillConfig& cfg) {
    return init_state(teacher, teacher, cfg);
}

DistillState init_state(const nn::ParamStore& theta, const nn::ParamStore& phi, const DistillConfig& cfg) {
    if (cfg.n_aux < 0) throw ConfigError("distill.n_aux", "must be >= 0");
    if (cfg.batch < 1) throw ConfigError("distill.batch", "must be >= 1");
    if (!(cfg.ema >= 0.0 && cfg.ema <= 1.0)) throw ConfigError("distill.ema", "must lie in [0, 1]");
    DistillState s;
    s.theta = theta;
    s.phi = phi;
    s.theta_ema = theta;
    s.cfg = cfg;
    s.generator_opt = nn::AdamW(cfg.generator_opt);
    s.auxiliary_opt = nn::AdamW(cfg.auxiliary_opt);
    return s;
}

namespace {

struct AuxBatch {
    Mat x_t;
    Mat eps;
    std::vector<int> t;
};

AuxBatch student_noisy_batch(DistillState& state, const DistillModel& model, const GridBatch& ctx,
                             const NoiseSchedule& sched, Rng& rng) {
    const auto rows = static_cast<ad::Index>(mar::masked_rows(ctx).size());
    const Mat z = diffusion::gaussian(rows, model.token_dim(), rng);
    Mat x0;
    {
        ad::NoGradGuard no_grad;
        x0 = model.generate(nn::frozen(state.theta), ctx, ad::constant(z)).value();
    }
    AuxBatch b;
    b.t = uniform_steps(static_cast<std::size_t>(rows), sched, rng);
    b.eps = diffusion::gaussian(rows, model.token_dim(), rng);
    b.x_t = diffusion::perturb(x0, b.t, b.eps, sched).x_t;
    return b;
}

}  // namespace

double auxiliary_loss(DistillState& state, const DistillModel& model, const GridBatch& ctx,
                      const NoiseSchedule& sched, Rng& rng) {
    const auto b = student_noisy_batch(state, model, ctx, sched, rng);
    ad::NoGradGuard no_grad;
    const Mat pred = model.predict_eps(nn::frozen(state.phi), ctx, ad::constant(b.x_t), b.t, false).value();
    return (pred - b.eps).squaredNorm() / static_cast<double>(b.x_t.rows());
}

UpdateResult auxiliary_update(DistillState& state, const DistillModel& model, const GridBatch& ctx,
                              const NoiseSchedule& sched, Rng& rng) {
    const auto b = student_noisy_batch(state, model, ctx, sched, rng);
    state.phi.zero_grad();
    Var pred = model.predict_eps(nn::tracked(state.phi), ctx, ad::constant(b.x_t), b.t, false);
    Var loss = ad::scale(ad::sum(ad::square(pred - ad::constant(b.eps))), 1.0 / static_cast<double>(b.x_t.rows()));
    ad::backward(loss);
    UpdateResult out;
    out.loss = loss.item();
    if (!std::isfinite(out.loss)) {
        throw NumericError("auxiliary_update: non-finite loss at step " + std::to_string(state.step) +
                           " (lr=" + std::to_string(state.auxiliary_opt.config().lr) +
                           ", grad_norm=" + std::to_string(state.phi.grad_norm()) + ")");
    }
    out.grad_norm = state.auxiliary_opt.step(state.phi);
    return out;
}

GeneratorLoss generator_loss(DistillState& state, const DistillModel& model, const GridBatch& ctx,
                             nn::ParamStore& teacher, const NoiseSchedule& sched, Rng& rng) {
    const auto& cfg = state.cfg;
    const auto rows = static_cast<ad::Index>(mar::masked_rows(ctx).size());
    const int dim = model.token_dim();
    const Mat z = diffusion::gaussian(rows, dim, rng);
    Var x0 = model.generate(nn::tracked(state.theta), ctx, ad::constant(z));

    const auto t = uniform_steps(static_cast<std::size_t>(rows), sched, rng);
    const Mat eps = diffusion::gaussian(rows, dim, rng);
    Vec a(rows);
    Vec b(rows);
    for (ad::Index i = 0; i < rows; ++i) {
        a(i) = sched.sqrt_alpha_bar(t[static_cast<std::size_t>(i)]);
        b(i) = sched.sqrt_one_minus(t[static_cast<std::size_t>(i)]);
    }
    Var x_t = ad::scale_rows(x0, a) + ad::constant(b.asDiagonal() * eps);

    Var s_aux = eps_to_score(model.predict_eps(nn::frozen(state.phi), ctx, x_t, t, false), t, sched);
    Var teacher_eps = model.predict_eps(nn::frozen(teacher), ctx, x_t, t, false);
    if (cfg.w != 0.0) {
        teacher_eps = mar::cfg_combine(teacher_eps, model.predict_eps(nn::frozen(teacher), ctx, x_t, t, true), cfg.w);
    }
    Var s_teacher = eps_to_score(teacher_eps, t, sched);
    // Conditional score -(x_t - a x0) / b^2 equals -eps / b along the sampling path.
    const Mat cond_score = -(b.cwiseInverse().asDiagonal() * eps);

    const DistanceTerms dist = distance_terms(s_aux - s_teacher, cfg.distance, cfg.r);
    Var l1 = ad::neg(ad::row_sum(ad::mul(dist.d_prime, s_aux - ad::constant(cond_score))));
    Var l2 = dist.d;

    Vec weight = Vec::Constant(rows, 1.0 / static_cast<double>(rows));
    if (cfg.time_weight == TimeWeight::fisher) {
        for (ad::Index i = 0; i < rows; ++i) {
            weight(i) *= 0.5 * sched.T * sched.g_sq[static_cast<std::size_t>(t[static_cast<std::size_t>(i)])];
        }
    }
    GeneratorLoss out;
    Var l1_sum = ad::sum(ad::scale_rows(l1, weight));
    Var l2_sum = ad::sum(ad::scale_rows(l2, weight));
    out.l1 = l1_sum.item();
    out.l2 = l2_sum.item();
    if (!std::isfinite(out.l1)) throw NumericError("generator_loss: L1 term is non-finite at step " + std::to_string(state.step));
    if (!std::isfinite(out.l2)) throw NumericError("generator_loss: L2 term is non-finite at step " + std::to_string(state.step));
    out.loss = l1_sum + l2_sum;
    return out;
}

RoundMetrics distill_round(DistillState& state, const DistillModel& model, nn::ParamStore& teacher,
                           const NoiseSchedule& sched, Rng& rng) {
    const auto start = std::chrono::steady_clock::now();
    RoundMetrics m;
    for (int i = 0; i < state.cfg.n_aux; ++i) {
        const auto ctx = model.draw_contexts(state.cfg.batch, rng);
        const auto r = auxiliary_update(state, model, ctx, sched, rng);
        m.aux_loss += r.loss / state.cfg.n_aux;
        m.aux_grad_norm += r.grad_norm / state.cfg.n_aux;
    }
    const auto ctx = model.draw_contexts(state.cfg.batch, rng);
    state.theta.zero_grad();
    auto g = generator_loss(state, model, ctx, teacher, sched, rng);
    ad::backward(g.loss);
    m.gen_loss = g.loss.item();
    m.gen_grad_norm = state.generator_opt.step(state.theta);
    nn::ema_update(state.theta_ema, state.theta, state.cfg.ema);
    m.step = ++state.step;
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return m;
}

}  // namespace marval::gsim
