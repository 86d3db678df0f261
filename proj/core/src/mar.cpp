#include "marval/mar.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "marval/errors.hpp"

namespace marval::mar {

namespace {

using nn::Binding;

Var affine_ln(const Binding& p, const std::string& prefix, const Var& x) {
    return ad::add_row(ad::mul_row(ad::layer_norm(x), p(prefix + ".g")), p(prefix + ".b"));
}

void init_ln(nn::ParamStore& s, const std::string& prefix, int width) {
    s.add(prefix + ".g", Mat::Ones(1, width));
    s.add(prefix + ".b", Mat::Zero(1, width));
}

Mat small_normal(int rows, int cols, Rng& rng, double stddev) {
    Mat m(rows, cols);
    for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
    return m;
}

std::string blk(const char* base, int l) { return std::string(base) + std::to_string(l); }

}  // namespace

bool TokenGrid::complete() const {
    return std::none_of(mask.begin(), mask.end(), [](unsigned char m) { return m != 0; });
}

std::vector<int> cosine_subset_sizes(int n, int K) {
    if (K < 1) throw ConfigError("K", "iteration count must be >= 1");
    if (K > n) throw ConfigError("K", "iteration count " + std::to_string(K) + " exceeds token count " + std::to_string(n));
    std::vector<int> sizes;
    sizes.reserve(static_cast<std::size_t>(K));
    int remaining = n;
    for (int k = 1; k <= K; ++k) {
        int next = 0;
        if (k < K) {
            const double frac = std::cos(std::numbers::pi * k / (2.0 * K));
            next = static_cast<int>(std::ceil(n * frac - 1e-9));
            next = std::clamp(next, K - k, remaining - 1);
        }
        sizes.push_back(remaining - next);
        remaining = next;
    }
    return sizes;
}

MaskPlan sample_mask_plan(int n, int K, Rng& rng) {
    const auto sizes = cosine_subset_sizes(n, K);
    const auto order = rng.permutation(n);
    MaskPlan plan;
    std::size_t pos = 0;
    for (int size : sizes) {
        plan.subsets.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                  order.begin() + static_cast<std::ptrdiff_t>(pos + static_cast<std::size_t>(size)));
        pos += static_cast<std::size_t>(size);
    }
    return plan;
}

GridBatch to_batch(std::span<const TokenGrid> grids) {
    if (grids.empty()) throw ContractError("to_batch: empty grid list");
    const int n = grids.front().n();
    const auto d = grids.front().tokens.cols();
    Mat tokens(static_cast<ad::Index>(grids.size()) * n, d);
    GridBatch batch;
    batch.n = n;
    for (std::size_t b = 0; b < grids.size(); ++b) {
        const auto& g = grids[b];
        if (g.n() != n || g.tokens.cols() != d || static_cast<int>(g.mask.size()) != n) {
            throw ContractError("to_batch: grids differ in shape");
        }
        tokens.middleRows(static_cast<ad::Index>(b) * n, n) = g.tokens;
        batch.mask.insert(batch.mask.end(), g.mask.begin(), g.mask.end());
        batch.class_ids.push_back(g.class_id);
    }
    batch.tokens = ad::constant(std::move(tokens));
    return batch;
}

std::vector<TokenGrid> from_batch(const GridBatch& batch) {
    std::vector<TokenGrid> grids(static_cast<std::size_t>(batch.size()));
    for (int b = 0; b < batch.size(); ++b) {
        auto& g = grids[static_cast<std::size_t>(b)];
        g.tokens = batch.tokens.value().middleRows(static_cast<ad::Index>(b) * batch.n, batch.n);
        g.mask.assign(batch.mask.begin() + b * batch.n, batch.mask.begin() + (b + 1) * batch.n);
        g.class_id = batch.class_ids[static_cast<std::size_t>(b)];
    }
    return grids;
}

std::vector<int> masked_rows(const GridBatch& batch) {
    std::vector<int> rows;
    for (std::size_t i = 0; i < batch.mask.size(); ++i) {
        if (batch.mask[i]) rows.push_back(static_cast<int>(i));
    }
    return rows;
}

Mat cfg_combine(const Mat& cond, const Mat& uncond, double w) { return (1.0 + w) * cond - w * uncond; }

Var cfg_combine(const Var& cond, const Var& uncond, double w) {
    return ad::sub(ad::scale(cond, 1.0 + w), ad::scale(uncond, w));
}

MarModel::MarModel(ModelConfig cfg) : cfg_(cfg) {
    if (cfg_.n < 1 || cfg_.d < 1 || cfg_.num_classes < 1) throw ConfigError("model", "n, d and num_classes must be >= 1");
    if (cfg_.width % cfg_.heads != 0) throw ConfigError("model.heads", "width must be divisible by heads");
    if (cfg_.time_dim % 2 != 0) throw ConfigError("model.time_dim", "must be even");
}

void MarModel::init(nn::ParamStore& s, Rng& rng) const {
    const int w = cfg_.width;
    const int hw = cfg_.head_width;
    nn::init_linear(s, "enc.in", cfg_.d, w, rng);
    s.add("enc.mask", small_normal(1, w, rng, 0.02));
    s.add("enc.pos", small_normal(cfg_.n, w, rng, 0.02));
    s.add("enc.cls", small_normal(cfg_.num_classes + 1, w, rng, 0.02));  // last row: null class
    for (int l = 0; l < cfg_.encoder_blocks; ++l) {
        const auto p = blk("enc.blk", l);
        init_ln(s, p + ".ln1", w);
        nn::init_linear(s, p + ".q", w, w, rng);
        nn::init_linear(s, p + ".k", w, w, rng);
        nn::init_linear(s, p + ".v", w, w, rng);
        nn::init_linear(s, p + ".o", w, w, rng, 0.5);
        init_ln(s, p + ".ln2", w);
        nn::init_linear(s, p + ".fc1", w, 2 * w, rng);
        nn::init_linear(s, p + ".fc2", 2 * w, w, rng, 0.5);
    }
    init_ln(s, "enc.ln", w);

    nn::init_linear(s, "head.t1", cfg_.time_dim, hw, rng);
    nn::init_linear(s, "head.t2", hw, hw, rng);
    nn::init_linear(s, "head.c", w, hw, rng);
    nn::init_linear(s, "head.x", cfg_.d, hw, rng);
    for (int l = 0; l < cfg_.head_blocks; ++l) {
        const auto p = blk("head.blk", l);
        nn::init_zero_linear(s, p + ".ada", hw, 3 * hw);
        nn::init_linear(s, p + ".fc1", hw, hw, rng);
        nn::init_linear(s, p + ".fc2", hw, hw, rng);
    }
    nn::init_zero_linear(s, "head.final.ada", hw, 2 * hw);
    nn::init_linear(s, "head.out", hw, cfg_.d, rng);
}

GuidanceContext MarModel::encode(const Binding& p, const GridBatch& batch, bool drop_class) const {
    const int B = batch.size();
    const int n = cfg_.n;
    if (batch.n != n || batch.tokens.rows() != static_cast<ad::Index>(B) * n || batch.tokens.cols() != cfg_.d ||
        static_cast<int>(batch.mask.size()) != B * n) {
        throw ContractError("encode: batch does not match model shape");
    }
    std::vector<int> pos_idx(static_cast<std::size_t>(B * n));
    std::vector<int> cls_idx(static_cast<std::size_t>(B * n));
    for (int b = 0; b < B; ++b) {
        int c = drop_class ? kNullClass : batch.class_ids[static_cast<std::size_t>(b)];
        if (c != kNullClass && (c < 0 || c >= cfg_.num_classes)) {
            throw ContractError("encode: class id " + std::to_string(c) + " out of range");
        }
        if (c == kNullClass) c = cfg_.num_classes;
        for (int j = 0; j < n; ++j) {
            pos_idx[static_cast<std::size_t>(b * n + j)] = j;
            cls_idx[static_cast<std::size_t>(b * n + j)] = c;
        }
    }
    Var x = nn::linear(p, "enc.in", batch.tokens);
    x = ad::select_rows(x, p("enc.mask"), batch.mask);
    x = x + ad::gather_rows(p("enc.pos"), pos_idx) + ad::gather_rows(p("enc.cls"), cls_idx);
    for (int l = 0; l < cfg_.encoder_blocks; ++l) {
        const auto pre = blk("enc.blk", l);
        Var h = affine_ln(p, pre + ".ln1", x);
        Var a = ad::block_attention(nn::linear(p, pre + ".q", h), nn::linear(p, pre + ".k", h),
                                    nn::linear(p, pre + ".v", h), n, cfg_.heads);
        x = x + nn::linear(p, pre + ".o", a);
        h = affine_ln(p, pre + ".ln2", x);
        x = x + nn::linear(p, pre + ".fc2", ad::silu(nn::linear(p, pre + ".fc1", h)));
    }
    GuidanceContext ctx;
    ctx.per_token = affine_ln(p, "enc.ln", x);
    ctx.class_ids = batch.class_ids;
    ctx.null_flag = drop_class;
    if (drop_class) std::fill(ctx.class_ids.begin(), ctx.class_ids.end(), kNullClass);
    return ctx;
}

Var MarModel::predict_eps(const Binding& p, const Var& x_t, std::span<const int> t, const Var& cond) const {
    if (x_t.rows() != cond.rows() || static_cast<ad::Index>(t.size()) != x_t.rows()) {
        throw ContractError("predict_eps: x_t rows, steps and conditioning rows must align");
    }
    if (x_t.cols() != cfg_.d || cond.cols() != cfg_.width) throw ContractError("predict_eps: column mismatch");
    head_calls_->fetch_add(1);
    const int hw = cfg_.head_width;
    ad::Vec steps(static_cast<ad::Index>(t.size()));
    for (std::size_t i = 0; i < t.size(); ++i) steps(static_cast<ad::Index>(i)) = t[i];
    Var temb = ad::constant(nn::sinusoidal_embedding(steps, cfg_.time_dim));
    temb = nn::linear(p, "head.t2", ad::silu(nn::linear(p, "head.t1", temb)));
    Var cvec = ad::silu(temb + nn::linear(p, "head.c", cond));
    Var h = nn::linear(p, "head.x", x_t);
    for (int l = 0; l < cfg_.head_blocks; ++l) {
        const auto pre = blk("head.blk", l);
        Var mod = nn::linear(p, pre + ".ada", cvec);
        Var shift = ad::slice_cols(mod, 0, hw);
        Var scale = ad::slice_cols(mod, hw, hw);
        Var gate = ad::slice_cols(mod, 2 * hw, hw);
        Var hn = ad::mul(ad::layer_norm(h), ad::add_scalar(scale, 1.0)) + shift;
        h = h + ad::mul(gate, nn::linear(p, pre + ".fc2", ad::silu(nn::linear(p, pre + ".fc1", hn))));
    }
    Var mod = nn::linear(p, "head.final.ada", cvec);
    Var hn = ad::mul(ad::layer_norm(h), ad::add_scalar(ad::slice_cols(mod, hw, hw), 1.0)) + ad::slice_cols(mod, 0, hw);
    return nn::linear(p, "head.out", hn);
}

void apply_random_masking(GridBatch& batch, double mask_min, double mask_max, Rng& rng) {
    const int n = batch.n;
    for (int b = 0; b < batch.size(); ++b) {
        const double ratio = mask_min + (mask_max - mask_min) * rng.uniform();
        const int count = std::clamp(static_cast<int>(std::ceil(ratio * n - 1e-9)), 1, n);
        const auto order = rng.permutation(n);
        for (int j = 0; j < n; ++j) batch.mask[static_cast<std::size_t>(b * n + j)] = 0;
        for (int j = 0; j < count; ++j) batch.mask[static_cast<std::size_t>(b * n + order[static_cast<std::size_t>(j)])] = 1;
    }
}

TrainStepResult teacher_train_step(const MarModel& model, std::span<const TokenGrid> batch, nn::ParamStore& params,
                                   nn::AdamW& opt, const NoiseSchedule& sched, const TeacherTrainConfig& cfg,
                                   Rng& rng) {
    if (batch.empty()) throw ContractError("teacher_train_step: empty batch");
    GridBatch gb = to_batch(batch);
    apply_random_masking(gb, cfg.mask_min, cfg.mask_max, rng);
    for (auto& c : gb.class_ids) {
        if (rng.bernoulli(cfg.class_dropout)) c = kNullClass;
    }
    params.zero_grad();
    const auto bind = nn::tracked(params);
    GuidanceContext ctx = model.encode(bind, gb, false);

    const auto rows = masked_rows(gb);
    std::vector<int> idx;
    idx.reserve(rows.size() * static_cast<std::size_t>(cfg.diffusion_batch_mul));
    for (int r = 0; r < cfg.diffusion_batch_mul; ++r) idx.insert(idx.end(), rows.begin(), rows.end());
    const auto m = static_cast<ad::Index>(idx.size());
    const auto d = gb.tokens.cols();

    Mat x0(m, d);
    for (ad::Index i = 0; i < m; ++i) x0.row(i) = gb.tokens.value().row(idx[static_cast<std::size_t>(i)]);
    std::vector<int> t(static_cast<std::size_t>(m));
    for (auto& s : t) s = static_cast<int>(rng.uniform_int(1, sched.T));
    const Mat eps = diffusion::gaussian(m, d, rng);
    const auto noisy = diffusion::perturb(x0, t, eps, sched);

    Var cond = ad::gather_rows(ctx.per_token, idx);
    Var pred = model.predict_eps(bind, ad::constant(noisy.x_t), t, cond);
    Var loss = ad::scale(ad::sum(ad::square(pred - ad::constant(eps))), 1.0 / static_cast<double>(m));
    ad::backward(loss);

    TrainStepResult result;
    result.loss = loss.item();
    const double gnorm = params.grad_norm();
    if (!std::isfinite(result.loss) || !std::isfinite(gnorm)) {
        throw NumericError("teacher_train_step: non-finite loss at step " + std::to_string(opt.steps() + 1) +
                           " (lr=" + std::to_string(opt.config().lr) + ", grad_norm=" + std::to_string(gnorm) + ")");
    }
    result.grad_norm = opt.step(params);
    return result;
}

std::vector<TokenGrid> teacher_generate(const MarModel& model, std::span<const int> class_ids, int K, int n_diff,
                                        double w, nn::ParamStore& params, const NoiseSchedule& sched, Rng& rng,
                                        double x0_clip) {
    if (K < 1) throw ConfigError("K", "must be >= 1");
    if (n_diff < 1) throw ConfigError("n_diff", "must be >= 1");
    ad::NoGradGuard no_grad;
    const int B = static_cast<int>(class_ids.size());
    const int n = model.config().n;
    const int d = model.config().d;
    const auto sub = diffusion::respace(sched, n_diff);
    std::vector<MaskPlan> plans;
    plans.reserve(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b) plans.push_back(sample_mask_plan(n, K, rng));

    Mat tokens = Mat::Zero(static_cast<ad::Index>(B) * n, d);
    std::vector<unsigned char> mask(static_cast<std::size_t>(B * n), 1);
    const auto bind = nn::frozen(params);
    for (int k = 0; k < K; ++k) {
        GridBatch gb{ad::constant(tokens), mask, {class_ids.begin(), class_ids.end()}, n};
        GuidanceContext cond_ctx = model.encode(bind, gb, false);
        std::vector<int> rows;
        for (int b = 0; b < B; ++b) {
            for (int j : plans[static_cast<std::size_t>(b)].subsets[static_cast<std::size_t>(k)]) rows.push_back(b * n + j);
        }
        Var c_rows = ad::gather_rows(cond_ctx.per_token, rows);
        Var u_rows;
        if (w != 0.0) u_rows = ad::gather_rows(model.encode(bind, gb, true).per_token, rows);

        Mat x = diffusion::gaussian(static_cast<ad::Index>(rows.size()), d, rng);
        std::vector<int> steps(rows.size());
        for (int i = n_diff; i >= 1; --i) {
            std::fill(steps.begin(), steps.end(), sub.timesteps[static_cast<std::size_t>(i)]);
            Var xv = ad::constant(x);
            Mat eps = model.predict_eps(bind, xv, steps, c_rows).value();
            if (w != 0.0) eps = cfg_combine(eps, model.predict_eps(bind, xv, steps, u_rows).value(), w);
            x = diffusion::ancestral_step(x, i, eps, sub, rng, true, x0_clip);
        }
        for (std::size_t r = 0; r < rows.size(); ++r) {
            tokens.row(rows[r]) = x.row(static_cast<ad::Index>(r));
            mask[static_cast<std::size_t>(rows[r])] = 0;
        }
    }
    GridBatch out{ad::constant(tokens), mask, {class_ids.begin(), class_ids.end()}, n};
    return from_batch(out);
}

}  // namespace marval::mar
