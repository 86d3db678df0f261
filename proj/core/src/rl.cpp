#include "marval/rl.hpp"

#include <chrono>
#include <cmath>
#include <optional>

#include "marval/errors.hpp"

namespace marval::rl {

std::string build_prompt(const std::string& class_name) {
    if (class_name.empty()) throw ContractError("build_prompt: empty class name");
    return "a high-quality and harmonious picture of " + class_name;
}

ClassifierReward::ClassifierReward(eval::Classifier& clf, std::vector<std::string> class_names, double temperature)
    : clf_(clf), temperature_(temperature) {
    if (!(temperature > 0.0)) throw ConfigError("rl.reward_temperature", "must be > 0");
    if (static_cast<int>(class_names.size()) != clf.num_classes()) {
        throw ConfigError("rl.reward", "class-name table does not match the classifier");
    }
    for (const auto& name : class_names) prompts_.push_back(build_prompt(name));
}

Var ClassifierReward::evaluate(const Var& images, std::span<const std::string> prompts) const {
    if (static_cast<ad::Index>(prompts.size()) != images.rows()) throw ContractError("reward: one prompt per image");
    Mat onehot = Mat::Zero(images.rows(), clf_.num_classes());
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        std::size_t c = 0;
        while (c < prompts_.size() && prompts_[c] != prompts[i]) ++c;
        if (c == prompts_.size()) throw ContractError("reward: prompt names no known class: " + prompts[i]);
        onehot(static_cast<ad::Index>(i), static_cast<ad::Index>(c)) = 1.0;
    }
    Var logp = ad::log_softmax_rows(ad::scale(clf_.forward(nn::frozen(clf_.params), images).logits, 1.0 / temperature_));
    return ad::row_sum(ad::mul(logp, ad::constant(onehot)));
}

Var TargetDistanceReward::evaluate(const Var& images, std::span<const std::string>) const {
    if (images.cols() != target_.size()) throw ContractError("target-distance reward: width mismatch");
    return ad::neg(ad::row_sum(ad::square(ad::add_row(images, ad::constant(-target_.transpose())))));
}

Var ConstantReward::evaluate(const Var& images, std::span<const std::string>) const {
    // Tied to the images with zero weight so the graph stays connected.
    return ad::add_scalar(ad::scale(ad::row_sum(images), 0.0), value_);
}

RolloutBatch rollout(const mar::MarModel& model, nn::ParamStore& theta, std::span<const int> class_ids,
                     std::span<const std::string> class_names, int K, const NoiseSchedule& sched, int t_star,
                     Rng& rng, bool record_grad, double bound) {
    if (K < 1) throw ConfigError("K", "must be >= 1");
    std::optional<ad::NoGradGuard> no_grad;
    if (!record_grad) no_grad.emplace();
    const int B = static_cast<int>(class_ids.size());
    const int n = model.config().n;
    const int d = model.config().d;
    const auto bind = record_grad ? nn::tracked(theta) : nn::frozen(theta);

    RolloutBatch out;
    out.class_ids.assign(class_ids.begin(), class_ids.end());
    out.traces.resize(static_cast<std::size_t>(B));
    std::vector<mar::MaskPlan> plans;
    for (int b = 0; b < B; ++b) {
        const int c = class_ids[static_cast<std::size_t>(b)];
        if (c < 0 || c >= static_cast<int>(class_names.size())) throw ContractError("rollout: class id out of range");
        auto& tr = out.traces[static_cast<std::size_t>(b)];
        tr.K = K;
        tr.prompt = build_prompt(class_names[static_cast<std::size_t>(c)]);
        out.prompts.push_back(tr.prompt);
        plans.push_back(mar::sample_mask_plan(n, K, rng));
    }

    Var tokens = ad::constant(Mat::Zero(static_cast<ad::Index>(B) * n, d));
    std::vector<unsigned char> mask(static_cast<std::size_t>(B * n), 1);
    for (int k = 0; k < K; ++k) {
        std::vector<int> rows;
        for (int b = 0; b < B; ++b) {
            for (int j : plans[static_cast<std::size_t>(b)].subsets[static_cast<std::size_t>(k)]) rows.push_back(b * n + j);
        }
        const Mat z = diffusion::gaussian(static_cast<ad::Index>(rows.size()), d, rng);
        mar::GridBatch gb{tokens, mask, out.class_ids, n};
        Var x0 = gsim::student_generate(model, bind, gb, rows, ad::constant(z), sched, t_star);
        // Tokens leave the generator as pixels, so values past the data range are clipped.
        if (std::isfinite(bound)) x0 = ad::clamp(x0, -bound, bound);
        tokens = ad::put_rows(tokens, rows, x0);
        ad::Index r = 0;
        for (int b = 0; b < B; ++b) {
            const auto& subset = plans[static_cast<std::size_t>(b)].subsets[static_cast<std::size_t>(k)];
            RolloutIteration it;
            it.subset = subset;
            it.z = z.middleRows(r, static_cast<ad::Index>(subset.size()));
            r += static_cast<ad::Index>(subset.size());
            out.traces[static_cast<std::size_t>(b)].per_iteration.push_back(std::move(it));
            for (int j : subset) mask[static_cast<std::size_t>(b * n + j)] = 0;
        }
    }
    out.tokens = tokens;
    for (int b = 0; b < B; ++b) {
        auto& g = out.traces[static_cast<std::size_t>(b)].final;
        g.tokens = tokens.value().middleRows(static_cast<ad::Index>(b) * n, n);
        g.mask.assign(static_cast<std::size_t>(n), 0);
        g.class_id = class_ids[static_cast<std::size_t>(b)];
    }
    return out;
}

Var rl_loss(const RolloutBatch& batch, const RewardAdapter& reward, int n) {
    if (!reward.differentiable()) {
        throw ConfigError("rl.reward", "reward '" + reward.name() + "' is not differentiable");
    }
    Var r = reward.evaluate(eval::decode(batch.tokens, n), batch.prompts);
    return ad::neg(ad::mean(r));
}

long activation_estimate(const mar::ModelConfig& cfg, int micro_batch, int K) {
    const long rows = static_cast<long>(micro_batch) * cfg.n;
    const long encoder = cfg.encoder_blocks * (14L * cfg.width + static_cast<long>(cfg.heads) * cfg.n) + 6L * cfg.width;
    const long head = cfg.head_blocks * 10L * cfg.head_width + 8L * cfg.head_width + cfg.time_dim;
    return rows * K * encoder + rows * head;
}

RLState init_rl_state(const nn::ParamStore& distilled, const RLConfig& cfg) {
    if (cfg.K_train < 1 || cfg.K_eval < 1) throw ConfigError("rl.K_train", "AR iteration counts must be >= 1");
    if (cfg.batch < 1 || cfg.micro_batch < 1) throw ConfigError("rl.batch", "batch sizes must be >= 1");
    RLState s;
    s.theta = distilled;
    s.theta_ema = distilled;
    s.opt = nn::AdamW(cfg.opt);
    return s;
}

RLMetrics rl_round(RLState& state, const mar::MarModel& model, const RewardAdapter& reward,
                   std::span<const std::string> class_names, const RLConfig& cfg, const NoiseSchedule& sched,
                   Rng& rng) {
    const auto start = std::chrono::steady_clock::now();
    const int micro = std::min(cfg.micro_batch, cfg.batch);
    const long estimate = activation_estimate(model.config(), micro, cfg.K_train);
    if (estimate > cfg.max_activation_scalars) {
        throw ConfigError("rl.micro_batch", "micro-batch needs ~" + std::to_string(estimate) +
                                                " activation scalars, above the budget of " +
                                                std::to_string(cfg.max_activation_scalars));
    }
    const long pool = cfg.train_classes > 0 ? std::min<long>(cfg.train_classes, static_cast<long>(class_names.size()))
                                            : static_cast<long>(class_names.size());
    std::vector<int> classes(static_cast<std::size_t>(cfg.batch));
    for (auto& c : classes) c = static_cast<int>(rng.uniform_int(0, pool - 1));

    RLMetrics m;
    m.K = cfg.K_train;
    state.theta.zero_grad();
    for (int begin = 0; begin < cfg.batch; begin += micro) {
        const int size = std::min(micro, cfg.batch - begin);
        const std::span<const int> ids(classes.data() + begin, static_cast<std::size_t>(size));
        const auto batch = rollout(model, state.theta, ids, class_names, cfg.K_train, sched, cfg.t_star, rng, true,
                                   cfg.data_bound);
        Var loss = rl_loss(batch, reward, model.config().n);
        const double share = static_cast<double>(size) / cfg.batch;
        ad::backward(ad::scale(loss, share));
        m.loss += loss.item() * share;
    }
    if (!std::isfinite(m.loss)) {
        throw NumericError("rl_round: non-finite loss at step " + std::to_string(state.step + 1) +
                           " (lr=" + std::to_string(state.opt.config().lr) + ")");
    }
    m.mean_reward = -m.loss;
    m.grad_norm = state.opt.step(state.theta);
    nn::ema_update(state.theta_ema, state.theta, cfg.ema);
    m.step = ++state.step;
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return m;
}

Vec evaluate_rewards(const mar::MarModel& model, nn::ParamStore& theta, const RewardAdapter& reward,
                     std::span<const int> class_ids, std::span<const std::string> class_names, int K,
                     const NoiseSchedule& sched, int t_star, Rng& rng, int chunk, double bound) {
    ad::NoGradGuard no_grad;
    Vec out(static_cast<ad::Index>(class_ids.size()));
    for (std::size_t begin = 0; begin < class_ids.size(); begin += static_cast<std::size_t>(chunk)) {
        const auto size = std::min<std::size_t>(static_cast<std::size_t>(chunk), class_ids.size() - begin);
        const auto batch = rollout(model, theta, class_ids.subspan(begin, size), class_names, K, sched, t_star, rng, false,
                                   bound);
        const Mat r = reward.evaluate(eval::decode(batch.tokens, model.config().n), batch.prompts).value();
        out.segment(static_cast<ad::Index>(begin), static_cast<ad::Index>(size)) = r.col(0);
    }
    return out;
}

}  // namespace marval::rl
