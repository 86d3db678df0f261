#pragma once

#include <limits>
#include <span>
#include <string>
#include <vector>

#include "marval/eval.hpp"
#include "marval/gsim.hpp"
#include "marval/mar.hpp"

namespace marval::rl {

using ad::Mat;
using ad::Var;
using ad::Vec;
using diffusion::NoiseSchedule;

/// "a high-quality and harmonious picture of {class_name}". ContractError on an empty name.
std::string build_prompt(const std::string& class_name);

class RewardAdapter {
  public:
    virtual ~RewardAdapter() = default;
    virtual std::string name() const = 0;
    virtual bool differentiable() const = 0;
    /// images: B x (n*d) decoded rows; returns B x 1 rewards.
    virtual Var evaluate(const Var& images, std::span<const std::string> prompts) const = 0;
};

/// Log-probability of the prompt's class under a frozen classifier.
class ClassifierReward final : public RewardAdapter {
  public:
    /// Reward is log softmax(logits / temperature) at the prompted class. A
    /// temperature above 1 keeps an over-confident classifier from saturating.
    ClassifierReward(eval::Classifier& clf, std::vector<std::string> class_names, double temperature = 1.0);
    std::string name() const override { return "classifier"; }
    bool differentiable() const override { return true; }
    Var evaluate(const Var& images, std::span<const std::string> prompts) const override;

  private:
    eval::Classifier& clf_;
    std::vector<std::string> prompts_;  // one per class
    double temperature_ = 1.0;
};

/// -|x - target|^2 per image.
class TargetDistanceReward final : public RewardAdapter {
  public:
    explicit TargetDistanceReward(Vec target) : target_(std::move(target)) {}
    std::string name() const override { return "target-distance"; }
    bool differentiable() const override { return true; }
    Var evaluate(const Var& images, std::span<const std::string> prompts) const override;

  private:
    Vec target_;
};

class ConstantReward final : public RewardAdapter {
  public:
    explicit ConstantReward(double value, bool differentiable = true) : value_(value), differentiable_(differentiable) {}
    std::string name() const override { return "constant"; }
    bool differentiable() const override { return differentiable_; }
    Var evaluate(const Var& images, std::span<const std::string> prompts) const override;

  private:
    double value_;
    bool differentiable_;
};

struct RolloutIteration {
    std::vector<int> subset;  // token indices generated in this iteration
    Mat z;                    // the noise rows used for them
};

struct RolloutTrace {
    mar::TokenGrid final;
    std::vector<RolloutIteration> per_iteration;
    int K = 0;
    std::string prompt;
};

struct RolloutBatch {
    Var tokens;  // (B*n) x d; differentiable in theta when recorded
    std::vector<int> class_ids;
    std::vector<std::string> prompts;
    std::vector<RolloutTrace> traces;
};

/// K AR iterations with the one-step generator; iteration k fills its subset
/// conditioned on all tokens generated so far. Without record_grad nothing is taped.
RolloutBatch rollout(const mar::MarModel& model, nn::ParamStore& theta, std::span<const int> class_ids,
                     std::span<const std::string> class_names, int K, const NoiseSchedule& sched, int t_star,
                     Rng& rng, bool record_grad, double bound = std::numeric_limits<double>::infinity());

/// -mean reward over the batch. ConfigError if the adapter is not differentiable.
Var rl_loss(const RolloutBatch& batch, const RewardAdapter& reward, int n);

struct RLConfig {
    int K_train = 8;
    int K_eval = 16;
    int batch = 16;
    int micro_batch = 4;
    double ema = 0.9999;
    int t_star = 400;
    long max_activation_scalars = 200'000'000;
    double data_bound = std::numeric_limits<double>::infinity();  // rollout pixels are clipped to +-bound
    int train_classes = 0;  // classes drawn from [0, train_classes); 0 means all
    nn::AdamWConfig opt{.lr = 5e-6};
};

/// Rough count of taped activation scalars for one micro-batch rollout.
long activation_estimate(const mar::ModelConfig& cfg, int micro_batch, int K);

struct RLState {
    nn::ParamStore theta;
    nn::ParamStore theta_ema;
    nn::AdamW opt;
    long step = 0;
};

RLState init_rl_state(const nn::ParamStore& distilled, const RLConfig& cfg);

struct RLMetrics {
    long step = 0;
    double mean_reward = 0.0;
    double loss = 0.0;
    double grad_norm = 0.0;
    int K = 0;
    double seconds = 0.0;
};

/// One optimizer step on rl_loss with gradients accumulated over micro-batches, then EMA.
/// ConfigError up front if a micro-batch would exceed the activation budget.
RLMetrics rl_round(RLState& state, const mar::MarModel& model, const RewardAdapter& reward,
                   std::span<const std::string> class_names, const RLConfig& cfg, const NoiseSchedule& sched,
                   Rng& rng);

/// Per-prompt rewards of untaped rollouts (for paired before/after comparisons).
Vec evaluate_rewards(const mar::MarModel& model, nn::ParamStore& theta, const RewardAdapter& reward,
                     std::span<const int> class_ids, std::span<const std::string> class_names, int K,
                     const NoiseSchedule& sched, int t_star, Rng& rng, int chunk = 64,
                     double bound = std::numeric_limits<double>::infinity());

}  // namespace marval::rl
