#pragma once

#include <atomic>
#include <memory>
#include <span>
#include <vector>

#include "marval/diffusion.hpp"
#include "marval/nn.hpp"
#include "marval/rng.hpp"

namespace marval::mar {

using ad::Mat;
using ad::Var;
using diffusion::NoiseSchedule;

inline constexpr int kNullClass = -1;

/// One image as n tokens of dimension d plus a per-token mask (1 = masked).
struct TokenGrid {
    Mat tokens;
    std::vector<unsigned char> mask;
    int class_id = kNullClass;

    int n() const { return static_cast<int>(tokens.rows()); }
    bool complete() const;
};

/// Ordered disjoint subsets S_1..S_K covering {0..n-1}.
struct MaskPlan {
    std::vector<std::vector<int>> subsets;
    int K() const { return static_cast<int>(subsets.size()); }
};

/// Subset sizes from the cosine unmasking schedule: the number still masked
/// after iteration k is ceil(n cos(pi k / 2K)), kept inside [K-k, prev-1]
/// so every subset is nonempty; the remainder lands in the final subset.
std::vector<int> cosine_subset_sizes(int n, int K);

/// ConfigError when K < 1 or K > n.
MaskPlan sample_mask_plan(int n, int K, Rng& rng);

struct ModelConfig {
    int n = 16;
    int d = 2;
    int num_classes = 4;
    int width = 64;  // encoder width; also the conditioning vector size h
    int heads = 4;
    int encoder_blocks = 2;
    int head_width = 64;
    int head_blocks = 2;
    int time_dim = 32;
};

/// A batch of B grids flattened to (B*n) x d rows, with one mask flag per row.
/// `tokens` is a Var so rollouts can carry gradients through generated tokens.
struct GridBatch {
    Var tokens;
    std::vector<unsigned char> mask;
    std::vector<int> class_ids;
    int n = 0;

    int size() const { return static_cast<int>(class_ids.size()); }
};

GridBatch to_batch(std::span<const TokenGrid> grids);
std::vector<TokenGrid> from_batch(const GridBatch& batch);

/// Per-token conditioning vectors for a batch: per_token is (B*n) x h.
struct GuidanceContext {
    Var per_token;
    std::vector<int> class_ids;
    bool null_flag = false;
};

/// Architecture descriptor. Parameters live in a ParamStore so that teacher,
/// student and auxiliary copies share this code.
class MarModel {
  public:
    explicit MarModel(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }
    void init(nn::ParamStore& params, Rng& rng) const;

    /// Masked rows take the learned mask embedding, unmasked rows their
    /// projected token values; position and class (or null) embeddings are
    /// added before the self-attention blocks. ContractError on bad class ids.
    GuidanceContext encode(const nn::Binding& params, const GridBatch& batch, bool drop_class) const;

    /// Per-row noise prediction. Row i depends only on (x_t row i, t[i], cond row i).
    Var predict_eps(const nn::Binding& params, const Var& x_t, std::span<const int> t, const Var& cond) const;

    /// Number of predict_eps invocations so far (shared between copies).
    long head_calls() const { return head_calls_->load(); }

  private:
    ModelConfig cfg_;
    std::shared_ptr<std::atomic<long>> head_calls_ = std::make_shared<std::atomic<long>>(0);
};

/// Global row indices (b*n + j) of every masked token in the batch.
std::vector<int> masked_rows(const GridBatch& batch);

/// (1 + w) * conditional - w * unconditional.
Mat cfg_combine(const Mat& cond, const Mat& uncond, double w);
Var cfg_combine(const Var& cond, const Var& uncond, double w);

struct TeacherTrainConfig {
    double mask_min = 0.7;
    double mask_max = 1.0;
    double class_dropout = 0.1;
    int diffusion_batch_mul = 4;  // noise draws per masked token
};

/// Draws the masked set per grid: ratio ~ U[mask_min, mask_max], count = ceil(ratio*n).
void apply_random_masking(GridBatch& batch, double mask_min, double mask_max, Rng& rng);

struct TrainStepResult {
    double loss = 0.0;
    double grad_norm = 0.0;
};

/// One AdamW step of the eps-parameterised denoising loss on masked tokens.
/// NumericError (with step, lr and grad-norm) if the loss goes non-finite.
TrainStepResult teacher_train_step(const MarModel& model, std::span<const TokenGrid> batch, nn::ParamStore& params,
                                   nn::AdamW& opt, const NoiseSchedule& sched, const TeacherTrainConfig& cfg,
                                   Rng& rng);

/// Bi-level sampling: K AR iterations, each denoising its subset from pure
/// noise with n_diff guided ancestral steps. x0_clip bounds the per-step x0
/// estimate (the data range); 0 disables it.
std::vector<TokenGrid> teacher_generate(const MarModel& model, std::span<const int> class_ids, int K, int n_diff,
                                        double w, nn::ParamStore& params, const NoiseSchedule& sched, Rng& rng,
                                        double x0_clip = 0.0);

}  // namespace marval::mar
