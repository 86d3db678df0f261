#pragma once

#include <span>
#include <string>
#include <vector>

#include "marval/dataset.hpp"
#include "marval/diffusion.hpp"
#include "marval/mar.hpp"
#include "marval/nn.hpp"

namespace marval::gsim {

using ad::Mat;
using ad::Var;
using ad::Vec;
using diffusion::NoiseSchedule;
using mar::GridBatch;

enum class Distance { pseudo_huber, squared };

/// Per-step weight inside the time integral. `fisher` uses T * g^2(t) / 2 so that
/// the uniform-t average reproduces the KL integral; `uniform` weights all steps by 1.
enum class TimeWeight { uniform, fisher };

/// Residual y = s_aux - s_teacher with the distance evaluated per row (one row
/// per token). `d` is rows x 1 and `d_prime` has the shape of y.
struct ScoreResidual {
    Mat y;
    Vec d;
    Mat d_prime;

    double total() const { return d.sum(); }
};

/// sqrt(|y|^2 + r^2) - r and y / sqrt(|y|^2 + r^2), row by row. ConfigError("r") if r <= 0.
ScoreResidual pseudo_huber(const Mat& y, double r);

/// Differentiable distance and derivative, so d'(y(x_t)) carries gradient through x_t.
struct DistanceTerms {
    Var d;        // rows x 1
    Var d_prime;  // rows x cols
};
DistanceTerms distance_terms(const Var& y, Distance mode, double r);

/// (1 + w) * s_cond - w * s_null.
Mat guided_teacher_score(const Mat& cond_score, const Mat& null_score, double w);

/// What the distillation loop needs from a model family. Contexts are grid
/// batches; the rows to generate are the masked rows of the batch.
class DistillModel {
  public:
    virtual ~DistillModel() = default;

    virtual int token_dim() const = 0;
    virtual GridBatch draw_contexts(int batch, Rng& rng) const = 0;
    /// One-step generator output x0 for every masked row of ctx.
    virtual Var generate(const nn::Binding& theta, const GridBatch& ctx, const Var& z) const = 0;
    /// Noise prediction for the masked rows of ctx at (x_t, t).
    virtual Var predict_eps(const nn::Binding& params, const GridBatch& ctx, const Var& x_t, std::span<const int> t,
                            bool null) const = 0;
};

/// Student generator for the masked-AR networks: z is read as x_{t*} with unit
/// input scale, one head evaluation gives eps, and x0 = (z - sqrt(1-ab) eps) / sqrt(ab).
/// `rows` selects the tokens of ctx being generated, in the order of z's rows.
Var student_generate(const mar::MarModel& model, const nn::Binding& theta, const GridBatch& ctx,
                     std::span<const int> rows, const Var& z, const NoiseSchedule& sched, int t_star);

class MarDistillModel final : public DistillModel {
  public:
    MarDistillModel(const mar::MarModel& model, const data::TokenDataset& data, const NoiseSchedule& sched,
                    int t_star, mar::TeacherTrainConfig masking = {});

    int token_dim() const override { return model_.config().d; }
    GridBatch draw_contexts(int batch, Rng& rng) const override;
    Var generate(const nn::Binding& theta, const GridBatch& ctx, const Var& z) const override;
    Var predict_eps(const nn::Binding& params, const GridBatch& ctx, const Var& x_t, std::span<const int> t,
                    bool null) const override;

  private:
    const mar::MarModel& model_;
    const data::TokenDataset& data_;
    const NoiseSchedule& sched_;
    int t_star_;
    mar::TeacherTrainConfig masking_;
};

/// Closed-form Gaussian family used to test the loop end to end.
/// Generator: x0 = mean + scale * z. Score family: eps(x_t) for data N(mean, scale^2),
/// i.e. sqrt(1-ab) (x_t - sqrt(ab) mean) / (ab scale^2 + 1 - ab). A teacher store may
/// additionally hold "null.mean"/"null.scale" for its unconditional branch.
class GaussianDistillModel final : public DistillModel {
  public:
    GaussianDistillModel(int dim, const NoiseSchedule& sched) : dim_(dim), sched_(sched) {}

    static void init_params(nn::ParamStore& store, const Vec& mean, const Vec& scale, const std::string& prefix = "");

    int token_dim() const override { return dim_; }
    GridBatch draw_contexts(int batch, Rng& rng) const override;
    Var generate(const nn::Binding& theta, const GridBatch& ctx, const Var& z) const override;
    Var predict_eps(const nn::Binding& params, const GridBatch& ctx, const Var& x_t, std::span<const int> t,
                    bool null) const override;

  private:
    int dim_;
    const NoiseSchedule& sched_;
};

struct DistillConfig {
    double w = 1.2;
    int t_star = 400;
    double r = 1e-5;
    Distance distance = Distance::pseudo_huber;
    TimeWeight time_weight = TimeWeight::uniform;
    int n_aux = 2;
    int batch = 64;
    double ema = 0.9999;
    nn::AdamWConfig generator_opt{.lr = 5e-6};
    nn::AdamWConfig auxiliary_opt{.lr = 5e-6};
};

struct DistillState {
    nn::ParamStore theta;
    nn::ParamStore phi;
    nn::ParamStore theta_ema;
    long step = 0;
    DistillConfig cfg;
    nn::AdamW generator_opt;
    nn::AdamW auxiliary_opt;
};

/// Student, auxiliary and EMA all start as copies of the teacher.
DistillState init_state(const nn::ParamStore& teacher, const DistillConfig& cfg);
/// Explicit initial student and auxiliary parameters (closed-form families).
DistillState init_state(const nn::ParamStore& theta, const nn::ParamStore& phi, const DistillConfig& cfg);

struct UpdateResult {
    double loss = 0.0;
    double grad_norm = 0.0;
};

/// One denoising step on phi using fresh student samples (theta frozen).
UpdateResult auxiliary_update(DistillState& state, const DistillModel& model, const GridBatch& ctx,
                              const NoiseSchedule& sched, Rng& rng);

/// Mean per-row eps-space DSM loss of phi on student samples, without updating.
double auxiliary_loss(DistillState& state, const DistillModel& model, const GridBatch& ctx,
                      const NoiseSchedule& sched, Rng& rng);

struct GeneratorLoss {
    Var loss;  // differentiable in theta only
    double l1 = 0.0;
    double l2 = 0.0;
};

/// Surrogate objective L1 + L2 averaged over rows. Teacher and phi are read
/// with their parameters frozen; gradient reaches theta through x0 and x_t.
GeneratorLoss generator_loss(DistillState& state, const DistillModel& model, const GridBatch& ctx,
                             nn::ParamStore& teacher, const NoiseSchedule& sched, Rng& rng);

struct RoundMetrics {
    long step = 0;
    double aux_loss = 0.0;
    double aux_grad_norm = 0.0;
    double gen_loss = 0.0;
    double gen_grad_norm = 0.0;
    double seconds = 0.0;
};

/// n_aux auxiliary updates, one generator update, EMA, step + 1.
RoundMetrics distill_round(DistillState& state, const DistillModel& model, nn::ParamStore& teacher,
                           const NoiseSchedule& sched, Rng& rng);

}  // namespace marval::gsim
