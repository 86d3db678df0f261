#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "marval/gsim.hpp"
#include "marval/mar.hpp"

namespace marval {

enum class Stage { train_teacher, distill, verify_identities, rl, eval, sample };

Stage parse_stage(const std::string& s);
std::string to_string(Stage s);

struct DatasetConfig {
    std::string id = "synthetic";
    std::string path;  // digits source (csv or cached .tok); relative to the config file
    int synthetic_count = 2048;
    std::string cache_dir;  // empty: <run_dir>/cache, overridable by MARVAL_DATA_DIR
};

struct ScheduleConfig {
    int T = 1000;
    double s = 0.008;
};

struct TeacherConfig {
    int epochs = 20;
    int batch = 64;
    double lr = 1e-3;
    double weight_decay = 0.0;
    double grad_clip = 1.0;
    double ema = 0.999;  // 0 disables the shadow copy
    double mask_min = 0.7;
    double mask_max = 1.0;
    double class_dropout = 0.1;
    int diffusion_batch_mul = 4;
    int checkpoint_every = 200;
};

struct ClassifierStageConfig {
    int epochs = 30;
    int batch = 64;
    double lr = 2e-3;
    double input_noise = 0.1;
    int hidden = 128;
    int features = 64;
};

// Full-scale reference: lr 5e-6, EMA 0.9999, batch 64, 30 epochs.
struct DistillStageConfig {
    double w = 1.2;
    double r = 1e-5;
    int t_star = 400;
    int n_aux = 2;
    double generator_lr = 5e-6;
    double auxiliary_lr = 5e-6;
    double grad_clip = 0.0;
    int batch = 64;
    int epochs = 10;
    double ema = 0.9999;
    std::string distance = "pseudo-huber";
    int checkpoint_every = 100;
};

// Full-scale reference: 5 epochs, 64 AR loops at training time.
struct RLStageConfig {
    int K_train = 8;
    int K_eval = 16;
    std::string reward = "classifier";
    double reward_temperature = 1.0;  // classifier logits are divided by this
    double lr = 5e-6;
    double grad_clip = 0.0;
    int batch = 16;
    int micro_batch = 4;
    int epochs = 2;
    double ema = 0.9999;
    long max_activation_scalars = 200'000'000;
    int holdout_classes = 0;  // the last N classes are never used for RL updates
    int checkpoint_every = 50;
};

struct EvalStageConfig {
    int samples = 5000;
    int K = 8;
    int n_diff = 100;
    int timing_images = 20;
    int timing_warmup = 2;
    int reward_prompts = 500;
    bool use_ema = true;
    bool teacher = true;  // sample the teacher for its Frechet distance
    bool timing = true;
};

struct SampleStageConfig {
    int count = 64;
    std::string source = "student";  // teacher | student | rl
    int K = 8;
    int n_diff = 100;
};

struct RunConfig {
    Stage stage = Stage::train_teacher;
    std::string run_dir = "runs/default";
    std::uint64_t seed = 0;
    DatasetConfig dataset;
    mar::ModelConfig model;
    ScheduleConfig schedule;
    TeacherConfig teacher;
    ClassifierStageConfig classifier;
    DistillStageConfig distill;
    RLStageConfig rl;
    EvalStageConfig eval;
    SampleStageConfig sample;

    /// Directory the config was read from; relative paths resolve against it.
    std::filesystem::path base_dir;

    bool operator==(const RunConfig& other) const;
};

/// Parses and validates. Unknown keys, missing required fields and type errors
/// raise ConfigError naming the field with file:line context.
RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config(const std::string& text, const std::string& origin = "<string>");

/// Canonical text form (every field, fixed order). parse_config(serialize(c)) == c.
std::string serialize_config(const RunConfig& cfg);

/// 64-bit FNV-1a of the canonical form without the stage, run_dir and
/// dataset.cache_dir, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

gsim::DistillConfig to_distill_config(const RunConfig& cfg);

std::filesystem::path resolve(const RunConfig& cfg, const std::string& path);

}  // namespace marval
