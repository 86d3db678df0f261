#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "marval/dataset.hpp"
#include "marval/mar.hpp"
#include "marval/nn.hpp"

namespace marval::eval {

using ad::Mat;
using ad::Var;
using ad::Vec;

/// Raster layout of one decoded grid: token j sits at (j / width, j % width),
/// its d components are the channels.
struct ImageShape {
    int height = 0;
    int width = 0;
    int channels = 1;
};

/// Square token layout (4x4 synthetic, 8x8 digits).
ImageShape image_shape_for(int n, int d);

/// Decoder: (B*n) x d token rows -> B x (n*d) flattened images. Differentiable.
Var decode(const Var& tokens, int n);
Mat flatten(std::span<const mar::TokenGrid> grids);

struct ClassifierConfig {
    int hidden = 128;
    int features = 64;
};

/// Small MLP shared by the reward, the IS surrogate and the Frechet features.
class Classifier {
  public:
    Classifier() = default;
    Classifier(int in_dim, int num_classes, ClassifierConfig cfg = {});

    void init(Rng& rng);
    int in_dim() const { return in_dim_; }
    int num_classes() const { return num_classes_; }
    const ClassifierConfig& config() const { return cfg_; }

    struct Output {
        Var logits;
        Var features;
    };
    Output forward(const nn::Binding& params, const Var& x) const;

    Mat log_probabilities(const Mat& x);
    Mat probabilities(const Mat& x);
    Mat features(const Mat& x);

    nn::ParamStore params;

  private:
    int in_dim_ = 0;
    int num_classes_ = 0;
    ClassifierConfig cfg_;
};

struct ClassifierTrainConfig {
    int epochs = 30;
    int batch = 64;
    double lr = 2e-3;
    double input_noise = 0.1;  // Gaussian augmentation on flattened inputs
};

/// Trains on the dataset and returns the final training accuracy.
double train_classifier(Classifier& clf, const data::TokenDataset& ds, const ClassifierTrainConfig& cfg, Rng& rng);

struct FeatureMoments {
    Vec mean;
    Mat cov;
    long count = 0;
};

/// Rows are samples. ContractError if fewer than 2 rows.
FeatureMoments moments_of(const Mat& features);

/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), computed through the
/// symmetric form (S_a^{1/2} S_b S_a^{1/2})^{1/2}; negative round-off
/// eigenvalues are clamped to 0.
double frechet_distance(const FeatureMoments& a, const FeatureMoments& b);

/// exp(mean_x KL(p(y|x) || p(y))). ContractError if a row is not a distribution.
double inception_surrogate(const Mat& probs);

struct PipelineTiming {
    std::string label;
    double mean_seconds = 0.0;
    double stddev_seconds = 0.0;
    int n_images = 0;
};

struct TimingReport {
    std::vector<PipelineTiming> pipelines;
    double speedup = 0.0;  // first pipeline mean / second pipeline mean
};

struct Pipeline {
    std::string label;
    std::function<void(Rng&)> generate_one;
};

/// Wall-clock seconds per image at batch size 1. ConfigError if n_images < 10 or warmup < 2.
TimingReport timing_harness(std::span<const Pipeline> pipelines, int n_images, int warmup, Rng& rng);

struct MeanInterval {
    double mean = 0.0;
    double low = 0.0;
    double high = 0.0;
};

/// Percentile bootstrap interval for the mean. ContractError with fewer than 2 values.
MeanInterval bootstrap_mean_ci(const Vec& values, int resamples, double level, Rng& rng);

/// Tiles grids (stable-sorted by class) into a ceil(sqrt(N))-column raster:
/// binary PGM for one channel, binary PPM otherwise. Values map [-1, 1] -> [0, 255].
void emit_sample_grid(std::span<const mar::TokenGrid> grids, ImageShape shape, const std::filesystem::path& path);

}  // namespace marval::eval
