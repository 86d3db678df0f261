#include "marval/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "marval/diffusion.hpp"
#include "marval/errors.hpp"

namespace marval::eval {

ImageShape image_shape_for(int n, int d) {
    const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
    if (side * side == n) return {side, side, d};
    return {1, n, d};
}

Var decode(const Var& tokens, int n) {
    if (n < 1 || tokens.rows() % n != 0) throw ContractError("decode: token rows are not a multiple of n");
    return ad::reshape(tokens, tokens.rows() / n, n * tokens.cols());
}

Mat flatten(std::span<const mar::TokenGrid> grids) {
    if (grids.empty()) return {};
    const auto n = grids.front().tokens.rows();
    const auto d = grids.front().tokens.cols();
    Mat out(static_cast<ad::Index>(grids.size()), n * d);
    for (std::size_t i = 0; i < grids.size(); ++i) {
        const auto& t = grids[i].tokens;
        if (t.rows() != n || t.cols() != d) throw ContractError("flatten: grids differ in shape");
        for (ad::Index j = 0; j < n; ++j) {
            for (ad::Index k = 0; k < d; ++k) out(static_cast<ad::Index>(i), j * d + k) = t(j, k);
        }
    }
    return out;
}

Classifier::Classifier(int in_dim, int num_classes, ClassifierConfig cfg)
    : in_dim_(in_dim), num_classes_(num_classes), cfg_(cfg) {
    if (in_dim < 1 || num_classes < 2) throw ConfigError("classifier", "needs in_dim >= 1 and >= 2 classes");
}

void Classifier::init(Rng& rng) {
    params = {};
    nn::init_linear(params, "fc1", in_dim_, cfg_.hidden, rng);
    nn::init_linear(params, "fc2", cfg_.hidden, cfg_.features, rng);
    nn::init_linear(params, "out", cfg_.features, num_classes_, rng);
}

Classifier::Output Classifier::forward(const nn::Binding& p, const Var& x) const {
    if (x.cols() != in_dim_) throw ContractError("classifier: input width mismatch");
    Var h = ad::silu(nn::linear(p, "fc1", x));
    Var f = ad::silu(nn::linear(p, "fc2", h));
    return {nn::linear(p, "out", f), f};
}

Mat Classifier::log_probabilities(const Mat& x) {
    ad::NoGradGuard ng;
    return ad::log_softmax_rows(forward(nn::frozen(params), ad::constant(x)).logits).value();
}

Mat Classifier::probabilities(const Mat& x) { return log_probabilities(x).array().exp(); }

Mat Classifier::features(const Mat& x) {
    ad::NoGradGuard ng;
    return forward(nn::frozen(params), ad::constant(x)).features.value();
}

double train_classifier(Classifier& clf, const data::TokenDataset& ds, const ClassifierTrainConfig& cfg, Rng& rng) {
    if (clf.in_dim() != ds.n * ds.d || clf.num_classes() != ds.num_classes) {
        throw ContractError("train_classifier: classifier shape does not match dataset");
    }
    clf.init(rng);
    nn::AdamW opt({.lr = cfg.lr, .weight_decay = 1e-4});
    const int count = ds.count();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = rng.permutation(count);
        for (int start = 0; start < count; start += cfg.batch) {
            const int bsz = std::min(cfg.batch, count - start);
            Mat x(bsz, ds.tokens.cols());
            Mat onehot = Mat::Zero(bsz, ds.num_classes);
            for (int i = 0; i < bsz; ++i) {
                const int idx = order[static_cast<std::size_t>(start + i)];
                x.row(i) = ds.tokens.row(idx);
                onehot(i, ds.labels[static_cast<std::size_t>(idx)]) = 1.0;
            }
            x += cfg.input_noise * diffusion::gaussian(x.rows(), x.cols(), rng);
            clf.params.zero_grad();
            Var logp = ad::log_softmax_rows(clf.forward(nn::tracked(clf.params), ad::constant(x)).logits);
            Var loss = ad::scale(ad::sum(ad::mul(logp, ad::constant(onehot))), -1.0 / bsz);
            ad::backward(loss);
            opt.step(clf.params);
        }
    }
    const Mat probs = clf.probabilities(ds.tokens);
    int correct = 0;
    for (int i = 0; i < count; ++i) {
        ad::Index best = 0;
        probs.row(i).maxCoeff(&best);
        if (best == ds.labels[static_cast<std::size_t>(i)]) ++correct;
    }
    return static_cast<double>(correct) / count;
}

FeatureMoments moments_of(const Mat& features) {
    if (features.rows() < 2) throw ContractError("moments_of: need at least 2 samples");
    FeatureMoments m;
    m.count = features.rows();
    m.mean = features.colwise().mean().transpose();
    const Mat centered = features.rowwise() - m.mean.transpose();
    m.cov = centered.transpose() * centered / static_cast<double>(m.count - 1);
    m.cov = 0.5 * (m.cov + m.cov.transpose());
    return m;
}

namespace {

Mat symmetric_sqrt(const Mat& s) {
    Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (s + s.transpose()));
    Vec ev = es.eigenvalues();
    // Round-off can push PSD eigenvalues slightly below zero.
    ev = ev.cwiseMax(0.0);
    return es.eigenvectors() * ev.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const FeatureMoments& a, const FeatureMoments& b) {
    if (a.mean.size() != b.mean.size() || a.cov.rows() != b.cov.rows() || a.cov.rows() != a.mean.size()) {
        throw ContractError("frechet_distance: dimension mismatch");
    }
    const Mat root_a = symmetric_sqrt(a.cov);
    const Mat cross = symmetric_sqrt(root_a * b.cov * root_a);
    const double value = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    return std::max(0.0, value);
}

double inception_surrogate(const Mat& probs) {
    if (probs.rows() < 1) throw ContractError("inception_surrogate: no samples");
    for (ad::Index i = 0; i < probs.rows(); ++i) {
        if ((probs.row(i).array() < -1e-12).any() || std::abs(probs.row(i).sum() - 1.0) > 1e-6) {
            throw ContractError("inception_surrogate: row " + std::to_string(i) + " is not a probability vector");
        }
    }
    const Vec marginal = probs.colwise().mean().transpose();
    double kl_total = 0.0;
    for (ad::Index i = 0; i < probs.rows(); ++i) {
        for (ad::Index c = 0; c < probs.cols(); ++c) {
            const double p = probs(i, c);
            if (p > 0.0) kl_total += p * std::log(p / marginal(c));
        }
    }
    return std::exp(kl_total / static_cast<double>(probs.rows()));
}

TimingReport timing_harness(std::span<const Pipeline> pipelines, int n_images, int warmup, Rng& rng) {
    if (n_images < 10) throw ConfigError("n_images", "timing needs at least 10 images");
    if (warmup < 2) throw ConfigError("warmup", "timing needs at least 2 warmup images");
    using clock = std::chrono::steady_clock;
    TimingReport rep;
    for (const auto& p : pipelines) {
        Rng local = rng.split();
        for (int i = 0; i < warmup; ++i) p.generate_one(local);
        std::vector<double> secs;
        for (int i = 0; i < n_images; ++i) {
            const auto start = clock::now();
            p.generate_one(local);
            secs.push_back(std::chrono::duration<double>(clock::now() - start).count());
        }
        const double mean = std::accumulate(secs.begin(), secs.end(), 0.0) / n_images;
        double ss = 0.0;
        for (double s : secs) ss += (s - mean) * (s - mean);
        rep.pipelines.push_back({p.label, mean, std::sqrt(ss / (n_images - 1)), n_images});
    }
    if (rep.pipelines.size() >= 2) rep.speedup = rep.pipelines[0].mean_seconds / rep.pipelines[1].mean_seconds;
    return rep;
}

MeanInterval bootstrap_mean_ci(const Vec& values, int resamples, double level, Rng& rng) {
    const auto n = values.size();
    if (n < 2) throw ContractError("bootstrap_mean_ci: need at least 2 values");
    if (resamples < 1 || level <= 0.0 || level >= 1.0) throw ContractError("bootstrap_mean_ci: bad resamples or level");
    std::vector<double> means(static_cast<std::size_t>(resamples));
    for (auto& m : means) {
        double acc = 0.0;
        for (ad::Index i = 0; i < n; ++i) acc += values(rng.uniform_int(0, n - 1));
        m = acc / static_cast<double>(n);
    }
    std::sort(means.begin(), means.end());
    auto at = [&](double q) {
        const auto k = static_cast<std::size_t>(std::clamp(q * (resamples - 1), 0.0, resamples - 1.0));
        return means[k];
    };
    const double tail = (1.0 - level) / 2.0;
    return {values.mean(), at(tail), at(1.0 - tail)};
}

void emit_sample_grid(std::span<const mar::TokenGrid> grids, ImageShape shape, const std::filesystem::path& path) {
    if (grids.empty()) throw ContractError("emit_sample_grid: no grids");
    for (const auto& g : grids) {
        if (!g.complete()) throw ContractError("emit_sample_grid: grid still has masked tokens");
        if (g.n() != shape.height * shape.width || g.tokens.cols() != shape.channels) {
            throw ContractError("emit_sample_grid: grid does not match image shape");
        }
    }
    std::vector<std::size_t> order(grids.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return grids[a].class_id < grids[b].class_id; });

    const int count = static_cast<int>(grids.size());
    const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(count))));
    const int rows = (count + cols - 1) / cols;
    const int out_channels = shape.channels == 1 ? 1 : 3;
    const int W = cols * shape.width;
    const int H = rows * shape.height;
    std::vector<unsigned char> pixels(static_cast<std::size_t>(W) * H * out_channels, 0);
    auto to_byte = [](double v) {
        return static_cast<unsigned char>(std::clamp(std::lround((v + 1.0) * 0.5 * 255.0), 0L, 255L));
    };
    for (int tile = 0; tile < count; ++tile) {
        const auto& g = grids[order[static_cast<std::size_t>(tile)]];
        const int ty = (tile / cols) * shape.height;
        const int tx = (tile % cols) * shape.width;
        for (int j = 0; j < g.n(); ++j) {
            const int y = ty + j / shape.width;
            const int x = tx + j % shape.width;
            for (int c = 0; c < std::min(shape.channels, out_channels); ++c) {
                pixels[(static_cast<std::size_t>(y) * W + x) * out_channels + c] = to_byte(g.tokens(j, c));
            }
        }
    }
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw IoError("cannot write image: " + path.string());
        os << (out_channels == 1 ? "P5" : "P6") << "\n" << W << " " << H << "\n255\n";
        os.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
        if (!os) throw IoError("short write: " + path.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move image into place: " + path.string());
}

}  // namespace marval::eval
