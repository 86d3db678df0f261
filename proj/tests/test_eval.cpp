#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <thread>

#include "marval/errors.hpp"
#include "marval/eval.hpp"
#include "support.hpp"

using namespace marval;
using namespace marval::eval;

namespace {

Mat random_spd(int dim, Rng& rng) {
    const Mat a = diffusion::gaussian(dim, dim, rng);
    return a * a.transpose() + 0.1 * Mat::Identity(dim, dim);
}

FeatureMoments moments(Vec mean, Mat cov) { return {std::move(mean), std::move(cov), 100}; }

}  // namespace

TEST_CASE("frechet distance examples") {
    // Reference value from tests/oracles/derived_values.py.
    const auto a = moments(Vec::Zero(2), Mat::Identity(2, 2));
    const auto b = moments((Vec(2) << 1.0, 0.0).finished(), Vec((Vec(2) << 4.0, 1.0).finished()).asDiagonal());
    CHECK(frechet_distance(a, b) == doctest::Approx(2.0).epsilon(1e-10));
    CHECK(frechet_distance(a, a) == doctest::Approx(0.0).scale(1.0).epsilon(1e-10));

    // Rank-deficient covariances stay finite and non-negative.
    Mat singular = Mat::Zero(3, 3);
    singular(0, 0) = 1.0;
    const double fd = frechet_distance(moments(Vec::Zero(3), singular), moments(Vec::Ones(3), singular));
    CHECK(fd == doctest::Approx(3.0).epsilon(1e-8));
}

TEST_CASE("frechet distance is a symmetric non-negative distance on random moments") {
    Rng rng(1);
    for (int i = 0; i < 100; ++i) {
        const int dim = static_cast<int>(rng.uniform_int(1, 6));
        const auto a = moments(diffusion::gaussian(dim, 1, rng), random_spd(dim, rng));
        const auto b = moments(diffusion::gaussian(dim, 1, rng), random_spd(dim, rng));
        const double ab = frechet_distance(a, b);
        REQUIRE(ab >= -1e-9);
        REQUIRE(ab == doctest::Approx(frechet_distance(b, a)).epsilon(1e-8));
        REQUIRE(std::abs(frechet_distance(a, a)) < 1e-8 * (1.0 + a.cov.trace()));
        // Commuting (diagonal) case against the closed form.
        const Vec va = a.cov.diagonal();
        const Vec vb = b.cov.diagonal();
        const double closed = (a.mean - b.mean).squaredNorm() + (va + vb - 2.0 * Vec(va.cwiseProduct(vb).cwiseSqrt())).sum();
        REQUIRE(frechet_distance(moments(a.mean, va.asDiagonal()), moments(b.mean, vb.asDiagonal())) ==
                doctest::Approx(closed).epsilon(1e-9));
    }
}

TEST_CASE("moments_of") {
    const Mat x = (Mat(3, 2) << 1, 2, 3, 4, 5, 9).finished();
    const auto m = moments_of(x);
    CHECK(m.mean(0) == doctest::Approx(3.0));
    CHECK(m.mean(1) == doctest::Approx(5.0));
    CHECK(m.cov(0, 0) == doctest::Approx(4.0));
    CHECK(m.cov(0, 1) == doctest::Approx(7.0));
    CHECK(m.count == 3);
    CHECK_THROWS_AS(moments_of(Mat::Zero(1, 2)), ContractError);
}

TEST_CASE("inception surrogate") {
    // Reference value from tests/oracles/derived_values.py.
    const Mat p = (Mat(2, 2) << 0.9, 0.1, 0.1, 0.9).finished();
    CHECK(inception_surrogate(p) == doctest::Approx(1.444935).epsilon(1e-6));
    CHECK(inception_surrogate(Mat::Constant(5, 4, 0.25)) == doctest::Approx(1.0));
    CHECK(inception_surrogate(Mat::Identity(4, 4)) == doctest::Approx(4.0));
    CHECK_THROWS_AS(inception_surrogate((Mat(1, 2) << 0.5, 0.6).finished()), ContractError);
}

TEST_CASE("inception surrogate stays between 1 and the class count") {
    Rng rng(2);
    for (int i = 0; i < 100; ++i) {
        const int C = static_cast<int>(rng.uniform_int(2, 10));
        const int N = static_cast<int>(rng.uniform_int(2, 50));
        Mat p = diffusion::gaussian(N, C, rng).array().exp();
        for (int r = 0; r < N; ++r) p.row(r) /= p.row(r).sum();
        const double is = inception_surrogate(p);
        REQUIRE(is >= 1.0 - 1e-12);
        REQUIRE(is <= C + 1e-9);
    }
}

TEST_CASE("classifier learns the synthetic classes") {
    const auto ds = data::make_synthetic(512, 3);
    Classifier clf(ds.n * ds.d, ds.num_classes, {.hidden = 32, .features = 16});
    Rng rng(3);
    clf.init(rng);
    const double acc = train_classifier(clf, ds, {.epochs = 10, .batch = 32, .lr = 3e-3}, rng);
    CHECK(acc > 0.8);
    const Mat probs = clf.probabilities(ds.tokens.topRows(8));
    CHECK(probs.rows() == 8);
    for (int r = 0; r < 8; ++r) CHECK(probs.row(r).sum() == doctest::Approx(1.0));
    CHECK(clf.features(ds.tokens.topRows(8)).cols() == 16);
    CHECK(clf.log_probabilities(ds.tokens.topRows(2)).array().exp().matrix().isApprox(clf.probabilities(ds.tokens.topRows(2))));
}

TEST_CASE("decode and flatten agree") {
    const auto ds = data::make_synthetic(4, 4);
    std::vector<mar::TokenGrid> grids;
    for (int i = 0; i < 4; ++i) grids.push_back({ds.sample(i), std::vector<unsigned char>(16, 0), ds.labels[static_cast<std::size_t>(i)]});
    const Mat flat = flatten(grids);
    CHECK(flat == ds.tokens);
    CHECK(decode(mar::to_batch(grids).tokens, 16).value() == flat);
    const auto shape = image_shape_for(64, 1);
    CHECK(shape.height == 8);
    CHECK(shape.width == 8);
    CHECK(image_shape_for(16, 2).channels == 2);
}

TEST_CASE("timing harness") {
    std::vector<Pipeline> pipes{
        {"slow", [](Rng&) { std::this_thread::sleep_for(std::chrono::milliseconds(4)); }},
        {"fast", [](Rng&) { std::this_thread::sleep_for(std::chrono::milliseconds(1)); }},
    };
    Rng rng(4);
    const auto rep = timing_harness(pipes, 10, 2, rng);
    REQUIRE(rep.pipelines.size() == 2);
    CHECK(rep.pipelines[0].n_images == 10);
    CHECK(rep.pipelines[0].mean_seconds >= 0.004);
    CHECK(rep.speedup > 1.5);
    CHECK(rep.speedup == doctest::Approx(rep.pipelines[0].mean_seconds / rep.pipelines[1].mean_seconds));
    CHECK_THROWS_AS(timing_harness(pipes, 9, 2, rng), ConfigError);
    CHECK_THROWS_AS(timing_harness(pipes, 10, 1, rng), ConfigError);
}

TEST_CASE("bootstrap interval") {
    Rng rng(5);
    Vec v(200);
    for (int i = 0; i < 200; ++i) v(i) = 1.0 + rng.normal();
    const auto ci = bootstrap_mean_ci(v, 2000, 0.95, rng);
    CHECK(ci.mean == doctest::Approx(v.mean()));
    CHECK(ci.low < ci.mean);
    CHECK(ci.high > ci.mean);
    // Close to the normal-theory half-width 1.96 / sqrt(200).
    CHECK((ci.high - ci.low) / 2 == doctest::Approx(1.96 / std::sqrt(200.0)).epsilon(0.2));
    CHECK_THROWS_AS(bootstrap_mean_ci(Vec::Ones(1), 100, 0.95, rng), ContractError);
}

TEST_CASE("sample grids") {
    const auto dir = test::scratch("eval-grids");
    std::vector<mar::TokenGrid> grids;
    for (int i = 0; i < 5; ++i) {
        grids.push_back({Mat::Constant(64, 1, -1.0 + 0.5 * i), std::vector<unsigned char>(64, 0), 4 - i});
    }
    emit_sample_grid(grids, image_shape_for(64, 1), dir / "g.pgm");
    std::ifstream in(dir / "g.pgm", std::ios::binary);
    std::string magic;
    int w = 0, h = 0, maxv = 0;
    in >> magic >> w >> h >> maxv;
    CHECK(magic == "P5");
    CHECK(w == 3 * 8);
    CHECK(h == 2 * 8);
    CHECK(maxv == 255);
    in.get();
    std::vector<unsigned char> px(static_cast<std::size_t>(w * h));
    in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
    // Stable sort by class puts the brightest grid (class 0) first.
    CHECK(px[0] == 255);

    std::vector<mar::TokenGrid> two{{Mat::Zero(16, 2), std::vector<unsigned char>(16, 0), 0}};
    emit_sample_grid(two, image_shape_for(16, 2), dir / "c.ppm");
    std::ifstream pin(dir / "c.ppm", std::ios::binary);
    pin >> magic;
    CHECK(magic == "P6");
}
