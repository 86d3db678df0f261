#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "marval/dataset.hpp"
#include "marval/errors.hpp"
#include "marval/mar.hpp"

using namespace marval;
using namespace marval::mar;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.width = 16;
    c.heads = 2;
    c.encoder_blocks = 1;
    c.head_width = 16;
    c.head_blocks = 2;
    c.time_dim = 8;
    return c;
}

std::vector<TokenGrid> real_grids(const data::TokenDataset& ds, int first, int count) {
    std::vector<TokenGrid> out;
    for (int i = first; i < first + count; ++i) {
        TokenGrid g;
        g.tokens = ds.sample(i);
        g.mask.assign(static_cast<std::size_t>(ds.n), 0);
        g.class_id = ds.labels[static_cast<std::size_t>(i)];
        out.push_back(std::move(g));
    }
    return out;
}

GridBatch masked_batch(const data::TokenDataset& ds, int count, Rng& rng) {
    auto grids = real_grids(ds, 0, count);
    GridBatch gb = to_batch(grids);
    apply_random_masking(gb, 0.3, 0.8, rng);
    return gb;
}

}  // namespace

TEST_CASE("sample_mask_plan examples") {
    Rng rng(1);
    const auto one = sample_mask_plan(4, 1, rng);
    REQUIRE(one.K() == 1);
    std::set<int> all(one.subsets[0].begin(), one.subsets[0].end());
    CHECK(all == std::set<int>{0, 1, 2, 3});

    const auto four = sample_mask_plan(4, 4, rng);
    std::set<int> seen;
    for (const auto& s : four.subsets) {
        CHECK(s.size() == 1);
        seen.insert(s[0]);
    }
    CHECK(seen.size() == 4);

    // First differences of ceil(64 cos(pi k / 16)), from tests/oracles/derived_values.py.
    CHECK(cosine_subset_sizes(64, 8) == std::vector<int>{1, 3, 6, 8, 10, 11, 12, 13});
    CHECK_THROWS_AS(sample_mask_plan(4, 5, rng), ConfigError);
    CHECK_THROWS_AS(sample_mask_plan(4, 0, rng), ConfigError);
}

TEST_CASE("mask plans partition the token set for random n and K") {
    Rng rng(2);
    for (int i = 0; i < 300; ++i) {
        const int n = static_cast<int>(rng.uniform_int(1, 128));
        const int K = static_cast<int>(rng.uniform_int(1, n));
        const auto plan = sample_mask_plan(n, K, rng);
        REQUIRE(plan.K() == K);
        std::vector<int> all;
        for (const auto& s : plan.subsets) {
            REQUIRE_FALSE(s.empty());
            all.insert(all.end(), s.begin(), s.end());
        }
        std::sort(all.begin(), all.end());
        std::vector<int> expect(static_cast<std::size_t>(n));
        std::iota(expect.begin(), expect.end(), 0);
        REQUIRE(all == expect);
    }
}

TEST_CASE("encoder contracts") {
    const auto ds = data::make_synthetic(32, 3);
    const MarModel model(small_config());
    nn::ParamStore p;
    Rng rng(4);
    model.init(p, rng);
    GridBatch gb = masked_batch(ds, 4, rng);

    const auto a = model.encode(nn::frozen(p), gb, false).per_token.value();
    const auto b = model.encode(nn::frozen(p), gb, false).per_token.value();
    CHECK(a == b);
    CHECK(a.rows() == 4 * 16);
    CHECK(a.cols() == 16);

    GridBatch nulls = gb;
    std::fill(nulls.class_ids.begin(), nulls.class_ids.end(), kNullClass);
    CHECK(model.encode(nn::frozen(p), gb, true).per_token.value() ==
          model.encode(nn::frozen(p), nulls, false).per_token.value());
    CHECK(model.encode(nn::frozen(p), gb, true).null_flag);

    // Fully masked and fully visible grids give the same shape.
    std::fill(gb.mask.begin(), gb.mask.end(), 1);
    CHECK(model.encode(nn::frozen(p), gb, false).per_token.rows() == 64);
    std::fill(gb.mask.begin(), gb.mask.end(), 0);
    CHECK(model.encode(nn::frozen(p), gb, false).per_token.rows() == 64);

    gb.class_ids[0] = 7;
    CHECK_THROWS_AS(model.encode(nn::frozen(p), gb, false), ContractError);
}

TEST_CASE("diffusion head is per-token") {
    const MarModel model(small_config());
    nn::ParamStore p;
    Rng rng(5);
    model.init(p, rng);
    // Non-zero modulation so every path through the head is live.
    for (auto& [name, param] : p.items()) {
        if (name.find(".ada") != std::string::npos) param.value = 0.2 * diffusion::gaussian(param.value.rows(), param.value.cols(), rng);
    }
    const Mat x = diffusion::gaussian(6, 2, rng);
    const Mat c = diffusion::gaussian(6, 16, rng);
    const std::vector<int> t{5, 100, 300, 600, 800, 999};
    const Mat out = model.predict_eps(nn::frozen(p), ad::constant(x), t, ad::constant(c)).value();
    CHECK(out == model.predict_eps(nn::frozen(p), ad::constant(x), t, ad::constant(c)).value());

    const std::vector<int> perm{3, 0, 5, 1, 4, 2};
    Mat xp(6, 2), cp(6, 16);
    std::vector<int> tp(6);
    for (int i = 0; i < 6; ++i) {
        xp.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
        cp.row(i) = c.row(perm[static_cast<std::size_t>(i)]);
        tp[static_cast<std::size_t>(i)] = t[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    }
    const Mat outp = model.predict_eps(nn::frozen(p), ad::constant(xp), tp, ad::constant(cp)).value();
    for (int i = 0; i < 6; ++i) CHECK(outp.row(i).isApprox(out.row(perm[static_cast<std::size_t>(i)]), 1e-12));

    for (int i = 0; i < 6; ++i) {
        Mat c2 = c;
        c2.row(i).array() += 1.0;
        const Mat out2 = model.predict_eps(nn::frozen(p), ad::constant(x), t, ad::constant(c2)).value();
        for (int j = 0; j < 6; ++j) {
            if (j == i) {
                CHECK_FALSE(out2.row(j) == out.row(j));
            } else {
                CHECK(out2.row(j) == out.row(j));
            }
        }
    }
    CHECK_THROWS_AS(model.predict_eps(nn::frozen(p), ad::constant(x), t, ad::constant(c.topRows(5))), ContractError);
}

TEST_CASE("teacher training") {
    const auto ds = data::make_synthetic(256, 6);
    const MarModel model(small_config());
    const auto sched = diffusion::build_schedule(1000);
    nn::ParamStore p;
    Rng rng(7);
    model.init(p, rng);

    SUBCASE("zero learning rate leaves parameters unchanged") {
        const nn::ParamStore before = p;
        nn::AdamW opt({.lr = 0.0});
        const auto batch = real_grids(ds, 0, 8);
        const auto r = teacher_train_step(model, batch, p, opt, sched, {}, rng);
        CHECK(std::isfinite(r.loss));
        CHECK(p.same_values(before));
    }

    SUBCASE("masking ratio 1 masks every token") {
        auto grids = real_grids(ds, 0, 4);
        GridBatch gb = to_batch(grids);
        apply_random_masking(gb, 1.0, 1.0, rng);
        CHECK(masked_rows(gb).size() == 64);
    }

    SUBCASE("validation loss decreases and the time embedding becomes live") {
        nn::AdamW opt({.lr = 2e-3, .grad_clip = 1.0});
        const auto val = real_grids(ds, 200, 32);
        auto val_loss = [&] {
            // Fixed masks, steps and noise: same random stream each time.
            Rng fixed(123);
            nn::AdamW frozen_opt({.lr = 0.0});
            nn::ParamStore copy = p;
            return teacher_train_step(model, val, copy, frozen_opt, sched, {}, fixed).loss;
        };
        const double before = val_loss();
        const Mat x = diffusion::gaussian(4, 2, rng);
        const Mat c = diffusion::gaussian(4, 16, rng);
        for (int step = 0; step < 200; ++step) {
            std::vector<TokenGrid> batch;
            for (int b = 0; b < 16; ++b) batch.push_back(real_grids(ds, static_cast<int>(rng.uniform_int(0, 199)), 1)[0]);
            teacher_train_step(model, batch, p, opt, sched, {}, rng);
            if (step == 49) {
                const Mat at_T = model.predict_eps(nn::frozen(p), ad::constant(x), std::vector<int>(4, 1000), ad::constant(c)).value();
                const Mat at_1 = model.predict_eps(nn::frozen(p), ad::constant(x), std::vector<int>(4, 1), ad::constant(c)).value();
                CHECK((at_T - at_1).cwiseAbs().maxCoeff() > 0.0);
            }
        }
        CHECK(val_loss() < before);
    }

    SUBCASE("non-finite loss aborts with diagnostics") {
        p.at("head.out.w").value(0, 0) = std::numeric_limits<double>::quiet_NaN();
        nn::AdamW opt({.lr = 1e-3});
        const auto batch = real_grids(ds, 0, 4);
        try {
            teacher_train_step(model, batch, p, opt, sched, {}, rng);
            FAIL("expected a numeric error");
        } catch (const NumericError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("step") != std::string::npos);
            CHECK(msg.find("lr") != std::string::npos);
            CHECK(msg.find("grad") != std::string::npos);
        }
    }
}

TEST_CASE("teacher generation") {
    const MarModel model(small_config());
    const auto sched = diffusion::build_schedule(1000);
    nn::ParamStore p;
    Rng init(8);
    model.init(p, init);
    const std::vector<int> classes{0, 1, 2, 3, kNullClass};

    Rng a(9);
    Rng b(9);
    const auto g1 = teacher_generate(model, classes, 4, 10, 1.2, p, sched, a);
    const auto g2 = teacher_generate(model, classes, 4, 10, 1.2, p, sched, b);
    REQUIRE(g1.size() == 5);
    for (std::size_t i = 0; i < g1.size(); ++i) {
        CHECK(g1[i].tokens == g2[i].tokens);
        CHECK(g1[i].complete());
        CHECK(g1[i].tokens.allFinite());
    }

    // K = 1: one chain covers every token; head calls = n_diff conditional + n_diff null.
    const long calls = model.head_calls();
    Rng c(10);
    const auto single = teacher_generate(model, std::vector<int>{1}, 1, 7, 1.0, p, sched, c);
    CHECK(single[0].complete());
    CHECK(model.head_calls() - calls == 14);

    // w = 0 ignores the null branch entirely.
    nn::ParamStore altered = p;
    altered.at("enc.cls").value.row(model.config().num_classes).array() += 5.0;
    Rng d(11);
    Rng e(11);
    const auto plain = teacher_generate(model, std::vector<int>{2, 3}, 3, 5, 0.0, p, sched, d);
    const auto other = teacher_generate(model, std::vector<int>{2, 3}, 3, 5, 0.0, altered, sched, e);
    CHECK(plain[0].tokens == other[0].tokens);
    CHECK(plain[1].tokens == other[1].tokens);
}

TEST_CASE("classifier-free guidance algebra") {
    Rng rng(12);
    for (int i = 0; i < 200; ++i) {
        const Mat c = diffusion::gaussian(3, 2, rng);
        const Mat u = diffusion::gaussian(3, 2, rng);
        const double w = 5.0 * rng.uniform();
        REQUIRE(cfg_combine(c, u, 0.0) == c);
        REQUIRE(cfg_combine(c, c, w).isApprox(c, 1e-12));
        REQUIRE(cfg_combine(ad::constant(c), ad::constant(u), w).value().isApprox(cfg_combine(c, u, w)));
    }
}

TEST_CASE("grid batches round-trip") {
    const auto ds = data::make_synthetic(8, 1);
    auto grids = real_grids(ds, 0, 3);
    grids[1].mask[4] = 1;
    const auto back = from_batch(to_batch(grids));
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back[i].tokens == grids[i].tokens);
        CHECK(back[i].mask == grids[i].mask);
        CHECK(back[i].class_id == grids[i].class_id);
    }
    CHECK_FALSE(back[1].complete());
}
