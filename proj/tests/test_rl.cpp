#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "marval/errors.hpp"
#include "marval/rl.hpp"

using namespace marval;
using namespace marval::rl;

namespace {

struct Fixture {
    mar::MarModel model{[] {
        mar::ModelConfig c;
        c.width = 16;
        c.heads = 2;
        c.encoder_blocks = 1;
        c.head_width = 16;
        c.head_blocks = 1;
        c.time_dim = 8;
        return c;
    }()};
    diffusion::NoiseSchedule sched = diffusion::build_schedule(1000);
    nn::ParamStore theta;
    std::vector<std::string> names{"ring", "spiral", "wave", "grid"};

    Fixture() {
        Rng rng(1);
        model.init(theta, rng);
        // Live modulation so every parameter influences the output.
        for (auto& [name, p] : theta.items()) {
            if (name.find(".ada") != std::string::npos) p.value = 0.1 * diffusion::gaussian(p.value.rows(), p.value.cols(), rng);
        }
    }
};

}  // namespace

TEST_CASE("prompt template") {
    CHECK(build_prompt("cat") == "a high-quality and harmonious picture of cat");
    CHECK_THROWS_AS(build_prompt(""), ContractError);
}

TEST_CASE("rollout structure") {
    Fixture f;
    Rng rng(2);
    const std::vector<int> classes{0, 3, 1};
    const auto one = rollout(f.model, f.theta, classes, f.names, 1, f.sched, 400, rng, false);
    REQUIRE(one.traces.size() == 3);
    CHECK(one.traces[0].per_iteration.size() == 1);
    CHECK(one.traces[0].per_iteration[0].subset.size() == 16);
    CHECK(one.traces[1].prompt == "a high-quality and harmonious picture of grid");
    CHECK_FALSE(one.tokens.requires_grad());

    const auto eight = rollout(f.model, f.theta, classes, f.names, 8, f.sched, 400, rng, true);
    CHECK(eight.tokens.requires_grad());
    for (const auto& tr : eight.traces) {
        CHECK(tr.K == 8);
        CHECK(tr.final.complete());
        CHECK(tr.final.tokens.allFinite());
        std::vector<int> covered;
        for (const auto& it : tr.per_iteration) {
            CHECK(it.z.rows() == static_cast<ad::Index>(it.subset.size()));
            covered.insert(covered.end(), it.subset.begin(), it.subset.end());
        }
        std::sort(covered.begin(), covered.end());
        CHECK(covered.size() == 16);
        CHECK(std::adjacent_find(covered.begin(), covered.end()) == covered.end());
    }

    Rng a(3);
    Rng b(3);
    const auto r1 = rollout(f.model, f.theta, classes, f.names, 4, f.sched, 400, a, false);
    const auto r2 = rollout(f.model, f.theta, classes, f.names, 4, f.sched, 400, b, false);
    CHECK(r1.tokens.value() == r2.tokens.value());

    // Later iterations condition on clipped tokens, so only the range is checked.
    Rng c(3);
    const auto clipped = rollout(f.model, f.theta, classes, f.names, 4, f.sched, 400, c, false, 0.5);
    CHECK(clipped.tokens.value().cwiseAbs().maxCoeff() <= 0.5);
    CHECK(clipped.tokens.value() != r1.tokens.value());

    CHECK_THROWS_AS(rollout(f.model, f.theta, std::vector<int>{4}, f.names, 2, f.sched, 400, rng, false), ContractError);
    CHECK_THROWS_AS(rollout(f.model, f.theta, classes, f.names, 0, f.sched, 400, rng, false), ConfigError);
}

TEST_CASE("rl loss") {
    Fixture f;
    Rng rng(4);
    const std::vector<int> classes{0, 1};
    const auto batch = rollout(f.model, f.theta, classes, f.names, 2, f.sched, 400, rng, true);
    CHECK(rl_loss(batch, ConstantReward(0.7), 16).item() == doctest::Approx(-0.7));
    CHECK_THROWS_AS(rl_loss(batch, ConstantReward(0.7, false), 16), ConfigError);

    // A constant reward carries no gradient.
    f.theta.zero_grad();
    ad::backward(rl_loss(batch, ConstantReward(0.7), 16));
    CHECK(f.theta.grad_norm() == 0.0);
}

TEST_CASE("classifier reward is the tempered log-probability of the prompted class") {
    eval::Classifier clf(4, 3);
    Rng rng(8);
    clf.init(rng);
    const std::vector<std::string> names{"a", "b", "c"};
    const Mat x = diffusion::gaussian(5, 4, rng);
    const std::vector<std::string> prompts{build_prompt("a"), build_prompt("c"), build_prompt("b"), build_prompt("a"),
                                           build_prompt("c")};
    const std::vector<int> label{0, 2, 1, 0, 2};
    for (const double temp : {1.0, 4.0}) {
        const ClassifierReward reward(clf, names, temp);
        const Mat r = reward.evaluate(ad::constant(x), prompts).value();
        const Mat logits = clf.forward(nn::frozen(clf.params), ad::constant(x)).logits.value() / temp;
        for (int i = 0; i < 5; ++i) {
            const double lse = std::log(logits.row(i).array().exp().sum());
            CHECK(r(i, 0) == doctest::Approx(logits(i, label[static_cast<std::size_t>(i)]) - lse));
        }
    }
    CHECK_THROWS_AS(ClassifierReward(clf, names, 0.0), ConfigError);
    CHECK_THROWS_AS(ClassifierReward(clf, {"a"}), ConfigError);
    CHECK_THROWS_AS(ClassifierReward(clf, names).evaluate(ad::constant(x.topRows(1)), std::vector<std::string>{"x"}),
                    ContractError);
}

TEST_CASE("reward gradient through the rollout matches finite differences") {
    Fixture f;
    const TargetDistanceReward reward(Vec::Constant(32, 0.25));
    const std::vector<int> classes{2, 0};
    const Rng seed(5);
    auto loss_at = [&](nn::ParamStore& theta, bool record) {
        Rng rng = seed;
        return rl_loss(rollout(f.model, theta, classes, f.names, 4, f.sched, 400, rng, record), reward, 16);
    };
    f.theta.zero_grad();
    ad::backward(loss_at(f.theta, true));
    for (const std::string name : {"head.out.b", "head.x.w", "enc.cls", "enc.in.w"}) {
        const double analytic = f.theta.at(name).grad(0, 0);
        const double h = 1e-5;
        nn::ParamStore up = f.theta;
        nn::ParamStore down = f.theta;
        up.at(name).value(0, 0) += h;
        down.at(name).value(0, 0) -= h;
        const double numeric = (loss_at(up, false).item() - loss_at(down, false).item()) / (2 * h);
        INFO(name << " analytic " << analytic << " numeric " << numeric);
        CHECK(analytic == doctest::Approx(numeric).epsilon(1e-4).scale(1e-8));
    }
}

TEST_CASE("rl rounds") {
    Fixture f;
    RLConfig cfg;
    cfg.K_train = 4;
    cfg.batch = 8;
    cfg.micro_batch = 4;
    cfg.ema = 0.5;

    SUBCASE("constant reward leaves parameters unchanged") {
        cfg.opt = {.lr = 1e-2};
        auto state = init_rl_state(f.theta, cfg);
        Rng rng(6);
        const auto m = rl_round(state, f.model, ConstantReward(1.0), f.names, cfg, f.sched, rng);
        CHECK(m.grad_norm == 0.0);
        CHECK(m.mean_reward == doctest::Approx(1.0));
        CHECK(state.theta.same_values(f.theta));
        CHECK(state.step == 1);
    }

    SUBCASE("optimizing a target-distance reward raises it") {
        cfg.opt = {.lr = 3e-3};
        const TargetDistanceReward reward(Vec::Zero(32));
        auto state = init_rl_state(f.theta, cfg);
        const std::vector<int> prompts{0, 1, 2, 3, 0, 1, 2, 3};
        Rng e1(7);
        const Vec before = evaluate_rewards(f.model, state.theta, reward, prompts, f.names, 4, f.sched, 400, e1);
        Rng rng(8);
        for (int i = 0; i < 30; ++i) rl_round(state, f.model, reward, f.names, cfg, f.sched, rng);
        Rng e2(7);
        const Vec after = evaluate_rewards(f.model, state.theta, reward, prompts, f.names, 4, f.sched, 400, e2);
        CHECK(after.mean() > before.mean());
        CHECK_FALSE(state.theta_ema.same_values(f.theta));
    }

    SUBCASE("held-out classes are never trained on") {
        cfg.train_classes = 1;
        cfg.opt = {.lr = 1e-3};
        auto state = init_rl_state(f.theta, cfg);
        // Class 0 maps to the only prompt in the reward's vocabulary.
        struct OnlyFirst final : RewardAdapter {
            std::string name() const override { return "only-first"; }
            bool differentiable() const override { return true; }
            Var evaluate(const Var& images, std::span<const std::string> prompts) const override {
                for (const auto& p : prompts) {
                    if (p != build_prompt("ring")) throw ContractError("unexpected prompt " + p);
                }
                return ConstantReward(0.0).evaluate(images, prompts);
            }
        };
        Rng rng(9);
        CHECK_NOTHROW(rl_round(state, f.model, OnlyFirst(), f.names, cfg, f.sched, rng));
    }

    SUBCASE("activation budget is enforced before any work") {
        cfg.max_activation_scalars = 10;
        auto state = init_rl_state(f.theta, cfg);
        Rng rng(10);
        CHECK_THROWS_AS(rl_round(state, f.model, ConstantReward(1.0), f.names, cfg, f.sched, rng), ConfigError);
        CHECK(state.step == 0);
    }
}

TEST_CASE("activation estimate grows with batch and K") {
    mar::ModelConfig c;
    CHECK(activation_estimate(c, 8, 4) > activation_estimate(c, 4, 4));
    CHECK(activation_estimate(c, 4, 8) > activation_estimate(c, 4, 4));
}
