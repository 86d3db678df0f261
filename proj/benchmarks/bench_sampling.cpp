// Per-image cost of the teacher sampler against the one-step student, plus
// the diffusion head on its own. Untrained weights: timing does not depend on them.

#include <benchmark/benchmark.h>

#include "marval/gsim.hpp"
#include "marval/mar.hpp"
#include "marval/rl.hpp"

using namespace marval;

namespace {

struct Digits {
    mar::MarModel model{[] {
        mar::ModelConfig c;
        c.n = 64;
        c.d = 1;
        c.num_classes = 10;
        return c;
    }()};
    diffusion::NoiseSchedule sched = diffusion::build_schedule(1000);
    nn::ParamStore params;
    std::vector<std::string> names{"0", "1", "2", "3", "4", "5", "6", "7", "8", "9"};

    Digits() {
        Rng rng(1);
        model.init(params, rng);
    }
};

Digits& digits() {
    static Digits d;
    return d;
}

void BM_HeadForward(benchmark::State& state) {
    auto& d = digits();
    const auto rows = static_cast<ad::Index>(state.range(0));
    Rng rng(2);
    const auto x = ad::constant(diffusion::gaussian(rows, 1, rng));
    const auto c = ad::constant(diffusion::gaussian(rows, d.model.config().width, rng));
    const std::vector<int> t(static_cast<std::size_t>(rows), 500);
    ad::NoGradGuard ng;
    for (auto _ : state) benchmark::DoNotOptimize(d.model.predict_eps(nn::frozen(d.params), x, t, c).value().data());
    state.SetItemsProcessed(state.iterations() * rows);
}
BENCHMARK(BM_HeadForward)->Arg(8)->Arg(64)->Arg(512);

void BM_TeacherImage(benchmark::State& state) {
    auto& d = digits();
    Rng rng(3);
    const std::vector<int> cls{3};
    ad::NoGradGuard ng;
    for (auto _ : state) {
        auto out = mar::teacher_generate(d.model, cls, 8, static_cast<int>(state.range(0)), 1.2, d.params, d.sched, rng, 1.0);
        benchmark::DoNotOptimize(out[0].tokens.data());
    }
}
BENCHMARK(BM_TeacherImage)->Arg(25)->Arg(100)->Unit(benchmark::kMillisecond);

void BM_StudentImage(benchmark::State& state) {
    auto& d = digits();
    Rng rng(4);
    const std::vector<int> cls{3};
    for (auto _ : state) {
        auto out = rl::rollout(d.model, d.params, cls, d.names, static_cast<int>(state.range(0)), d.sched, 400, rng, false);
        benchmark::DoNotOptimize(out.tokens.value().data());
    }
}
BENCHMARK(BM_StudentImage)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
