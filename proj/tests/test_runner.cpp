#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <fstream>
#include <sstream>

#include "marval/checkpoint.hpp"
#include "marval/metrics_log.hpp"
#include "marval/runner.hpp"
#include "support.hpp"

using namespace marval;
namespace fs = std::filesystem;
using ad::Mat;

namespace {

std::string tiny_config(const fs::path& run_dir) {
    std::ostringstream os;
    os << "run_dir: " << run_dir.string() << "\n"
       << "seed: 3\n"
       << "dataset:\n  id: synthetic\n  synthetic_count: 128\n  cache_dir: " << (run_dir / "cache").string() << "\n"
       << "model:\n  width: 16\n  heads: 2\n  encoder_blocks: 1\n  head_width: 16\n  head_blocks: 1\n  time_dim: 8\n"
       << "teacher:\n  epochs: 3\n  batch: 16\n  lr: 0.002\n  ema: 0.9\n  checkpoint_every: 10\n"
       << "classifier:\n  epochs: 2\n  hidden: 16\n  features: 8\n"
       << "distill:\n  epochs: 1\n  batch: 16\n  generator_lr: 0.0002\n  auxiliary_lr: 0.0005\n  ema: 0.9\n"
       << "  checkpoint_every: 4\n"
       << "rl:\n  epochs: 1\n  batch: 8\n  K_train: 2\n  K_eval: 2\n  lr: 0.0001\n  ema: 0.9\n  checkpoint_every: 4\n"
       << "eval:\n  samples: 32\n  K: 2\n  n_diff: 5\n  timing_images: 10\n  reward_prompts: 8\n"
       << "sample:\n  count: 4\n  K: 2\n  n_diff: 5\n";
    return os.str();
}

RunConfig tiny(const fs::path& run_dir, Stage stage) {
    RunConfig cfg = parse_config(tiny_config(run_dir));
    cfg.stage = stage;
    return cfg;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("config parsing") {
    const RunConfig defaults = parse_config("run_dir: x\ndataset:\n  id: synthetic\n");
    CHECK(defaults.distill.w == doctest::Approx(1.2));
    CHECK(defaults.distill.t_star == 400);
    try {
        parse_config("run_dir: x\n", "short.yaml");
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        CHECK(e.field() == "dataset.id");
    }

    try {
        parse_config("dataset:\n  id: synthetic\nteacher:\n  learning_rte: 0.1\n", "bad.yaml");
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        CHECK(e.field() == "teacher.learning_rte");
        CHECK(std::string(e.what()).find("bad.yaml:4") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_config("dataset:\n  id: synthetic\ndistill:\n  w: high\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("dataset:\n  id: synthetic\nseed: [1, 2]\n"), ConfigError);

    const RunConfig cfg = parse_config(tiny_config("/tmp/somewhere"));
    CHECK(parse_config(serialize_config(cfg)) == cfg);
    CHECK(config_hash(cfg).size() == 16);

    RunConfig other = cfg;
    other.stage = Stage::eval;
    other.run_dir = "/elsewhere";
    CHECK(config_hash(other) == config_hash(cfg));
    other.distill.w = 2.0;
    CHECK(config_hash(other) != config_hash(cfg));

    CHECK(parse_stage("train-teacher") == Stage::train_teacher);
    CHECK(to_string(Stage::verify_identities) == "verify-identities");
    CHECK_THROWS_AS(parse_stage("teach"), ConfigError);
}

TEST_CASE("config round-trips for perturbed values") {
    Rng rng(1);
    for (int i = 0; i < 100; ++i) {
        RunConfig cfg = parse_config(tiny_config("/tmp/r" + std::to_string(i)));
        cfg.seed = static_cast<std::uint64_t>(rng.uniform_int(0, 1'000'000));
        cfg.distill.w = 4.0 * rng.uniform();
        cfg.teacher.lr = std::pow(10.0, -6.0 + 4.0 * rng.uniform());
        cfg.rl.holdout_classes = static_cast<int>(rng.uniform_int(0, 3));
        cfg.eval.teacher = rng.uniform() < 0.5;
        REQUIRE(parse_config(serialize_config(cfg)) == cfg);
    }
}

TEST_CASE("checkpoint round-trip and integrity") {
    const auto dir = test::scratch("checkpoint");
    Checkpoint c;
    c.stage = "distill";
    c.step = 42;
    c.config_hash = "0123456789abcdef";
    nn::ParamStore s;
    s.add("w", (Mat(2, 2) << 1, 2, 3, 4).finished());
    s.add("b", Mat::Constant(1, 3, 0.1));
    c.stores["theta"] = s;
    nn::AdamW opt({.lr = 1e-3});
    s.at("w").grad = Mat::Ones(2, 2);
    s.at("b").grad = Mat::Ones(1, 3);
    opt.step(s);
    c.optimizers["generator"] = capture(opt);
    Rng rng(9);
    rng.normal();
    c.rng_states["main"] = rng.save_state();
    c.scalars["complete"] = 0.0;

    const auto path = dir / "x.ckpt";
    save_checkpoint(c, path);
    const Checkpoint back = load_checkpoint(path, c.config_hash);
    CHECK(back == c);
    nn::AdamW restored({.lr = 1e-3});
    restore(restored, back.optimizers.at("generator"));
    CHECK(restored.steps() == 1);

    try {
        load_checkpoint(path, "ffffffffffffffff");
        FAIL("expected a hash mismatch");
    } catch (const IntegrityError& e) {
        CHECK(std::string(e.what()).find("--allow-config-mismatch") != std::string::npos);
    }
    CHECK(load_checkpoint(path, "ffffffffffffffff", true) == c);

    const std::string bytes = slurp(path);
    auto write = [&](const std::string& content) {
        std::ofstream(dir / "bad.ckpt", std::ios::binary) << content;
        return dir / "bad.ckpt";
    };
    CHECK_THROWS_AS(load_checkpoint(write(bytes.substr(0, bytes.size() - 7))), IntegrityError);
    CHECK_THROWS_AS(load_checkpoint(write(bytes.substr(0, 10))), IntegrityError);
    CHECK_THROWS_AS(load_checkpoint(write(bytes + "x")), IntegrityError);
    std::string flipped = bytes;
    flipped[bytes.size() / 2] = static_cast<char>(flipped[bytes.size() / 2] ^ 0x40);
    CHECK_THROWS_AS(load_checkpoint(write(flipped)), IntegrityError);
    std::string magic = bytes;
    magic[0] = 'X';
    CHECK_THROWS_AS(load_checkpoint(write(magic)), IntegrityError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);
}

TEST_CASE("metrics log") {
    const auto dir = test::scratch("metrics");
    const auto path = dir / "m.jsonl";
    {
        MetricsLog log(path, "abc");
        for (long s = 1; s <= 5; ++s) log.append(s, "loss", 1.0 / static_cast<double>(s));
        log.append(5, "frechet", 2.5, 512);
    }
    auto recs = MetricsLog::read(path);
    REQUIRE(recs.size() == 6);
    CHECK(recs[0].name == "loss");
    CHECK(recs[0].config_hash == "abc");
    CHECK(recs[5].count == 512);
    CHECK_FALSE(recs[0].count.has_value());
    CHECK(recs[2].value == 1.0 / 3.0);

    // A crash mid-write leaves a partial trailing line.
    std::ofstream(path, std::ios::app) << "{\"step\": 6, \"wall_ti";
    CHECK(MetricsLog::read(path).size() == 6);

    MetricsLog log(path, "abc");
    log.truncate_after(3);
    recs = MetricsLog::read(path);
    CHECK(recs.size() == 3);
    log.append(4, "loss", 0.2);
    CHECK(MetricsLog::read(path).back().step == 4);

    MetricRecord a = recs[0];
    MetricRecord b = a;
    b.wall_time += 10;
    CHECK(a.same_content(b));
    b.value += 1e-12;
    CHECK_FALSE(a.same_content(b));

    emit_metric_plot(MetricsLog::read(path), dir / "m.svg");
    CHECK(slurp(dir / "m.svg").find("<svg") != std::string::npos);
}

TEST_CASE("stage orchestration") {
    const auto root = test::scratch("runner");

    SUBCASE("missing prerequisites are reported by stage") {
        const auto cfg = tiny(root / "empty", Stage::distill);
        try {
            run_stage(cfg);
            FAIL("expected a dependency error");
        } catch (const DependencyError& e) {
            CHECK(std::string(e.what()).find("train-teacher") != std::string::npos);
            CHECK(exit_code_for(e) == 3);
        }
        CHECK(exit_code_for(ConfigError("x", "y")) == 2);
        CHECK(exit_code_for(NumericError("z")) == 4);
    }

    SUBCASE("a second stage on the same run directory is refused") {
        const auto cfg = tiny(root / "locked", Stage::train_teacher);
        const auto paths = run_paths(cfg);
        fs::create_directories(paths.root);
        const int fd = ::open(paths.lock().c_str(), O_RDWR | O_CREAT, 0644);
        REQUIRE(fd >= 0);
        REQUIRE(::flock(fd, LOCK_EX | LOCK_NB) == 0);
        CHECK_THROWS_WITH(run_stage(cfg), doctest::Contains("another stage is running"));
        ::flock(fd, LOCK_UN);
        ::close(fd);
    }

    SUBCASE("fixed seeds reproduce metrics and samples; interrupted runs resume identically") {
        std::ostringstream quiet;
        const RunOptions opts{.log = &quiet};
        auto pipeline = [&](const fs::path& dir, long interrupt_teacher, long interrupt_distill) {
            auto stage = [&](Stage s, long interrupt) {
                const auto cfg = tiny(dir, s);
                if (interrupt >= 0) {
                    RunOptions o = opts;
                    o.interrupt_at_step = interrupt;
                    CHECK_THROWS_AS(run_stage(cfg, o), Interrupted);
                    RunOptions r = opts;
                    r.resume = true;
                    CHECK(run_stage(cfg, r));
                } else {
                    CHECK(run_stage(cfg, opts));
                }
            };
            stage(Stage::train_teacher, interrupt_teacher);
            stage(Stage::distill, interrupt_distill);
            stage(Stage::sample, -1);
        };
        struct Snapshot {
            std::vector<MetricRecord> records;
            std::vector<Checkpoint> checkpoints;
            std::string samples;
        };
        const auto dir = root / "det";
        const auto paths = run_paths(tiny(dir, Stage::train_teacher));
        auto snapshot = [&] {
            Snapshot snap;
            for (const Stage s : {Stage::train_teacher, Stage::distill}) {
                const auto recs = MetricsLog::read(paths.metrics(s));
                snap.records.insert(snap.records.end(), recs.begin(), recs.end());
                snap.checkpoints.push_back(load_checkpoint(paths.checkpoint(s)));
            }
            snap.samples = slurp(paths.samples(2));
            return snap;
        };
        auto fresh = [&](long interrupt_teacher, long interrupt_distill) {
            fs::remove_all(dir);
            pipeline(dir, interrupt_teacher, interrupt_distill);
            return snapshot();
        };

        const Snapshot first = fresh(-1, -1);
        CHECK(fs::exists(paths.plot(Stage::train_teacher)));
        REQUIRE(first.records.size() >= 50);
        for (const auto& [label, other] : {std::pair{"rerun", fresh(-1, -1)}, std::pair{"resumed", fresh(15, 5)}}) {
            INFO(label);
            REQUIRE(other.records.size() == first.records.size());
            for (std::size_t i = 0; i < first.records.size(); ++i) {
                INFO("record " << i);
                CHECK(first.records[i].same_content(other.records[i]));
            }
            CHECK(first.checkpoints == other.checkpoints);
            CHECK(first.samples == other.samples);
        }

        // A finished stage with --resume is a no-op.
        RunOptions r = opts;
        r.resume = true;
        CHECK(run_stage(tiny(dir, Stage::train_teacher), r));
    }
}
