#include "marval/runner.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <optional>
#include <ostream>

#include "marval/checkpoint.hpp"
#include "marval/dataset.hpp"
#include "marval/eval.hpp"
#include "marval/gsim.hpp"
#include "marval/identity_lab.hpp"
#include "marval/mar.hpp"
#include "marval/metrics_log.hpp"
#include "marval/rl.hpp"

namespace marval {

using ad::Mat;
using ad::Vec;
using nlohmann::json;
namespace fs = std::filesystem;

fs::path RunPaths::checkpoint(Stage s) const {
    switch (s) {
        case Stage::train_teacher:
            return root / "teacher.ckpt";
        case Stage::distill:
            return root / "distill.ckpt";
        case Stage::rl:
            return root / "rl.ckpt";
        default:
            throw ContractError("stage " + to_string(s) + " has no checkpoint");
    }
}

fs::path RunPaths::metrics(Stage s) const { return root / "metrics" / (to_string(s) + ".jsonl"); }
fs::path RunPaths::plot(Stage s) const { return root / "plots" / (to_string(s) + ".svg"); }
fs::path RunPaths::samples(int channels) const { return root / (channels == 1 ? "samples.pgm" : "samples.ppm"); }

RunPaths run_paths(const RunConfig& cfg) { return {fs::absolute(cfg.run_dir)}; }

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e) != nullptr) return 2;
    if (dynamic_cast<const DependencyError*>(&e) != nullptr) return 3;
    if (dynamic_cast<const NumericError*>(&e) != nullptr) return 4;
    return 1;
}

namespace {

/// Exclusive advisory lock on the run directory, released on destruction.
class RunLock {
  public:
    explicit RunLock(const fs::path& path) {
        fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
        if (fd_ < 0) throw IoError("cannot open lock file " + path.string());
        if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
            ::close(fd_);
            throw Error("another stage is running in " + path.parent_path().string());
        }
    }
    ~RunLock() {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

  private:
    int fd_ = -1;
};

void write_text_atomic(const fs::path& path, const std::string& text) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::trunc);
        os << text;
        if (!os) throw IoError("cannot write " + tmp);
    }
    fs::rename(tmp, path);
}

std::uint64_t stage_seed(std::uint64_t seed, std::uint64_t salt) { return seed ^ (0x9E3779B97F4A7C15ULL * (salt + 1)); }

/// Shared per-stage state: data, architecture, schedule, logging.
struct Env {
    const RunConfig& cfg;
    const RunOptions& opts;
    std::string hash;
    RunPaths paths;
    data::TokenDataset data;
    mar::MarModel model;
    diffusion::NoiseSchedule sched;

    Env(const RunConfig& c, const RunOptions& o)
        : cfg(c), opts(o), hash(config_hash(c)), paths(run_paths(c)), model(c.model),
          sched(diffusion::build_schedule(c.schedule.T, c.schedule.s)) {}

    void load_data() {
        const fs::path fallback =
            cfg.dataset.cache_dir.empty() ? paths.root / "cache" : resolve(cfg, cfg.dataset.cache_dir);
        data = data::load_dataset(cfg.dataset.id, resolve(cfg, cfg.dataset.path), data::data_cache_dir(fallback),
                                  cfg.dataset.synthetic_count);
        if (data.n != cfg.model.n || data.d != cfg.model.d || data.num_classes != cfg.model.num_classes) {
            throw ConfigError("dataset.id", "dataset shape does not match the model");
        }
    }

    void say(const std::string& line) const {
        if (opts.log != nullptr) *opts.log << "[" << to_string(cfg.stage) << "] " << line << std::endl;
    }

    Checkpoint load(Stage s) const { return load_checkpoint(paths.checkpoint(s), hash, opts.allow_config_mismatch); }

    /// The completed checkpoint of a prerequisite stage.
    Checkpoint require(Stage s) const {
        const auto p = paths.checkpoint(s);
        if (!fs::exists(p)) {
            throw DependencyError(to_string(s), "stage '" + to_string(cfg.stage) + "' needs the " + to_string(s) +
                                                    " checkpoint (" + p.string() + "); run '" + to_string(s) +
                                                    "' first");
        }
        Checkpoint c = load(s);
        if (c.scalars.count("complete") == 0 || c.scalars.at("complete") != 1.0) {
            throw DependencyError(to_string(s), "the " + to_string(s) + " stage has not finished (" + p.string() + ")");
        }
        return c;
    }

    int rounds(int epochs, int batch) const {
        return static_cast<int>((static_cast<long>(epochs) * data.count() + batch - 1) / batch);
    }

    eval::Classifier classifier(const Checkpoint& teacher) const {
        eval::Classifier clf(cfg.model.n * cfg.model.d, cfg.model.num_classes,
                             {cfg.classifier.hidden, cfg.classifier.features});
        clf.params = teacher.stores.at("classifier");
        return clf;
    }

    nn::ParamStore teacher_params(const Checkpoint& teacher) const {
        return cfg.teacher.ema > 0.0 ? teacher.stores.at("teacher_ema") : teacher.stores.at("teacher");
    }

    /// Largest absolute token value in the training data; bounds sampler x0 estimates.
    double data_bound() const { return data.tokens.cwiseAbs().maxCoeff(); }

    std::vector<std::string> class_names() const { return data::class_names_for(cfg.dataset.id, cfg.model.num_classes); }
};

/// Opens the stage's metrics log: truncated to the checkpoint step on resume,
/// emptied on a fresh start.
MetricsLog open_log(const Env& env, long resume_step) {
    const auto path = env.paths.metrics(env.cfg.stage);
    MetricsLog log(path, env.hash);
    if (resume_step >= 0) {
        log.truncate_after(resume_step);
    } else {
        fs::remove(path);
    }
    return log;
}

/// Fires the interrupt hook after the metrics of `step` are on disk.
void maybe_interrupt(const Env& env, long step) {
    if (env.opts.interrupt_at_step >= 0 && step == env.opts.interrupt_at_step) {
        throw Interrupted("interrupted after step " + std::to_string(step));
    }
}

/// Loads this stage's own partial checkpoint when resuming. A finished
/// checkpoint with --resume means there is nothing left to do.
std::optional<Checkpoint> resume_point(const Env& env, bool& finished) {
    finished = false;
    const auto p = env.paths.checkpoint(env.cfg.stage);
    if (!env.opts.resume || !fs::exists(p)) return std::nullopt;
    Checkpoint c = env.load(env.cfg.stage);
    finished = c.scalars.count("complete") != 0 && c.scalars.at("complete") == 1.0;
    return c;
}

void finish_plot(const Env& env) {
    fs::create_directories(env.paths.plot(env.cfg.stage).parent_path());
    emit_metric_plot(MetricsLog::read(env.paths.metrics(env.cfg.stage)), env.paths.plot(env.cfg.stage));
}

std::vector<mar::TokenGrid> draw_real_batch(const data::TokenDataset& ds, int batch, Rng& rng) {
    const auto perm = rng.permutation(ds.count());
    std::vector<mar::TokenGrid> grids(static_cast<std::size_t>(std::min(batch, ds.count())));
    for (std::size_t b = 0; b < grids.size(); ++b) {
        const int i = perm[b];
        grids[b].tokens = ds.sample(i);
        grids[b].mask.assign(static_cast<std::size_t>(ds.n), 0);
        grids[b].class_id = ds.labels[static_cast<std::size_t>(i)];
    }
    return grids;
}

// ---------------------------------------------------------------- teacher

bool train_teacher(Env& env) {
    const auto& cfg = env.cfg;
    env.load_data();
    bool finished = false;
    auto resumed = resume_point(env, finished);
    if (finished) {
        env.say("already complete; nothing to resume");
        return true;
    }

    Rng rng(stage_seed(cfg.seed, 0));
    nn::ParamStore teacher;
    env.model.init(teacher, rng);
    nn::ParamStore ema = teacher;
    nn::AdamW opt({.lr = cfg.teacher.lr, .weight_decay = cfg.teacher.weight_decay, .grad_clip = cfg.teacher.grad_clip});
    long step = 0;
    if (resumed) {
        teacher = resumed->stores.at("teacher");
        ema = resumed->stores.at("teacher_ema");
        restore(opt, resumed->optimizers.at("teacher"));
        rng.load_state(resumed->rng_states.at("main"));
        step = resumed->step;
        env.say("resuming from step " + std::to_string(step));
    }
    MetricsLog log = open_log(env, resumed ? step : -1);

    const mar::TeacherTrainConfig tcfg{cfg.teacher.mask_min, cfg.teacher.mask_max, cfg.teacher.class_dropout,
                                       cfg.teacher.diffusion_batch_mul};
    const int total = env.rounds(cfg.teacher.epochs, cfg.teacher.batch);
    auto snapshot = [&](bool complete) {
        Checkpoint c;
        c.stage = to_string(Stage::train_teacher);
        c.step = step;
        c.config_hash = env.hash;
        c.stores = {{"teacher", teacher}, {"teacher_ema", ema}};
        c.optimizers = {{"teacher", capture(opt)}};
        c.rng_states = {{"main", rng.save_state()}};
        c.scalars = {{"complete", complete ? 1.0 : 0.0}};
        return c;
    };

    while (step < total) {
        const auto batch = draw_real_batch(env.data, cfg.teacher.batch, rng);
        const auto r = mar::teacher_train_step(env.model, batch, teacher, opt, env.sched, tcfg, rng);
        if (cfg.teacher.ema > 0.0) nn::ema_update(ema, teacher, cfg.teacher.ema);
        ++step;
        log.append(step, "loss", r.loss);
        log.append(step, "grad_norm", r.grad_norm);
        if (step % cfg.teacher.checkpoint_every == 0 && step < total) save_checkpoint(snapshot(false), env.paths.checkpoint(Stage::train_teacher));
        if (step % std::max(1, total / 10) == 0) env.say("step " + std::to_string(step) + "/" + std::to_string(total) + " loss " + std::to_string(r.loss));
        maybe_interrupt(env, step);
    }

    // The evaluation classifier is trained once the teacher is done; it has its own stream.
    Rng clf_rng(stage_seed(cfg.seed, 10));
    eval::Classifier clf(cfg.model.n * cfg.model.d, cfg.model.num_classes, {cfg.classifier.hidden, cfg.classifier.features});
    clf.init(clf_rng);
    const double acc = eval::train_classifier(
        clf, env.data, {cfg.classifier.epochs, cfg.classifier.batch, cfg.classifier.lr, cfg.classifier.input_noise},
        clf_rng);
    log.append(step, "classifier_accuracy", acc);
    env.say("classifier training accuracy " + std::to_string(acc));

    Checkpoint done = snapshot(true);
    done.stores.emplace("classifier", clf.params);
    done.scalars["classifier_accuracy"] = acc;
    save_checkpoint(done, env.paths.checkpoint(Stage::train_teacher));
    finish_plot(env);
    return true;
}

// ---------------------------------------------------------------- distill

bool distill(Env& env) {
    const auto& cfg = env.cfg;
    env.load_data();
    const Checkpoint teacher_ckpt = env.require(Stage::train_teacher);
    nn::ParamStore teacher = env.teacher_params(teacher_ckpt);
    bool finished = false;
    auto resumed = resume_point(env, finished);
    if (finished) {
        env.say("already complete; nothing to resume");
        return true;
    }

    Rng rng(stage_seed(cfg.seed, 1));
    gsim::DistillState state = gsim::init_state(teacher, to_distill_config(cfg));
    if (resumed) {
        state.theta = resumed->stores.at("theta");
        state.phi = resumed->stores.at("phi");
        state.theta_ema = resumed->stores.at("theta_ema");
        restore(state.generator_opt, resumed->optimizers.at("generator"));
        restore(state.auxiliary_opt, resumed->optimizers.at("auxiliary"));
        rng.load_state(resumed->rng_states.at("main"));
        state.step = resumed->step;
        env.say("resuming from step " + std::to_string(state.step));
    }
    MetricsLog log = open_log(env, resumed ? state.step : -1);

    const mar::TeacherTrainConfig masking{cfg.teacher.mask_min, cfg.teacher.mask_max, 0.0, 1};
    const gsim::MarDistillModel family(env.model, env.data, env.sched, cfg.distill.t_star, masking);
    const int total = env.rounds(cfg.distill.epochs, cfg.distill.batch);
    auto snapshot = [&](bool complete) {
        Checkpoint c;
        c.stage = to_string(Stage::distill);
        c.step = state.step;
        c.config_hash = env.hash;
        c.stores = {{"theta", state.theta}, {"phi", state.phi}, {"theta_ema", state.theta_ema}};
        c.optimizers = {{"generator", capture(state.generator_opt)}, {"auxiliary", capture(state.auxiliary_opt)}};
        c.rng_states = {{"main", rng.save_state()}};
        c.scalars = {{"complete", complete ? 1.0 : 0.0}, {"w", cfg.distill.w}};
        return c;
    };

    while (state.step < total) {
        const auto m = gsim::distill_round(state, family, teacher, env.sched, rng);
        log.append(m.step, "aux_loss", m.aux_loss);
        log.append(m.step, "aux_grad_norm", m.aux_grad_norm);
        log.append(m.step, "gen_loss", m.gen_loss);
        log.append(m.step, "gen_grad_norm", m.gen_grad_norm);
        if (m.step % cfg.distill.checkpoint_every == 0 && m.step < total) save_checkpoint(snapshot(false), env.paths.checkpoint(Stage::distill));
        if (m.step % std::max(1, total / 10) == 0) env.say("round " + std::to_string(m.step) + "/" + std::to_string(total) + " aux " + std::to_string(m.aux_loss) + " gen " + std::to_string(m.gen_loss));
        maybe_interrupt(env, m.step);
    }
    save_checkpoint(snapshot(true), env.paths.checkpoint(Stage::distill));
    finish_plot(env);
    return true;
}

// ---------------------------------------------------------------- identities

bool verify_identities(Env& env) {
    const auto rows = lab::run_identity_suite(stage_seed(env.cfg.seed, 2));
    MetricsLog log = open_log(env, -1);
    json out = {{"config_hash", env.hash}, {"rows", json::array()}};
    bool ok = true;
    long i = 0;
    for (const auto& r : rows) {
        out["rows"].push_back({{"name", r.name},
                               {"estimate", r.estimate},
                               {"reference", r.reference},
                               {"tolerance", r.tolerance},
                               {"verdict", lab::to_string(r.verdict)}});
        log.append(i++, r.name, r.estimate);
        env.say(r.name + ": " + lab::to_string(r.verdict));
        ok = ok && r.verdict != lab::Verdict::fail;
    }
    out["pass"] = ok;
    write_text_atomic(env.paths.identities(), out.dump(2) + "\n");
    return ok;
}

// ---------------------------------------------------------------- rl

std::unique_ptr<rl::RewardAdapter> make_reward(const Env& env, eval::Classifier& clf) {
    const auto& name = env.cfg.rl.reward;
    if (name == "classifier") return std::make_unique<rl::ClassifierReward>(clf, env.class_names(), env.cfg.rl.reward_temperature);
    if (name == "target-distance") {
        const Vec target = env.data.tokens.colwise().mean().transpose();
        return std::make_unique<rl::TargetDistanceReward>(target);
    }
    return std::make_unique<rl::ConstantReward>(1.0);
}

rl::RLConfig to_rl_config(const RunConfig& cfg, double data_bound) {
    rl::RLConfig r;
    r.K_train = cfg.rl.K_train;
    r.K_eval = cfg.rl.K_eval;
    r.batch = cfg.rl.batch;
    r.micro_batch = cfg.rl.micro_batch;
    r.ema = cfg.rl.ema;
    r.t_star = cfg.distill.t_star;
    r.max_activation_scalars = cfg.rl.max_activation_scalars;
    r.train_classes = cfg.model.num_classes - cfg.rl.holdout_classes;
    r.data_bound = data_bound;
    r.opt = {.lr = cfg.rl.lr, .grad_clip = cfg.rl.grad_clip};
    return r;
}

/// The distilled generator as evaluated: the EMA copy unless disabled.
nn::ParamStore distilled_params(const Env& env, const Checkpoint& c) {
    return env.cfg.eval.use_ema ? c.stores.at("theta_ema") : c.stores.at("theta");
}

bool rl_stage(Env& env) {
    const auto& cfg = env.cfg;
    env.load_data();
    const Checkpoint distill_ckpt = env.require(Stage::distill);
    const Checkpoint teacher_ckpt = env.require(Stage::train_teacher);
    eval::Classifier clf = env.classifier(teacher_ckpt);
    const auto reward = make_reward(env, clf);
    const auto names = env.class_names();
    bool finished = false;
    auto resumed = resume_point(env, finished);
    if (finished) {
        env.say("already complete; nothing to resume");
        return true;
    }

    Rng rng(stage_seed(cfg.seed, 3));
    const rl::RLConfig rcfg = to_rl_config(cfg, env.data_bound());
    rl::RLState state = rl::init_rl_state(distilled_params(env, distill_ckpt), rcfg);
    if (resumed) {
        state.theta = resumed->stores.at("theta");
        state.theta_ema = resumed->stores.at("theta_ema");
        restore(state.opt, resumed->optimizers.at("rl"));
        rng.load_state(resumed->rng_states.at("main"));
        state.step = resumed->step;
        env.say("resuming from step " + std::to_string(state.step));
    }
    MetricsLog log = open_log(env, resumed ? state.step : -1);
    const int total = env.rounds(cfg.rl.epochs, cfg.rl.batch);
    auto snapshot = [&](bool complete) {
        Checkpoint c;
        c.stage = to_string(Stage::rl);
        c.step = state.step;
        c.config_hash = env.hash;
        c.stores = {{"theta", state.theta}, {"theta_ema", state.theta_ema}};
        c.optimizers = {{"rl", capture(state.opt)}};
        c.rng_states = {{"main", rng.save_state()}};
        c.scalars = {{"complete", complete ? 1.0 : 0.0}};
        return c;
    };

    while (state.step < total) {
        const auto m = rl::rl_round(state, env.model, *reward, names, rcfg, env.sched, rng);
        log.append(m.step, "mean_reward", m.mean_reward);
        log.append(m.step, "loss", m.loss);
        log.append(m.step, "grad_norm", m.grad_norm);
        log.append(m.step, "K", m.K);
        if (m.step % cfg.rl.checkpoint_every == 0 && m.step < total) save_checkpoint(snapshot(false), env.paths.checkpoint(Stage::rl));
        if (m.step % std::max(1, total / 10) == 0) env.say("round " + std::to_string(m.step) + "/" + std::to_string(total) + " reward " + std::to_string(m.mean_reward));
        maybe_interrupt(env, m.step);
    }
    save_checkpoint(snapshot(true), env.paths.checkpoint(Stage::rl));
    finish_plot(env);
    return true;
}

// ---------------------------------------------------------------- eval / sample

std::vector<int> balanced_classes(int count, int num_classes, int first = 0) {
    std::vector<int> ids(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) ids[static_cast<std::size_t>(i)] = first + i % (num_classes - first);
    return ids;
}

constexpr int kChunk = 250;

std::vector<mar::TokenGrid> sample_teacher(const Env& env, nn::ParamStore& teacher, std::span<const int> ids, int K,
                                           int n_diff, Rng& rng) {
    std::vector<mar::TokenGrid> out;
    for (std::size_t b = 0; b < ids.size(); b += kChunk) {
        const auto part = ids.subspan(b, std::min<std::size_t>(kChunk, ids.size() - b));
        auto grids = mar::teacher_generate(env.model, part, K, n_diff, env.cfg.distill.w, teacher, env.sched, rng,
                                           env.data_bound());
        out.insert(out.end(), std::make_move_iterator(grids.begin()), std::make_move_iterator(grids.end()));
    }
    return out;
}

std::vector<mar::TokenGrid> sample_student(const Env& env, nn::ParamStore& theta, std::span<const int> ids, int K,
                                           Rng& rng) {
    const auto names = env.class_names();
    std::vector<mar::TokenGrid> out;
    for (std::size_t b = 0; b < ids.size(); b += kChunk) {
        const auto part = ids.subspan(b, std::min<std::size_t>(kChunk, ids.size() - b));
        auto batch = rl::rollout(env.model, theta, part, names, K, env.sched, env.cfg.distill.t_star, rng, false,
                                 env.data_bound());
        for (auto& tr : batch.traces) out.push_back(std::move(tr.final));
    }
    return out;
}

/// Real-data feature moments, cached with the config hash. A cached file
/// from a different config is refused unless the mismatch override is set.
eval::FeatureMoments reference_moments(const Env& env, eval::Classifier& clf) {
    const auto path = env.paths.reference_moments();
    if (fs::exists(path)) {
        const Checkpoint c = load_checkpoint(path, env.hash, env.opts.allow_config_mismatch);
        const auto& s = c.stores.at("moments");
        return {s.at("mean").value.transpose(), s.at("cov").value, static_cast<long>(c.scalars.at("count"))};
    }
    const auto m = eval::moments_of(clf.features(env.data.tokens));
    Checkpoint c;
    c.stage = "reference";
    c.config_hash = env.hash;
    nn::ParamStore s;
    s.add("mean", m.mean.transpose());
    s.add("cov", m.cov);
    c.stores.emplace("moments", std::move(s));
    c.scalars["count"] = static_cast<double>(m.count);
    save_checkpoint(c, path);
    return m;
}

struct Quality {
    double frechet = 0.0;
    double inception = 0.0;
    long count = 0;
};

Quality quality_of(std::span<const mar::TokenGrid> grids, eval::Classifier& clf, const eval::FeatureMoments& ref) {
    const Mat images = eval::flatten(grids);
    return {eval::frechet_distance(eval::moments_of(clf.features(images)), ref),
            eval::inception_surrogate(clf.probabilities(images)), static_cast<long>(grids.size())};
}

bool eval_stage(Env& env) {
    const auto& cfg = env.cfg;
    env.load_data();
    const Checkpoint teacher_ckpt = env.require(Stage::train_teacher);
    nn::ParamStore teacher = env.teacher_params(teacher_ckpt);
    eval::Classifier clf = env.classifier(teacher_ckpt);
    const auto ref = reference_moments(env, clf);
    MetricsLog log = open_log(env, -1);
    json report = {{"config_hash", env.hash}, {"samples", cfg.eval.samples}, {"K", cfg.eval.K},
                   {"n_diff", cfg.eval.n_diff}, {"w", cfg.distill.w}};
    const auto ids = balanced_classes(cfg.eval.samples, cfg.model.num_classes);
    auto record = [&](const std::string& label, const Quality& q) {
        report[label] = {{"frechet", q.frechet}, {"inception", q.inception}, {"count", q.count}};
        log.append(0, label + ".frechet", q.frechet, q.count);
        log.append(0, label + ".inception", q.inception, q.count);
        env.say(label + ": frechet " + std::to_string(q.frechet) + " inception " + std::to_string(q.inception));
    };

    if (cfg.eval.teacher) {
        Rng rng(stage_seed(cfg.seed, 4));
        record("teacher", quality_of(sample_teacher(env, teacher, ids, cfg.eval.K, cfg.eval.n_diff, rng), clf, ref));
    }

    const bool have_student = fs::exists(env.paths.checkpoint(Stage::distill));
    const bool have_rl = fs::exists(env.paths.checkpoint(Stage::rl));
    std::optional<nn::ParamStore> student;
    std::optional<nn::ParamStore> refined;
    if (have_student) {
        student = distilled_params(env, env.require(Stage::distill));
        Rng rng(stage_seed(cfg.seed, 5));
        record("student", quality_of(sample_student(env, *student, ids, cfg.eval.K, rng), clf, ref));
    }
    if (have_rl) {
        const Checkpoint c = env.require(Stage::rl);
        refined = cfg.eval.use_ema ? c.stores.at("theta_ema") : c.stores.at("theta");
        Rng rng(stage_seed(cfg.seed, 5));
        record("rl", quality_of(sample_student(env, *refined, ids, cfg.eval.K, rng), clf, ref));
    }

    if (have_student && cfg.eval.timing) {
        const auto names = env.class_names();
        std::vector<eval::Pipeline> pipes;
        pipes.push_back({"teacher", [&](Rng& r) {
                             const int c = static_cast<int>(r.uniform_int(0, cfg.model.num_classes - 1));
                             mar::teacher_generate(env.model, std::span<const int>(&c, 1), cfg.eval.K, cfg.eval.n_diff,
                                                   cfg.distill.w, teacher, env.sched, r, env.data_bound());
                         }});
        pipes.push_back({"student", [&](Rng& r) {
                             const int c = static_cast<int>(r.uniform_int(0, cfg.model.num_classes - 1));
                             rl::rollout(env.model, *student, std::span<const int>(&c, 1), names, cfg.eval.K, env.sched,
                                         cfg.distill.t_star, r, false, env.data_bound());
                         }});
        Rng rng(stage_seed(cfg.seed, 6));
        const auto t = eval::timing_harness(pipes, cfg.eval.timing_images, cfg.eval.timing_warmup, rng);
        report["timing"] = {{"teacher_mean", t.pipelines[0].mean_seconds},
                            {"teacher_std", t.pipelines[0].stddev_seconds},
                            {"student_mean", t.pipelines[1].mean_seconds},
                            {"student_std", t.pipelines[1].stddev_seconds},
                            {"images", cfg.eval.timing_images},
                            {"speedup", t.speedup}};
        log.append(0, "timing.speedup", t.speedup, cfg.eval.timing_images);
        env.say("speedup " + std::to_string(t.speedup));
    }

    if (have_student && have_rl) {
        // Paired comparison: same prompts and same noise for both generators.
        const int first = cfg.model.num_classes - cfg.rl.holdout_classes;
        const int from = cfg.rl.holdout_classes > 0 ? first : 0;
        const auto prompts = balanced_classes(cfg.eval.reward_prompts, cfg.model.num_classes, from);
        const auto names = env.class_names();
        rl::ClassifierReward reward(clf, names, cfg.rl.reward_temperature);
        Rng noise(stage_seed(cfg.seed, 7));
        Rng noise_copy = noise;
        const Vec before = rl::evaluate_rewards(env.model, *student, reward, prompts, names, cfg.rl.K_eval, env.sched,
                                                cfg.distill.t_star, noise, 64, env.data_bound());
        const Vec after = rl::evaluate_rewards(env.model, *refined, reward, prompts, names, cfg.rl.K_eval, env.sched,
                                               cfg.distill.t_star, noise_copy, 64, env.data_bound());
        Rng boot(stage_seed(cfg.seed, 8));
        const auto ci = eval::bootstrap_mean_ci(after - before, 2000, 0.95, boot);
        report["reward"] = {{"before", before.mean()}, {"after", after.mean()},      {"improvement", ci.mean},
                            {"ci_low", ci.low},         {"ci_high", ci.high},         {"prompts", cfg.eval.reward_prompts},
                            {"held_out", cfg.rl.holdout_classes > 0}, {"K", cfg.rl.K_eval}};
        log.append(0, "reward.improvement", ci.mean, cfg.eval.reward_prompts);
        env.say("reward " + std::to_string(before.mean()) + " -> " + std::to_string(after.mean()) + " (95% CI " +
                std::to_string(ci.low) + ", " + std::to_string(ci.high) + ")");
    }
    write_text_atomic(env.paths.report(), report.dump(2) + "\n");
    return true;
}

bool sample_stage(Env& env) {
    const auto& cfg = env.cfg;
    env.load_data();
    const Checkpoint teacher_ckpt = env.require(Stage::train_teacher);
    const auto ids = balanced_classes(cfg.sample.count, cfg.model.num_classes);
    Rng rng(stage_seed(cfg.seed, 9));
    std::vector<mar::TokenGrid> grids;
    if (cfg.sample.source == "teacher") {
        nn::ParamStore teacher = env.teacher_params(teacher_ckpt);
        grids = sample_teacher(env, teacher, ids, cfg.sample.K, cfg.sample.n_diff, rng);
    } else {
        const Stage s = cfg.sample.source == "rl" ? Stage::rl : Stage::distill;
        const Checkpoint c = env.require(s);
        nn::ParamStore theta = cfg.eval.use_ema ? c.stores.at("theta_ema") : c.stores.at("theta");
        grids = sample_student(env, theta, ids, cfg.sample.K, rng);
    }
    const auto shape = eval::image_shape_for(cfg.model.n, cfg.model.d);
    eval::emit_sample_grid(grids, shape, env.paths.samples(shape.channels));
    env.say("wrote " + env.paths.samples(shape.channels).string());
    return true;
}

}  // namespace

bool run_stage(const RunConfig& cfg, const RunOptions& opts) {
    Env env(cfg, opts);
    fs::create_directories(env.paths.root);
    RunLock lock(env.paths.lock());
    write_text_atomic(env.paths.root / "config.yaml", serialize_config(cfg));
    switch (cfg.stage) {
        case Stage::train_teacher:
            return train_teacher(env);
        case Stage::distill:
            return distill(env);
        case Stage::verify_identities:
            return verify_identities(env);
        case Stage::rl:
            return rl_stage(env);
        case Stage::eval:
            return eval_stage(env);
        case Stage::sample:
            return sample_stage(env);
    }
    return false;
}

}  // namespace marval
