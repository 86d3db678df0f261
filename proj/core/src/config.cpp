#include "marval/config.hpp"

#include <yaml-cpp/yaml.h>

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <variant>
#include <vector>

#include "marval/errors.hpp"

namespace marval {

namespace {

using FieldPtr = std::variant<int*, long*, double*, bool*, std::string*, std::uint64_t*>;

struct Field {
    std::string section;  // empty for top-level keys
    std::string key;
    FieldPtr ptr;

    std::string path() const { return section.empty() ? key : section + "." + key; }
};

// Every configurable field, in canonical order.
std::vector<Field> fields(RunConfig& c) {
    return {
        {"", "run_dir", &c.run_dir},
        {"", "seed", &c.seed},
        {"dataset", "id", &c.dataset.id},
        {"dataset", "path", &c.dataset.path},
        {"dataset", "synthetic_count", &c.dataset.synthetic_count},
        {"dataset", "cache_dir", &c.dataset.cache_dir},
        {"model", "width", &c.model.width},
        {"model", "heads", &c.model.heads},
        {"model", "encoder_blocks", &c.model.encoder_blocks},
        {"model", "head_width", &c.model.head_width},
        {"model", "head_blocks", &c.model.head_blocks},
        {"model", "time_dim", &c.model.time_dim},
        {"schedule", "T", &c.schedule.T},
        {"schedule", "s", &c.schedule.s},
        {"teacher", "epochs", &c.teacher.epochs},
        {"teacher", "batch", &c.teacher.batch},
        {"teacher", "lr", &c.teacher.lr},
        {"teacher", "weight_decay", &c.teacher.weight_decay},
        {"teacher", "grad_clip", &c.teacher.grad_clip},
        {"teacher", "ema", &c.teacher.ema},
        {"teacher", "mask_min", &c.teacher.mask_min},
        {"teacher", "mask_max", &c.teacher.mask_max},
        {"teacher", "class_dropout", &c.teacher.class_dropout},
        {"teacher", "diffusion_batch_mul", &c.teacher.diffusion_batch_mul},
        {"teacher", "checkpoint_every", &c.teacher.checkpoint_every},
        {"classifier", "epochs", &c.classifier.epochs},
        {"classifier", "batch", &c.classifier.batch},
        {"classifier", "lr", &c.classifier.lr},
        {"classifier", "input_noise", &c.classifier.input_noise},
        {"classifier", "hidden", &c.classifier.hidden},
        {"classifier", "features", &c.classifier.features},
        {"distill", "w", &c.distill.w},
        {"distill", "r", &c.distill.r},
        {"distill", "t_star", &c.distill.t_star},
        {"distill", "n_aux", &c.distill.n_aux},
        {"distill", "generator_lr", &c.distill.generator_lr},
        {"distill", "auxiliary_lr", &c.distill.auxiliary_lr},
        {"distill", "grad_clip", &c.distill.grad_clip},
        {"distill", "batch", &c.distill.batch},
        {"distill", "epochs", &c.distill.epochs},
        {"distill", "ema", &c.distill.ema},
        {"distill", "distance", &c.distill.distance},
        {"distill", "checkpoint_every", &c.distill.checkpoint_every},
        {"rl", "K_train", &c.rl.K_train},
        {"rl", "K_eval", &c.rl.K_eval},
        {"rl", "reward", &c.rl.reward},
        {"rl", "reward_temperature", &c.rl.reward_temperature},
        {"rl", "lr", &c.rl.lr},
        {"rl", "grad_clip", &c.rl.grad_clip},
        {"rl", "batch", &c.rl.batch},
        {"rl", "micro_batch", &c.rl.micro_batch},
        {"rl", "epochs", &c.rl.epochs},
        {"rl", "ema", &c.rl.ema},
        {"rl", "max_activation_scalars", &c.rl.max_activation_scalars},
        {"rl", "holdout_classes", &c.rl.holdout_classes},
        {"rl", "checkpoint_every", &c.rl.checkpoint_every},
        {"eval", "samples", &c.eval.samples},
        {"eval", "K", &c.eval.K},
        {"eval", "n_diff", &c.eval.n_diff},
        {"eval", "timing_images", &c.eval.timing_images},
        {"eval", "timing_warmup", &c.eval.timing_warmup},
        {"eval", "reward_prompts", &c.eval.reward_prompts},
        {"eval", "use_ema", &c.eval.use_ema},
        {"eval", "teacher", &c.eval.teacher},
        {"eval", "timing", &c.eval.timing},
        {"sample", "count", &c.sample.count},
        {"sample", "source", &c.sample.source},
        {"sample", "K", &c.sample.K},
        {"sample", "n_diff", &c.sample.n_diff},
    };
}

const std::set<std::string> kRequired = {"run_dir", "dataset.id"};

std::string where(const std::string& origin, const YAML::Node& node) {
    return origin + ":" + std::to_string(node.Mark().line + 1);
}

void assign(const Field& f, const YAML::Node& node, const std::string& origin) {
    if (!node.IsScalar()) throw ConfigError(f.path(), "expected a scalar value (" + where(origin, node) + ")");
    try {
        std::visit([&](auto* p) { *p = node.as<std::remove_pointer_t<decltype(p)>>(); }, f.ptr);
    } catch (const YAML::BadConversion&) {
        throw ConfigError(f.path(), "type mismatch for value '" + node.Scalar() + "' (" + where(origin, node) + ")");
    }
}

void require(bool ok, const std::string& field, const std::string& what) {
    if (!ok) throw ConfigError(field, what);
}

void validate(const RunConfig& c) {
    require(!c.run_dir.empty(), "run_dir", "must not be empty");
    require(c.dataset.id == "synthetic" || c.dataset.id == "digits", "dataset.id", "expected synthetic or digits");
    require(c.dataset.id != "digits" || !c.dataset.path.empty(), "dataset.path", "required for the digits dataset");
    require(c.dataset.synthetic_count >= 8, "dataset.synthetic_count", "must be >= 8");
    require(c.model.width >= 1 && c.model.heads >= 1 && c.model.width % c.model.heads == 0, "model.heads",
            "width must be a positive multiple of heads");
    require(c.model.encoder_blocks >= 0 && c.model.head_blocks >= 0, "model.head_blocks", "must be >= 0");
    require(c.model.head_width >= 1, "model.head_width", "must be >= 1");
    require(c.model.time_dim >= 2 && c.model.time_dim % 2 == 0, "model.time_dim", "must be even and >= 2");
    require(c.schedule.T >= 2, "schedule.T", "must be >= 2");
    require(c.schedule.s > 0.0, "schedule.s", "must be > 0");
    require(c.teacher.batch >= 1, "teacher.batch", "must be >= 1");
    require(c.teacher.epochs >= 0, "teacher.epochs", "must be >= 0");
    require(c.teacher.lr >= 0.0, "teacher.lr", "must be >= 0");
    require(c.teacher.ema >= 0.0 && c.teacher.ema < 1.0, "teacher.ema", "must lie in [0, 1)");
    require(0.0 <= c.teacher.mask_min && c.teacher.mask_min <= c.teacher.mask_max && c.teacher.mask_max <= 1.0,
            "teacher.mask_min", "need 0 <= mask_min <= mask_max <= 1");
    require(c.teacher.class_dropout >= 0.0 && c.teacher.class_dropout <= 1.0, "teacher.class_dropout",
            "must lie in [0, 1]");
    require(c.teacher.diffusion_batch_mul >= 1, "teacher.diffusion_batch_mul", "must be >= 1");
    require(c.teacher.checkpoint_every >= 1, "teacher.checkpoint_every", "must be >= 1");
    require(c.classifier.epochs >= 0 && c.classifier.batch >= 1, "classifier.batch", "must be >= 1");
    require(c.distill.w >= 0.0, "distill.w", "must be >= 0");
    require(c.distill.r > 0.0, "distill.r", "must be > 0");
    require(c.distill.t_star >= 1 && c.distill.t_star <= c.schedule.T, "distill.t_star", "must lie in [1, T]");
    require(c.distill.n_aux >= 0, "distill.n_aux", "must be >= 0");
    require(c.distill.generator_lr >= 0.0, "distill.generator_lr", "must be >= 0");
    require(c.distill.auxiliary_lr >= 0.0, "distill.auxiliary_lr", "must be >= 0");
    require(c.distill.batch >= 1, "distill.batch", "must be >= 1");
    require(c.distill.epochs >= 0, "distill.epochs", "must be >= 0");
    require(c.distill.ema >= 0.0 && c.distill.ema <= 1.0, "distill.ema", "must lie in [0, 1]");
    require(c.distill.distance == "pseudo-huber" || c.distill.distance == "squared", "distill.distance",
            "expected pseudo-huber or squared");
    require(c.distill.checkpoint_every >= 1, "distill.checkpoint_every", "must be >= 1");
    require(c.rl.K_train >= 1 && c.rl.K_eval >= 1, "rl.K_train", "AR iteration counts must be >= 1");
    require(c.rl.reward == "classifier" || c.rl.reward == "target-distance" || c.rl.reward == "constant", "rl.reward",
            "expected classifier, target-distance or constant");
    require(c.rl.reward_temperature > 0.0, "rl.reward_temperature", "must be > 0");
    require(c.rl.lr >= 0.0, "rl.lr", "must be >= 0");
    require(c.rl.batch >= 1 && c.rl.micro_batch >= 1, "rl.batch", "batch sizes must be >= 1");
    require(c.rl.epochs >= 0, "rl.epochs", "must be >= 0");
    require(c.rl.ema >= 0.0 && c.rl.ema <= 1.0, "rl.ema", "must lie in [0, 1]");
    require(c.rl.holdout_classes >= 0, "rl.holdout_classes", "must be >= 0");
    require(c.rl.checkpoint_every >= 1, "rl.checkpoint_every", "must be >= 1");
    require(c.eval.samples >= 2, "eval.samples", "must be >= 2");
    require(c.eval.K >= 1 && c.eval.n_diff >= 1, "eval.K", "K and n_diff must be >= 1");
    require(c.eval.timing_images >= 10, "eval.timing_images", "must be >= 10");
    require(c.eval.timing_warmup >= 2, "eval.timing_warmup", "must be >= 2");
    require(c.eval.reward_prompts >= 2, "eval.reward_prompts", "must be >= 2");
    require(c.sample.count >= 1, "sample.count", "must be >= 1");
    require(c.sample.source == "teacher" || c.sample.source == "student" || c.sample.source == "rl", "sample.source",
            "expected teacher, student or rl");
    require(c.sample.K >= 1 && c.sample.n_diff >= 1, "sample.K", "K and n_diff must be >= 1");
}

/// The hashed form leaves out the stage and where the run lives on disk, so
/// copies of a run directory keep their identity.
std::string canonical(const RunConfig& cfg, bool for_hash) {
    RunConfig c = cfg;
    const bool with_stage = !for_hash;
    YAML::Emitter out;
    out.SetDoublePrecision(17);
    out << YAML::BeginMap;
    if (with_stage) out << YAML::Key << "stage" << YAML::Value << to_string(c.stage);
    std::string section;
    bool open = false;
    for (const auto& f : fields(c)) {
        if (for_hash && (f.path() == "run_dir" || f.path() == "dataset.cache_dir")) continue;
        if (f.section != section) {
            if (open) out << YAML::EndMap;
            section = f.section;
            out << YAML::Key << section << YAML::Value << YAML::BeginMap;
            open = true;
        }
        out << YAML::Key << f.key << YAML::Value;
        std::visit([&](auto* p) { out << *p; }, f.ptr);
    }
    if (open) out << YAML::EndMap;
    out << YAML::EndMap;
    return std::string(out.c_str()) + "\n";
}

}  // namespace

Stage parse_stage(const std::string& s) {
    if (s == "train-teacher") return Stage::train_teacher;
    if (s == "distill") return Stage::distill;
    if (s == "verify-identities") return Stage::verify_identities;
    if (s == "rl") return Stage::rl;
    if (s == "eval") return Stage::eval;
    if (s == "sample") return Stage::sample;
    throw ConfigError("stage", "unknown stage '" + s + "'");
}

std::string to_string(Stage s) {
    switch (s) {
        case Stage::train_teacher:
            return "train-teacher";
        case Stage::distill:
            return "distill";
        case Stage::verify_identities:
            return "verify-identities";
        case Stage::rl:
            return "rl";
        case Stage::eval:
            return "eval";
        case Stage::sample:
            return "sample";
    }
    return "unknown";
}

bool RunConfig::operator==(const RunConfig& other) const { return canonical(*this, false) == canonical(other, false); }

RunConfig parse_config(const std::string& text, const std::string& origin) {
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::ParserException& e) {
        throw ConfigError("<document>", "parse error at " + origin + ":" + std::to_string(e.mark.line + 1) + ": " + e.msg);
    }
    if (!root.IsMap()) throw ConfigError("<document>", "top level must be a mapping (" + origin + ")");

    RunConfig cfg;
    const auto table = fields(cfg);
    std::set<std::string> sections;
    for (const auto& f : table) {
        if (!f.section.empty()) sections.insert(f.section);
    }
    std::set<std::string> seen;
    auto find = [&](const std::string& section, const std::string& key) -> const Field* {
        for (const auto& f : table) {
            if (f.section == section && f.key == key) return &f;
        }
        return nullptr;
    };
    for (const auto& kv : root) {
        const auto key = kv.first.as<std::string>();
        if (key == "stage") {
            cfg.stage = parse_stage(kv.second.as<std::string>());
            continue;
        }
        if (sections.contains(key)) {
            if (!kv.second.IsMap()) throw ConfigError(key, "expected a mapping (" + where(origin, kv.second) + ")");
            for (const auto& inner : kv.second) {
                const auto sub = inner.first.as<std::string>();
                const Field* f = find(key, sub);
                if (f == nullptr) {
                    throw ConfigError(key + "." + sub, "unknown key (" + where(origin, inner.first) + ")");
                }
                assign(*f, inner.second, origin);
                seen.insert(f->path());
            }
            continue;
        }
        const Field* f = find("", key);
        if (f == nullptr) throw ConfigError(key, "unknown key (" + where(origin, kv.first) + ")");
        assign(*f, kv.second, origin);
        seen.insert(key);
    }
    for (const auto& r : kRequired) {
        if (!seen.contains(r)) throw ConfigError(r, "missing required field (" + origin + ")");
    }
    cfg.model.n = cfg.dataset.id == "digits" ? 64 : 16;
    cfg.model.d = cfg.dataset.id == "digits" ? 1 : 2;
    cfg.model.num_classes = cfg.dataset.id == "digits" ? 10 : 4;
    validate(cfg);
    if (cfg.rl.holdout_classes >= cfg.model.num_classes) {
        throw ConfigError("rl.holdout_classes", "must leave at least one class for training");
    }
    for (int K : {cfg.rl.K_train, cfg.rl.K_eval, cfg.eval.K, cfg.sample.K}) {
        if (K > cfg.model.n) throw ConfigError("K", "AR iteration count " + std::to_string(K) + " exceeds token count");
    }
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config", "cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    RunConfig cfg = parse_config(ss.str(), path.string());
    cfg.base_dir = std::filesystem::absolute(path).parent_path();
    return cfg;
}

std::string serialize_config(const RunConfig& cfg) { return canonical(cfg, false); }

std::string config_hash(const RunConfig& cfg) {
    const std::string text = canonical(cfg, true);
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

gsim::DistillConfig to_distill_config(const RunConfig& cfg) {
    gsim::DistillConfig d;
    d.w = cfg.distill.w;
    d.t_star = cfg.distill.t_star;
    d.r = cfg.distill.r;
    d.distance = cfg.distill.distance == "squared" ? gsim::Distance::squared : gsim::Distance::pseudo_huber;
    d.n_aux = cfg.distill.n_aux;
    d.batch = cfg.distill.batch;
    d.ema = cfg.distill.ema;
    d.generator_opt = {.lr = cfg.distill.generator_lr, .grad_clip = cfg.distill.grad_clip};
    d.auxiliary_opt = {.lr = cfg.distill.auxiliary_lr, .grad_clip = cfg.distill.grad_clip};
    return d;
}

std::filesystem::path resolve(const RunConfig& cfg, const std::string& path) {
    std::filesystem::path p(path);
    if (p.is_absolute() || cfg.base_dir.empty()) return p;
    return cfg.base_dir / p;
}

}  // namespace marval
