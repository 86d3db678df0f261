#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "marval/nn.hpp"

namespace marval {

struct OptimizerState {
    long steps = 0;
    std::map<std::string, ad::Mat> first;
    std::map<std::string, ad::Mat> second;

    bool operator==(const OptimizerState&) const = default;
};

OptimizerState capture(const nn::AdamW& opt);
void restore(nn::AdamW& opt, const OptimizerState& state);

/// Everything needed to resume a stage. Parameter values are stored bit-exactly.
struct Checkpoint {
    std::string stage;
    long step = 0;
    std::string config_hash;
    std::map<std::string, nn::ParamStore> stores;
    std::map<std::string, OptimizerState> optimizers;
    std::map<std::string, std::string> rng_states;
    std::map<std::string, double> scalars;

    bool operator==(const Checkpoint& other) const;
};

/// Writes to a temporary file and renames it into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

/// IntegrityError on truncation, bad magic or checksum mismatch. A config-hash
/// mismatch is an IntegrityError unless allow_hash_mismatch is set, in which
/// case a warning goes to stderr.
Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_hash = "",
                           bool allow_hash_mismatch = false);

}  // namespace marval
