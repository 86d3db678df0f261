#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "marval/config.hpp"
#include "marval/errors.hpp"

namespace marval {

struct RunOptions {
    bool resume = false;
    bool allow_config_mismatch = false;
    /// Stop abruptly right after the metrics of this step are written, as a
    /// kill would. Used by the resume tests; negative disables.
    long interrupt_at_step = -1;
    std::ostream* log = nullptr;
};

/// Raised by the interrupt hook. Nothing is written after it fires.
class Interrupted : public Error {
  public:
    using Error::Error;
};

/// Artifact layout inside a run directory.
struct RunPaths {
    std::filesystem::path root;

    std::filesystem::path checkpoint(Stage s) const;
    std::filesystem::path metrics(Stage s) const;
    std::filesystem::path plot(Stage s) const;
    std::filesystem::path identities() const { return root / "identities.json"; }
    std::filesystem::path report() const { return root / "report.json"; }
    std::filesystem::path reference_moments() const { return root / "reference.moments"; }
    std::filesystem::path samples(int channels) const;
    std::filesystem::path lock() const { return root / ".lock"; }
};

RunPaths run_paths(const RunConfig& cfg);

/// Executes one stage under the run-directory lock. Returns false when the
/// stage ran but its own checks failed (a verify-identities row failing).
/// Missing prerequisites raise DependencyError naming the needed stage.
bool run_stage(const RunConfig& cfg, const RunOptions& opts = {});

/// 2 for configuration errors, 3 for missing prerequisites, 4 for numeric aborts, 1 otherwise.
int exit_code_for(const std::exception& e);

}  // namespace marval
