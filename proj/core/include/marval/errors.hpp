#pragma once

#include <stdexcept>
#include <string>

namespace marval {

// Exit-code classes surfaced by the CLI: config=2, dependency=3, numeric=4.

class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Invalid or unknown configuration value. `field` names the offending key.
class ConfigError : public Error {
  public:
    ConfigError(std::string field, const std::string& what)
        : Error(field + ": " + what), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

  private:
    std::string field_;
};

/// Caller broke an operation precondition (shapes, ranges, alignment).
class ContractError : public Error {
  public:
    using Error::Error;
};

/// Operation is mathematically undefined at the requested point (e.g. score at t=0).
class DomainError : public Error {
  public:
    using Error::Error;
};

/// Non-finite value encountered during training or evaluation.
class NumericError : public Error {
  public:
    using Error::Error;
};

/// A stage was run before the stage whose checkpoint it depends on.
class DependencyError : public Error {
  public:
    DependencyError(std::string needed_stage, const std::string& what)
        : Error(what), needed_stage_(std::move(needed_stage)) {}
    const std::string& needed_stage() const noexcept { return needed_stage_; }

  private:
    std::string needed_stage_;
};

/// Checkpoint or data file failed validation (truncation, checksum, bad magic).
class IntegrityError : public Error {
  public:
    using Error::Error;
};

class IoError : public Error {
  public:
    using Error::Error;
};

}  // namespace marval
