#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace marval {

/// Seeded random source with serializable state (engine + cached normal draw).
class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    /// Uniform integer in [lo, hi].
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
    }
    bool bernoulli(double p) { return uniform() < p; }

    /// Random permutation of 0..n-1.
    std::vector<int> permutation(int n);

    /// Child stream derived from this one; advances the parent.
    Rng split() { return Rng(engine_()); }

    std::mt19937_64& engine() { return engine_; }

    std::string save_state() const;
    void load_state(const std::string& state);

    bool operator==(const Rng& other) const {
        return engine_ == other.engine_ && normal_ == other.normal_;
    }

  private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace marval
