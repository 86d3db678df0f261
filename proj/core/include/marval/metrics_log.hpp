#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace marval {

struct MetricRecord {
    long step = 0;
    double wall_time = 0.0;  // seconds since the Unix epoch
    std::string name;
    double value = 0.0;
    std::string config_hash;
    std::optional<long> count;  // sample count, for evaluation metrics

    /// Equality on everything except wall_time.
    bool same_content(const MetricRecord& other) const;
};

/// Append-only line-delimited JSON. Each record is written and flushed as one
/// line, so a crash can leave at most one partial trailing line, which readers skip.
class MetricsLog {
  public:
    MetricsLog(std::filesystem::path path, std::string config_hash);

    void append(long step, const std::string& name, double value, std::optional<long> count = std::nullopt);

    /// Drops records with step > last_step (and any partial line). Used when
    /// resuming from a checkpoint taken at last_step.
    void truncate_after(long last_step);

    const std::filesystem::path& path() const { return path_; }

    static std::vector<MetricRecord> read(const std::filesystem::path& path);

  private:
    std::filesystem::path path_;
    std::string hash_;
};

/// One SVG line panel per metric name, stacked vertically. Non-finite values are skipped.
void emit_metric_plot(const std::vector<MetricRecord>& records, const std::filesystem::path& path);

}  // namespace marval
