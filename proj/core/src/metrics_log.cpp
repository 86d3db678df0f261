#include "marval/metrics_log.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <limits>
#include <json.hpp>

#include "marval/errors.hpp"

namespace marval {

using nlohmann::json;

bool MetricRecord::same_content(const MetricRecord& o) const {
    return step == o.step && name == o.name && value == o.value && config_hash == o.config_hash && count == o.count;
}

MetricsLog::MetricsLog(std::filesystem::path path, std::string config_hash)
    : path_(std::move(path)), hash_(std::move(config_hash)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
}

void MetricsLog::append(long step, const std::string& name, double value, std::optional<long> count) {
    const double now =
        std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
    json j = {{"step", step}, {"wall_time", now}, {"name", name}, {"value", value}, {"config_hash", hash_}};
    if (count) j["count"] = *count;
    std::ofstream os(path_, std::ios::app);
    os << j.dump() << '\n';
    os.flush();
    if (!os) throw IoError("cannot append to metrics log " + path_.string());
}

std::vector<MetricRecord> MetricsLog::read(const std::filesystem::path& path) {
    std::vector<MetricRecord> out;
    std::ifstream in(path);
    if (!in) return out;
    std::string line;
    while (std::getline(in, line)) {
        if (in.eof()) break;  // no trailing newline: an interrupted write
        if (line.empty()) continue;
        const json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) throw IntegrityError("malformed metrics record in " + path.string());
        MetricRecord r;
        r.step = j.at("step").get<long>();
        r.wall_time = j.at("wall_time").get<double>();
        r.name = j.at("name").get<std::string>();
        // Non-finite values are serialized as null.
        r.value = j.at("value").is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at("value").get<double>();
        r.config_hash = j.at("config_hash").get<std::string>();
        if (j.contains("count")) r.count = j.at("count").get<long>();
        out.push_back(std::move(r));
    }
    return out;
}

void MetricsLog::truncate_after(long last_step) {
    std::ifstream in(path_);
    if (!in) return;
    std::string kept;
    std::string line;
    while (std::getline(in, line)) {
        if (in.eof()) break;
        const json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("step")) continue;
        if (j.at("step").get<long>() <= last_step) kept += line + '\n';
    }
    in.close();
    const auto tmp = path_.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::trunc);
        os << kept;
        if (!os) throw IoError("cannot rewrite metrics log " + path_.string());
    }
    std::filesystem::rename(tmp, path_);
}

void emit_metric_plot(const std::vector<MetricRecord>& records, const std::filesystem::path& path) {
    std::map<std::string, std::vector<std::pair<double, double>>> series;
    for (const auto& r : records) {
        if (std::isfinite(r.value)) series[r.name].emplace_back(static_cast<double>(r.step), r.value);
    }
    constexpr double kW = 640, kH = 160, kPad = 40;
    std::string svg;
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" font-family=\"monospace\" "
                  "font-size=\"11\">\n",
                  kW, kH * static_cast<double>(std::max<std::size_t>(series.size(), 1)));
    svg += buf;
    double top = 0.0;
    for (const auto& [name, pts] : series) {
        double x0 = pts.front().first, x1 = x0, y0 = pts.front().second, y1 = y0;
        for (const auto& [x, y] : pts) {
            x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
        }
        const double sx = (kW - 2 * kPad) / std::max(x1 - x0, 1e-12);
        const double sy = (kH - 2 * kPad) / std::max(y1 - y0, 1e-12);
        std::snprintf(buf, sizeof buf, "<text x=\"%.0f\" y=\"%.1f\">%s [%.4g, %.4g]</text>\n", kPad, top + 20,
                      name.c_str(), y0, y1);
        svg += buf;
        svg += "<polyline fill=\"none\" stroke=\"black\" points=\"";
        for (const auto& [x, y] : pts) {
            std::snprintf(buf, sizeof buf, "%.1f,%.1f ", kPad + (x - x0) * sx, top + kH - kPad - (y - y0) * sy);
            svg += buf;
        }
        svg += "\"/>\n";
        top += kH;
    }
    svg += "</svg>\n";
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::trunc);
        os << svg;
        if (!os) throw IoError("cannot write plot " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace marval
