#include "marval/dataset.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "marval/errors.hpp"
#include "marval/rng.hpp"

namespace marval::data {

static_assert(std::endian::native == std::endian::little, "token files assume a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'R', 'V', 'T'};

template <class T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const std::filesystem::path& path) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IntegrityError("truncated token file: " + path.string());
    return v;
}

}  // namespace

Mat TokenDataset::sample(int i) const {
    Mat out(n, d);
    for (int j = 0; j < n; ++j) {
        for (int k = 0; k < d; ++k) out(j, k) = tokens(i, j * d + k);
    }
    return out;
}

std::vector<std::string> class_names_for(const std::string& id, int num_classes) {
    static const char* kDigits[] = {"digit zero", "digit one", "digit two",   "digit three", "digit four",
                                    "digit five", "digit six", "digit seven", "digit eight", "digit nine"};
    static const char* kSynthetic[] = {"spiral", "ring", "wave", "checkerboard"};
    std::vector<std::string> names;
    for (int c = 0; c < num_classes; ++c) {
        if (id == "digits" && c < 10) {
            names.emplace_back(kDigits[c]);
        } else if (id == "synthetic" && c < 4) {
            names.emplace_back(kSynthetic[c]);
        } else {
            names.push_back("class " + std::to_string(c));
        }
    }
    return names;
}

TokenDataset make_synthetic(int count, std::uint64_t seed) {
    constexpr int kSide = 4;
    constexpr int kClasses = 4;
    TokenDataset ds;
    ds.id = "synthetic";
    ds.n = kSide * kSide;
    ds.d = 2;
    ds.num_classes = kClasses;
    ds.class_names = class_names_for(ds.id, kClasses);
    ds.labels.resize(static_cast<std::size_t>(count));
    ds.tokens.resize(count, ds.n * ds.d);
    Rng rng(seed);
    const double pi = std::numbers::pi;
    for (int i = 0; i < count; ++i) {
        const int label = i % kClasses;
        const bool mirrored = rng.bernoulli(0.5);
        const double off_x = 0.2 * rng.normal();
        const double off_y = 0.2 * rng.normal();
        ds.labels[static_cast<std::size_t>(i)] = label;
        for (int r = 0; r < kSide; ++r) {
            for (int c = 0; c < kSide; ++c) {
                const int j = r * kSide + c;
                double mx = 0.0;
                double my = 0.0;
                switch (label) {
                    case 0: {
                        const double a = j * pi / 8.0;
                        mx = 0.8 * std::cos(a);
                        my = 0.8 * std::sin(a);
                        break;
                    }
                    case 1:
                        mx = (c - 1.5) / 2.0;
                        my = (r - 1.5) / 2.0;
                        break;
                    case 2:
                        mx = 0.8 * std::sin(c * pi / 2.0);
                        my = 0.5 * std::cos(r * pi / 2.0);
                        break;
                    default: {
                        const double s = ((r + c) % 2 == 0) ? 0.7 : -0.7;
                        mx = s;
                        my = -s;
                        break;
                    }
                }
                if (mirrored) my = -my;
                ds.tokens(i, 2 * j) = mx + off_x + 0.1 * rng.normal();
                ds.tokens(i, 2 * j + 1) = my + off_y + 0.1 * rng.normal();
            }
        }
    }
    return ds;
}

TokenDataset ingest_digits_csv(const std::filesystem::path& csv) {
    std::ifstream in(csv);
    if (!in) throw IoError("cannot open digits source: " + csv.string());
    TokenDataset ds;
    ds.id = "digits";
    ds.n = 64;
    ds.d = 1;
    std::vector<std::vector<double>> rows;
    std::string line;
    int line_no = 0;
    int max_label = -1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> values;
        while (std::getline(ss, cell, ',')) values.push_back(std::stod(cell));
        if (values.size() != 65) {
            throw IntegrityError(csv.string() + ":" + std::to_string(line_no) + ": expected 65 fields");
        }
        const int label = static_cast<int>(values[0]);
        if (label < 0) throw IntegrityError(csv.string() + ":" + std::to_string(line_no) + ": negative label");
        max_label = std::max(max_label, label);
        ds.labels.push_back(label);
        rows.emplace_back(values.begin() + 1, values.end());
    }
    if (rows.empty()) throw IntegrityError("digits source is empty: " + csv.string());
    ds.num_classes = max_label + 1;
    ds.class_names = class_names_for(ds.id, ds.num_classes);
    ds.tokens.resize(static_cast<ad::Index>(rows.size()), 64);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (int j = 0; j < 64; ++j) {
            ds.tokens(static_cast<ad::Index>(i), j) = rows[i][static_cast<std::size_t>(j)] / 8.0 - 1.0;
        }
    }
    return ds;
}

void save_tokens(const TokenDataset& ds, const std::filesystem::path& path) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw IoError("cannot write token file: " + tmp);
        os.write(kMagic, 4);
        write_pod(os, static_cast<std::uint32_t>(ds.n));
        write_pod(os, static_cast<std::uint32_t>(ds.d));
        write_pod(os, static_cast<std::uint32_t>(ds.count()));
        write_pod(os, static_cast<std::uint32_t>(ds.num_classes));
        for (int label : ds.labels) write_pod(os, static_cast<std::int32_t>(label));
        for (int i = 0; i < ds.count(); ++i) {
            for (ad::Index j = 0; j < ds.tokens.cols(); ++j) write_pod(os, static_cast<float>(ds.tokens(i, j)));
        }
        if (!os) throw IoError("short write: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

TokenDataset load_tokens(const std::filesystem::path& path, const std::string& id) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open token file: " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw IntegrityError("bad token file magic: " + path.string());
    TokenDataset ds;
    ds.id = id;
    ds.n = static_cast<int>(read_pod<std::uint32_t>(is, path));
    ds.d = static_cast<int>(read_pod<std::uint32_t>(is, path));
    const auto count = read_pod<std::uint32_t>(is, path);
    ds.num_classes = static_cast<int>(read_pod<std::uint32_t>(is, path));
    ds.labels.resize(count);
    for (auto& label : ds.labels) {
        label = read_pod<std::int32_t>(is, path);
        if (label < 0 || label >= ds.num_classes) throw IntegrityError("label out of range in " + path.string());
    }
    ds.tokens.resize(count, ds.n * ds.d);
    for (std::uint32_t i = 0; i < count; ++i) {
        for (int j = 0; j < ds.n * ds.d; ++j) ds.tokens(i, j) = read_pod<float>(is, path);
    }
    ds.class_names = class_names_for(id, ds.num_classes);
    return ds;
}

std::filesystem::path data_cache_dir(const std::filesystem::path& fallback) {
    if (const char* env = std::getenv("MARVAL_DATA_DIR"); env != nullptr && *env != '\0') return env;
    return fallback;
}

TokenDataset load_dataset(const std::string& id, const std::filesystem::path& source,
                          const std::filesystem::path& cache_dir, int synthetic_count, std::uint64_t synthetic_seed) {
    std::filesystem::create_directories(cache_dir);
    if (id == "synthetic") {
        const auto cached = cache_dir / ("synthetic_" + std::to_string(synthetic_count) + "_" +
                                         std::to_string(synthetic_seed) + ".tok");
        if (std::filesystem::exists(cached)) return load_tokens(cached, id);
        save_tokens(make_synthetic(synthetic_count, synthetic_seed), cached);
        return load_tokens(cached, id);
    }
    if (id == "digits") {
        if (source.extension() == ".tok") return load_tokens(source, id);
        const auto cached = cache_dir / "digits.tok";
        if (std::filesystem::exists(cached)) return load_tokens(cached, id);
        save_tokens(ingest_digits_csv(source), cached);
        return load_tokens(cached, id);
    }
    throw ConfigError("dataset.id", "unknown dataset '" + id + "' (expected synthetic or digits)");
}

}  // namespace marval::data
