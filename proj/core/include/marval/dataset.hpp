#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "marval/autodiff.hpp"

namespace marval::data {

using ad::Mat;

/// Class-labelled token images. Row i of `tokens` holds sample i flattened
/// token-major: token j occupies columns [j*d, (j+1)*d).
struct TokenDataset {
    std::string id;
    int n = 0;  // tokens per sample
    int d = 0;  // token dimension
    int num_classes = 0;
    std::vector<int> labels;
    Mat tokens;
    std::vector<std::string> class_names;

    int count() const { return static_cast<int>(labels.size()); }
    /// n x d view of one sample.
    Mat sample(int i) const;
};

/// Synthetic structured tokens: 16 tokens on a 4x4 lattice, d = 2, four
/// classes, each a two-component mixture of vector fields with a shared
/// per-sample offset that correlates all tokens.
TokenDataset make_synthetic(int count, std::uint64_t seed);

/// Reads "label,p0,...,p63" rows of 8x8 digits with intensities 0..16 and
/// maps them to n = 64, d = 1 tokens in [-1, 1].
TokenDataset ingest_digits_csv(const std::filesystem::path& csv);

// Binary layout (little-endian):
//   char[4] "MRVT" | u32 n | u32 d | u32 count | u32 class_count
//   i32 labels[count] | f32 tokens[count * n * d]
void save_tokens(const TokenDataset& ds, const std::filesystem::path& path);
TokenDataset load_tokens(const std::filesystem::path& path, const std::string& id);

/// Directory for cached token files: $MARVAL_DATA_DIR, else `fallback`.
std::filesystem::path data_cache_dir(const std::filesystem::path& fallback);

/// Resolves a dataset by id ("synthetic" or "digits"), ingesting `source`
/// on first use and caching the token file under `cache_dir`.
TokenDataset load_dataset(const std::string& id, const std::filesystem::path& source,
                          const std::filesystem::path& cache_dir, int synthetic_count = 4096,
                          std::uint64_t synthetic_seed = 1234);

std::vector<std::string> class_names_for(const std::string& id, int num_classes);

}  // namespace marval::data
