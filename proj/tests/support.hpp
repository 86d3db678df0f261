#pragma once

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>

#include "marval/autodiff.hpp"

namespace marval::test {

using ad::Mat;

/// Fresh scratch directory under $MARVAL_TEST_TMP (or the system temp dir).
inline std::filesystem::path scratch(const std::string& name) {
    const char* env = std::getenv("MARVAL_TEST_TMP");
    const std::filesystem::path root = env != nullptr ? env : std::filesystem::temp_directory_path() / "marval-tests";
    const auto dir = root / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline std::filesystem::path source_dir() {
    const char* env = std::getenv("MARVAL_SOURCE_DIR");
    return env != nullptr ? env : std::filesystem::current_path();
}

/// Central differences of a scalar function of a matrix.
inline Mat numeric_gradient(const std::function<double(const Mat&)>& f, Mat x, double h = 1e-6) {
    Mat g(x.rows(), x.cols());
    for (ad::Index i = 0; i < x.size(); ++i) {
        const double keep = x(i);
        x(i) = keep + h;
        const double up = f(x);
        x(i) = keep - h;
        const double down = f(x);
        x(i) = keep;
        g(i) = (up - down) / (2 * h);
    }
    return g;
}

inline double rel_diff(const Mat& a, const Mat& b) { return (a - b).norm() / std::max(1e-12, b.norm()); }

}  // namespace marval::test
