#include "marval/rng.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "marval/errors.hpp"

namespace marval {

std::vector<int> Rng::permutation(int n) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    // Fisher-Yates with our own draws so the sequence does not depend on
    // the standard library's shuffle implementation.
    for (int i = n - 1; i > 0; --i) {
        const auto j = static_cast<int>(uniform_int(0, i));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    return idx;
}

std::string Rng::save_state() const {
    std::ostringstream os;
    os.precision(17);
    os << engine_ << ' ' << normal_ << ' ' << uniform_;
    return os.str();
}

void Rng::load_state(const std::string& state) {
    std::istringstream is(state);
    is >> engine_ >> normal_ >> uniform_;
    if (!is) throw IntegrityError("rng state could not be parsed");
}

}  // namespace marval
