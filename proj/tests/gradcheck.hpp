#pragma once

// Central finite-difference oracle used by the gradient tests. It only
// evaluates a scalar function of a flat parameter vector; it never touches
// the autograd machinery it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace mtcolor::testing {

inline std::vector<double> finite_difference(const std::function<double(const std::vector<double>&)>& f,
                                             std::vector<double> x, double step = 1e-5) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + step;
        const double up = f(x);
        x[i] = keep - step;
        const double down = f(x);
        x[i] = keep;
        g[i] = (up - down) / (2 * step);
    }
    return g;
}

// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor). The floor keeps entries
// that are zero in both vectors from dividing by zero.
inline double max_relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-6) {
    double worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

} // namespace mtcolor::testing
