#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace entroscope {

/// Pairwise (cascade) summation; error grows O(log n) instead of O(n).
inline double pairwise_sum(std::span<const double> xs) {
    constexpr std::size_t block = 8;
    if (xs.size() <= block) {
        double s = 0.0;
        for (double x : xs) s += x;
        return s;
    }
    const std::size_t half = xs.size() / 2;
    return pairwise_sum(xs.first(half)) + pairwise_sum(xs.subspan(half));
}

inline double mean(std::span<const double> xs) {
    return xs.empty() ? 0.0 : pairwise_sum(xs) / static_cast<double>(xs.size());
}

}  // namespace entroscope
