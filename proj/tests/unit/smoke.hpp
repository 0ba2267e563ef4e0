#pragma once

#include <cstdint>
#include <vector>

#include "metapolyp/metrics.hpp"
#include "metapolyp/train.hpp"

namespace testutil {

/// Overfit run on a single synthetic 64x64 sample with the tiny model.
struct SmokeResult {
    std::vector<double> losses;
    double dice = 0.0;
    double seconds = 0.0;
    /// Steps i >= warmup where loss[i + window] > loss[i].
    std::size_t pointwise_violations = 0;
    /// Positions where the mean of the next window exceeds the current one.
    std::size_t window_mean_violations = 0;
};

inline constexpr std::size_t kSmokeSteps = 300;
inline constexpr std::size_t kSmokeWindow = 50;
inline constexpr std::size_t kSmokeWarmup = 50;
inline constexpr double kSmokeLr = 1e-3;

SmokeResult run_smoke(std::uint64_t seed);

}  // namespace testutil
