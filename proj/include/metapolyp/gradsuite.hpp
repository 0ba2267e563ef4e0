#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metapolyp/gradcheck.hpp"

namespace metapolyp {

inline constexpr double kBlockGradTolerance = 1e-3;
inline constexpr double kEndToEndGradTolerance = 1e-2;

struct SuiteCheck {
    std::string block;
    double tolerance = 0.0;
    GradCheckReport report;

    double max_rel_error() const { return report.max_rel_error(); }
    bool passed() const { return report.passed(tolerance); }
};

struct SuiteReport {
    std::vector<SuiteCheck> checks;

    bool passed() const;
    /// "block/parameter" for every parameter at or above its check's tolerance.
    std::vector<std::string> offending_parameters() const;
};

/// Finite-difference checks of every network block on tiny shapes (stem and
/// downsample, both encoder block kinds, the Convformer fusion block, the
/// multi-scale upsample, the level-up merge, the Jaccard loss) followed by an
/// end-to-end check of the tiny 32x32 model's logits. `seed` drives the
/// parameter init, inputs and projections.
SuiteReport gradient_suite(std::uint64_t seed, double block_tol = kBlockGradTolerance,
                           double end_to_end_tol = kEndToEndGradTolerance);

}  // namespace metapolyp
