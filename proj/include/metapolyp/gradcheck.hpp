#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "metapolyp/autodiff.hpp"

namespace metapolyp {

struct GradCheckOptions {
    /// Central-difference half step.
    double step = 1e-3;
    /// Coordinates checked per parameter; 0 checks every coordinate. When
    /// sampling, the coordinate with the largest analytic gradient is always included.
    std::size_t max_coords = 0;
    std::uint64_t seed = 0;
};

struct GradCheckEntry {
    std::string name;
    /// max |analytic - numeric| over checked coordinates, divided by the
    /// larger of the two gradients' max-norms (floored at 1e-6).
    double max_rel_error = 0.0;
    std::size_t coords_checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;

    double max_rel_error() const;
    bool passed(double tol) const { return max_rel_error() < tol; }
    /// Entries at or above `tol`.
    std::vector<GradCheckEntry> failures(double tol) const;
};

/// Builds a graph on the given tape (reading parameters through Tape::param)
/// and returns its output.
using GraphFn = std::function<Var(Tape&)>;

/// Compares reverse-mode gradients of <w, f(params)> against central finite
/// differences. For scalar outputs w = 1; otherwise w is a fixed random
/// projection drawn from options.seed. Parameter values are restored; their
/// grads hold the analytic gradient afterwards.
GradCheckReport grad_check(const GraphFn& f, const std::vector<Parameter*>& params,
                           const GradCheckOptions& options = {});

}  // namespace metapolyp
