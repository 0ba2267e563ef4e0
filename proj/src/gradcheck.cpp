#include "metapolyp/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "metapolyp/error.hpp"
#include "metapolyp/rng.hpp"

namespace metapolyp {

double GradCheckReport::max_rel_error() const {
    double worst = 0.0;
    for (const auto& e : entries) worst = std::max(worst, e.max_rel_error);
    return worst;
}

std::vector<GradCheckEntry> GradCheckReport::failures(double tol) const {
    std::vector<GradCheckEntry> out;
    for (const auto& e : entries) {
        if (!(e.max_rel_error < tol)) out.push_back(e);
    }
    return out;
}

namespace {

double projected(const Tensor& out, const Tensor& weights) {
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += static_cast<double>(weights[i]) * out[i];
    return s;
}

std::vector<std::size_t> pick_coords(const Tensor& analytic, std::size_t max_coords, Rng& rng) {
    std::vector<std::size_t> all(analytic.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    if (max_coords == 0 || max_coords >= all.size()) return all;
    std::size_t top = 0;
    for (std::size_t i = 1; i < analytic.size(); ++i) {
        if (std::fabs(analytic[i]) > std::fabs(analytic[top])) top = i;
    }
    std::swap(all[0], all[top]);
    for (std::size_t i = 1; i < max_coords; ++i) {
        auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i),
                                                          static_cast<std::int64_t>(all.size()) - 1));
        std::swap(all[i], all[j]);
    }
    all.resize(max_coords);
    return all;
}

}  // namespace

GradCheckReport grad_check(const GraphFn& f, const std::vector<Parameter*>& params, const GradCheckOptions& options) {
    if (params.empty()) throw UsageError("grad_check: no parameters to check");
    Rng rng(options.seed);

    for (auto* p : params) p->zero_grad();
    Tensor weights;
    {
        Tape tape;
        Var out = f(tape);
        const Tensor& y = out.value();
        weights = Tensor(y.shape(), 1.0f);
        if (y.size() > 1) {
            for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
        }
        tape.backward(out, weights);
    }

    auto evaluate = [&] {
        Tape tape(Tape::Mode::Inference);
        return projected(f(tape).value(), weights);
    };

    GradCheckReport report;
    for (auto* p : params) {
        const Tensor& analytic = p->grad;
        const auto coords = pick_coords(analytic, options.max_coords, rng);
        double max_diff = 0.0;
        double max_numeric = 0.0;
        double max_analytic = 0.0;
        for (std::size_t i = 0; i < analytic.size(); ++i) max_analytic = std::max(max_analytic, std::fabs(double(analytic[i])));
        for (auto i : coords) {
            const float orig = p->value[i];
            const auto plus = static_cast<float>(orig + options.step);
            const auto minus = static_cast<float>(orig - options.step);
            p->value[i] = plus;
            const double fp = evaluate();
            p->value[i] = minus;
            const double fm = evaluate();
            p->value[i] = orig;
            // Divide by the step actually taken in float32.
            const double numeric = (fp - fm) / (static_cast<double>(plus) - static_cast<double>(minus));
            max_numeric = std::max(max_numeric, std::fabs(numeric));
            max_diff = std::max(max_diff, std::fabs(numeric - static_cast<double>(analytic[i])));
        }
        const double denom = std::max({max_analytic, max_numeric, 1e-6});
        report.entries.push_back({p->name, max_diff / denom, coords.size()});
    }
    return report;
}

}  // namespace metapolyp
