#include "metapolyp/gradsuite.hpp"

#include "metapolyp/blocks.hpp"
#include "metapolyp/metrics.hpp"
#include "metapolyp/model.hpp"
#include "metapolyp/rng.hpp"

namespace metapolyp {

namespace {

Tensor uniform_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

/// Checks a block's parameters together with its input.
template <typename Fn>
SuiteCheck check_block(const std::string& name, ParameterRegistry& reg, Tensor input, double tol,
                       std::uint64_t seed, Fn&& block) {
    Parameter x("input", std::move(input));
    auto params = reg.all();
    params.push_back(&x);
    SuiteCheck c{name, tol, {}};
    c.report = grad_check([&](Tape& t) { return block(t, t.param(x)); }, params, {.max_coords = 12, .seed = seed});
    return c;
}

}  // namespace

bool SuiteReport::passed() const {
    for (const auto& c : checks) {
        if (!c.passed()) return false;
    }
    return true;
}

std::vector<std::string> SuiteReport::offending_parameters() const {
    std::vector<std::string> out;
    for (const auto& c : checks) {
        for (const auto& e : c.report.failures(c.tolerance)) out.push_back(c.block + "/" + e.name);
    }
    return out;
}

SuiteReport gradient_suite(std::uint64_t seed, double block_tol, double end_to_end_tol) {
    SuiteReport out;
    Rng rng = Rng::derive(seed, 0x67726164);  // "grad"
    const BlockConfig cfg{4, 2.0, 2, 7};

    {
        ParameterRegistry reg;
        Stem stem(reg, rng, "stem", 3, 4);
        Downsample down(reg, rng, "down", 4, 6);
        out.checks.push_back(check_block("stem+downsample", reg, uniform_tensor({8, 8, 3}, rng), block_tol, seed,
                                         [&](Tape& t, Var x) { return down(t, stem(t, x)); }));
    }
    {
        ParameterRegistry reg;
        ConvFormerEncoderBlock block(reg, rng, "convformer_encoder", cfg);
        out.checks.push_back(check_block("convformer_encoder", reg, uniform_tensor({6, 6, 4}, rng), block_tol, seed,
                                         [&](Tape& t, Var x) { return block(t, x); }));
    }
    {
        ParameterRegistry reg;
        TransformerEncoderBlock block(reg, rng, "transformer_encoder", cfg);
        out.checks.push_back(check_block("transformer_encoder", reg, uniform_tensor({3, 3, 4}, rng), block_tol, seed,
                                         [&](Tape& t, Var x) { return block(t, x); }));
    }
    {
        ParameterRegistry reg;
        ConvformerBlock block(reg, rng, "convformer", cfg);
        out.checks.push_back(check_block("convformer", reg, uniform_tensor({3, 3, 4}, rng), block_tol, seed,
                                         [&](Tape& t, Var x) { return block(t, x); }));
    }
    {
        ParameterRegistry reg;
        MultiscaleUpsampleBlock block(reg, rng, "multiscale", 2, 3);
        out.checks.push_back(check_block("multiscale_upsample", reg, uniform_tensor({2, 2, 2}, rng), block_tol, seed,
                                         [&](Tape& t, Var x) { return block(t, x); }));
    }
    {
        Parameter tp("target", uniform_tensor({3, 3, 2}, rng));
        Parameter dp("decoded", uniform_tensor({3, 3, 2}, rng));
        SuiteCheck c{"levelup_merge", block_tol, {}};
        c.report = grad_check([&](Tape& t) { return levelup_merge(t.param(tp), t.param(dp)); }, {&tp, &dp},
                              {.seed = seed});
        out.checks.push_back(std::move(c));
    }
    {
        Parameter p("pred", uniform_tensor({5, 5, 1}, rng, 0.05, 0.95));
        Tensor truth({5, 5, 1});
        for (std::size_t i = 0; i < truth.size(); ++i) truth[i] = rng.bernoulli(0.5) ? 1.0f : 0.0f;
        SuiteCheck c{"jaccard_loss", block_tol, {}};
        c.report = grad_check([&](Tape& t) { return jaccard_loss(t.param(p), truth); }, {&p}, {.seed = seed});
        out.checks.push_back(std::move(c));
    }
    {
        auto mc = ModelConfig::tiny(32);
        mc.seed = seed;
        Model model(mc);
        Parameter x("input", uniform_tensor({32, 32, 3}, rng));
        auto params = model.parameters().all();
        params.push_back(&x);
        SuiteCheck c{"end_to_end", end_to_end_tol, {}};
        c.report = grad_check([&](Tape& t) { return model.forward(t, t.param(x)).logits; }, params,
                              {.max_coords = 4, .seed = seed});
        out.checks.push_back(std::move(c));
    }
    return out;
}

}  // namespace metapolyp
