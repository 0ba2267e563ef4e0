#include <doctest.h>

#include <cmath>
#include <set>
#include <string>

#include "metapolyp/error.hpp"
#include "metapolyp/gradcheck.hpp"
#include "metapolyp/model.hpp"
#include "test_util.hpp"

using namespace metapolyp;
using testutil::random_tensor;

namespace {

bool strictly_unit(const Tensor& t) {
    for (float v : t.data()) {
        if (!(v > 0.0f && v < 1.0f)) return false;
    }
    return true;
}

bool has_prefix_containing(const Model& m, const std::string& prefix, const std::string& needle) {
    for (auto* p : m.parameters().all()) {
        if (p->name.rfind(prefix, 0) == 0 && p->name.find(needle) != std::string::npos) return true;
    }
    return false;
}

}  // namespace

TEST_CASE("full-size configuration at 256x256") {
    ModelConfig cfg;
    Model model(cfg);
    const auto x = random_tensor({256, 256, 3}, 7);
    const auto out = model.forward(x);

    const Shape expected_encoder[4] = {{64, 64, 64}, {32, 32, 128}, {16, 16, 320}, {8, 8, 512}};
    for (int i = 0; i < 4; ++i) CHECK(out.encoder[i].shape() == expected_encoder[i]);
    CHECK(out.probabilities.shape() == Shape{256, 256, 1});
    CHECK(strictly_unit(out.probabilities));

    // Count by independent traversal of the registry.
    std::size_t count = 0;
    for (auto* p : model.parameters().all()) count += p->value.size();
    CHECK(count == model.parameter_count());
    CHECK(Model(cfg).parameter_count() == count);
}

TEST_CASE("feature extents follow the shape law") {
    for (std::size_t h : {32u, 64u, 96u, 128u}) {
        for (std::size_t w : {32u, 64u, 96u, 128u}) {
            CAPTURE(h);
            CAPTURE(w);
            auto cfg = ModelConfig::tiny(32);
            cfg.height = h;
            cfg.width = w;
            Model model(cfg);
            Tape tape(Tape::Mode::Inference);
            auto g = model.forward(tape, tape.constant(random_tensor({h, w, 3}, h * 1000 + w)));
            const auto& ch = cfg.stage_channels;
            for (std::size_t i = 0; i < 4; ++i) {
                const std::size_t f = std::size_t{1} << (i + 2);
                CHECK(g.encoder[i].shape() == Shape{h / f, w / f, ch[i]});
            }
            const std::size_t dec_ch[6] = {ch[3], ch[2], ch[1], ch[0], cfg.decoder_channels, cfg.decoder_channels};
            for (std::size_t j = 0; j < 6; ++j) {
                const std::size_t f = std::size_t{32} >> j;
                CHECK(g.decoder[j].shape() == Shape{h / f, w / f, dec_ch[j]});
            }
            for (std::size_t j = 0; j < 4; ++j) {
                CHECK(g.multiscale[j].shape() == g.decoder[j + 2].shape());
                CHECK(g.multiscale[j].shape()[0] == 4 * g.decoder[j].shape()[0]);
            }
            CHECK(g.probabilities.shape() == Shape{h, w, 1});
            CHECK(g.logits.shape() == Shape{h, w, 1});
        }
    }
}

TEST_CASE("initialization is deterministic in the seed") {
    auto cfg = ModelConfig::tiny(32);
    cfg.seed = 11;
    Model a(cfg), b(cfg);
    cfg.seed = 12;
    Model c(cfg);
    REQUIRE(a.parameters().size() == b.parameters().size());
    bool any_differs = false;
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
        const auto* pa = a.parameters().all()[i];
        const auto* pb = b.parameters().all()[i];
        const auto* pc = c.parameters().all()[i];
        CHECK(pa->name == pb->name);
        CHECK(pa->value == pb->value);
        if (!(pa->value == pc->value)) any_differs = true;
    }
    CHECK(any_differs);

    const auto x = random_tensor({32, 32, 3}, 3);
    CHECK(a.forward(x).probabilities == b.forward(x).probabilities);
}

TEST_CASE("parameter names are unique and hierarchical") {
    Model model(ModelConfig::tiny(32));
    std::set<std::string> names;
    for (auto* p : model.parameters().all()) {
        CHECK(names.insert(p->name).second);
        CHECK(p->grad.shape() == p->value.shape());
    }
    CHECK(names.count("head.weight") == 1);
    CHECK(names.count("encoder.stem.conv.weight") == 1);
}

TEST_CASE("encoder stage kinds") {
    Model model(ModelConfig::tiny(32));
    CHECK(model.stage_kind(1) == BlockKind::ConvFormer);
    CHECK(model.stage_kind(2) == BlockKind::ConvFormer);
    CHECK(model.stage_kind(3) == BlockKind::Transformer);
    CHECK(model.stage_kind(4) == BlockKind::Transformer);
    CHECK_THROWS_AS(model.stage_kind(0), UsageError);
    CHECK_THROWS_AS(model.stage_kind(5), UsageError);

    for (const char* stage : {"encoder.stage1.", "encoder.stage2."}) {
        CHECK_FALSE(has_prefix_containing(model, stage, ".attn."));
        CHECK(has_prefix_containing(model, stage, ".mixer.dw"));
    }
    for (const char* stage : {"encoder.stage3.", "encoder.stage4."}) {
        CHECK(has_prefix_containing(model, stage, ".attn."));
        CHECK_FALSE(has_prefix_containing(model, stage, ".dw"));
    }
}

TEST_CASE("invalid configurations are rejected") {
    auto check_bad = [](auto mutate, const std::string& fragment) {
        auto cfg = ModelConfig::tiny(32);
        mutate(cfg);
        try {
            Model m(cfg);
            FAIL("expected ConfigError for " << fragment);
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find(fragment) != std::string::npos);
        }
    };
    check_bad([](ModelConfig& c) { c.height = 48; }, "32");
    check_bad([](ModelConfig& c) { c.width = 0; }, "32");
    check_bad([](ModelConfig& c) { c.stage_channels[1] = 0; }, "positive");
    check_bad([](ModelConfig& c) { c.heads = 5; }, "heads");
    check_bad([](ModelConfig& c) { c.decoder_channels = 0; }, "positive");
    check_bad([](ModelConfig& c) { c.upsample_kernel = 3; }, "upsample_kernel");
    check_bad([](ModelConfig& c) { c.blocks_per_stage[0] = 0; }, "blocks");
}

TEST_CASE("input must match the configured extents") {
    Model model(ModelConfig::tiny(32));
    CHECK_THROWS_AS(model.forward(Tensor({64, 64, 3})), DimensionError);
    CHECK_THROWS_AS(model.forward(Tensor({32, 32, 1})), DimensionError);
    CHECK_THROWS_AS(model.forward(Tensor({32, 32})), DimensionError);
}

TEST_CASE("config text round trip") {
    auto cfg = ModelConfig::tiny(64);
    cfg.seed = 123456789012345ull;
    cfg.mlp_ratio = 2.5;
    cfg.upsample_kernel = 4;
    const auto text = cfg.serialize();
    CHECK(ModelConfig::parse(text) == cfg);
    CHECK(ModelConfig::parse(ModelConfig{}.serialize()) == ModelConfig{});
    CHECK_THROWS_AS(ModelConfig::parse(text + "bogus = 1\n"), ConfigError);
    CHECK_THROWS_AS(ModelConfig::parse("height = abc\n"), ConfigError);
}

TEST_CASE("copying parameters reproduces outputs") {
    auto cfg = ModelConfig::tiny(32);
    Model a(cfg);
    cfg.seed = 99;
    Model b(cfg);
    const auto x = random_tensor({32, 32, 3}, 21);
    CHECK_FALSE(a.forward(x).probabilities == b.forward(x).probabilities);
    b.copy_parameters_from(a);
    CHECK(a.forward(x).probabilities == b.forward(x).probabilities);
}

TEST_CASE("outputs stay finite and inside (0,1)") {
    Model model(ModelConfig::tiny(32));
    for (std::uint64_t s = 0; s < 4; ++s) {
        const auto out = model.forward(random_tensor({32, 32, 3}, 100 + s));
        CHECK(strictly_unit(out.probabilities));
    }
    // Extreme but finite inputs saturate the head without leaving the open interval.
    const auto out = model.forward(random_tensor({32, 32, 3}, 5, -50.0f, 50.0f));
    CHECK(strictly_unit(out.probabilities));
    CHECK(model.forward(Tensor({32, 32, 3}, 1.0f)).probabilities.all_finite());
}

TEST_CASE("end-to-end gradient check on the tiny model") {
    auto cfg = ModelConfig::tiny(32);
    cfg.seed = 3;
    Model model(cfg);
    Parameter x("input", random_tensor({32, 32, 3}, 3));
    auto params = model.parameters().all();
    params.push_back(&x);
    const auto report = grad_check([&](Tape& t) { return model.forward(t, t.param(x)).logits; }, params,
                                   {.max_coords = 4, .seed = 3});
    CHECK(report.entries.size() == params.size());
    for (const auto& e : report.failures(1e-2)) FAIL_CHECK(e.name << " rel. err " << e.max_rel_error);
    CHECK(report.max_rel_error() < 1e-2);
}
