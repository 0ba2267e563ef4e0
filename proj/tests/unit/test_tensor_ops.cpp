#include <doctest.h>

#include <cmath>
#include <limits>
#include <string>

#include "metapolyp/error.hpp"
#include "metapolyp/gradcheck.hpp"
#include "metapolyp/ops.hpp"
#include "test_util.hpp"

using namespace metapolyp;
using testutil::random_tensor;

namespace {

constexpr double kOpTol = 1e-3;

void check_grads(const GraphFn& f, std::vector<Parameter*> params, std::uint64_t seed = 0) {
    auto report = grad_check(f, params, {.step = 1e-3, .max_coords = 0, .seed = seed});
    for (const auto& e : report.entries) {
        INFO(e.name << " rel err " << e.max_rel_error);
        CHECK(e.max_rel_error < kOpTol);
    }
}

}  // namespace

TEST_CASE("tensor invariants") {
    Tensor t({2, 3}, 1.5f);
    CHECK(t.size() == 6);
    CHECK_THROWS_AS(Tensor({2, 3}, std::vector<float>(5)), DimensionError);
    CHECK_THROWS_AS(Tensor({0, 3}), DimensionError);
    CHECK_THROWS_AS(t.reshaped({4}), DimensionError);
    CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
    Tensor u = t;
    CHECK(u == t);
    u[0] = 2.0f;
    CHECK_FALSE(u == t);
}

TEST_CASE("matmul") {
    Tape tape;
    SUBCASE("identity") {
        auto b = random_tensor({3, 3}, 1);
        Tensor eye({3, 3});
        for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0f;
        auto y = ops::matmul(tape.constant(eye), tape.constant(b));
        CHECK(y.value() == b);
    }
    SUBCASE("hand expansion") {
        auto y = ops::matmul(tape.constant(Tensor::from({2, 2}, {1, 2, 3, 4})), tape.constant(Tensor::from({2, 1}, {1, 1})));
        CHECK(y.value() == Tensor::from({2, 1}, {3, 7}));
    }
    SUBCASE("shape mismatch names both shapes") {
        try {
            ops::matmul(tape.constant(Tensor({2, 3})), tape.constant(Tensor({2, 3})));
            FAIL("expected DimensionError");
        } catch (const DimensionError& e) {
            std::string msg = e.what();
            CHECK(msg.find("[2x3]") != std::string::npos);
            CHECK(msg.find("and [2x3]") != std::string::npos);
        }
    }
    SUBCASE("gradient") {
        Parameter a("a", random_tensor({3, 4}, 2));
        Parameter b("b", random_tensor({4, 2}, 3));
        check_grads([&](Tape& t) { return ops::sum(ops::matmul(t.param(a), t.param(b))); }, {&a, &b});
        check_grads([&](Tape& t) { return ops::matmul(t.param(a), t.param(b)); }, {&a, &b}, 7);
    }
}

TEST_CASE("conv2d") {
    Tape tape;
    SUBCASE("1x1 channel identity") {
        auto x = random_tensor({4, 5, 3}, 4);
        Tensor k({1, 1, 3, 3});
        for (int c = 0; c < 3; ++c) k[c * 3 + c] = 1.0f;
        CHECK(ops::conv2d(tape.constant(x), tape.constant(k)).value() == x);
    }
    SUBCASE("3x3 ones on ones") {
        auto y = ops::conv2d(tape.constant(Tensor({3, 3, 1}, 1.0f)), tape.constant(Tensor({3, 3, 1, 1}, 1.0f)));
        const Tensor& v = y.value();
        CHECK(v.at(1, 1, 0) == 9.0f);
        for (auto [r, c] : {std::pair{0, 0}, {0, 2}, {2, 0}, {2, 2}}) CHECK(v.at(r, c, 0) == 4.0f);
        for (auto [r, c] : {std::pair{0, 1}, {1, 0}, {1, 2}, {2, 1}}) CHECK(v.at(r, c, 0) == 6.0f);
    }
    SUBCASE("matches nested-loop reference") {
        for (std::size_t stride : {1u, 2u, 4u}) {
            for (bool same : {true, false}) {
                auto x = random_tensor({9, 8, 3}, 10 + stride);
                auto k = random_tensor({3, 5, 3, 2}, 20 + stride);
                auto y = ops::conv2d(tape.constant(x), tape.constant(k), stride,
                                     same ? ops::Padding::Same : ops::Padding::Valid);
                auto ref = testutil::reference_conv(x, k, stride, same);
                REQUIRE(y.shape() == ref.shape());
                CHECK(testutil::max_abs_diff(y.value(), ref) < 1e-5);
            }
        }
    }
    SUBCASE("same padding output extent is ceil(H / stride)") {
        auto y = ops::conv2d(tape.constant(Tensor({7, 6, 2})), tape.constant(Tensor({3, 3, 2, 1})), 2);
        CHECK(y.shape() == Shape{4, 3, 1});
    }
    SUBCASE("channel mismatch") {
        CHECK_THROWS_AS(ops::conv2d(tape.constant(Tensor({3, 3, 2})), tape.constant(Tensor({3, 3, 3, 1}))),
                        DimensionError);
    }
    SUBCASE("even kernel rejected") {
        CHECK_THROWS_AS(ops::conv2d(tape.constant(Tensor({3, 3, 1})), tape.constant(Tensor({2, 2, 1, 1}))),
                        ConfigError);
    }
    SUBCASE("gradient") {
        Parameter x("x", random_tensor({5, 6, 2}, 5));
        Parameter k("k", random_tensor({3, 3, 2, 3}, 6));
        check_grads([&](Tape& t) { return ops::conv2d(t.param(x), t.param(k)); }, {&x, &k});
        check_grads([&](Tape& t) { return ops::conv2d(t.param(x), t.param(k), 2); }, {&x, &k}, 1);
    }
}

TEST_CASE("depthwise_conv2d") {
    Tape tape;
    SUBCASE("delta kernel is identity") {
        auto x = random_tensor({5, 5, 3}, 7);
        Tensor k({3, 3, 3});
        for (int c = 0; c < 3; ++c) k[(1 * 3 + 1) * 3 + c] = 1.0f;
        CHECK(ops::depthwise_conv2d(tape.constant(x), tape.constant(k)).value() == x);
    }
    SUBCASE("channels scale independently") {
        auto x = random_tensor({4, 4, 2}, 8);
        Tensor k({1, 1, 2});
        k[0] = 2.0f;
        k[1] = -3.0f;
        auto y = ops::depthwise_conv2d(tape.constant(x), tape.constant(k)).value();
        for (std::size_t i = 0; i < 16; ++i) {
            CHECK(y[i * 2] == 2.0f * x[i * 2]);
            CHECK(y[i * 2 + 1] == -3.0f * x[i * 2 + 1]);
        }
    }
    SUBCASE("matches per-channel reference") {
        auto x = random_tensor({6, 5, 3}, 9);
        auto k = random_tensor({3, 3, 3}, 10);
        auto y = ops::depthwise_conv2d(tape.constant(x), tape.constant(k)).value();
        for (std::size_t c = 0; c < 3; ++c) {
            Tensor xc({6, 5, 1}), kc({3, 3, 1, 1});
            for (std::size_t i = 0; i < 30; ++i) xc[i] = x[i * 3 + c];
            for (std::size_t i = 0; i < 9; ++i) kc[i] = k[i * 3 + c];
            auto ref = testutil::reference_conv(xc, kc, 1, true);
            for (std::size_t i = 0; i < 30; ++i) CHECK(std::fabs(y[i * 3 + c] - ref[i]) < 1e-5);
        }
    }
    SUBCASE("channel mismatch") {
        CHECK_THROWS_AS(ops::depthwise_conv2d(tape.constant(Tensor({3, 3, 2})), tape.constant(Tensor({3, 3, 3}))),
                        DimensionError);
    }
    SUBCASE("gradient") {
        Parameter x("x", random_tensor({5, 4, 3}, 11));
        Parameter k("k", random_tensor({3, 3, 3}, 12));
        check_grads([&](Tape& t) { return ops::depthwise_conv2d(t.param(x), t.param(k)); }, {&x, &k});
        Parameter k7("k7", random_tensor({7, 7, 3}, 13));
        check_grads([&](Tape& t) { return ops::depthwise_conv2d(t.param(x), t.param(k7)); }, {&x, &k7});
    }
}

TEST_CASE("transposed_conv2d") {
    Tape tape;
    SUBCASE("2x2 ones kernel spreads a single value") {
        auto y = ops::transposed_conv2d(tape.constant(Tensor({1, 1, 1}, 2.5f)), tape.constant(Tensor({2, 2, 1, 1}, 1.0f)));
        CHECK(y.value() == Tensor({2, 2, 1}, 2.5f));
    }
    SUBCASE("output extents doubled") {
        for (std::size_t kk : {2u, 4u}) {
            auto y = ops::transposed_conv2d(tape.constant(Tensor({3, 5, 2})), tape.constant(Tensor({kk, kk, 4, 2})));
            CHECK(y.shape() == Shape{6, 10, 4});
        }
    }
    SUBCASE("adjoint of strided conv2d") {
        for (std::size_t kk : {2u, 4u, 3u}) {
            auto big = random_tensor({6, 4, 3}, 30 + kk);
            auto small = random_tensor({3, 2, 2}, 40 + kk);
            auto k = random_tensor({kk, kk, 3, 2}, 50 + kk);
            Tensor down;
            if (kk % 2 == 1) {
                down = ops::conv2d(tape.constant(big), tape.constant(k), 2).value();
            } else {
                // Even kernels are only reachable via the shared geometry helpers.
                auto g = ops::detail::conv_geometry(6, 4, kk, kk, 2, ops::Padding::Same);
                down = Tensor({3, 2, 2});
                ops::detail::conv_forward(g, big.raw(), 3, k.raw(), 2, down.raw());
            }
            auto up = ops::transposed_conv2d(tape.constant(small), tape.constant(k)).value();
            // <conv(big), small> == <big, conv^T(small)>, measured against the
            // magnitude of the summed terms since the sums may cancel.
            double lhs = 0, rhs = 0, scale = 0;
            for (std::size_t i = 0; i < down.size(); ++i) {
                lhs += double(down[i]) * small[i];
                scale += std::fabs(double(down[i]) * small[i]);
            }
            for (std::size_t i = 0; i < up.size(); ++i) rhs += double(big[i]) * up[i];
            CHECK(std::fabs(lhs - rhs) / std::max(scale, 1e-12) < 1e-5);
        }
    }
    SUBCASE("channel mismatch") {
        CHECK_THROWS_AS(ops::transposed_conv2d(tape.constant(Tensor({2, 2, 3})), tape.constant(Tensor({2, 2, 1, 2}))),
                        DimensionError);
    }
    SUBCASE("gradient") {
        Parameter x("x", random_tensor({3, 3, 2}, 14));
        Parameter k2("k2", random_tensor({2, 2, 3, 2}, 15));
        Parameter k4("k4", random_tensor({4, 4, 3, 2}, 16));
        check_grads([&](Tape& t) { return ops::transposed_conv2d(t.param(x), t.param(k2)); }, {&x, &k2});
        check_grads([&](Tape& t) { return ops::transposed_conv2d(t.param(x), t.param(k4)); }, {&x, &k4});
    }
}

TEST_CASE("upsample") {
    Tape tape;
    SUBCASE("constant stays constant") {
        for (std::size_t f : {2u, 4u}) {
            auto y = ops::upsample(tape.constant(Tensor({3, 2, 2}, 0.75f)), f);
            CHECK(y.value() == Tensor({3 * f, 2 * f, 2}, 0.75f));
        }
    }
    SUBCASE("half-pixel bilinear weights") {
        auto y = ops::upsample(tape.constant(Tensor::from({1, 2, 1}, {0, 1})), 2).value();
        REQUIRE(y.shape() == Shape{2, 4, 1});
        for (std::size_t r = 0; r < 2; ++r) {
            CHECK(y.at(r, 0, 0) == doctest::Approx(0.0));
            CHECK(y.at(r, 1, 0) == doctest::Approx(0.25));
            CHECK(y.at(r, 2, 0) == doctest::Approx(0.75));
            CHECK(y.at(r, 3, 0) == doctest::Approx(1.0));
        }
    }
    SUBCASE("invalid factor") {
        CHECK_THROWS_AS(ops::upsample(tape.constant(Tensor({2, 2, 1})), 3), ConfigError);
    }
    SUBCASE("gradient") {
        Parameter x("x", random_tensor({3, 4, 2}, 17));
        check_grads([&](Tape& t) { return ops::upsample(t.param(x), 2); }, {&x});
        check_grads([&](Tape& t) { return ops::upsample(t.param(x), 4); }, {&x});
    }
}

TEST_CASE("layer_norm") {
    Tape tape;
    auto ones = tape.constant(Tensor({2}, 1.0f));
    auto zeros = tape.constant(Tensor({2}, 0.0f));
    SUBCASE("constant channels normalize to zero") {
        auto y = ops::layer_norm(tape.constant(Tensor({2, 2, 2}, 3.0f)), ones, zeros);
        CHECK(y.value() == Tensor({2, 2, 2}, 0.0f));
    }
    SUBCASE("two channels [1, 3]") {
        auto y = ops::layer_norm(tape.constant(Tensor::from({1, 1, 2}, {1, 3})), ones, zeros).value();
        const double expect = 1.0 / std::sqrt(1.0 + 1e-6);
        CHECK(y[0] == doctest::Approx(-expect).epsilon(1e-7));
        CHECK(y[1] == doctest::Approx(expect).epsilon(1e-7));
    }
    SUBCASE("gamma mismatch") {
        CHECK_THROWS_AS(ops::layer_norm(tape.constant(Tensor({1, 1, 3})), ones, zeros), DimensionError);
    }
    SUBCASE("gradient") {
        Parameter x("x", random_tensor({3, 2, 5}, 18));
        Parameter g("gamma", random_tensor({5}, 19, 0.5, 1.5));
        Parameter b("beta", random_tensor({5}, 20));
        check_grads([&](Tape& t) { return ops::layer_norm(t.param(x), t.param(g), t.param(b)); }, {&x, &g, &b});
    }
}

TEST_CASE("softmax and activations") {
    Tape tape;
    CHECK(ops::softmax(tape.constant(Tensor({1}, 3.0f)), 0).value()[0] == 1.0f);
    auto half = ops::softmax(tape.constant(Tensor({2}, 0.0f)), 0).value();
    CHECK(half[0] == 0.5f);
    CHECK(half[1] == 0.5f);
    CHECK(ops::sigmoid(tape.constant(Tensor({1}, 0.0f))).value()[0] == 0.5f);

    SUBCASE("rows sum to one along any axis") {
        auto x = random_tensor({4, 5, 3}, 21, -20.0, 20.0);
        for (std::size_t axis = 0; axis < 3; ++axis) {
            auto y = ops::softmax(tape.constant(x), axis).value();
            const std::size_t len = x.dim(axis);
            const std::size_t inner = axis == 2 ? 1 : (axis == 1 ? 3 : 15);
            const std::size_t outer = x.size() / (len * inner);
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    double s = 0;
                    for (std::size_t j = 0; j < len; ++j) {
                        float v = y[o * len * inner + j * inner + in];
                        CHECK(v >= 0.0f);
                        s += v;
                    }
                    CHECK(std::fabs(s - 1.0) < 1e-6);
                }
        }
    }
    SUBCASE("large logits are stable") {
        auto y = ops::softmax(tape.constant(Tensor::from({3}, {1000, 1000, -1000})), 0).value();
        CHECK(y[0] == doctest::Approx(0.5));
        CHECK(y[2] == 0.0f);
    }
    SUBCASE("sigmoid stays inside the open unit interval") {
        auto y = ops::sigmoid(tape.constant(Tensor::from({2}, {80, -80}))).value();
        CHECK(y[0] < 1.0f);
        CHECK(y[1] > 0.0f);
    }
    SUBCASE("gradients") {
        Parameter x("x", random_tensor({3, 4}, 22, -2.0, 2.0));
        check_grads([&](Tape& t) { return ops::softmax(t.param(x), 1); }, {&x});
        check_grads([&](Tape& t) { return ops::softmax(t.param(x), 0); }, {&x});
        check_grads([&](Tape& t) { return ops::gelu(t.param(x)); }, {&x});
        check_grads([&](Tape& t) { return ops::sigmoid(t.param(x)); }, {&x});
    }
}

TEST_CASE("structural ops gradients") {
    Parameter a("a", random_tensor({4, 6}, 23));
    Parameter b("b", random_tensor({4, 2}, 24));
    Parameter bias("bias", random_tensor({6}, 25));
    check_grads([&](Tape& t) { return ops::transpose(t.param(a)); }, {&a});
    check_grads([&](Tape& t) { return ops::slice_cols(t.param(a), 2, 3); }, {&a});
    check_grads([&](Tape& t) { return ops::concat_cols({t.param(a), t.param(b), t.param(a)}); }, {&a, &b});
    check_grads([&](Tape& t) { return ops::add_bias(t.param(a), t.param(bias)); }, {&a, &bias});
    check_grads([&](Tape& t) { return ops::mul(t.param(a), ops::scale(t.param(a), -2.0f)); }, {&a});
    check_grads([&](Tape& t) { return ops::reshape(t.param(a), {2, 12}); }, {&a});
}

TEST_CASE("attention_mask") {
    Parameter q("q", random_tensor({5, 3}, 26));
    Parameter k("k", random_tensor({4, 3}, 27));
    Tape tape;
    auto m = ops::attention_mask(tape.param(q), tape.param(k), 0.5f).value();
    REQUIRE(m.shape() == Shape{5, 4});
    for (std::size_t i = 0; i < 5; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 4; ++j) s += m[i * 4 + j];
        CHECK(std::fabs(s - 1.0) < 1e-6);
    }
    check_grads([&](Tape& t) { return ops::attention_mask(t.param(q), t.param(k), 0.5f); }, {&q, &k});
}

TEST_CASE("backward") {
    SUBCASE("sum gives ones") {
        Parameter p("p", random_tensor({3, 2}, 28));
        Tape t;
        t.backward(ops::sum(t.param(p)));
        CHECK(p.grad == Tensor({3, 2}, 1.0f));
    }
    SUBCASE("sum of squares") {
        Parameter p("p", Tensor::from({2}, {1, 2}));
        Tape t;
        auto v = t.param(p);
        t.backward(ops::sum(ops::mul(v, v)));
        CHECK(p.grad == Tensor::from({2}, {2, 4}));
    }
    SUBCASE("gradients accumulate across tapes until zeroed") {
        Parameter p("p", Tensor({2}, 1.0f));
        for (int i = 0; i < 2; ++i) {
            Tape t;
            t.backward(ops::sum(t.param(p)));
        }
        CHECK(p.grad == Tensor({2}, 2.0f));
        p.zero_grad();
        CHECK(p.grad == Tensor({2}, 0.0f));
    }
    SUBCASE("non-scalar loss rejected") {
        Tape t;
        auto v = t.variable(Tensor({2}, 1.0f));
        CHECK_THROWS_AS(t.backward(v), UsageError);
    }
    SUBCASE("inference tape has no backward") {
        Tape t(Tape::Mode::Inference);
        auto v = t.variable(Tensor({1}, 1.0f));
        CHECK_FALSE(v.requires_grad());
        CHECK_THROWS_AS(t.backward(v), UsageError);
    }
    SUBCASE("reverse execution order") {
        Tape t;
        std::vector<int> order;
        Var v = t.variable(Tensor({1}, 1.0f));
        for (int i = 0; i < 5; ++i) {
            v = t.record("step", v.value(), {v}, [&order, i, v](Tape& tp, const Tensor& g, const Tensor&) {
                order.push_back(i);
                tp.accumulate(v, g);
            });
        }
        t.backward(v);
        CHECK(order == std::vector<int>{4, 3, 2, 1, 0});
        CHECK(t.grad(Var{&t, 0})[0] == 1.0f);
    }
    SUBCASE("non-finite results are reported") {
        Tape t;
        auto x = t.constant(Tensor({2}, 1e30f));
        CHECK_THROWS_AS(ops::mul(x, x), NumericError);
    }
}

TEST_CASE("ops are deterministic") {
    auto x = random_tensor({8, 8, 4}, 29);
    auto k = random_tensor({3, 3, 4, 4}, 30);
    Tape a, b;
    auto ya = ops::gelu(ops::conv2d(a.constant(x), a.constant(k), 2));
    auto yb = ops::gelu(ops::conv2d(b.constant(x), b.constant(k), 2));
    CHECK(ya.value() == yb.value());
}

TEST_CASE("grad_check detects a wrong adjoint") {
    Parameter p("p", random_tensor({4}, 31));
    auto broken = [&](Tape& t) {
        Var v = t.param(p);
        Tensor y = v.value();
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = y[i] * y[i];
        return t.record("square_wrong", std::move(y), {v}, [v](Tape& tp, const Tensor& g, const Tensor&) {
            Tensor gx(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * v.value()[i];  // missing factor 2
            tp.accumulate(v, gx);
        });
    };
    auto report = grad_check(broken, {&p});
    CHECK(report.max_rel_error() > 0.1);
    CHECK_FALSE(report.passed(1e-2));
    CHECK(report.failures(1e-2).size() == 1);
}

TEST_CASE("grad_check samples coordinates and restores values") {
    Parameter p("p", random_tensor({50}, 32));
    Tensor before = p.value;
    auto report = grad_check([&](Tape& t) { return ops::gelu(t.param(p)); }, {&p}, {.max_coords = 7});
    CHECK(report.entries.at(0).coords_checked == 7);
    CHECK(p.value == before);
    CHECK(report.passed(1e-3));
}
