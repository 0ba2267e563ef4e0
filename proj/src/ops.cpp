#include "metapolyp/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "metapolyp/error.hpp"

namespace metapolyp::ops {

namespace {

void require_same_tape(Var a, Var b, const char* op) {
    if (a.tape != b.tape) throw UsageError(std::string(op) + ": operands live on different tapes");
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                             shape_str(t.shape()));
    }
}

// Reductions accumulate in double and round once, which keeps the rounding
// noise of deep graphs well below finite-difference resolution.
float dotf(const float* a, const float* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(a[i]) * b[i];
    return static_cast<float>(s);
}

void axpyd(double alpha, const float* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void store(const std::vector<double>& src, float* dst) {
    std::transform(src.begin(), src.end(), dst, [](double v) { return static_cast<float>(v); });
}

void axpy(float alpha, const float* x, float* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

Var add(Var a, Var b) {
    require_same_tape(a, b, "add");
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    if (x.shape() != y.shape()) {
        throw DimensionError("add: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
    }
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return a.tape->record("add", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

Var mul(Var a, Var b) {
    require_same_tape(a, b, "mul");
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    if (x.shape() != y.shape()) {
        throw DimensionError("mul: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
    }
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return a.tape->record("mul", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
        const Tensor& x = a.value();
        const Tensor& y = b.value();
        Tensor ga(g.shape()), gb(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] = g[i] * y[i];
            gb[i] = g[i] * x[i];
        }
        t.accumulate(a, ga);
        t.accumulate(b, gb);
    });
}

Var scale(Var a, float s) {
    const Tensor& x = a.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
    return a.tape->record("scale", std::move(out), {a}, [a, s](Tape& t, const Tensor& g, const Tensor&) {
        Tensor gx(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * s;
        t.accumulate(a, gx);
    });
}

Var add_bias(Var x, Var bias) {
    require_same_tape(x, bias, "add_bias");
    const Tensor& v = x.value();
    const Tensor& b = bias.value();
    const std::size_t c = b.size();
    if (b.rank() != 1 || v.shape().back() != c) {
        throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match trailing axis of " +
                             shape_str(v.shape()));
    }
    Tensor out = v;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % c];
    return x.tape->record("add_bias", std::move(out), {x, bias}, [x, bias, c](Tape& t, const Tensor& g, const Tensor&) {
        t.accumulate(x, g);
        if (bias.requires_grad()) {
            Tensor gb({c});
            for (std::size_t i = 0; i < g.size(); ++i) gb[i % c] += g[i];
            t.accumulate(bias, gb);
        }
    });
}

Var reshape(Var x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    return x.tape->record("reshape", std::move(out), {x}, [x](Tape& t, const Tensor& g, const Tensor&) {
        t.accumulate(x, g.reshaped(x.shape()));
    });
}

Var sum(Var x) {
    Tensor out({1}, static_cast<float>(x.value().sum()));
    return x.tape->record("sum", std::move(out), {x}, [x](Tape& t, const Tensor& g, const Tensor&) {
        t.accumulate(x, Tensor::full(x.shape(), g[0]));
    });
}

Var matmul(Var a, Var b) {
    require_same_tape(a, b, "matmul");
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(x.shape()) + " and " + shape_str(y.shape()));
    }
    const std::size_t m = x.dim(0), kk = x.dim(1), n = y.dim(1);
    Tensor out({m, n});
    std::vector<double> row(n);
    for (std::size_t i = 0; i < m; ++i) {
        std::fill(row.begin(), row.end(), 0.0);
        for (std::size_t k = 0; k < kk; ++k) axpyd(x[i * kk + k], y.raw() + k * n, row.data(), n);
        std::transform(row.begin(), row.end(), out.raw() + i * n, [](double v) { return static_cast<float>(v); });
    }
    return a.tape->record("matmul", std::move(out), {a, b}, [a, b, m, kk, n](Tape& t, const Tensor& g, const Tensor&) {
        const Tensor& x = a.value();
        const Tensor& y = b.value();
        if (a.requires_grad()) {
            Tensor ga({m, kk});
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t k = 0; k < kk; ++k) ga[i * kk + k] = dotf(g.raw() + i * n, y.raw() + k * n, n);
            }
            t.accumulate(a, ga);
        }
        if (b.requires_grad()) {
            Tensor gb({kk, n});
            std::vector<double> acc(kk * n, 0.0);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t k = 0; k < kk; ++k) axpyd(x[i * kk + k], g.raw() + i * n, acc.data() + k * n, n);
            }
            store(acc, gb.raw());
            t.accumulate(b, gb);
        }
    });
}

namespace {
Tensor transpose2d(const Tensor& x) {
    const std::size_t r = x.dim(0), c = x.dim(1);
    Tensor out({c, r});
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
    }
    return out;
}
}  // namespace

Var transpose(Var a) {
    require_rank(a.value(), 2, "transpose", "input");
    return a.tape->record("transpose", transpose2d(a.value()), {a},
                          [a](Tape& t, const Tensor& g, const Tensor&) { t.accumulate(a, transpose2d(g)); });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
    const Tensor& x = a.value();
    require_rank(x, 2, "slice_cols", "input");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (count == 0 || begin + count > cols) {
        throw DimensionError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                             ") outside " + shape_str(x.shape()));
    }
    Tensor out({rows, count});
    for (std::size_t i = 0; i < rows; ++i) {
        std::copy_n(x.raw() + i * cols + begin, count, out.raw() + i * count);
    }
    return a.tape->record("slice_cols", std::move(out), {a}, [a, begin, count, rows, cols](Tape& t, const Tensor& g, const Tensor&) {
        Tensor gx({rows, cols});
        for (std::size_t i = 0; i < rows; ++i) std::copy_n(g.raw() + i * count, count, gx.raw() + i * cols + begin);
        t.accumulate(a, gx);
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw UsageError("concat_cols: no inputs");
    const std::size_t rows = parts.front().value().dim(0);
    std::size_t cols = 0;
    for (const auto& p : parts) {
        require_rank(p.value(), 2, "concat_cols", "input");
        require_same_tape(parts.front(), p, "concat_cols");
        if (p.value().dim(0) != rows) throw DimensionError("concat_cols: row count mismatch");
        cols += p.value().dim(1);
    }
    Tensor out({rows, cols});
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t c = p.value().dim(1);
        for (std::size_t i = 0; i < rows; ++i) std::copy_n(p.value().raw() + i * c, c, out.raw() + i * cols + off);
        off += c;
    }
    return parts.front().tape->record("concat_cols", std::move(out), parts,
                        [parts, rows, cols](Tape& t, const Tensor& g, const Tensor&) {
                            std::size_t off = 0;
                            for (const auto& p : parts) {
                                const std::size_t c = p.value().dim(1);
                                if (p.requires_grad()) {
                                    Tensor gp({rows, c});
                                    for (std::size_t i = 0; i < rows; ++i) {
                                        std::copy_n(g.raw() + i * cols + off, c, gp.raw() + i * c);
                                    }
                                    t.accumulate(p, gp);
                                }
                                off += c;
                            }
                        });
}

namespace {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2 / pi)
constexpr float kGeluA = 0.044715f;
}  // namespace

Var gelu(Var x) {
    const Tensor& v = x.value();
    Tensor out(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i) {
        float z = v[i];
        out[i] = 0.5f * z * (1.0f + std::tanh(kGeluC * (z + kGeluA * z * z * z)));
    }
    return x.tape->record("gelu", std::move(out), {x}, [x](Tape& t, const Tensor& g, const Tensor&) {
        const Tensor& v = x.value();
        Tensor gx(v.shape());
        for (std::size_t i = 0; i < v.size(); ++i) {
            float z = v[i];
            float th = std::tanh(kGeluC * (z + kGeluA * z * z * z));
            float d = 0.5f * (1.0f + th) + 0.5f * z * (1.0f - th * th) * kGeluC * (1.0f + 3.0f * kGeluA * z * z);
            gx[i] = g[i] * d;
        }
        t.accumulate(x, gx);
    });
}

Var relu(Var x) {
    const Tensor& v = x.value();
    Tensor out(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] > 0.0f ? v[i] : 0.0f;
    return x.tape->record("relu", std::move(out), {x}, [x](Tape& t, const Tensor& g, const Tensor&) {
        const Tensor& v = x.value();
        Tensor gx(v.shape());
        for (std::size_t i = 0; i < v.size(); ++i) gx[i] = v[i] > 0.0f ? g[i] : 0.0f;
        t.accumulate(x, gx);
    });
}

Var sigmoid(Var x) {
    // Output is clamped into the open interval (0, 1); float32 rounds large
    // logits to exactly 1 otherwise.
    constexpr float lo = std::numeric_limits<float>::min();
    const float hi = std::nextafter(1.0f, 0.0f);
    const Tensor& v = x.value();
    Tensor out(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i) {
        float z = v[i];
        float s = z >= 0.0f ? 1.0f / (1.0f + std::exp(-z)) : std::exp(z) / (1.0f + std::exp(z));
        out[i] = std::clamp(s, lo, hi);
    }
    return x.tape->record("sigmoid", std::move(out), {x}, [x](Tape& t, const Tensor& g, const Tensor& s) {
        Tensor gx(s.shape());
        for (std::size_t i = 0; i < s.size(); ++i) gx[i] = g[i] * s[i] * (1.0f - s[i]);
        t.accumulate(x, gx);
    });
}

Var softmax(Var x, std::size_t axis) {
    const Tensor& v = x.value();
    if (axis >= v.rank()) throw DimensionError("softmax: axis out of range for " + shape_str(v.shape()));
    std::size_t outer = 1, inner = 1;
    const std::size_t len = v.dim(axis);
    for (std::size_t i = 0; i < axis; ++i) outer *= v.dim(i);
    for (std::size_t i = axis + 1; i < v.rank(); ++i) inner *= v.dim(i);
    Tensor out(v.shape());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            float mx = -std::numeric_limits<float>::infinity();
            for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, v[base + j * inner]);
            double total = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                float e = std::exp(v[base + j * inner] - mx);
                out[base + j * inner] = e;
                total += e;
            }
            const float inv = static_cast<float>(1.0 / total);
            for (std::size_t j = 0; j < len; ++j) out[base + j * inner] *= inv;
        }
    }
    return x.tape->record("softmax", std::move(out), {x}, [x, outer, inner, len](Tape& t, const Tensor& g, const Tensor& s) {
        Tensor gx(s.shape());
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                double dot = 0.0;
                for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * s[base + j * inner];
                for (std::size_t j = 0; j < len; ++j) {
                    const std::size_t idx = base + j * inner;
                    gx[idx] = s[idx] * (g[idx] - static_cast<float>(dot));
                }
            }
        }
        t.accumulate(x, gx);
    });
}

Var layer_norm(Var x, Var gamma, Var beta, float eps) {
    require_same_tape(x, gamma, "layer_norm");
    require_same_tape(x, beta, "layer_norm");
    const Tensor& v = x.value();
    const std::size_t c = v.shape().back();
    if (gamma.value().shape() != Shape{c} || beta.value().shape() != Shape{c}) {
        throw DimensionError("layer_norm: gamma/beta " + shape_str(gamma.value().shape()) + "/" +
                             shape_str(beta.value().shape()) + " do not match channel count of " +
                             shape_str(v.shape()));
    }
    const std::size_t positions = v.size() / c;
    const Tensor& gm = gamma.value();
    const Tensor& bt = beta.value();
    Tensor xhat(v.shape());
    Tensor rstd({positions});
    Tensor out(v.shape());
    for (std::size_t p = 0; p < positions; ++p) {
        const float* row = v.raw() + p * c;
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += row[j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(c);
        const double r = 1.0 / std::sqrt(var + eps);
        rstd[p] = static_cast<float>(r);
        for (std::size_t j = 0; j < c; ++j) {
            float h = static_cast<float>((row[j] - mean) * r);
            xhat[p * c + j] = h;
            out[p * c + j] = gm[j] * h + bt[j];
        }
    }
    return x.tape->record(
        "layer_norm", std::move(out), {x, gamma, beta},
        [x, gamma, beta, c, positions, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, const Tensor& g, const Tensor&) {
            const Tensor& gm = gamma.value();
            Tensor gx(x.shape());
            Tensor gg({c});
            Tensor gb({c});
            for (std::size_t p = 0; p < positions; ++p) {
                const float* go = g.raw() + p * c;
                const float* h = xhat.raw() + p * c;
                double mean_d = 0.0, mean_dh = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    double d = static_cast<double>(go[j]) * gm[j];
                    mean_d += d;
                    mean_dh += d * h[j];
                    gg[j] += go[j] * h[j];
                    gb[j] += go[j];
                }
                mean_d /= static_cast<double>(c);
                mean_dh /= static_cast<double>(c);
                for (std::size_t j = 0; j < c; ++j) {
                    double d = static_cast<double>(go[j]) * gm[j];
                    gx[p * c + j] = static_cast<float>(rstd[p] * (d - mean_d - h[j] * mean_dh));
                }
            }
            t.accumulate(x, gx);
            t.accumulate(gamma, gg);
            t.accumulate(beta, gb);
        });
}

namespace detail {

ConvGeometry conv_geometry(std::size_t in_h, std::size_t in_w, std::size_t kh, std::size_t kw, std::size_t stride,
                           Padding padding) {
    if (stride == 0) throw ConfigError("conv: stride must be >= 1");
    if (kh % 2 == 0 || kw % 2 == 0) {
        // Even kernels only appear through transposed_conv2d, which uses same padding.
        if (padding == Padding::Valid) throw ConfigError("conv: valid padding requires odd kernel extents");
    }
    ConvGeometry g{in_h, in_w, 0, 0, kh, kw, stride, 0, 0};
    if (padding == Padding::Same) {
        g.out_h = (in_h + stride - 1) / stride;
        g.out_w = (in_w + stride - 1) / stride;
        const std::size_t need_h = (g.out_h - 1) * stride + kh;
        const std::size_t need_w = (g.out_w - 1) * stride + kw;
        g.pad_top = need_h > in_h ? (need_h - in_h) / 2 : 0;
        g.pad_left = need_w > in_w ? (need_w - in_w) / 2 : 0;
    } else {
        if (kh > in_h || kw > in_w) throw DimensionError("conv: kernel larger than input with valid padding");
        g.out_h = (in_h - kh) / stride + 1;
        g.out_w = (in_w - kw) / stride + 1;
    }
    return g;
}

namespace {
template <typename F>
void for_each_tap(const ConvGeometry& g, F&& f) {
    const auto ih = static_cast<std::ptrdiff_t>(g.in_h);
    const auto iw = static_cast<std::ptrdiff_t>(g.in_w);
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::size_t o = oy * g.out_w + ox;
            for (std::size_t a = 0; a < g.kh; ++a) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + a) - static_cast<std::ptrdiff_t>(g.pad_top);
                if (iy < 0 || iy >= ih) continue;
                for (std::size_t b = 0; b < g.kw; ++b) {
                    const auto ix =
                        static_cast<std::ptrdiff_t>(ox * g.stride + b) - static_cast<std::ptrdiff_t>(g.pad_left);
                    if (ix < 0 || ix >= iw) continue;
                    f(o, static_cast<std::size_t>(iy) * g.in_w + static_cast<std::size_t>(ix), a * g.kw + b);
                }
            }
        }
    }
}
}  // namespace

void conv_forward(const ConvGeometry& g, const float* x, std::size_t cin, const float* k, std::size_t cout, float* y) {
    std::vector<double> acc(g.out_h * g.out_w * cout, 0.0);
    for_each_tap(g, [&](std::size_t o, std::size_t i, std::size_t tap) {
        const float* xp = x + i * cin;
        const float* kp = k + tap * cin * cout;
        double* yp = acc.data() + o * cout;
        for (std::size_t ci = 0; ci < cin; ++ci) axpyd(xp[ci], kp + ci * cout, yp, cout);
    });
    store(acc, y);
}

void conv_backward_input(const ConvGeometry& g, const float* gy, std::size_t cin, const float* k, std::size_t cout,
                         float* gx) {
    std::vector<double> acc(g.in_h * g.in_w * cin, 0.0);
    for_each_tap(g, [&](std::size_t o, std::size_t i, std::size_t tap) {
        const float* gp = gy + o * cout;
        const float* kp = k + tap * cin * cout;
        double* xp = acc.data() + i * cin;
        for (std::size_t ci = 0; ci < cin; ++ci) {
            double s = 0.0;
            for (std::size_t co = 0; co < cout; ++co) s += static_cast<double>(kp[ci * cout + co]) * gp[co];
            xp[ci] += s;
        }
    });
    store(acc, gx);
}

void conv_backward_kernel(const ConvGeometry& g, const float* x, std::size_t cin, const float* gy, std::size_t cout,
                          float* gk) {
    std::vector<double> acc(g.kh * g.kw * cin * cout, 0.0);
    for_each_tap(g, [&](std::size_t o, std::size_t i, std::size_t tap) {
        const float* xp = x + i * cin;
        const float* gp = gy + o * cout;
        double* kp = acc.data() + tap * cin * cout;
        for (std::size_t ci = 0; ci < cin; ++ci) axpyd(xp[ci], gp, kp + ci * cout, cout);
    });
    store(acc, gk);
}

}  // namespace detail

Var conv2d(Var x, Var k, std::size_t stride, Padding padding) {
    require_same_tape(x, k, "conv2d");
    const Tensor& v = x.value();
    const Tensor& w = k.value();
    require_rank(v, 3, "conv2d", "input");
    require_rank(w, 4, "conv2d", "kernel");
    if (w.dim(2) != v.dim(2)) {
        throw DimensionError("conv2d: kernel " + shape_str(w.shape()) + " expects " + std::to_string(w.dim(2)) +
                             " input channels, input is " + shape_str(v.shape()));
    }
    if (padding == Padding::Same && (w.dim(0) % 2 == 0 || w.dim(1) % 2 == 0)) {
        throw ConfigError("conv2d: kernel extents must be odd, got " + shape_str(w.shape()));
    }
    const std::size_t cin = w.dim(2), cout = w.dim(3);
    const auto g = detail::conv_geometry(v.dim(0), v.dim(1), w.dim(0), w.dim(1), stride, padding);
    Tensor out({g.out_h, g.out_w, cout});
    detail::conv_forward(g, v.raw(), cin, w.raw(), cout, out.raw());
    return x.tape->record("conv2d", std::move(out), {x, k}, [x, k, g, cin, cout](Tape& t, const Tensor& gy, const Tensor&) {
        if (x.requires_grad()) {
            Tensor gx(x.shape());
            detail::conv_backward_input(g, gy.raw(), cin, k.value().raw(), cout, gx.raw());
            t.accumulate(x, gx);
        }
        if (k.requires_grad()) {
            Tensor gk(k.shape());
            detail::conv_backward_kernel(g, x.value().raw(), cin, gy.raw(), cout, gk.raw());
            t.accumulate(k, gk);
        }
    });
}

Var depthwise_conv2d(Var x, Var k) {
    require_same_tape(x, k, "depthwise_conv2d");
    const Tensor& v = x.value();
    const Tensor& w = k.value();
    require_rank(v, 3, "depthwise_conv2d", "input");
    require_rank(w, 3, "depthwise_conv2d", "kernel");
    if (w.dim(2) != v.dim(2)) {
        throw DimensionError("depthwise_conv2d: kernel " + shape_str(w.shape()) + " does not match channels of " +
                             shape_str(v.shape()));
    }
    if (w.dim(0) % 2 == 0 || w.dim(1) % 2 == 0) {
        throw ConfigError("depthwise_conv2d: kernel extents must be odd, got " + shape_str(w.shape()));
    }
    const std::size_t c = v.dim(2);
    const auto g = detail::conv_geometry(v.dim(0), v.dim(1), w.dim(0), w.dim(1), 1, Padding::Same);
    Tensor out(v.shape());
    std::vector<double> acc(v.size(), 0.0);
    detail::for_each_tap(g, [&](std::size_t o, std::size_t i, std::size_t tap) {
        const float* xp = v.raw() + i * c;
        const float* kp = w.raw() + tap * c;
        double* yp = acc.data() + o * c;
        for (std::size_t j = 0; j < c; ++j) yp[j] += static_cast<double>(xp[j]) * kp[j];
    });
    store(acc, out.raw());
    return x.tape->record("depthwise_conv2d", std::move(out), {x, k}, [x, k, g, c](Tape& t, const Tensor& gy, const Tensor&) {
        const Tensor& v = x.value();
        const Tensor& w = k.value();
        Tensor gx(v.shape());
        Tensor gk(w.shape());
        std::vector<double> ax(v.size(), 0.0), ak(w.size(), 0.0);
        detail::for_each_tap(g, [&](std::size_t o, std::size_t i, std::size_t tap) {
            const float* gp = gy.raw() + o * c;
            const float* xp = v.raw() + i * c;
            const float* kp = w.raw() + tap * c;
            double* gxp = ax.data() + i * c;
            double* gkp = ak.data() + tap * c;
            for (std::size_t j = 0; j < c; ++j) {
                gxp[j] += static_cast<double>(gp[j]) * kp[j];
                gkp[j] += static_cast<double>(gp[j]) * xp[j];
            }
        });
        store(ax, gx.raw());
        store(ak, gk.raw());
        t.accumulate(x, gx);
        t.accumulate(k, gk);
    });
}

Var transposed_conv2d(Var x, Var k, std::size_t stride) {
    require_same_tape(x, k, "transposed_conv2d");
    const Tensor& v = x.value();
    const Tensor& w = k.value();
    require_rank(v, 3, "transposed_conv2d", "input");
    require_rank(w, 4, "transposed_conv2d", "kernel");
    if (w.dim(3) != v.dim(2)) {
        throw DimensionError("transposed_conv2d: kernel " + shape_str(w.shape()) + " expects " +
                             std::to_string(w.dim(3)) + " input channels, input is " + shape_str(v.shape()));
    }
    if (stride < 1) throw ConfigError("transposed_conv2d: stride must be >= 1");
    // The forward map is the input-adjoint of a same-padded strided conv over
    // the enlarged grid, whose kernel maps Cout -> Cin.
    const std::size_t cout = w.dim(2), cin = w.dim(3);
    const std::size_t oh = v.dim(0) * stride, ow = v.dim(1) * stride;
    const auto g = detail::conv_geometry(oh, ow, w.dim(0), w.dim(1), stride, Padding::Same);
    if (g.out_h != v.dim(0) || g.out_w != v.dim(1)) {
        throw Error("transposed_conv2d: internal geometry does not scale " + shape_str(v.shape()) + " by " +
                    std::to_string(stride));
    }
    Tensor out({oh, ow, cout});
    detail::conv_backward_input(g, v.raw(), cout, w.raw(), cin, out.raw());
    return x.tape->record("transposed_conv2d", std::move(out), {x, k}, [x, k, g, cin, cout](Tape& t, const Tensor& gy, const Tensor&) {
        if (x.requires_grad()) {
            Tensor gx(x.shape());
            detail::conv_forward(g, gy.raw(), cout, k.value().raw(), cin, gx.raw());
            t.accumulate(x, gx);
        }
        if (k.requires_grad()) {
            Tensor gk(k.shape());
            detail::conv_backward_kernel(g, gy.raw(), cout, x.value().raw(), cin, gk.raw());
            t.accumulate(k, gk);
        }
    });
}

namespace {
struct Lerp {
    std::size_t i0, i1;
    float w;
};

std::vector<Lerp> half_pixel_taps(std::size_t in, std::size_t out, std::size_t factor) {
    std::vector<Lerp> taps(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        auto i0 = static_cast<std::size_t>(std::floor(src));
        taps[o] = {i0, std::min(i0 + 1, in - 1), static_cast<float>(src - static_cast<double>(i0))};
    }
    return taps;
}
}  // namespace

Var upsample(Var x, std::size_t factor) {
    const Tensor& v = x.value();
    require_rank(v, 3, "upsample", "input");
    if (factor != 2 && factor != 4) throw ConfigError("upsample: factor must be 2 or 4, got " + std::to_string(factor));
    const std::size_t h = v.dim(0), w = v.dim(1), c = v.dim(2);
    const std::size_t oh = h * factor, ow = w * factor;
    auto ty = half_pixel_taps(h, oh, factor);
    auto tx = half_pixel_taps(w, ow, factor);
    Tensor out({oh, ow, c});
    for (std::size_t oy = 0; oy < oh; ++oy) {
        const auto& yy = ty[oy];
        for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto& xx = tx[ox];
            const float* p00 = v.raw() + (yy.i0 * w + xx.i0) * c;
            const float* p01 = v.raw() + (yy.i0 * w + xx.i1) * c;
            const float* p10 = v.raw() + (yy.i1 * w + xx.i0) * c;
            const float* p11 = v.raw() + (yy.i1 * w + xx.i1) * c;
            float* q = out.raw() + (oy * ow + ox) * c;
            // Lerp form: constant neighborhoods reproduce the constant exactly.
            for (std::size_t j = 0; j < c; ++j) {
                const float top = p00[j] + xx.w * (p01[j] - p00[j]);
                const float bot = p10[j] + xx.w * (p11[j] - p10[j]);
                q[j] = top + yy.w * (bot - top);
            }
        }
    }
    return x.tape->record("upsample", std::move(out), {x},
                          [x, ty = std::move(ty), tx = std::move(tx), w, c, oh, ow](Tape& t, const Tensor& g, const Tensor&) {
                              Tensor gx(x.shape());
                              for (std::size_t oy = 0; oy < oh; ++oy) {
                                  const auto& yy = ty[oy];
                                  for (std::size_t ox = 0; ox < ow; ++ox) {
                                      const auto& xx = tx[ox];
                                      const float* q = g.raw() + (oy * ow + ox) * c;
                                      axpy((1 - yy.w) * (1 - xx.w), q, gx.raw() + (yy.i0 * w + xx.i0) * c, c);
                                      axpy((1 - yy.w) * xx.w, q, gx.raw() + (yy.i0 * w + xx.i1) * c, c);
                                      axpy(yy.w * (1 - xx.w), q, gx.raw() + (yy.i1 * w + xx.i0) * c, c);
                                      axpy(yy.w * xx.w, q, gx.raw() + (yy.i1 * w + xx.i1) * c, c);
                                  }
                              }
                              t.accumulate(x, gx);
                          });
}

Var attention_mask(Var q, Var k, float scale) {
    require_same_tape(q, k, "attention_mask");
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    require_rank(qv, 2, "attention_mask", "queries");
    require_rank(kv, 2, "attention_mask", "keys");
    if (qv.dim(1) != kv.dim(1)) {
        throw DimensionError("attention_mask: query " + shape_str(qv.shape()) + " and key " + shape_str(kv.shape()) +
                             " widths differ");
    }
    const std::size_t n = qv.dim(0), m = kv.dim(0), d = qv.dim(1);
    Tensor a({n, m});
    for (std::size_t i = 0; i < n; ++i) {
        float* row = a.raw() + i * m;
        float mx = -std::numeric_limits<float>::infinity();
        for (std::size_t j = 0; j < m; ++j) {
            row[j] = dotf(qv.raw() + i * d, kv.raw() + j * d, d) * scale;
            mx = std::max(mx, row[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            row[j] = std::exp(row[j] - mx);
            total += row[j];
        }
        const auto inv = static_cast<float>(1.0 / total);
        for (std::size_t j = 0; j < m; ++j) row[j] *= inv;
    }
    return q.tape->record("attention_mask", std::move(a), {q, k}, [q, k, n, m, d, scale](Tape& t, const Tensor& g, const Tensor& a) {
        const Tensor& qv = q.value();
        const Tensor& kv = k.value();
        Tensor gs({n, m});
        for (std::size_t i = 0; i < n; ++i) {
            const float* ar = a.raw() + i * m;
            const float* gr = g.raw() + i * m;
            double dot = 0.0;
            for (std::size_t j = 0; j < m; ++j) dot += static_cast<double>(gr[j]) * ar[j];
            for (std::size_t j = 0; j < m; ++j) gs[i * m + j] = ar[j] * (gr[j] - static_cast<float>(dot)) * scale;
        }
        if (q.requires_grad()) {
            Tensor gq({n, d});
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < m; ++j) axpy(gs[i * m + j], kv.raw() + j * d, gq.raw() + i * d, d);
            }
            t.accumulate(q, gq);
        }
        if (k.requires_grad()) {
            Tensor gk({m, d});
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < m; ++j) axpy(gs[i * m + j], qv.raw() + i * d, gk.raw() + j * d, d);
            }
            t.accumulate(k, gk);
        }
    });
}

}  // namespace metapolyp::ops
