#include "metapolyp/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "metapolyp/error.hpp"

namespace metapolyp {

AugmentConfig AugmentConfig::disabled() {
    AugmentConfig c;
    c.p_flip_h = c.p_flip_v = c.p_rotate = c.p_center_crop = c.p_grid = c.p_cutout = c.p_cutmix = 0.0;
    return c;
}

void AugmentConfig::validate() const {
    for (double p : {p_flip_h, p_flip_v, p_rotate, p_center_crop, p_grid, p_cutout, p_cutmix}) {
        if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("augmentation probabilities must lie in [0, 1]");
    }
    if (!(rotate_max_deg >= 0.0)) throw ConfigError("rotate_max_deg must be non-negative");
    if (!(crop_min > 0.0 && crop_min <= crop_max && crop_max <= 1.0)) {
        throw ConfigError("crop fractions need 0 < crop_min <= crop_max <= 1");
    }
    if (grid_cells == 0) throw ConfigError("grid_cells must be positive");
    if (!(grid_magnitude >= 0.0 && grid_magnitude < 1.0)) throw ConfigError("grid_magnitude must lie in [0, 1)");
    if (cutout_min_holes > cutout_max_holes) throw ConfigError("cutout_min_holes exceeds cutout_max_holes");
    if (!(cutout_min_frac > 0.0 && cutout_min_frac <= cutout_max_frac && cutout_max_frac <= 1.0)) {
        throw ConfigError("cutout fractions need 0 < min <= max <= 1");
    }
    if (!(cutmix_min_area > 0.0 && cutmix_min_area <= cutmix_max_area && cutmix_max_area <= 1.0)) {
        throw ConfigError("cutmix areas need 0 < min <= max <= 1");
    }
}

namespace {

constexpr float kImageFill = -1.0f;

template <typename F>
Tensor remap_exact(const Tensor& t, F&& source) {
    const std::size_t h = t.dim(0), w = t.dim(1), c = t.dim(2);
    Tensor out(t.shape());
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const auto [sy, sx] = source(y, x);
            for (std::size_t k = 0; k < c; ++k) out.at(y, x, k) = t.at(sy, sx, k);
        }
    }
    return out;
}

// Resamples t at fractional source positions. Taps outside the image read
// `fill`; `nearest` rounds to the closest source pixel instead of blending.
template <typename F>
Tensor warp(const Tensor& t, F&& source, bool nearest, float fill) {
    const std::size_t h = t.dim(0), w = t.dim(1), c = t.dim(2);
    const auto ih = static_cast<long>(h), iw = static_cast<long>(w);
    Tensor out(t.shape());
    auto tap = [&](long y, long x, std::size_t k) -> double {
        if (y < 0 || x < 0 || y >= ih || x >= iw) return fill;
        return t.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), k);
    };
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const auto [sy, sx] = source(static_cast<double>(y), static_cast<double>(x));
            if (nearest) {
                const long ny = std::lround(sy), nx = std::lround(sx);
                for (std::size_t k = 0; k < c; ++k) out.at(y, x, k) = static_cast<float>(tap(ny, nx, k));
                continue;
            }
            const double fy0 = std::floor(sy), fx0 = std::floor(sx);
            const double fy = sy - fy0, fx = sx - fx0;
            const auto y0 = static_cast<long>(fy0), x0 = static_cast<long>(fx0);
            for (std::size_t k = 0; k < c; ++k) {
                const double a = tap(y0, x0, k), b = tap(y0, x0 + 1, k);
                const double d = tap(y0 + 1, x0, k), e = tap(y0 + 1, x0 + 1, k);
                const double top = a + fx * (b - a);
                const double bot = d + fx * (e - d);
                out.at(y, x, k) = static_cast<float>(top + fy * (bot - top));
            }
        }
    }
    return out;
}

template <typename F>
Sample warp_sample(const Sample& s, F&& source) {
    validate_sample(s);
    return {s.id, warp(s.image, source, false, kImageFill), warp(s.mask, source, true, 0.0f)};
}

// Cell boundaries of a jittered 1-D grid spanning [0, extent - 1].
std::vector<double> jittered_bounds(std::size_t cells, double magnitude, double extent, Rng& rng) {
    std::vector<double> steps(cells);
    double total = 0.0;
    for (auto& s : steps) {
        s = 1.0 + rng.uniform(-magnitude, magnitude);
        total += s;
    }
    std::vector<double> bounds(cells + 1, 0.0);
    for (std::size_t i = 0; i < cells; ++i) bounds[i + 1] = bounds[i] + steps[i] * (extent - 1.0) / total;
    bounds[cells] = extent - 1.0;
    return bounds;
}

// Maps a destination coordinate through uniform-to-jittered piecewise-linear cells.
double grid_map(double v, const std::vector<double>& src, double extent) {
    const std::size_t cells = src.size() - 1;
    if (extent <= 1.0) return v;
    const double cell = (extent - 1.0) / static_cast<double>(cells);
    const std::size_t i = std::min(static_cast<std::size_t>(v / cell), cells - 1);
    const double t = (v - static_cast<double>(i) * cell) / cell;
    return src[i] + t * (src[i + 1] - src[i]);
}

}  // namespace

Sample flip_h(const Sample& s) {
    validate_sample(s);
    const std::size_t w = s.image.dim(1);
    auto f = [w](std::size_t y, std::size_t x) { return std::pair{y, w - 1 - x}; };
    return {s.id, remap_exact(s.image, f), remap_exact(s.mask, f)};
}

Sample flip_v(const Sample& s) {
    validate_sample(s);
    const std::size_t h = s.image.dim(0);
    auto f = [h](std::size_t y, std::size_t x) { return std::pair{h - 1 - y, x}; };
    return {s.id, remap_exact(s.image, f), remap_exact(s.mask, f)};
}

Sample rotate(const Sample& s, double degrees) {
    validate_sample(s);
    if (degrees == 0.0) return s;
    const double t = degrees * std::numbers::pi / 180.0;
    const double cs = std::cos(t), sn = std::sin(t);
    const double cy = (static_cast<double>(s.image.dim(0)) - 1.0) / 2.0;
    const double cx = (static_cast<double>(s.image.dim(1)) - 1.0) / 2.0;
    // Inverse map: a destination pixel reads the source rotated back by -t.
    return warp_sample(s, [=](double y, double x) {
        const double dy = y - cy, dx = x - cx;
        return std::pair{cy + sn * dx + cs * dy, cx + cs * dx - sn * dy};
    });
}

Sample random_rotate(const Sample& s, Rng& rng, const AugmentConfig& cfg) {
    return rotate(s, rng.uniform(-cfg.rotate_max_deg, cfg.rotate_max_deg));
}

Sample center_crop(const Sample& s, double fraction) {
    validate_sample(s);
    const std::size_t h = s.image.dim(0), w = s.image.dim(1);
    const auto ch = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(h)));
    const auto cw = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(w)));
    if (!(fraction > 0.0 && fraction <= 1.0) || ch == 0 || cw == 0) {
        throw ConfigError("center_crop: degenerate crop window for fraction " + std::to_string(fraction));
    }
    if (ch == h && cw == w) return s;
    const std::size_t top = (h - ch) / 2, left = (w - cw) / 2;
    auto crop = [&](const Tensor& t) {
        const std::size_t c = t.dim(2);
        Tensor out({ch, cw, c});
        for (std::size_t y = 0; y < ch; ++y) {
            for (std::size_t x = 0; x < cw; ++x) {
                for (std::size_t k = 0; k < c; ++k) out.at(y, x, k) = t.at(top + y, left + x, k);
            }
        }
        return out;
    };
    return {s.id, resize_bilinear(crop(s.image), h, w), resize_nearest(crop(s.mask), h, w)};
}

Sample random_center_crop(const Sample& s, Rng& rng, const AugmentConfig& cfg) {
    return center_crop(s, rng.uniform(cfg.crop_min, cfg.crop_max));
}

Sample grid_distortion(const Sample& s, Rng& rng, const AugmentConfig& cfg) {
    validate_sample(s);
    const double h = static_cast<double>(s.image.dim(0)), w = static_cast<double>(s.image.dim(1));
    const auto ys = jittered_bounds(cfg.grid_cells, cfg.grid_magnitude, h, rng);
    const auto xs = jittered_bounds(cfg.grid_cells, cfg.grid_magnitude, w, rng);
    return warp_sample(s, [&](double y, double x) { return std::pair{grid_map(y, ys, h), grid_map(x, xs, w)}; });
}

Sample apply_cutout(const Sample& s, const std::vector<Rect>& holes, float fill) {
    validate_sample(s);
    Sample out = s;
    const std::size_t h = s.image.dim(0), w = s.image.dim(1);
    for (const auto& r : holes) {
        const std::size_t y1 = std::min(h, r.y + r.h), x1 = std::min(w, r.x + r.w);
        for (std::size_t y = r.y; y < y1; ++y) {
            for (std::size_t x = r.x; x < x1; ++x) {
                for (std::size_t k = 0; k < 3; ++k) out.image.at(y, x, k) = fill;
                out.mask.at(y, x, 0) = 0.0f;
            }
        }
    }
    return out;
}

Sample cutout(const Sample& s, Rng& rng, const AugmentConfig& cfg) {
    validate_sample(s);
    const std::size_t h = s.image.dim(0), w = s.image.dim(1);
    const auto count = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(cfg.cutout_min_holes),
                                                                static_cast<std::int64_t>(cfg.cutout_max_holes)));
    std::vector<Rect> holes;
    for (std::size_t i = 0; i < count; ++i) {
        const double frac = rng.uniform(cfg.cutout_min_frac, cfg.cutout_max_frac);
        const auto side = std::clamp<std::size_t>(
            static_cast<std::size_t>(std::lround(frac * static_cast<double>(std::min(h, w)))), 1, std::min(h, w));
        const auto y = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(h - side)));
        const auto x = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(w - side)));
        holes.push_back({y, x, side, side});
    }
    return apply_cutout(s, holes, cfg.cutout_fill);
}

Sample apply_cutmix(const Sample& a, const Sample& b, const Rect& patch) {
    validate_sample(a);
    validate_sample(b);
    if (a.image.shape() != b.image.shape()) {
        throw DimensionError("cutmix: samples have different extents " + shape_str(a.image.shape()) + " and " +
                             shape_str(b.image.shape()));
    }
    Sample out = a;
    const std::size_t h = a.image.dim(0), w = a.image.dim(1);
    const std::size_t y1 = std::min(h, patch.y + patch.h), x1 = std::min(w, patch.x + patch.w);
    for (std::size_t y = patch.y; y < y1; ++y) {
        for (std::size_t x = patch.x; x < x1; ++x) {
            for (std::size_t k = 0; k < 3; ++k) out.image.at(y, x, k) = b.image.at(y, x, k);
            out.mask.at(y, x, 0) = b.mask.at(y, x, 0);
        }
    }
    return out;
}

Sample cutmix(const Sample& a, const Sample& b, Rng& rng, const AugmentConfig& cfg) {
    validate_sample(a);
    const std::size_t h = a.image.dim(0), w = a.image.dim(1);
    const double side = std::sqrt(rng.uniform(cfg.cutmix_min_area, cfg.cutmix_max_area));
    const auto ph = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(side * static_cast<double>(h))), 1, h);
    const auto pw = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(side * static_cast<double>(w))), 1, w);
    const auto y = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(h - ph)));
    const auto x = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(w - pw)));
    return apply_cutmix(a, b, {y, x, ph, pw});
}

Sample augment(const Sample& s, const std::vector<Sample>& pool, Rng& rng, const AugmentConfig& cfg) {
    Sample out = s;
    if (rng.bernoulli(cfg.p_flip_h)) out = flip_h(out);
    if (rng.bernoulli(cfg.p_flip_v)) out = flip_v(out);
    if (rng.bernoulli(cfg.p_rotate)) out = random_rotate(out, rng, cfg);
    if (rng.bernoulli(cfg.p_center_crop)) out = random_center_crop(out, rng, cfg);
    if (rng.bernoulli(cfg.p_grid)) out = grid_distortion(out, rng, cfg);
    if (rng.bernoulli(cfg.p_cutout)) out = cutout(out, rng, cfg);
    if (!pool.empty() && rng.bernoulli(cfg.p_cutmix)) {
        const auto& donor = pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))];
        out = cutmix(out, donor, rng, cfg);
    }
    return out;
}

Augmenter::Augmenter(AugmentConfig cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) { cfg_.validate(); }

Sample Augmenter::operator()(const std::vector<Sample>& pool, std::size_t index, std::uint64_t epoch) const {
    if (index >= pool.size()) throw UsageError("augmenter: sample index out of range");
    Rng rng = Rng::derive(seed_, mix_seed(epoch) ^ index);
    return augment(pool[index], pool, rng, cfg_);
}

}  // namespace metapolyp
