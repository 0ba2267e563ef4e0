#include "metapolyp/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>

#include "metapolyp/error.hpp"

namespace metapolyp {

namespace fs = std::filesystem;

void validate_sample(const Sample& s) {
    if (s.image.rank() != 3 || s.image.dim(2) != 3) {
        throw DimensionError("sample " + s.id + ": image must be H x W x 3, got " + shape_str(s.image.shape()));
    }
    if (s.mask.shape() != Shape{s.image.dim(0), s.image.dim(1), 1}) {
        throw DimensionError("sample " + s.id + ": mask " + shape_str(s.mask.shape()) + " does not match image " +
                             shape_str(s.image.shape()));
    }
    for (float v : s.mask.data()) {
        if (v != 0.0f && v != 1.0f) throw UsageError("sample " + s.id + ": mask is not binary");
    }
}

Tensor image_from_raster(const Raster& r) {
    if (r.channels != 3) throw DimensionError("expected an RGB image, got " + std::to_string(r.channels) + " channel(s)");
    Tensor t({r.height, r.width, 3});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(r.pixels[i] / 127.5 - 1.0);
    return t;
}

Tensor mask_from_raster(const Raster& r) {
    if (r.channels != 1) throw DimensionError("expected a gray mask, got " + std::to_string(r.channels) + " channels");
    Tensor t({r.height, r.width, 1});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = r.pixels[i] >= 128 ? 1.0f : 0.0f;
    return t;
}

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0l, 255l)); }

Raster raster_like(const Tensor& t, std::size_t channels, const char* what) {
    if (t.rank() != 3 || t.dim(2) != channels) {
        throw DimensionError(std::string(what) + " must be H x W x " + std::to_string(channels) + ", got " +
                             shape_str(t.shape()));
    }
    return Raster{t.dim(1), t.dim(0), channels, std::vector<std::uint8_t>(t.size())};
}

}  // namespace

Raster raster_from_image(const Tensor& image) {
    auto r = raster_like(image, 3, "image");
    for (std::size_t i = 0; i < image.size(); ++i) r.pixels[i] = to_byte((image[i] + 1.0) * 127.5);
    return r;
}

Raster raster_from_mask(const Tensor& mask) {
    auto r = raster_like(mask, 1, "mask");
    for (std::size_t i = 0; i < mask.size(); ++i) r.pixels[i] = mask[i] >= 0.5f ? 255 : 0;
    return r;
}

Raster raster_from_probability(const Tensor& p) {
    auto r = raster_like(p, 1, "probability map");
    for (std::size_t i = 0; i < p.size(); ++i) r.pixels[i] = to_byte(p[i] * 255.0);
    return r;
}

namespace {

void require_hwc(const Tensor& t, std::size_t height, std::size_t width, const char* op) {
    if (t.rank() != 3) throw DimensionError(std::string(op) + ": expected H x W x C, got " + shape_str(t.shape()));
    if (height == 0 || width == 0) throw DimensionError(std::string(op) + ": target extents must be positive");
}

// Source coordinate of output index i under half-pixel alignment.
double source_coord(std::size_t i, std::size_t in, std::size_t out) {
    return (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
}

}  // namespace

Tensor resize_bilinear(const Tensor& t, std::size_t height, std::size_t width) {
    require_hwc(t, height, width, "resize_bilinear");
    const std::size_t h = t.dim(0), w = t.dim(1), c = t.dim(2);
    if (h == height && w == width) return t;
    Tensor out({height, width, c});
    for (std::size_t y = 0; y < height; ++y) {
        const double sy = std::clamp(source_coord(y, h, height), 0.0, static_cast<double>(h - 1));
        const auto y0 = static_cast<std::size_t>(sy);
        const std::size_t y1 = std::min(y0 + 1, h - 1);
        const double fy = sy - static_cast<double>(y0);
        for (std::size_t x = 0; x < width; ++x) {
            const double sx = std::clamp(source_coord(x, w, width), 0.0, static_cast<double>(w - 1));
            const auto x0 = static_cast<std::size_t>(sx);
            const std::size_t x1 = std::min(x0 + 1, w - 1);
            const double fx = sx - static_cast<double>(x0);
            for (std::size_t k = 0; k < c; ++k) {
                const double top = t.at(y0, x0, k) + fx * (t.at(y0, x1, k) - t.at(y0, x0, k));
                const double bot = t.at(y1, x0, k) + fx * (t.at(y1, x1, k) - t.at(y1, x0, k));
                out.at(y, x, k) = static_cast<float>(top + fy * (bot - top));
            }
        }
    }
    return out;
}

Tensor resize_nearest(const Tensor& t, std::size_t height, std::size_t width) {
    require_hwc(t, height, width, "resize_nearest");
    const std::size_t h = t.dim(0), w = t.dim(1), c = t.dim(2);
    if (h == height && w == width) return t;
    Tensor out({height, width, c});
    for (std::size_t y = 0; y < height; ++y) {
        const std::size_t sy = std::min(y * h / height, h - 1);
        for (std::size_t x = 0; x < width; ++x) {
            const std::size_t sx = std::min(x * w / width, w - 1);
            for (std::size_t k = 0; k < c; ++k) out.at(y, x, k) = t.at(sy, sx, k);
        }
    }
    return out;
}

namespace {

std::map<std::string, fs::path> files_by_stem(const fs::path& dir, const std::string& ext) {
    if (!fs::is_directory(dir)) throw Error("not a directory: " + dir.string());
    std::map<std::string, fs::path> out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ext) out[entry.path().stem().string()] = entry.path();
    }
    return out;
}

}  // namespace

std::vector<Sample> load_dataset(const fs::path& images_dir, const fs::path& masks_dir, std::size_t height,
                                 std::size_t width) {
    const auto images = files_by_stem(images_dir, ".ppm");
    const auto masks = files_by_stem(masks_dir, ".pgm");
    for (const auto& [stem, path] : images) {
        if (!masks.count(stem)) throw PairingError("image " + path.string() + " has no mask " + stem + ".pgm");
    }
    for (const auto& [stem, path] : masks) {
        if (!images.count(stem)) throw PairingError("mask " + path.string() + " has no image " + stem + ".ppm");
    }
    std::vector<Sample> out;
    out.reserve(images.size());
    for (const auto& [stem, path] : images) {
        Sample s;
        s.id = stem;
        s.image = resize_bilinear(image_from_raster(read_pnm(path)), height, width);
        s.mask = resize_nearest(mask_from_raster(read_pnm(masks.at(stem))), height, width);
        out.push_back(std::move(s));
    }
    return out;
}

void write_dataset(const fs::path& dir, const std::vector<Sample>& samples) {
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
    for (const auto& s : samples) {
        validate_sample(s);
        write_pnm(dir / "images" / (s.id + ".ppm"), raster_from_image(s.image));
        write_pnm(dir / "masks" / (s.id + ".pgm"), raster_from_mask(s.mask));
    }
}

void SplitSpec::validate() const {
    for (double r : {train, val, test}) {
        if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("split ratios must lie in [0, 1]");
    }
    if (std::fabs(train + val + test - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
}

SplitIndices split_indices(std::size_t n, const SplitSpec& spec) {
    spec.validate();
    if (n < 5) throw UsageError("split needs at least 5 samples, got " + std::to_string(n));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(spec.seed);
    rng.shuffle(order);
    // A tiny epsilon keeps exact products such as 0.2 * 1450 from flooring down.
    const auto n_val = static_cast<std::size_t>(std::floor(spec.val * static_cast<double>(n) + 1e-9));
    const auto n_test = static_cast<std::size_t>(std::floor(spec.test * static_cast<double>(n) + 1e-9));
    SplitIndices out;
    const std::size_t n_train = n - n_val - n_test;
    out.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                   order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    out.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
    return out;
}

Split split(const std::vector<Sample>& samples, const SplitSpec& spec) {
    const auto idx = split_indices(samples.size(), spec);
    Split out;
    for (auto i : idx.train) out.train.push_back(samples[i]);
    for (auto i : idx.val) out.val.push_back(samples[i]);
    for (auto i : idx.test) out.test.push_back(samples[i]);
    return out;
}

namespace {

struct Blob {
    double cy, cx, ry, rx, cos_t, sin_t;

    // Squared elliptical radius; <= 1 inside.
    double radius2(double y, double x) const {
        const double dy = y - cy, dx = x - cx;
        const double u = (dx * cos_t + dy * sin_t) / rx;
        const double v = (-dx * sin_t + dy * cos_t) / ry;
        return u * u + v * v;
    }
};

struct Wave {
    double fy, fx, phase, amp;
};

std::vector<Wave> random_waves(Rng& rng, std::size_t count, double min_cycles, double max_cycles, double amp,
                               double hw) {
    std::vector<Wave> waves;
    for (std::size_t i = 0; i < count; ++i) {
        const double cycles = rng.uniform(min_cycles, max_cycles);
        const double angle = rng.uniform(0.0, std::numbers::pi);
        const double k = 2.0 * std::numbers::pi * cycles / hw;
        waves.push_back({k * std::sin(angle), k * std::cos(angle), rng.uniform(0.0, 2.0 * std::numbers::pi),
                         amp * rng.uniform(0.5, 1.0)});
    }
    return waves;
}

double wave_sum(const std::vector<Wave>& waves, double y, double x) {
    double s = 0.0;
    for (const auto& w : waves) s += w.amp * std::sin(w.fy * y + w.fx * x + w.phase);
    return s;
}

Sample synth_one(Rng& rng, std::size_t hw, const std::string& id) {
    const double n = static_cast<double>(hw);
    const std::array<double, 3> tissue{0.78 + rng.uniform(-0.05, 0.05), 0.45 + rng.uniform(-0.05, 0.05),
                                       0.40 + rng.uniform(-0.05, 0.05)};
    const std::array<double, 3> polyp{0.88 + rng.uniform(-0.05, 0.05), 0.58 + rng.uniform(-0.06, 0.06),
                                      0.48 + rng.uniform(-0.05, 0.05)};
    const auto background = random_waves(rng, 4, 1.0, 4.0, 0.05, n);
    const auto fine = random_waves(rng, 3, 8.0, 14.0, 0.04, n);

    std::vector<Blob> blobs(static_cast<std::size_t>(rng.uniform_int(1, 3)));
    for (auto& b : blobs) {
        const double t = rng.uniform(0.0, std::numbers::pi);
        b = {rng.uniform(0.25, 0.75) * n, rng.uniform(0.25, 0.75) * n, rng.uniform(0.08, 0.22) * n,
             rng.uniform(0.08, 0.22) * n, std::cos(t), std::sin(t)};
    }

    Sample s;
    s.id = id;
    s.image = Tensor({hw, hw, 3});
    s.mask = Tensor({hw, hw, 1});
    const double c = (n - 1.0) / 2.0;
    for (std::size_t y = 0; y < hw; ++y) {
        for (std::size_t x = 0; x < hw; ++x) {
            const double py = static_cast<double>(y), px = static_cast<double>(x);
            double r2 = 2.0;
            for (const auto& b : blobs) r2 = std::min(r2, b.radius2(py, px));
            const bool inside = r2 <= 1.0;
            const double dist2 = ((py - c) * (py - c) + (px - c) * (px - c)) / (c * c);
            const double vignette = 1.0 - 0.25 * dist2;
            const double noise = rng.uniform(-0.03, 0.03);
            for (std::size_t k = 0; k < 3; ++k) {
                double v;
                if (inside) {
                    // Dome shading plus a fine surface texture.
                    v = polyp[k] * (0.85 + 0.25 * (1.0 - r2)) + wave_sum(fine, py, px);
                } else {
                    v = tissue[k] + wave_sum(background, py, px);
                }
                v = v * vignette + noise;
                s.image.at(y, x, k) = static_cast<float>(std::clamp(2.0 * v - 1.0, -1.0, 1.0));
            }
            s.mask.at(y, x, 0) = inside ? 1.0f : 0.0f;
        }
    }
    return s;
}

}  // namespace

std::vector<Sample> synth_polyp(Rng& rng, std::size_t hw, std::size_t n) {
    if (hw == 0 || hw % 32 != 0) throw ConfigError("synth_polyp: size must be a positive multiple of 32");
    std::vector<Sample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "synth_%04zu", i);
        Rng local(mix_seed(rng.next_u64()));
        out.push_back(synth_one(local, hw, id));
    }
    return out;
}

}  // namespace metapolyp
