#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "metapolyp/netpbm.hpp"
#include "metapolyp/rng.hpp"
#include "metapolyp/tensor.hpp"

namespace metapolyp {

/// One image/mask pair. image: H x W x 3 in [-1, 1]; mask: H x W x 1 in {0, 1}.
struct Sample {
    std::string id;
    Tensor image;
    Tensor mask;

    friend bool operator==(const Sample&, const Sample&) = default;
};

/// Throws DimensionError or UsageError if the Sample invariants do not hold.
void validate_sample(const Sample& s);

/// v / 127.5 - 1 per channel; the raster must be RGB.
Tensor image_from_raster(const Raster& r);
/// Gray values >= 128 become 1.
Tensor mask_from_raster(const Raster& r);
Raster raster_from_image(const Tensor& image);
/// Binary mask to 0/255.
Raster raster_from_mask(const Tensor& mask);
/// Probability map in [0,1] to 0..255.
Raster raster_from_probability(const Tensor& p);

/// Half-pixel-centered resampling of an H x W x C tensor.
Tensor resize_bilinear(const Tensor& t, std::size_t height, std::size_t width);
Tensor resize_nearest(const Tensor& t, std::size_t height, std::size_t width);

/// Reads images_dir/*.ppm with masks_dir/<stem>.pgm, resized to height x width.
/// Samples are ordered by stem. An unpaired file throws PairingError.
std::vector<Sample> load_dataset(const std::filesystem::path& images_dir, const std::filesystem::path& masks_dir,
                                 std::size_t height, std::size_t width);

/// Writes dir/images/<id>.ppm and dir/masks/<id>.pgm.
void write_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples);

struct SplitSpec {
    double train = 0.6;
    double val = 0.2;
    double test = 0.2;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Index partition: val and test get floor(ratio * n), train takes the rest.
struct SplitIndices {
    std::vector<std::size_t> train, val, test;
};
SplitIndices split_indices(std::size_t n, const SplitSpec& spec);

struct Split {
    std::vector<Sample> train, val, test;
};
Split split(const std::vector<Sample>& samples, const SplitSpec& spec);

/// Synthetic endoscopy-like samples: textured background with one to three
/// elliptical blobs; the mask is the blob support. hw must be a multiple of 32.
std::vector<Sample> synth_polyp(Rng& rng, std::size_t hw, std::size_t n);

}  // namespace metapolyp
