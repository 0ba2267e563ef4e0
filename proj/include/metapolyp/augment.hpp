#pragma once

#include <cstdint>
#include <vector>

#include "metapolyp/data.hpp"
#include "metapolyp/rng.hpp"

namespace metapolyp {

struct AugmentConfig {
    double p_flip_h = 0.5;
    double p_flip_v = 0.5;
    double p_rotate = 0.5;
    double p_center_crop = 0.5;
    double p_grid = 0.5;
    double p_cutout = 0.5;
    double p_cutmix = 0.5;

    /// Rotation angle drawn uniformly from [-rotate_max_deg, rotate_max_deg].
    double rotate_max_deg = 35.0;
    /// Side fraction of the centered crop window, before resizing back.
    double crop_min = 0.7;
    double crop_max = 0.95;
    std::size_t grid_cells = 5;
    /// Relative jitter of each grid cell's width; must be below 1.
    double grid_magnitude = 0.3;
    std::size_t cutout_min_holes = 1;
    std::size_t cutout_max_holes = 2;
    /// Square hole side as a fraction of the smaller image extent.
    double cutout_min_frac = 0.05;
    double cutout_max_frac = 0.15;
    /// Image value written inside holes. -1 is black in pixel terms; 0 is
    /// zero in the normalized space.
    float cutout_fill = -1.0f;
    double cutmix_min_area = 0.1;
    double cutmix_max_area = 0.4;

    /// Every probability zero: the pipeline returns its input unchanged.
    static AugmentConfig disabled();

    void validate() const;
};

struct Rect {
    std::size_t y = 0, x = 0, h = 0, w = 0;
};

Sample flip_h(const Sample& s);
Sample flip_v(const Sample& s);

/// Counter-clockwise rotation about the image center. Uncovered image pixels
/// take -1, uncovered mask pixels 0.
Sample rotate(const Sample& s, double degrees);
Sample random_rotate(const Sample& s, Rng& rng, const AugmentConfig& cfg);

/// Crops the centered window of side fraction `fraction` and resizes it back.
Sample center_crop(const Sample& s, double fraction);
Sample random_center_crop(const Sample& s, Rng& rng, const AugmentConfig& cfg);

Sample grid_distortion(const Sample& s, Rng& rng, const AugmentConfig& cfg);

/// Holes are clipped to the image. Inside them the image becomes `fill`
/// and the mask 0.
Sample apply_cutout(const Sample& s, const std::vector<Rect>& holes, float fill);
Sample cutout(const Sample& s, Rng& rng, const AugmentConfig& cfg);

/// Copies `patch` of b's image and mask into a. Keeps a's id.
Sample apply_cutmix(const Sample& a, const Sample& b, const Rect& patch);
Sample cutmix(const Sample& a, const Sample& b, Rng& rng, const AugmentConfig& cfg);

/// Applies every enabled transform with its probability, in a fixed order;
/// CutMix draws its donor from `pool`.
Sample augment(const Sample& s, const std::vector<Sample>& pool, Rng& rng, const AugmentConfig& cfg);

/// Stateless pipeline: sample `index` of epoch `epoch` always gets the same
/// random stream, independent of evaluation order.
class Augmenter {
   public:
    Augmenter(AugmentConfig cfg, std::uint64_t seed);

    Sample operator()(const std::vector<Sample>& pool, std::size_t index, std::uint64_t epoch) const;
    const AugmentConfig& config() const noexcept { return cfg_; }

   private:
    AugmentConfig cfg_;
    std::uint64_t seed_;
};

}  // namespace metapolyp
