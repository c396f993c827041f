#pragma once

#include <cstdint>
#include <random>

#include "r2mf/data.hpp"

namespace r2mf {

struct AugmentationConfig {
    double flip_prob = 0.5;
    double rotation_deg = 7.0;  // uniform in [-rotation_deg, rotation_deg]
    double scale_min = 0.9, scale_max = 1.1;
    double translate_frac = 0.05;  // per axis, fraction of the image side
    double gamma_min = 0.8, gamma_max = 1.2;
    double noise_sigma = 0.01;  // sigma drawn uniformly in [0, noise_sigma]

    void validate() const;
};

/// One draw of every transform parameter.
struct AugmentParams {
    bool flip = false;
    double angle_deg = 0.0;
    double scale = 1.0;
    double tx = 0.0, ty = 0.0;  // pixels
    double gamma = 1.0;
    double noise_sigma = 0.0;
    std::uint64_t noise_seed = 0;

    bool is_geometric_identity() const { return !flip && angle_deg == 0.0 && scale == 1.0 && tx == 0.0 && ty == 0.0; }
};

AugmentParams draw_augmentation(const AugmentationConfig& cfg, std::size_t size, std::mt19937_64& rng);

/// Inverse map from output pixel centers to source pixel centers:
/// src = A * (x, y, 1). Flip is applied before scale, rotation and translation,
/// all about the image center.
struct Affine {
    double a[2][3];
};
Affine inverse_affine(const AugmentParams& p, std::size_t h, std::size_t w);

SegmentationSample apply_augmentation(const SegmentationSample& s, const AugmentParams& p);
SegmentationSample augment(const SegmentationSample& s, const AugmentationConfig& cfg, std::uint64_t draw_seed);

}  // namespace r2mf
