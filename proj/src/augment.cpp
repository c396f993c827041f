#include "r2mf/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace r2mf {

void AugmentationConfig::validate() const {
    auto require = [](bool ok, const char* msg) {
        if (!ok) throw std::invalid_argument(std::string("augmentation: ") + msg);
    };
    require(flip_prob >= 0 && flip_prob <= 1, "flip_prob must lie in [0,1]");
    require(rotation_deg >= 0 && rotation_deg < 180, "rotation_deg must lie in [0,180)");
    require(scale_min > 0 && scale_min <= scale_max, "need 0 < scale_min <= scale_max");
    require(translate_frac >= 0 && translate_frac < 0.5, "translate_frac must lie in [0,0.5)");
    require(gamma_min > 0 && gamma_min <= gamma_max, "need 0 < gamma_min <= gamma_max");
    require(noise_sigma >= 0, "noise_sigma must be non-negative");
}

AugmentParams draw_augmentation(const AugmentationConfig& cfg, std::size_t size, std::mt19937_64& rng) {
    cfg.validate();
    auto u = [&](double lo, double hi) { return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng); };
    AugmentParams p;
    p.flip = u(0.0, 1.0) < cfg.flip_prob;
    p.angle_deg = u(-cfg.rotation_deg, cfg.rotation_deg);
    p.scale = u(cfg.scale_min, cfg.scale_max);
    const double t = cfg.translate_frac * static_cast<double>(size);
    p.tx = u(-t, t);
    p.ty = u(-t, t);
    p.gamma = u(cfg.gamma_min, cfg.gamma_max);
    p.noise_sigma = u(0.0, cfg.noise_sigma);
    p.noise_seed = rng();
    return p;
}

Affine inverse_affine(const AugmentParams& p, std::size_t h, std::size_t w) {
    // Forward: x' = R(s * F(x - c)) + c + t. Inverse: x = F(R^T (x' - c - t) / s) + c.
    const double th = p.angle_deg * std::numbers::pi / 180.0;
    const double cs = std::cos(th) / p.scale, sn = std::sin(th) / p.scale;
    const double cx = (static_cast<double>(w) - 1.0) / 2.0, cy = (static_cast<double>(h) - 1.0) / 2.0;
    const double f = p.flip ? -1.0 : 1.0;
    // R^T = [[cos, sin], [-sin, cos]] in (x, y).
    const double ox = -(cx + p.tx), oy = -(cy + p.ty);
    Affine a{};
    a.a[0][0] = f * cs;
    a.a[0][1] = f * sn;
    a.a[0][2] = f * (cs * ox + sn * oy) + cx;
    a.a[1][0] = -sn;
    a.a[1][1] = cs;
    a.a[1][2] = -sn * ox + cs * oy + cy;
    return a;
}

SegmentationSample apply_augmentation(const SegmentationSample& s, const AugmentParams& p) {
    const Dims d = s.image.dims();
    if (d.n != 1 || d.c != 1 || s.mask.h != d.h || s.mask.w != d.w)
        throw std::invalid_argument("augment: image and mask must be (1,1,H,W) with equal size");
    SegmentationSample out = s;
    if (!p.is_geometric_identity()) {
        const Affine A = inverse_affine(p, d.h, d.w);
        const auto h = static_cast<long>(d.h), w = static_cast<long>(d.w);
        auto pixel = [&](long r, long c) -> double {
            return r < 0 || c < 0 || r >= h || c >= w ? 0.0 : s.image.at(0, 0, r, c);
        };
        for (long r = 0; r < h; ++r)
            for (long c = 0; c < w; ++c) {
                const double x = A.a[0][0] * c + A.a[0][1] * r + A.a[0][2];
                const double y = A.a[1][0] * c + A.a[1][1] * r + A.a[1][2];
                const double fx0 = std::floor(x), fy0 = std::floor(y);
                const auto x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
                const double fx = x - fx0, fy = y - fy0;
                const double v = (1 - fy) * ((1 - fx) * pixel(y0, x0) + fx * pixel(y0, x0 + 1)) +
                                 fy * ((1 - fx) * pixel(y0 + 1, x0) + fx * pixel(y0 + 1, x0 + 1));
                out.image.at(0, 0, r, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
                const long nr = std::lround(y), nc = std::lround(x);
                out.mask.at(r, c) = nr >= 0 && nc >= 0 && nr < h && nc < w && s.mask.at(nr, nc);
            }
    }
    if (p.gamma != 1.0)
        for (auto& v : out.image.data()) v = static_cast<float>(std::pow(static_cast<double>(v), p.gamma));
    if (p.noise_sigma > 0.0) {
        std::mt19937_64 rng(p.noise_seed);
        std::normal_distribution<double> noise(0.0, p.noise_sigma);
        for (auto& v : out.image.data()) v = static_cast<float>(std::clamp(v + noise(rng), 0.0, 1.0));
    }
    return out;
}

SegmentationSample augment(const SegmentationSample& s, const AugmentationConfig& cfg, std::uint64_t draw_seed) {
    std::mt19937_64 rng(draw_seed);
    return apply_augmentation(s, draw_augmentation(cfg, s.image.dims().h, rng));
}

}  // namespace r2mf
