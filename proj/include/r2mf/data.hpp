#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "r2mf/mask.hpp"
#include "r2mf/tensor.hpp"

namespace r2mf {

enum class View { coronal, left_bending, right_bending };
enum class Quality { high, medium, low };
enum class Split { train, val, test };

inline constexpr std::array<View, 3> kViews{View::coronal, View::left_bending, View::right_bending};

std::string_view view_name(View v);
std::string_view quality_name(Quality q);
std::string_view split_name(Split s);
/// Inverse of the *_name functions; throws std::invalid_argument on unknown text.
View parse_view(std::string_view s);
Quality parse_quality(std::string_view s);
Split parse_split(std::string_view s);

struct SegmentationSample {
    std::string id;
    View view = View::coronal;
    Quality quality = Quality::high;
    Tensor<float> image;  // (1,1,H,W) in [0,1]
    BinaryMask mask;
};

/// Per-row band geometry in pixel units (row centers at y + 0.5).
struct SpineGeometry {
    std::vector<double> center;
    std::vector<double> half_width;
};

struct QualityProfile {
    double noise_sigma;
    double contrast;
    std::size_t distractors;
};
QualityProfile quality_profile(Quality q);

/// Band geometry for a sample; the part shared by all views of one seed
/// (width profile) is drawn from the seed alone.
SpineGeometry spine_geometry(std::uint64_t seed, View view, std::size_t size);

/// Throws std::invalid_argument unless size is a power of two >= 32.
SegmentationSample generate_sample(std::uint64_t seed, View view, std::size_t size, Quality quality);

/// Relative weights of the quality tiers (need not sum to 1).
struct QualityMix {
    double high = 1.0, medium = 0.0, low = 0.0;
    /// "high", "medium", "low" or three comma-separated weights.
    static QualityMix parse(std::string_view s);
    std::string to_string() const;
};

struct ManifestRow {
    std::string id;
    View view = View::coronal;
    Split split = Split::train;
    Quality quality = Quality::high;
    std::uint64_t seed = 0;  // shared by the views of one id
    friend bool operator==(const ManifestRow&, const ManifestRow&) = default;
};

struct Dataset {
    std::vector<ManifestRow> manifest;
    std::vector<SegmentationSample> samples;  // parallel to manifest
};

/// Held-out ids per split for a training count of n: max(1, round(n / 4)).
std::size_t holdout_count(std::size_t n_per_view);

/// n_per_view training ids plus holdout_count(n_per_view) ids each for
/// validation and test; every id has all three views.
Dataset generate_dataset(std::size_t n_per_view, std::size_t size, const QualityMix& mix, std::uint64_t seed);

std::string manifest_to_tsv(const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> manifest_from_tsv(std::string_view tsv);

/// `<root>/manifest.tsv` and `<root>/<split>/<id>_<view>.pgm` / `_mask.pgm`.
void write_dataset(const std::filesystem::path& root, const Dataset& ds);
/// Loads the samples of one split as listed in the manifest.
std::vector<SegmentationSample> load_split(const std::filesystem::path& root, Split split);

/// Maps [min, max] to [0, 1]; throws std::invalid_argument on a constant image.
Tensor<float> minmax_normalize(const Tensor<float>& image);

/// Scales the longer side to `target` (bilinear), centers and zero-pads to a
/// square (1,1,target,target) tensor.
Tensor<float> resize_with_pad(const Tensor<float>& image, std::size_t target);

/// One epoch of sample indices, interleaving views coronal, left, right.
/// Each view contributes max-count iterations, wrapping its per-epoch
/// shuffle when it has fewer samples.
std::vector<std::size_t> balanced_batches(const std::vector<SegmentationSample>& samples, std::uint64_t seed,
                                          std::size_t epoch);

/// Mixes two 64-bit values into a well-spread seed.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace r2mf
