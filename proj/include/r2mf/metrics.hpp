#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "r2mf/mask.hpp"

namespace r2mf {

/// Raised when a surface distance is requested for an empty mask.
class UndefinedMetric : public std::domain_error {
   public:
    using std::domain_error::domain_error;
};

struct Point {
    int r = 0, c = 0;
    friend bool operator==(const Point&, const Point&) = default;
};

/// Both masks empty counts as perfect agreement (1).
double iou(const BinaryMask& p, const BinaryMask& t);
double dice_coef(const BinaryMask& p, const BinaryMask& t);

/// Foreground pixels with a 4-neighbor that is background or outside the grid,
/// in row-major order.
std::vector<Point> extract_boundary(const BinaryMask& m);

/// Exact squared Euclidean distance from every pixel to the nearest marked
/// pixel (two-pass lower-envelope transform). Unmarked-everywhere input yields +inf.
std::vector<double> squared_distance_transform(const BinaryMask& sites);

/// Boundary-to-boundary distances: first every point of B_P (row-major) to B_T,
/// then every point of B_T to B_P.
std::vector<double> surface_distances(const BinaryMask& p, const BinaryMask& t);

double asd(const BinaryMask& p, const BinaryMask& t);
double hd95(const BinaryMask& p, const BinaryMask& t);

/// Linear interpolation between order statistics at position q (n - 1) of the
/// sorted sample.
double percentile_linear(std::vector<double> values, double q);

struct MetricsRecord {
    std::string id;
    std::string view;
    double iou = 0.0, dice = 0.0;
    /// NaN when the prediction was empty (distance undefined).
    double asd = 0.0, hd95 = 0.0;
};

struct MetricsSummary {
    std::string view;  // "all" for the pooled row
    std::size_t count = 0;
    double iou = 0.0, dice = 0.0;
    /// Means over the records with a defined distance; NaN when none.
    double asd = 0.0, hd95 = 0.0;
    std::size_t undefined_distances = 0;
};

class MetricsReport {
   public:
    void add(MetricsRecord r) { records_.push_back(std::move(r)); }
    /// Orders records by id (then view) for deterministic output.
    void sort();
    const std::vector<MetricsRecord>& records() const noexcept { return records_; }

    /// One row per view in lexicographic order, followed by "all".
    std::vector<MetricsSummary> summaries() const;
    std::optional<MetricsSummary> summary(const std::string& view) const;

    /// `id,view,iou,dice,asd,hd95` rows, then one `# mean,<view>,...` line per summary.
    std::string to_csv() const;

   private:
    std::vector<MetricsRecord> records_;
};

}  // namespace r2mf
