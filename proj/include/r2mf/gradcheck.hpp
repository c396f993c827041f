#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "r2mf/tensor.hpp"

namespace r2mf {

template <typename T>
struct NamedParam {
    std::string name;
    Var<T> var;
};

struct CheckOptions {
    double eps = 1e-3;
    double tol = 1e-3;
    /// Number of coordinates to probe; 0 probes every coordinate.
    std::size_t samples = 0;
    std::uint64_t seed = 1;
    /// Lower bound on the relative-error denominator, in gradient units.
    double abs_floor = 0.0;
    /// Lower bound on the denominator as a fraction of the largest probed
    /// analytic gradient magnitude. Keeps near-zero coordinates from being
    /// judged against 32-bit rounding noise.
    double scale_floor = 0.0;
    /// Reject coordinates whose one-sided slopes disagree by more than `tol`
    /// (the step crossed a kink such as a rectifier or max-pool switch) and
    /// draw replacements, up to `samples * max_draw_factor` draws in total.
    bool kink_screen = false;
    std::size_t max_draw_factor = 4;
};

struct CheckReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    bool passed = false;
    std::string worst_coordinate;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    /// Coordinates rejected by the kink screen.
    std::size_t skipped = 0;
};

/// Thrown when re-evaluating the probed function at the same point gives a different value.
class NonDeterministicFunction : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Compares tape gradients against central differences.
///
/// `fn` builds the graph on the given tape and returns its output. A scalar
/// output is used as is; any other output is reduced to a scalar with a fixed
/// random projection so every element contributes. The relative error at a
/// coordinate is |a - n| / max(|a|, |n|, abs_floor, scale_floor * max|a|); the check passes when the
/// worst coordinate is within `tol`. With `kink_screen`, the check also fails
/// when fewer than `samples` smooth coordinates were found (or none, when
/// probing every coordinate).
template <typename T>
CheckReport finite_diff_check(const std::function<Var<T>(Tape<T>&)>& fn, std::span<const NamedParam<T>> params,
                              const CheckOptions& opts);

/// Checks 32-bit tape gradients against central differences of the same function
/// evaluated in 64-bit. `params64` must mirror `params32` entry by entry; their
/// values are overwritten with the 32-bit values before probing. Separating the
/// two precisions keeps the reference free of 32-bit rounding noise, so small
/// steps (which rarely cross an activation kink) remain usable.
CheckReport cross_precision_check(const std::function<Var<float>(Tape<float>&)>& fn32,
                                  std::span<const NamedParam<float>> params32,
                                  const std::function<Var<double>(Tape<double>&)>& fn64,
                                  std::span<const NamedParam<double>> params64, const CheckOptions& opts);

}  // namespace r2mf
