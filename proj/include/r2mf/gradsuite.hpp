#pragma once

#include <functional>
#include <string>
#include <vector>

#include "r2mf/gradcheck.hpp"
#include "r2mf/network.hpp"

namespace r2mf {

enum class CheckPrecision { f32, f64 };

struct GradSuiteOptions {
    CheckPrecision precision = CheckPrecision::f32;
    /// Architecture of the end-to-end cascade check; its input size is replaced by `e2e_size`.
    ModelConfig model = ModelConfig::desk();
    std::size_t e2e_size = 16;
    /// Images per batch of the end-to-end check. Two keep the batch statistics of
    /// the 2x2 bottleneck from being taken over just four values, where 32-bit
    /// rounding is amplified past the tolerance.
    std::size_t e2e_batch = 2;
    /// Coordinates probed per check; 0 probes all of them.
    std::size_t samples = 50;
    double block_tol = 1e-3;
    double e2e_tol = 1e-2;
    /// Doubles conv2d weight gradients for the duration of the run.
    bool inject_bug = false;
    /// Central-difference steps; 0 selects the built-in default.
    double block_eps = 0.0;
    double e2e_eps = 0.0;
    /// Only run checks whose name contains this text (empty: all).
    std::string filter;
    std::uint64_t seed = 1;

    /// Tolerances of the acceptance gate for the given precision.
    static GradSuiteOptions defaults(CheckPrecision p);
};

struct GradSuiteResult {
    std::string name;
    bool end_to_end = false;
    double tol = 0.0;
    CheckReport report;
};

/// Checks every primitive, block and loss, then the whole cascade under the
/// total loss. 32-bit runs compare against a 64-bit central difference; 64-bit
/// runs compare against their own central difference. Every check screens out
/// coordinates whose step straddles an activation kink.
std::vector<GradSuiteResult> run_gradient_suite(const GradSuiteOptions& opts,
                                                const std::function<void(const GradSuiteResult&)>& on_result = {});

}  // namespace r2mf
