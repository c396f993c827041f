#include "r2mf/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace r2mf {

namespace {

struct Coord {
    std::size_t param, index;
};

struct Difference {
    double central, slope_up, slope_down;
};

std::vector<double> projection_weights(std::size_t n, std::uint64_t seed) {
    std::vector<double> weights(n, 1.0);
    if (n > 1) {
        std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        for (auto& w : weights) w = u(rng);
    }
    return weights;
}

template <typename T>
double project(const Tensor<T>& y, const std::vector<T>& weights) {
    if (y.size() != weights.size()) throw std::logic_error("finite_diff_check: output size changed between calls");
    double s = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) s += static_cast<double>(weights[i]) * y.data()[i];
    return s;
}

template <typename T>
std::vector<T> cast_weights(const std::vector<double>& w) {
    return std::vector<T>(w.begin(), w.end());
}

template <typename T>
void require_grads(std::span<const NamedParam<T>> params) {
    for (const auto& p : params) {
        if (!p.var || !p.var->requires_grad()) {
            throw std::invalid_argument("finite_diff_check: parameter '" + p.name + "' does not require grad");
        }
        p.var->clear_grad();
    }
}

std::vector<Coord> select_coords(const std::vector<std::size_t>& sizes, const CheckOptions& opts) {
    std::vector<Coord> coords;
    for (std::size_t p = 0; p < sizes.size(); ++p) {
        for (std::size_t i = 0; i < sizes[p]; ++i) coords.push_back({p, i});
    }
    // Screening draws extra coordinates; the first `samples` are the same either way.
    const std::size_t want = opts.kink_screen ? opts.samples * std::max<std::size_t>(1, opts.max_draw_factor)
                                              : opts.samples;
    if (want > 0 && want < coords.size()) {
        std::mt19937_64 rng(opts.seed);
        for (std::size_t k = 0; k < want; ++k) {
            std::uniform_int_distribution<std::size_t> pick(k, coords.size() - 1);
            std::swap(coords[k], coords[pick(rng)]);
        }
        coords.resize(want);
    }
    return coords;
}

// Projected output of `fn` at the current parameter values; throws when a repeat
// evaluation differs from `reference`.
template <typename T>
class Evaluator {
   public:
    Evaluator(const std::function<Var<T>(Tape<T>&)>& fn, std::vector<T> weights)
        : fn_(fn), weights_(std::move(weights)) {}

    double operator()() const {
        Tape<T> quiet(false);
        return project(*fn_(quiet), weights_);
    }

    void require_repeatable(double reference) const {
        if ((*this)() != reference) throw NonDeterministicFunction("finite_diff_check: function is not deterministic");
    }

    double at(Tensor<T>& t, std::size_t index, T value) const {
        const T orig = t.data()[index];
        t.data()[index] = value;
        const double f = (*this)();
        t.data()[index] = orig;
        return f;
    }

    // `f_mid` is the value at the unperturbed point, used for the one-sided slopes.
    Difference central_difference(Tensor<T>& t, std::size_t index, const CheckOptions& opts, double f_mid) const {
        const T orig = t.data()[index];
        const T up = orig + static_cast<T>(opts.eps);
        const T down = orig - static_cast<T>(opts.eps);
        const double f_up = at(t, index, up), f_down = at(t, index, down);
        // Divide by the steps actually taken after rounding to T.
        const double central = (f_up - f_down) / (static_cast<double>(up) - down);
        if (!opts.kink_screen) return {central, 0.0, 0.0};
        return {central, (f_up - f_mid) / (static_cast<double>(up) - orig),
                (f_mid - f_down) / (static_cast<double>(orig) - down)};
    }

   private:
    const std::function<Var<T>(Tape<T>&)>& fn_;
    std::vector<T> weights_;
};

template <typename T>
double analytic_at(const Tensor<T>& t, std::size_t index) {
    return t.has_grad() ? static_cast<double>(t.grad()[index]) : 0.0;
}

// Probes candidates in order until `samples` coordinates have been judged. `analytic`
// maps a coordinate to its tape gradient, `difference` to its finite differences.
template <typename T, typename A, typename D>
CheckReport run_probes(const std::vector<Coord>& candidates, std::span<const NamedParam<T>> params,
                       const CheckOptions& opts, A analytic, D difference) {
    const std::size_t wanted = opts.samples > 0 ? std::min(opts.samples, candidates.size()) : candidates.size();
    double max_analytic = 0.0;
    const std::size_t scan = opts.kink_screen ? candidates.size() : wanted;
    for (std::size_t k = 0; k < scan; ++k) max_analytic = std::max(max_analytic, std::abs(analytic(candidates[k])));
    const double floor = std::max(opts.abs_floor, opts.scale_floor * max_analytic);

    CheckReport report;
    for (const auto& c : candidates) {
        if (report.checked == wanted) break;
        const double a = analytic(c);
        const Difference d = difference(c);
        if (opts.kink_screen) {
            const double scale = std::max({std::abs(d.slope_up), std::abs(d.slope_down), floor});
            if (scale > 0.0 && std::abs(d.slope_up - d.slope_down) > opts.tol * scale) {
                ++report.skipped;
                continue;
            }
        }
        const double denom = std::max({std::abs(a), std::abs(d.central), floor});
        const double rel = denom > 0.0 ? std::abs(a - d.central) / denom : 0.0;
        ++report.checked;
        if (rel > report.max_rel_error || report.worst_coordinate.empty()) {
            report.max_rel_error = std::max(report.max_rel_error, rel);
            report.worst_coordinate = params[c.param].name + "[" + std::to_string(c.index) + "]";
            report.worst_analytic = a;
            report.worst_numeric = d.central;
        }
    }
    // Probing everything only needs some smooth coordinate; a sample size must be met in full.
    const bool enough = opts.samples > 0 ? report.checked == wanted : report.checked > 0;
    report.passed = report.max_rel_error <= opts.tol && enough;
    return report;
}

template <typename T>
std::vector<std::size_t> sizes_of(std::span<const NamedParam<T>> params) {
    std::vector<std::size_t> sizes;
    for (const auto& p : params) sizes.push_back(p.var->size());
    return sizes;
}

}  // namespace

template <typename T>
CheckReport finite_diff_check(const std::function<Var<T>(Tape<T>&)>& fn, std::span<const NamedParam<T>> params,
                              const CheckOptions& opts) {
    if (!(opts.eps > 0.0)) throw std::invalid_argument("finite_diff_check: eps must be positive");
    require_grads(params);

    Tape<T> tape(true);
    const Var<T> y = fn(tape);
    const auto weights = cast_weights<T>(projection_weights(y->size(), opts.seed));
    tape.backward(y, weights);
    const Evaluator<T> eval(fn, weights);
    eval.require_repeatable(project(*y, weights));

    const double f_mid = project(*y, weights);
    return run_probes<T>(
        select_coords(sizes_of(params), opts), params, opts,
        [&](const Coord& c) { return analytic_at(*params[c.param].var, c.index); },
        [&](const Coord& c) { return eval.central_difference(*params[c.param].var, c.index, opts, f_mid); });
}

CheckReport cross_precision_check(const std::function<Var<float>(Tape<float>&)>& fn32,
                                  std::span<const NamedParam<float>> params32,
                                  const std::function<Var<double>(Tape<double>&)>& fn64,
                                  std::span<const NamedParam<double>> params64, const CheckOptions& opts) {
    if (!(opts.eps > 0.0)) throw std::invalid_argument("cross_precision_check: eps must be positive");
    if (params32.size() != params64.size()) throw std::invalid_argument("cross_precision_check: parameter lists differ");
    require_grads(params32);
    for (std::size_t p = 0; p < params32.size(); ++p) {
        auto src = params32[p].var->data();
        auto dst = params64[p].var->data();
        if (src.size() != dst.size()) {
            throw std::invalid_argument("cross_precision_check: size mismatch for '" + params32[p].name + "'");
        }
        std::copy(src.begin(), src.end(), dst.begin());
    }

    Tape<float> tape(true);
    const Var<float> y = fn32(tape);
    const auto weights32 = cast_weights<float>(projection_weights(y->size(), opts.seed));
    tape.backward(y, weights32);

    // The 64-bit reference uses the very same (rounded) projection weights.
    const Evaluator<double> eval(fn64, std::vector<double>(weights32.begin(), weights32.end()));
    const double f_mid = eval();
    eval.require_repeatable(f_mid);

    return run_probes<float>(
        select_coords(sizes_of(params32), opts), params32, opts,
        [&](const Coord& c) { return analytic_at(*params32[c.param].var, c.index); },
        [&](const Coord& c) { return eval.central_difference(*params64[c.param].var, c.index, opts, f_mid); });
}

template CheckReport finite_diff_check(const std::function<Var<float>(Tape<float>&)>&,
                                       std::span<const NamedParam<float>>, const CheckOptions&);
template CheckReport finite_diff_check(const std::function<Var<double>(Tape<double>&)>&,
                                       std::span<const NamedParam<double>>, const CheckOptions&);

}  // namespace r2mf
