#include "r2mf/loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "r2mf/ops.hpp"

namespace r2mf {

void LossWeights::validate() const {
    if (!(coarse >= 0.0 && std::isfinite(coarse)) || !(fine >= 0.0 && std::isfinite(fine))) {
        throw std::invalid_argument("loss weights must be finite and non-negative");
    }
}

namespace {

template <typename T>
void check_dims(const Var<T>& prob, const Tensor<T>& mask, const char* who) {
    if (prob->dims() != mask.dims()) {
        throw std::invalid_argument(std::string(who) + ": prediction " + to_string(prob->dims()) + " vs mask " +
                                    to_string(mask.dims()));
    }
}

template <typename T>
Var<T> scalar_output(const Var<T>& prob, double value) {
    auto out = make_var<T>(Dims{}, static_cast<T>(value));
    out->set_requires_grad(prob->requires_grad());
    return out;
}

}  // namespace

template <typename T>
Var<T> bce_loss(Tape<T>& tape, const Var<T>& prob, const Tensor<T>& mask) {
    check_dims(prob, mask, "bce_loss");
    const auto p = prob->data();
    const auto m = mask.data();
    const double n = static_cast<double>(p.size());
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double q = std::clamp(static_cast<double>(p[i]), kProbClamp, 1.0 - kProbClamp);
        total -= m[i] * std::log(q) + (1.0 - m[i]) * std::log(1.0 - q);
    }
    auto out = scalar_output(prob, total / n);
    if (tape.recording() && out->requires_grad()) {
        tape.record(out, [prob, m = std::vector<T>(m.begin(), m.end()), o = out.get(), n] {
            const double g = static_cast<double>(o->grad()[0]) / n;
            const auto p = prob->data();
            auto dp = prob->grad();
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double q = p[i];
                if (q < kProbClamp || q > 1.0 - kProbClamp) continue;
                dp[i] += static_cast<T>(g * (-m[i] / q + (1.0 - m[i]) / (1.0 - q)));
            }
        });
    }
    return out;
}

template <typename T>
Var<T> dice_loss(Tape<T>& tape, const Var<T>& prob, const Tensor<T>& mask, double eps) {
    check_dims(prob, mask, "dice_loss");
    if (!(eps > 0.0)) throw std::invalid_argument("dice_loss: eps must be positive");
    const auto p = prob->data();
    const auto m = mask.data();
    double inter = 0.0, denom = eps;
    for (std::size_t i = 0; i < p.size(); ++i) {
        inter += static_cast<double>(p[i]) * m[i];
        denom += static_cast<double>(p[i]) * p[i] + static_cast<double>(m[i]) * m[i];
    }
    const double numer = 2.0 * inter + eps;
    auto out = scalar_output(prob, 1.0 - numer / denom);
    if (tape.recording() && out->requires_grad()) {
        tape.record(out, [prob, m = std::vector<T>(m.begin(), m.end()), o = out.get(), numer, denom] {
            const double g = o->grad()[0];
            const auto p = prob->data();
            auto dp = prob->grad();
            // d/dP_i of -numer/denom.
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double d = -(2.0 * m[i]) / denom + numer * 2.0 * p[i] / (denom * denom);
                dp[i] += static_cast<T>(g * d);
            }
        });
    }
    return out;
}

template <typename T>
Var<T> total_loss(Tape<T>& tape, const Var<T>& coarse, const Var<T>& fine, const Tensor<T>& mask,
                  const LossWeights& w) {
    w.validate();
    auto stage = [&](const Var<T>& p, double weight) {
        return ops::scale(tape, ops::add(tape, bce_loss(tape, p, mask), dice_loss(tape, p, mask)), weight);
    };
    return ops::add(tape, stage(coarse, w.coarse), stage(fine, w.fine));
}

template Var<float> bce_loss(Tape<float>&, const Var<float>&, const Tensor<float>&);
template Var<double> bce_loss(Tape<double>&, const Var<double>&, const Tensor<double>&);
template Var<float> dice_loss(Tape<float>&, const Var<float>&, const Tensor<float>&, double);
template Var<double> dice_loss(Tape<double>&, const Var<double>&, const Tensor<double>&, double);
template Var<float> total_loss(Tape<float>&, const Var<float>&, const Var<float>&, const Tensor<float>&,
                               const LossWeights&);
template Var<double> total_loss(Tape<double>&, const Var<double>&, const Var<double>&, const Tensor<double>&,
                                const LossWeights&);

}  // namespace r2mf
