#pragma once

#include "r2mf/tensor.hpp"

namespace r2mf {

struct LossWeights {
    double coarse = 0.4;
    double fine = 0.6;

    /// Throws std::invalid_argument for a negative or non-finite weight.
    void validate() const;
};

inline constexpr double kProbClamp = 1e-7;
inline constexpr double kDiceEps = 1e-6;

/// Mean of -[M log P + (1-M) log(1-P)] with P clamped to [1e-7, 1-1e-7]. The
/// clamp passes no gradient outside its range.
template <typename T>
Var<T> bce_loss(Tape<T>& tape, const Var<T>& prob, const Tensor<T>& mask);

/// 1 - (2 sum(PM) + eps) / (sum(P^2) + sum(M^2) + eps).
template <typename T>
Var<T> dice_loss(Tape<T>& tape, const Var<T>& prob, const Tensor<T>& mask, double eps = kDiceEps);

/// lambda_c (BCE + Dice)(P_c) + lambda_f (BCE + Dice)(P_f).
template <typename T>
Var<T> total_loss(Tape<T>& tape, const Var<T>& coarse, const Var<T>& fine, const Tensor<T>& mask,
                  const LossWeights& w = {});

}  // namespace r2mf
