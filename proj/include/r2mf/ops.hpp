#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "r2mf/tensor.hpp"

// Differentiable primitives. Every op computes its output eagerly and, when the
// tape is recording and some input requires a gradient, records its backward.
namespace r2mf::ops {

enum class Activation { none, relu, leaky_relu, sigmoid };

inline constexpr double kLeakySlope = 0.01;

/// Cross-correlation. weight is (co, ci, kh, kw); bias is (co) or null.
template <typename T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride = 1,
              std::size_t pad = 0);

/// Adjoint of conv2d with zero padding. weight is (ci, co, kh, kw); bias is (co) or null.
template <typename T>
Var<T> conv_transpose2d(Tape<T>& tape, const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
                        std::size_t stride = 2);

template <typename T>
struct Pooled {
    Var<T> out;
    std::vector<std::size_t> argmax;  // flat input offset per output element
};

/// 2x2 max pooling with stride 2. Ties go to the first element in row-major window order.
template <typename T>
Pooled<T> maxpool2x2(Tape<T>& tape, const Var<T>& x);

struct BatchNormOptions {
    double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
    double eps = 1e-5;
};

/// Per-channel normalization over (n, h, w). Train mode uses batch statistics and
/// updates the running buffers; eval mode uses the running buffers.
template <typename T>
Var<T> batchnorm2d(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                   Tensor<T>& running_var, Mode mode, BatchNormOptions opts = {});

template <typename T>
Var<T> activation(Tape<T>& tape, const Var<T>& x, Activation kind);

/// (n, c, h, w) -> (n, c, 1, 1) channel means.
template <typename T>
Var<T> global_avg_pool(Tape<T>& tape, const Var<T>& x);

template <typename T>
Var<T> concat_channels(Tape<T>& tape, std::span<const Var<T>> parts);

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b);

/// Elementwise product of equally shaped tensors.
template <typename T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& x, double k);

/// Sum of all entries as a (1,1,1,1) tensor.
template <typename T>
Var<T> sum(Tape<T>& tape, const Var<T>& x);

/// x (n,c,h,w) times s (n,c,1,1), broadcast over pixels.
template <typename T>
Var<T> scale_channels(Tape<T>& tape, const Var<T>& x, const Var<T>& s);

/// x (n,c,h,w) times q (n,1,h,w), broadcast over channels.
template <typename T>
Var<T> scale_spatial(Tape<T>& tape, const Var<T>& x, const Var<T>& q);

/// Inverted dropout: kept values are scaled by 1 / (1 - rate). Identity in eval mode.
template <typename T>
Var<T> dropout(Tape<T>& tape, const Var<T>& x, double rate, std::mt19937_64& rng, Mode mode);

/// Bilinear upsampling by an integer factor, half-pixel centers, edge clamped.
template <typename T>
Var<T> upsample_bilinear(Tape<T>& tape, const Var<T>& x, std::size_t factor);

namespace fault {
/// Multiplier applied to conv2d weight gradients. Exists only so gradient checks
/// can be shown to fail; leave at 1 everywhere else.
void set_conv_weight_grad_scale(double s);
double conv_weight_grad_scale();
}  // namespace fault

}  // namespace r2mf::ops
