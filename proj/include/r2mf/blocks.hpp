#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "r2mf/gradcheck.hpp"
#include "r2mf/ops.hpp"
#include "r2mf/tensor.hpp"

namespace r2mf {

/// Named tensors of a model. Trainable entries are parameters; the rest are
/// buffers (batch-norm running statistics) that are persisted but not counted.
template <typename T>
class ParameterSet {
   public:
    struct Entry {
        std::string name;
        Var<T> value;
        bool trainable;
    };

    Var<T> add(std::string name, Dims dims, bool trainable, T fill = T(0));

    const std::vector<Entry>& entries() const noexcept { return entries_; }
    Var<T> find(std::string_view name) const;
    std::size_t parameter_count() const;
    std::vector<NamedParam<T>> trainable() const;
    void zero_grad();

   private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Registers tensors and draws normal weights with std sqrt(gain / fan_in) from
/// one seeded stream, in registration order. Gain 2 (He) suits layers feeding a
/// rectifier or a batch normalization.
template <typename T>
class Initializer {
   public:
    Initializer(ParameterSet<T>& params, std::uint64_t seed) : params_(params), rng_(seed) {}

    Var<T> he_normal(const std::string& name, Dims dims, std::size_t fan_in, double gain = 2.0);
    Var<T> constant(const std::string& name, Dims dims, T value);
    Var<T> buffer(const std::string& name, Dims dims, T value);

   private:
    ParameterSet<T>& params_;
    std::mt19937_64 rng_;
};

/// Convolution (no bias) followed by batch normalization and an activation.
template <typename T>
struct ConvUnit {
    Var<T> weight;
    Var<T> gamma, beta;
    Var<T> running_mean, running_var;
    ops::Activation act = ops::Activation::leaky_relu;

    static ConvUnit make(Initializer<T>& init, const std::string& prefix, std::size_t in, std::size_t out,
                         std::size_t kernel, ops::Activation act);
    Var<T> forward(Tape<T>& tape, const Var<T>& x, Mode mode) const;
};

/// Three parallel stacks of 3x3 units (depth 1, 2 and 3), concatenated, fused by
/// a 1x1 unit and added to the (projected) input.
template <typename T>
struct InceptionR {
    std::array<std::vector<ConvUnit<T>>, 3> branches;
    ConvUnit<T> fuse;
    Var<T> proj_weight, proj_bias;  // null when in == out
    std::size_t in = 0, out = 0;

    static InceptionR make(Initializer<T>& init, const std::string& prefix, std::size_t in, std::size_t out);
    Var<T> forward(Tape<T>& tape, const Var<T>& x, Mode mode) const;
};

/// Two stacked 3x3 units; the stand-in when Inception-R is switched off.
template <typename T>
struct DoubleConv {
    ConvUnit<T> first, second;

    static DoubleConv make(Initializer<T>& init, const std::string& prefix, std::size_t in, std::size_t out);
    Var<T> forward(Tape<T>& tape, const Var<T>& x, Mode mode) const;
};

template <typename T>
using FeatureBlock = std::variant<InceptionR<T>, DoubleConv<T>>;

template <typename T>
FeatureBlock<T> make_feature_block(Initializer<T>& init, const std::string& prefix, std::size_t in, std::size_t out,
                                   bool inception);

template <typename T>
Var<T> forward(const FeatureBlock<T>& block, Tape<T>& tape, const Var<T>& x, Mode mode);

/// Initialization gain of biased convolutions that are not followed by batch
/// normalization (variance 1 / (3 fan_in), the usual framework default).
/// Residual sums never pass through a normalization, so larger gains compound.
inline constexpr double kPlainGain = 1.0 / 3.0;

enum class FuseMode { add, concat };

/// Recurrent residual refinement of an encoder feature map:
///   F0 = E,  Ft = relu(Wr * F(t-1) + E) for t = 1..T,  E' = FT + Ws * E.
/// Wr is one 3x3 convolution shared by all steps; Ws is a 1x1 projection.
template <typename T>
struct R2Jump {
    Var<T> wr_weight, wr_bias;
    Var<T> ws_weight, ws_bias;
    std::size_t steps = 1;
    /// Number of Wr applications since construction.
    mutable std::size_t recurrent_calls = 0;

    static R2Jump make(Initializer<T>& init, const std::string& prefix, std::size_t channels, std::size_t steps);
    Var<T> refine(Tape<T>& tape, const Var<T>& encoder) const;
};

/// Joins a refined encoder map with the decoder map at the same resolution.
template <typename T>
Var<T> r2jump_fuse(Tape<T>& tape, const Var<T>& refined, const Var<T>& decoder, FuseMode mode);

/// Channel gate sigma(W2 relu(W1 gap(X))) and spatial gate sigma(Ws * X), applied
/// to X separately and summed.
template <typename T>
struct SCSELite {
    Var<T> w1, b1;  // C -> C/2
    Var<T> w2, b2;  // C/2 -> C
    Var<T> ws, bs;  // C -> 1
    std::size_t channels = 0;

    static SCSELite make(Initializer<T>& init, const std::string& prefix, std::size_t channels);
    Var<T> forward(Tape<T>& tape, const Var<T>& x) const;
};

}  // namespace r2mf
