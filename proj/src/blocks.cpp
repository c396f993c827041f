#include "r2mf/blocks.hpp"

#include <cmath>
#include <stdexcept>

namespace r2mf {

template <typename T>
Var<T> ParameterSet<T>::add(std::string name, Dims dims, bool trainable, T fill) {
    if (index_.contains(name)) throw std::logic_error("parameter set: duplicate name '" + name + "'");
    auto v = make_var<T>(dims, fill);
    v->set_requires_grad(trainable);
    index_.emplace(name, entries_.size());
    entries_.push_back(Entry{std::move(name), v, trainable});
    return v;
}

template <typename T>
Var<T> ParameterSet<T>::find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : entries_[it->second].value;
}

template <typename T>
std::size_t ParameterSet<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
        if (e.trainable) n += e.value->size();
    }
    return n;
}

template <typename T>
std::vector<NamedParam<T>> ParameterSet<T>::trainable() const {
    std::vector<NamedParam<T>> out;
    for (const auto& e : entries_) {
        if (e.trainable) out.push_back({e.name, e.value});
    }
    return out;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
    for (auto& e : entries_) e.value->zero_grad();
}

template <typename T>
Var<T> Initializer<T>::he_normal(const std::string& name, Dims dims, std::size_t fan_in, double gain) {
    auto v = params_.add(name, dims, true);
    std::normal_distribution<double> normal(0.0, std::sqrt(gain / static_cast<double>(fan_in)));
    for (auto& x : v->data()) x = static_cast<T>(normal(rng_));
    return v;
}

template <typename T>
Var<T> Initializer<T>::constant(const std::string& name, Dims dims, T value) {
    return params_.add(name, dims, true, value);
}

template <typename T>
Var<T> Initializer<T>::buffer(const std::string& name, Dims dims, T value) {
    return params_.add(name, dims, false, value);
}

template <typename T>
ConvUnit<T> ConvUnit<T>::make(Initializer<T>& init, const std::string& prefix, std::size_t in, std::size_t out,
                              std::size_t kernel, ops::Activation act) {
    if (kernel % 2 == 0) throw std::invalid_argument("conv unit: kernel must be odd");
    ConvUnit u;
    u.weight = init.he_normal(prefix + ".weight", Dims{out, in, kernel, kernel}, in * kernel * kernel);
    u.gamma = init.constant(prefix + ".bn.gamma", Dims{out, 1, 1, 1}, T(1));
    u.beta = init.constant(prefix + ".bn.beta", Dims{out, 1, 1, 1}, T(0));
    u.running_mean = init.buffer(prefix + ".bn.running_mean", Dims{out, 1, 1, 1}, T(0));
    u.running_var = init.buffer(prefix + ".bn.running_var", Dims{out, 1, 1, 1}, T(1));
    u.act = act;
    return u;
}

template <typename T>
Var<T> ConvUnit<T>::forward(Tape<T>& tape, const Var<T>& x, Mode mode) const {
    const std::size_t pad = (weight->dims().h - 1) / 2;
    auto y = ops::conv2d(tape, x, weight, Var<T>{}, 1, pad);
    y = ops::batchnorm2d(tape, y, gamma, beta, *running_mean, *running_var, mode);
    return ops::activation(tape, y, act);
}

template <typename T>
InceptionR<T> InceptionR<T>::make(Initializer<T>& init, const std::string& prefix, std::size_t in, std::size_t out) {
    InceptionR b;
    b.in = in;
    b.out = out;
    for (std::size_t k = 0; k < 3; ++k) {
        for (std::size_t d = 0; d <= k; ++d) {
            const std::string name = prefix + ".b" + std::to_string(k + 1) + "." + std::to_string(d);
            b.branches[k].push_back(ConvUnit<T>::make(init, name, d == 0 ? in : out, out, 3, ops::Activation::leaky_relu));
        }
    }
    b.fuse = ConvUnit<T>::make(init, prefix + ".fuse", 3 * out, out, 1, ops::Activation::none);
    if (in != out) {
        b.proj_weight = init.he_normal(prefix + ".proj.weight", Dims{out, in, 1, 1}, in, kPlainGain);
        b.proj_bias = init.constant(prefix + ".proj.bias", Dims{out, 1, 1, 1}, T(0));
    }
    return b;
}

template <typename T>
Var<T> InceptionR<T>::forward(Tape<T>& tape, const Var<T>& x, Mode mode) const {
    if (x->dims().c != in) {
        throw std::invalid_argument("inception_r: expected " + std::to_string(in) + " channels, got " +
                                    std::to_string(x->dims().c));
    }
    std::array<Var<T>, 3> outs;
    for (std::size_t k = 0; k < 3; ++k) {
        Var<T> h = x;
        for (const auto& unit : branches[k]) h = unit.forward(tape, h, mode);
        outs[k] = h;
    }
    auto fused = fuse.forward(tape, ops::concat_channels<T>(tape, outs), mode);
    auto residual = proj_weight ? ops::conv2d(tape, x, proj_weight, proj_bias, 1, 0) : x;
    return ops::add(tape, fused, residual);
}

template <typename T>
DoubleConv<T> DoubleConv<T>::make(Initializer<T>& init, const std::string& prefix, std::size_t in, std::size_t out) {
    return DoubleConv{ConvUnit<T>::make(init, prefix + ".0", in, out, 3, ops::Activation::leaky_relu),
                      ConvUnit<T>::make(init, prefix + ".1", out, out, 3, ops::Activation::leaky_relu)};
}

template <typename T>
Var<T> DoubleConv<T>::forward(Tape<T>& tape, const Var<T>& x, Mode mode) const {
    return second.forward(tape, first.forward(tape, x, mode), mode);
}

template <typename T>
FeatureBlock<T> make_feature_block(Initializer<T>& init, const std::string& prefix, std::size_t in, std::size_t out,
                                   bool inception) {
    if (inception) return InceptionR<T>::make(init, prefix, in, out);
    return DoubleConv<T>::make(init, prefix, in, out);
}

template <typename T>
Var<T> forward(const FeatureBlock<T>& block, Tape<T>& tape, const Var<T>& x, Mode mode) {
    return std::visit([&](const auto& b) { return b.forward(tape, x, mode); }, block);
}

template <typename T>
R2Jump<T> R2Jump<T>::make(Initializer<T>& init, const std::string& prefix, std::size_t channels, std::size_t steps) {
    if (steps < 1) throw std::invalid_argument("r2jump: at least one recurrent step is required");
    R2Jump j;
    j.wr_weight = init.he_normal(prefix + ".wr.weight", Dims{channels, channels, 3, 3}, channels * 9, kPlainGain);
    j.wr_bias = init.constant(prefix + ".wr.bias", Dims{channels, 1, 1, 1}, T(0));
    j.ws_weight = init.he_normal(prefix + ".ws.weight", Dims{channels, channels, 1, 1}, channels, kPlainGain);
    j.ws_bias = init.constant(prefix + ".ws.bias", Dims{channels, 1, 1, 1}, T(0));
    j.steps = steps;
    return j;
}

template <typename T>
Var<T> R2Jump<T>::refine(Tape<T>& tape, const Var<T>& encoder) const {
    Var<T> f = encoder;
    for (std::size_t t = 0; t < steps; ++t) {
        auto recur = ops::conv2d(tape, f, wr_weight, wr_bias, 1, 1);
        ++recurrent_calls;
        f = ops::activation(tape, ops::add(tape, recur, encoder), ops::Activation::relu);
    }
    return ops::add(tape, f, ops::conv2d(tape, encoder, ws_weight, ws_bias, 1, 0));
}

template <typename T>
Var<T> r2jump_fuse(Tape<T>& tape, const Var<T>& refined, const Var<T>& decoder, FuseMode mode) {
    const Dims a = refined->dims(), b = decoder->dims();
    if (a.n != b.n || a.h != b.h || a.w != b.w) {
        throw std::invalid_argument("r2jump_fuse: spatial mismatch " + to_string(a) + " vs " + to_string(b));
    }
    if (mode == FuseMode::add) {
        if (a.c != b.c) throw std::invalid_argument("r2jump_fuse: add mode needs equal channels");
        return ops::add(tape, refined, decoder);
    }
    const Var<T> parts[] = {refined, decoder};
    return ops::concat_channels<T>(tape, parts);
}

template <typename T>
SCSELite<T> SCSELite<T>::make(Initializer<T>& init, const std::string& prefix, std::size_t channels) {
    if (channels == 0 || channels % 2 != 0) throw std::invalid_argument("scse_lite: channel count must be even");
    const std::size_t half = channels / 2;
    SCSELite s;
    s.channels = channels;
    s.w1 = init.he_normal(prefix + ".cse.w1", Dims{half, channels, 1, 1}, channels, kPlainGain);
    s.b1 = init.constant(prefix + ".cse.b1", Dims{half, 1, 1, 1}, T(0));
    s.w2 = init.he_normal(prefix + ".cse.w2", Dims{channels, half, 1, 1}, half, kPlainGain);
    s.b2 = init.constant(prefix + ".cse.b2", Dims{channels, 1, 1, 1}, T(0));
    s.ws = init.he_normal(prefix + ".sse.weight", Dims{1, channels, 1, 1}, channels, kPlainGain);
    s.bs = init.constant(prefix + ".sse.bias", Dims{1, 1, 1, 1}, T(0));
    return s;
}

template <typename T>
Var<T> SCSELite<T>::forward(Tape<T>& tape, const Var<T>& x) const {
    if (x->dims().c != channels) throw std::invalid_argument("scse_lite: channel mismatch");
    using ops::Activation;
    auto v = ops::global_avg_pool(tape, x);
    auto z = ops::activation(tape, ops::conv2d(tape, v, w1, b1, 1, 0), Activation::relu);
    auto s = ops::activation(tape, ops::conv2d(tape, z, w2, b2, 1, 0), Activation::sigmoid);
    auto q = ops::activation(tape, ops::conv2d(tape, x, ws, bs, 1, 0), Activation::sigmoid);
    return ops::add(tape, ops::scale_channels(tape, x, s), ops::scale_spatial(tape, x, q));
}

#define R2MF_INSTANTIATE_BLOCKS(T)                                                                          \
    template class ParameterSet<T>;                                                                         \
    template class Initializer<T>;                                                                          \
    template struct ConvUnit<T>;                                                                            \
    template struct InceptionR<T>;                                                                          \
    template struct DoubleConv<T>;                                                                          \
    template struct R2Jump<T>;                                                                              \
    template struct SCSELite<T>;                                                                            \
    template FeatureBlock<T> make_feature_block(Initializer<T>&, const std::string&, std::size_t, std::size_t, \
                                                bool);                                                      \
    template Var<T> forward(const FeatureBlock<T>&, Tape<T>&, const Var<T>&, Mode);                         \
    template Var<T> r2jump_fuse(Tape<T>&, const Var<T>&, const Var<T>&, FuseMode);

R2MF_INSTANTIATE_BLOCKS(float)
R2MF_INSTANTIATE_BLOCKS(double)

#undef R2MF_INSTANTIATE_BLOCKS

}  // namespace r2mf
