#include "r2mf/network.hpp"

#include <sstream>
#include <stdexcept>

#include "r2mf/text.hpp"

namespace r2mf {

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
    ModelConfig c;
    c.channels = {32, 64, 128, 256};
    c.input_size = 512;
    return c;
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
    if (levels < 2) fail("at least two levels are required");
    if (channels.size() != levels) fail("channels lists " + std::to_string(channels.size()) + " entries for " +
                                        std::to_string(levels) + " levels");
    if (steps.size() != levels) fail("steps lists " + std::to_string(steps.size()) + " entries for " +
                                     std::to_string(levels) + " levels");
    for (std::size_t c : channels) {
        if (c == 0 || c % 2 != 0) fail("channel widths must be positive and even");
    }
    for (std::size_t t : steps) {
        if (t == 0) fail("recurrent step counts must be at least 1");
    }
    const std::size_t stride = std::size_t{1} << (levels - 1);
    if (input_size == 0 || input_size % stride != 0) {
        fail("input_size " + std::to_string(input_size) + " is not divisible by " + std::to_string(stride));
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must lie in [0, 1)");
}

bool ModelConfig::set(std::string_view key, std::string_view value) {
    if (key == "levels") levels = text::parse_size(key, value);
    else if (key == "channels") channels = text::parse_size_list(key, value);
    else if (key == "steps") steps = text::parse_size_list(key, value);
    else if (key == "input_size") input_size = text::parse_size(key, value);
    else if (key == "use_r2jump") use_r2jump = text::parse_bool(key, value);
    else if (key == "use_inception") use_inception = text::parse_bool(key, value);
    else if (key == "use_mcskip") use_mcskip = text::parse_bool(key, value);
    else if (key == "use_scse") use_scse = text::parse_bool(key, value);
    else if (key == "dropout_rate") dropout_rate = text::parse_double(key, value);
    else if (key == "dropout_after_scse") dropout_after_scse = text::parse_bool(key, value);
    else if (key == "seed") seed = text::parse_u64(key, value);
    else return false;
    return true;
}

std::string ModelConfig::to_text() const {
    std::ostringstream os;
    os << "levels=" << levels << '\n'
       << "channels=" << text::join(channels) << '\n'
       << "steps=" << text::join(steps) << '\n'
       << "input_size=" << input_size << '\n'
       << "use_r2jump=" << text::format_bool(use_r2jump) << '\n'
       << "use_inception=" << text::format_bool(use_inception) << '\n'
       << "use_mcskip=" << text::format_bool(use_mcskip) << '\n'
       << "use_scse=" << text::format_bool(use_scse) << '\n'
       << "dropout_rate=" << text::format_double(dropout_rate) << '\n'
       << "dropout_after_scse=" << text::format_bool(dropout_after_scse) << '\n'
       << "seed=" << seed << '\n';
    return os.str();
}

ModelConfig ModelConfig::from_text(std::string_view src) {
    ModelConfig c;
    for (const auto& [key, value] : text::parse_key_values(src)) {
        if (!c.set(key, value)) throw std::invalid_argument("model config: unknown key '" + key + "'");
    }
    c.validate();
    return c;
}

FuseMode fuse_mode_for_level(std::size_t level, std::size_t levels) {
    return 2 * level > levels ? FuseMode::concat : FuseMode::add;
}

template <typename T>
Model<T>::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Initializer<T> init(params_, cfg_.seed);
    coarse_ = build_subnet(init, "coarse", 1, false);
    fine_ = build_subnet(init, "fine", 2, true);
    if (cfg_.use_mcskip) {
        const std::size_t L = cfg_.levels;
        psi_.resize(L);
        for (std::size_t i = 1; i <= L; ++i) {
            for (std::size_t k = i; k <= std::min(i + 2, L); ++k) {
                const std::size_t ck = cfg_.channels[k - 1], ci = cfg_.channels[i - 1];
                const std::string name = "fine.mcskip.k" + std::to_string(k) + "_i" + std::to_string(i);
                psi_[i - 1].push_back(Psi{k, init.he_normal(name + ".weight", Dims{ci, ck, 3, 3}, ck * 9, kPlainGain),
                                          init.constant(name + ".bias", Dims{ci, 1, 1, 1}, T(0))});
            }
        }
    }
}

template <typename T>
typename Model<T>::Subnet Model<T>::build_subnet(Initializer<T>& init, const std::string& prefix,
                                                 std::size_t in_channels, bool fine) {
    const std::size_t L = cfg_.levels;
    const auto& ch = cfg_.channels;
    Subnet net;
    for (std::size_t i = 1; i <= L; ++i) {
        const std::size_t in = i == 1 ? in_channels : ch[i - 2];
        net.encoder.push_back(
            make_feature_block(init, prefix + ".enc" + std::to_string(i), in, ch[i - 1], cfg_.use_inception));
    }
    if (fine && cfg_.use_scse) net.attention.push_back(SCSELite<T>::make(init, prefix + ".scse", ch[L - 1]));
    if (cfg_.use_r2jump) {
        for (std::size_t i = 1; i <= L; ++i) {
            net.jumps.push_back(
                R2Jump<T>::make(init, prefix + ".jump" + std::to_string(i), ch[i - 1], cfg_.steps[i - 1]));
        }
    }
    for (std::size_t k = 1; k < L; ++k) {
        const std::string name = prefix + ".up" + std::to_string(k);
        const std::size_t ci = ch[k], co = ch[k - 1];
        net.up_weight.push_back(init.he_normal(name + ".weight", Dims{ci, co, 2, 2}, ci, kPlainGain));
        net.up_bias.push_back(init.constant(name + ".bias", Dims{co, 1, 1, 1}, T(0)));
    }
    for (std::size_t i = 1; i <= L; ++i) {
        const std::size_t c = ch[i - 1];
        const std::size_t in = fuse_mode_for_level(i, L) == FuseMode::concat ? 2 * c : c;
        net.decoder.push_back(make_feature_block(init, prefix + ".dec" + std::to_string(i), in, c, cfg_.use_inception));
    }
    net.head_weight = init.he_normal(prefix + ".head.weight", Dims{1, ch[0], 1, 1}, ch[0], kPlainGain);
    net.head_bias = init.constant(prefix + ".head.bias", Dims{1, 1, 1, 1}, T(0));
    return net;
}

template <typename T>
void Model<T>::check_image(const Var<T>& image) const {
    const Dims d = image->dims();
    if (d.c != 1 || d.h != cfg_.input_size || d.w != cfg_.input_size) {
        throw std::invalid_argument("model: expected image (n,1," + std::to_string(cfg_.input_size) + "," +
                                    std::to_string(cfg_.input_size) + "), got " + to_string(d));
    }
}

template <typename T>
Var<T> Model<T>::bottleneck(Tape<T>& tape, const Subnet& net, const Var<T>& deepest, const ForwardContext& ctx) const {
    auto drop = [&](const Var<T>& x) {
        if (ctx.mode == Mode::eval || cfg_.dropout_rate == 0.0) return x;
        if (!ctx.rng) throw std::invalid_argument("model: train-mode forward needs a dropout stream");
        return ops::dropout(tape, x, cfg_.dropout_rate, *ctx.rng, ctx.mode);
    };
    if (net.attention.empty()) return drop(deepest);
    const auto& att = net.attention.front();
    if (cfg_.dropout_after_scse) return drop(att.forward(tape, deepest));
    return att.forward(tape, drop(deepest));
}

template <typename T>
std::vector<Var<T>> Model<T>::decode(Tape<T>& tape, const Subnet& net, const std::vector<Var<T>>& enc,
                                     const Var<T>& bottom, Mode mode) const {
    const std::size_t L = cfg_.levels;
    std::vector<Var<T>> dec(L);
    Var<T> below = bottom;
    for (std::size_t i = L; i >= 1; --i) {
        const Var<T> skip = net.jumps.empty() ? enc[i - 1] : net.jumps[i - 1].refine(tape, enc[i - 1]);
        const Var<T> lifted =
            i == L ? below : ops::conv_transpose2d(tape, below, net.up_weight[i - 1], net.up_bias[i - 1], 2);
        dec[i - 1] = forward(net.decoder[i - 1], tape, r2jump_fuse(tape, skip, lifted, fuse_mode_for_level(i, L)),
                             mode);
        below = dec[i - 1];
    }
    return dec;
}

template <typename T>
Var<T> Model<T>::head(Tape<T>& tape, const Subnet& net, const Var<T>& d1) const {
    return ops::activation(tape, ops::conv2d(tape, d1, net.head_weight, net.head_bias, 1, 0),
                           ops::Activation::sigmoid);
}

template <typename T>
CoarseOutput<T> Model<T>::coarse_forward(Tape<T>& tape, const Var<T>& image, const ForwardContext& ctx) const {
    check_image(image);
    const std::size_t L = cfg_.levels;
    std::vector<Var<T>> enc(L);
    for (std::size_t i = 1; i <= L; ++i) {
        const Var<T> in = i == 1 ? image : ops::maxpool2x2(tape, enc[i - 2]).out;
        enc[i - 1] = forward(coarse_.encoder[i - 1], tape, in, ctx.mode);
    }
    auto dec = decode(tape, coarse_, enc, bottleneck(tape, coarse_, enc[L - 1], ctx), ctx.mode);
    auto prob = head(tape, coarse_, dec[0]);
    return CoarseOutput<T>{prob, std::move(dec)};
}

template <typename T>
Var<T> Model<T>::mc_skip_aggregate(Tape<T>& tape, const std::vector<Var<T>>& decoder_feats, std::size_t level) const {
    if (!cfg_.use_mcskip) throw std::logic_error("mc_skip_aggregate: MC-Skip is disabled in this model");
    if (level < 1 || level > cfg_.levels) throw std::out_of_range("mc_skip_aggregate: level out of range");
    if (decoder_feats.size() != cfg_.levels) {
        throw std::invalid_argument("mc_skip_aggregate: expected " + std::to_string(cfg_.levels) + " decoder maps");
    }
    Var<T> sum;
    for (const Psi& psi : psi_[level - 1]) {
        const auto up = ops::upsample_bilinear(tape, decoder_feats[psi.from - 1], std::size_t{1} << (psi.from - level));
        const auto term = ops::conv2d(tape, up, psi.weight, psi.bias, 1, 1);
        sum = sum ? ops::add(tape, sum, term) : term;
    }
    return sum;
}

template <typename T>
Var<T> Model<T>::fine_forward(Tape<T>& tape, const Var<T>& image, const Var<T>& coarse_prob,
                              const std::vector<Var<T>>& decoder_feats, const ForwardContext& ctx) const {
    check_image(image);
    if (coarse_prob->dims() != image->dims()) {
        throw std::invalid_argument("fine_forward: coarse probability shape " + to_string(coarse_prob->dims()) +
                                    " differs from image " + to_string(image->dims()));
    }
    if (cfg_.use_mcskip && decoder_feats.size() != cfg_.levels) {
        throw std::invalid_argument("fine_forward: MC-Skip needs the coarse decoder maps");
    }
    const std::size_t L = cfg_.levels;
    const Var<T> parts[] = {image, coarse_prob};
    std::vector<Var<T>> enc(L);
    for (std::size_t i = 1; i <= L; ++i) {
        const Var<T> in = i == 1 ? ops::concat_channels<T>(tape, parts) : ops::maxpool2x2(tape, enc[i - 2]).out;
        Var<T> e = forward(fine_.encoder[i - 1], tape, in, ctx.mode);
        if (cfg_.use_mcskip) e = ops::add(tape, e, mc_skip_aggregate(tape, decoder_feats, i));
        enc[i - 1] = e;
    }
    auto dec = decode(tape, fine_, enc, bottleneck(tape, fine_, enc[L - 1], ctx), ctx.mode);
    return head(tape, fine_, dec[0]);
}

template <typename T>
CascadeOutput<T> Model<T>::cascade_forward(Tape<T>& tape, const Var<T>& image, const ForwardContext& ctx) const {
    auto coarse = coarse_forward(tape, image, ctx);
    auto fine = fine_forward(tape, image, coarse.prob, coarse.decoder_feats, ctx);
    return CascadeOutput<T>{coarse.prob, fine};
}

template class Model<float>;
template class Model<double>;

}  // namespace r2mf
