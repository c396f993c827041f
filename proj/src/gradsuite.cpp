#include "r2mf/gradsuite.hpp"

#include <memory>
#include <random>

#include "r2mf/blocks.hpp"
#include "r2mf/data.hpp"
#include "r2mf/loss.hpp"
#include "r2mf/ops.hpp"

namespace r2mf {

namespace {

// Step and denominator floor per precision; see the 32-bit reference rationale
// in cross_precision_check.
constexpr double kEps32 = 1e-5, kFloor32 = 1e-3;
constexpr double kEps64 = 1e-5, kFloor64 = 1e-4;

template <typename T>
struct Probe {
    std::function<Var<T>(Tape<T>&)> fn;
    std::vector<NamedParam<T>> params;
};

template <typename T>
Var<T> uniform_leaf(Dims d, std::uint64_t seed, double lo, double hi) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<T> v(d.size());
    for (auto& x : v) x = static_cast<T>(u(rng));
    return make_leaf<T>(d, std::move(v));
}

template <typename T>
Tensor<T> random_mask(Dims d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Tensor<T> m(d);
    for (auto& x : m.data()) x = static_cast<T>(rng() % 2);
    return m;
}

enum class Case {
    conv2d,
    conv2d_stride2,
    conv_transpose2d,
    maxpool2x2,
    batchnorm_train,
    batchnorm_eval,
    relu,
    leaky_relu,
    sigmoid,
    upsample_bilinear,
    dropout,
    conv_unit,
    inception_r,
    double_conv,
    r2jump,
    scse_lite,
    bce,
    dice,
    total_loss,
    cascade,
};

constexpr const char* case_name(Case c) {
    switch (c) {
        case Case::conv2d: return "conv2d";
        case Case::conv2d_stride2: return "conv2d_stride2";
        case Case::conv_transpose2d: return "conv_transpose2d";
        case Case::maxpool2x2: return "maxpool2x2";
        case Case::batchnorm_train: return "batchnorm_train";
        case Case::batchnorm_eval: return "batchnorm_eval";
        case Case::relu: return "relu";
        case Case::leaky_relu: return "leaky_relu";
        case Case::sigmoid: return "sigmoid";
        case Case::upsample_bilinear: return "upsample_bilinear";
        case Case::dropout: return "dropout";
        case Case::conv_unit: return "conv_unit";
        case Case::inception_r: return "inception_r";
        case Case::double_conv: return "double_conv";
        case Case::r2jump: return "r2jump";
        case Case::scse_lite: return "scse_lite";
        case Case::bce: return "bce_loss";
        case Case::dice: return "dice_loss";
        case Case::total_loss: return "total_loss";
        case Case::cascade: return "cascade_end_to_end";
    }
    return "?";
}

template <typename T, typename Block, typename Fwd>
Probe<T> block_probe(std::uint64_t seed, Dims d, Block (*make)(Initializer<T>&), Fwd fwd) {
    auto ps = std::make_shared<ParameterSet<T>>();
    Initializer<T> init(*ps, seed);
    auto block = std::make_shared<Block>(make(init));
    auto x = uniform_leaf<T>(d, seed + 1, -1.0, 1.0);
    auto params = ps->trainable();
    params.push_back({"x", x});
    return {[ps, block, x, fwd](Tape<T>& t) { return fwd(*block, t, x); }, params};
}

template <typename T>
Probe<T> build(Case c, const GradSuiteOptions& o) {
    using ops::Activation;
    const std::uint64_t s = o.seed * 1000 + static_cast<std::uint64_t>(c);
    const Dims d{2, 3, 8, 8};
    auto x = uniform_leaf<T>(d, s, -1.0, 1.0);
    switch (c) {
        case Case::conv2d:
        case Case::conv2d_stride2: {
            auto w = uniform_leaf<T>(Dims{4, 3, 3, 3}, s + 1, -0.5, 0.5);
            auto b = uniform_leaf<T>(Dims{4, 1, 1, 1}, s + 2, -0.5, 0.5);
            const std::size_t stride = c == Case::conv2d ? 1 : 2;
            return {[=](Tape<T>& t) { return ops::conv2d(t, x, w, b, stride, 1); }, {{"x", x}, {"w", w}, {"b", b}}};
        }
        case Case::conv_transpose2d: {
            auto w = uniform_leaf<T>(Dims{3, 2, 2, 2}, s + 1, -0.5, 0.5);
            auto b = uniform_leaf<T>(Dims{2, 1, 1, 1}, s + 2, -0.5, 0.5);
            return {[=](Tape<T>& t) { return ops::conv_transpose2d(t, x, w, b, 2); }, {{"x", x}, {"w", w}, {"b", b}}};
        }
        case Case::maxpool2x2: return {[=](Tape<T>& t) { return ops::maxpool2x2(t, x).out; }, {{"x", x}}};
        case Case::batchnorm_train:
        case Case::batchnorm_eval: {
            auto gamma = uniform_leaf<T>(Dims{3, 1, 1, 1}, s + 1, 0.5, 1.5);
            auto beta = uniform_leaf<T>(Dims{3, 1, 1, 1}, s + 2, -0.5, 0.5);
            const Mode mode = c == Case::batchnorm_train ? Mode::train : Mode::eval;
            return {[=](Tape<T>& t) {
                        Tensor<T> rm(Dims{3, 1, 1, 1}, T(0.1)), rv(Dims{3, 1, 1, 1}, T(0.8));
                        return ops::batchnorm2d(t, x, gamma, beta, rm, rv, mode);
                    },
                    {{"x", x}, {"gamma", gamma}, {"beta", beta}}};
        }
        case Case::relu: return {[=](Tape<T>& t) { return ops::activation(t, x, Activation::relu); }, {{"x", x}}};
        case Case::leaky_relu:
            return {[=](Tape<T>& t) { return ops::activation(t, x, Activation::leaky_relu); }, {{"x", x}}};
        case Case::sigmoid: return {[=](Tape<T>& t) { return ops::activation(t, x, Activation::sigmoid); }, {{"x", x}}};
        case Case::upsample_bilinear: return {[=](Tape<T>& t) { return ops::upsample_bilinear(t, x, 4); }, {{"x", x}}};
        case Case::dropout:
            return {[=](Tape<T>& t) {
                        std::mt19937_64 rng(s);
                        return ops::dropout(t, x, 0.2, rng, Mode::train);
                    },
                    {{"x", x}}};
        case Case::conv_unit:
            return block_probe<T>(s, d, +[](Initializer<T>& i) { return ConvUnit<T>::make(i, "unit", 3, 4, 3, Activation::leaky_relu); },
                                  [](const auto& b, Tape<T>& t, const Var<T>& v) { return b.forward(t, v, Mode::train); });
        case Case::inception_r:
            return block_probe<T>(s, d, +[](Initializer<T>& i) { return InceptionR<T>::make(i, "inception", 3, 4); },
                                  [](const auto& b, Tape<T>& t, const Var<T>& v) { return b.forward(t, v, Mode::train); });
        case Case::double_conv:
            return block_probe<T>(s, d, +[](Initializer<T>& i) { return DoubleConv<T>::make(i, "double", 3, 4); },
                                  [](const auto& b, Tape<T>& t, const Var<T>& v) { return b.forward(t, v, Mode::train); });
        case Case::r2jump:
            return block_probe<T>(s, Dims{2, 4, 8, 8}, +[](Initializer<T>& i) { return R2Jump<T>::make(i, "jump", 4, 3); },
                                  [](const auto& b, Tape<T>& t, const Var<T>& v) { return b.refine(t, v); });
        case Case::scse_lite:
            return block_probe<T>(s, Dims{2, 4, 8, 8}, +[](Initializer<T>& i) { return SCSELite<T>::make(i, "scse", 4); },
                                  [](const auto& b, Tape<T>& t, const Var<T>& v) { return b.forward(t, v); });
        case Case::bce:
        case Case::dice:
        case Case::total_loss: {
            const Dims pd{1, 1, 8, 8};
            auto pc = uniform_leaf<T>(pd, s + 1, 0.05, 0.95);
            auto pf = uniform_leaf<T>(pd, s + 2, 0.05, 0.95);
            auto mask = std::make_shared<Tensor<T>>(random_mask<T>(pd, s + 3));
            if (c == Case::bce) return {[=](Tape<T>& t) { return bce_loss(t, pf, *mask); }, {{"p", pf}}};
            if (c == Case::dice) return {[=](Tape<T>& t) { return dice_loss(t, pf, *mask); }, {{"p", pf}}};
            return {[=](Tape<T>& t) { return r2mf::total_loss(t, pc, pf, *mask); }, {{"p_coarse", pc}, {"p_fine", pf}}};
        }
        case Case::cascade: {
            ModelConfig cfg = o.model;
            cfg.input_size = o.e2e_size;
            auto model = std::make_shared<Model<T>>(cfg);
            const std::size_t size = o.e2e_size, batch = o.e2e_batch;
            const Dims id{batch, 1, size, size};
            auto image = make_var<T>(id);
            auto mask = std::make_shared<Tensor<T>>(id);
            if (size >= 32 && (size & (size - 1)) == 0) {
                for (std::size_t b = 0; b < batch; ++b) {
                    const auto sample = generate_sample(s + 10 * b, View::coronal, size, Quality::high);
                    const std::size_t off = b * sample.mask.size();
                    for (std::size_t i = 0; i < sample.mask.size(); ++i) {
                        image->data()[off + i] = static_cast<T>(sample.image.data()[i]);
                        mask->data()[off + i] = static_cast<T>(sample.mask.bits[i]);
                    }
                }
            } else {
                image = uniform_leaf<T>(id, s + 1, 0.0, 1.0);
                image->set_requires_grad(false);
                *mask = random_mask<T>(id, s + 2);
            }
            const std::uint64_t drop_seed = s + 3;
            return {[=](Tape<T>& t) {
                        std::mt19937_64 rng(drop_seed);
                        const auto out = model->cascade_forward(t, image, ForwardContext{Mode::train, &rng});
                        return r2mf::total_loss(t, out.coarse, out.fine, *mask);
                    },
                    model->params().trainable()};
        }
    }
    throw std::logic_error("gradient suite: unknown case");
}

class FaultGuard {
   public:
    explicit FaultGuard(bool on) : on_(on) {
        if (on_) ops::fault::set_conv_weight_grad_scale(2.0);
    }
    ~FaultGuard() {
        if (on_) ops::fault::set_conv_weight_grad_scale(1.0);
    }
    FaultGuard(const FaultGuard&) = delete;
    FaultGuard& operator=(const FaultGuard&) = delete;

   private:
    bool on_;
};

}  // namespace

GradSuiteOptions GradSuiteOptions::defaults(CheckPrecision p) {
    GradSuiteOptions o;
    o.precision = p;
    if (p == CheckPrecision::f64) o.block_tol = o.e2e_tol = 1e-4;
    return o;
}

std::vector<GradSuiteResult> run_gradient_suite(const GradSuiteOptions& opts,
                                                const std::function<void(const GradSuiteResult&)>& on_result) {
    ModelConfig e2e = opts.model;
    e2e.input_size = opts.e2e_size;
    e2e.validate();
    if (opts.e2e_batch == 0) throw std::invalid_argument("gradient suite: end-to-end batch must be positive");
    FaultGuard guard(opts.inject_bug);
    std::vector<GradSuiteResult> results;
    for (int i = 0; i <= static_cast<int>(Case::cascade); ++i) {
        const auto c = static_cast<Case>(i);
        if (!opts.filter.empty() && std::string(case_name(c)).find(opts.filter) == std::string::npos) continue;
        GradSuiteResult r;
        r.name = case_name(c);
        r.end_to_end = c == Case::cascade;
        r.tol = r.end_to_end ? opts.e2e_tol : opts.block_tol;
        CheckOptions co;
        co.tol = r.tol;
        co.samples = opts.samples;
        co.seed = opts.seed + static_cast<std::uint64_t>(i);
        co.kink_screen = true;
        if (opts.precision == CheckPrecision::f32) {
            co.eps = kEps32;
            if (double e = r.end_to_end ? opts.e2e_eps : opts.block_eps; e > 0) co.eps = e;
            co.scale_floor = kFloor32;
            auto p32 = build<float>(c, opts);
            auto p64 = build<double>(c, opts);
            r.report = cross_precision_check(p32.fn, p32.params, p64.fn, p64.params, co);
        } else {
            co.eps = kEps64;
            if (double e = r.end_to_end ? opts.e2e_eps : opts.block_eps; e > 0) co.eps = e;
            co.scale_floor = kFloor64;
            auto p64 = build<double>(c, opts);
            r.report = finite_diff_check<double>(p64.fn, p64.params, co);
        }
        if (on_result) on_result(r);
        results.push_back(std::move(r));
    }
    return results;
}

}  // namespace r2mf
