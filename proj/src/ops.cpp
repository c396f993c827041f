#include "r2mf/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace r2mf::ops {

namespace fault {
namespace {
std::atomic<double> g_conv_weight_grad_scale{1.0};
}
void set_conv_weight_grad_scale(double s) { g_conv_weight_grad_scale.store(s); }
double conv_weight_grad_scale() { return g_conv_weight_grad_scale.load(); }
}  // namespace fault

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
bool wants_grad(const Var<T>& v) {
    return v && v->requires_grad();
}

template <typename T>
Var<T> new_output(Dims d, bool requires_grad) {
    auto out = make_var<T>(d);
    out->set_requires_grad(requires_grad);
    return out;
}

template <typename T>
bool should_record(const Tape<T>& tape, const Var<T>& out) {
    return tape.recording() && out->requires_grad();
}

void require(bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(what);
}

struct Geometry {
    std::size_t channels, height, width;  // source plane stack
    std::size_t kh, kw, stride, pad;
    std::size_t oh, ow;  // sliding-window grid
    std::size_t rows() const { return channels * kh * kw; }
    std::size_t cols() const { return oh * ow; }
};

// Unfolds sliding windows of src into a (C*kh*kw) x (oh*ow) matrix.
template <typename T>
void im2col(const T* src, const Geometry& g, T* col) {
    const auto pad = static_cast<std::ptrdiff_t>(g.pad);
    for (std::size_t c = 0; c < g.channels; ++c) {
        const T* plane = src + c * g.height * g.width;
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                T* row = col + ((c * g.kh + ki) * g.kw + kj) * g.cols();
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - pad;
                    T* dst = row + oy * g.ow;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
                        std::fill(dst, dst + g.ow, T(0));
                        continue;
                    }
                    const T* line = plane + static_cast<std::size_t>(iy) * g.width;
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - pad;
                        dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) ? T(0) : line[ix];
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatters and accumulates into dst.
template <typename T>
void col2im(const T* col, const Geometry& g, T* dst) {
    const auto pad = static_cast<std::ptrdiff_t>(g.pad);
    for (std::size_t c = 0; c < g.channels; ++c) {
        T* plane = dst + c * g.height * g.width;
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                const T* row = col + ((c * g.kh + ki) * g.kw + kj) * g.cols();
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - pad;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
                    T* line = plane + static_cast<std::size_t>(iy) * g.width;
                    const T* srow = row + oy * g.ow;
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - pad;
                        if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) line[ix] += srow[ox];
                    }
                }
            }
        }
    }
}

template <typename T>
void add_bias(T* out, const T* bias, std::size_t channels, std::size_t plane) {
    for (std::size_t c = 0; c < channels; ++c) {
        T* p = out + c * plane;
        const T b = bias[c];
        for (std::size_t i = 0; i < plane; ++i) p[i] += b;
    }
}

template <typename T>
void accumulate_bias_grad(const T* g, std::size_t channels, std::size_t plane, std::span<T> gb) {
    for (std::size_t c = 0; c < channels; ++c) {
        const T* p = g + c * plane;
        T s(0);
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
        gb[c] += s;
    }
}

}  // namespace

template <typename T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride,
              std::size_t pad) {
    require(x && weight, "conv2d: null input");
    require(stride >= 1, "conv2d: stride must be positive");
    const Dims xd = x->dims();
    const Dims wd = weight->dims();
    if (wd.c != xd.c) {
        throw std::invalid_argument("conv2d: input has " + std::to_string(xd.c) + " channels, weight expects " +
                                    std::to_string(wd.c));
    }
    if (bias && bias->size() != wd.n) throw std::invalid_argument("conv2d: bias length mismatch");
    if (xd.h + 2 * pad < wd.h || xd.w + 2 * pad < wd.w) throw std::invalid_argument("conv2d: non-positive output dims");
    const std::size_t oh = (xd.h + 2 * pad - wd.h) / stride + 1;
    const std::size_t ow = (xd.w + 2 * pad - wd.w) / stride + 1;
    const Geometry g{xd.c, xd.h, xd.w, wd.h, wd.w, stride, pad, oh, ow};
    const bool pointwise = wd.h == 1 && wd.w == 1 && stride == 1 && pad == 0;
    const std::size_t co = wd.n;

    auto out = new_output<T>(Dims{xd.n, co, oh, ow}, wants_grad(x) || wants_grad(weight) || wants_grad(bias));
    CMapMat<T> wm(weight->ptr(), co, g.rows());
    std::vector<T> col(pointwise ? 0 : g.rows() * g.cols());
    for (std::size_t n = 0; n < xd.n; ++n) {
        const T* xn = x->ptr() + n * xd.c * xd.plane();
        if (!pointwise) im2col(xn, g, col.data());
        CMapMat<T> cm(pointwise ? xn : col.data(), g.rows(), g.cols());
        MapMat<T> om(out->ptr() + n * co * g.cols(), co, g.cols());
        om.noalias() = wm * cm;
        if (bias) add_bias(om.data(), bias->ptr(), co, g.cols());
    }

    if (should_record(tape, out)) {
        tape.record(out, [x, weight, bias, o = out.get(), g, pointwise, co] {
            const auto go = o->grad();
            const Dims xd = x->dims();
            std::vector<T> col(pointwise ? 0 : g.rows() * g.cols());
            std::vector<T> dcol(pointwise ? 0 : g.rows() * g.cols());
            CMapMat<T> wm(weight->ptr(), co, g.rows());
            const T wscale = static_cast<T>(fault::conv_weight_grad_scale());
            for (std::size_t n = 0; n < xd.n; ++n) {
                CMapMat<T> gm(go.data() + n * co * g.cols(), co, g.cols());
                const T* xn = x->ptr() + n * xd.c * xd.plane();
                if (wants_grad(weight)) {
                    if (!pointwise) im2col(xn, g, col.data());
                    CMapMat<T> cm(pointwise ? xn : col.data(), g.rows(), g.cols());
                    MapMat<T> gw(weight->grad().data(), co, g.rows());
                    if (wscale == T(1)) {
                        gw.noalias() += gm * cm.transpose();
                    } else {
                        gw.noalias() += wscale * (gm * cm.transpose());
                    }
                }
                if (wants_grad(bias)) accumulate_bias_grad(gm.data(), co, g.cols(), bias->grad());
                if (wants_grad(x)) {
                    T* gx = x->grad().data() + n * xd.c * xd.plane();
                    if (pointwise) {
                        MapMat<T> gxm(gx, g.rows(), g.cols());
                        gxm.noalias() += wm.transpose() * gm;
                    } else {
                        MapMat<T> dm(dcol.data(), g.rows(), g.cols());
                        dm.noalias() = wm.transpose() * gm;
                        col2im(dcol.data(), g, gx);
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Var<T> conv_transpose2d(Tape<T>& tape, const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
                        std::size_t stride) {
    require(x && weight, "conv_transpose2d: null input");
    require(stride >= 1, "conv_transpose2d: stride must be positive");
    const Dims xd = x->dims();
    const Dims wd = weight->dims();
    if (wd.n != xd.c) throw std::invalid_argument("conv_transpose2d: channel mismatch");
    const std::size_t co = wd.c;
    if (bias && bias->size() != co) throw std::invalid_argument("conv_transpose2d: bias length mismatch");
    require(xd.h >= 1 && xd.w >= 1, "conv_transpose2d: empty input");
    const std::size_t oh = (xd.h - 1) * stride + wd.h;
    const std::size_t ow = (xd.w - 1) * stride + wd.w;
    // Column geometry over the output grid: windows of the output correspond to input pixels.
    const Geometry g{co, oh, ow, wd.h, wd.w, stride, 0, xd.h, xd.w};

    auto out = new_output<T>(Dims{xd.n, co, oh, ow}, wants_grad(x) || wants_grad(weight) || wants_grad(bias));
    CMapMat<T> wm(weight->ptr(), xd.c, g.rows());
    std::vector<T> col(g.rows() * g.cols());
    for (std::size_t n = 0; n < xd.n; ++n) {
        CMapMat<T> xm(x->ptr() + n * xd.c * xd.plane(), xd.c, g.cols());
        MapMat<T> cm(col.data(), g.rows(), g.cols());
        cm.noalias() = wm.transpose() * xm;
        T* on = out->ptr() + n * co * oh * ow;
        col2im(col.data(), g, on);
        if (bias) add_bias(on, bias->ptr(), co, oh * ow);
    }

    if (should_record(tape, out)) {
        tape.record(out, [x, weight, bias, o = out.get(), g, co] {
            const auto go = o->grad();
            const Dims xd = x->dims();
            std::vector<T> dcol(g.rows() * g.cols());
            CMapMat<T> wm(weight->ptr(), xd.c, g.rows());
            const std::size_t oplane = g.height * g.width;
            for (std::size_t n = 0; n < xd.n; ++n) {
                const T* gn = go.data() + n * co * oplane;
                im2col(gn, g, dcol.data());
                CMapMat<T> dm(dcol.data(), g.rows(), g.cols());
                CMapMat<T> xm(x->ptr() + n * xd.c * xd.plane(), xd.c, g.cols());
                if (wants_grad(weight)) {
                    MapMat<T> gw(weight->grad().data(), xd.c, g.rows());
                    gw.noalias() += xm * dm.transpose();
                }
                if (wants_grad(bias)) accumulate_bias_grad(gn, co, oplane, bias->grad());
                if (wants_grad(x)) {
                    MapMat<T> gx(x->grad().data() + n * xd.c * xd.plane(), xd.c, g.cols());
                    gx.noalias() += wm * dm;
                }
            }
        });
    }
    return out;
}

template <typename T>
Pooled<T> maxpool2x2(Tape<T>& tape, const Var<T>& x) {
    require(x != nullptr, "maxpool2x2: null input");
    const Dims d = x->dims();
    if (d.h % 2 != 0 || d.w % 2 != 0) throw std::invalid_argument("maxpool2x2: odd spatial dims " + to_string(d));
    const Dims od{d.n, d.c, d.h / 2, d.w / 2};
    Pooled<T> r{new_output<T>(od, wants_grad(x)), std::vector<std::size_t>(od.size())};
    const T* src = x->ptr();
    T* dst = r.out->ptr();
    std::size_t k = 0;
    for (std::size_t nc = 0; nc < d.n * d.c; ++nc) {
        const std::size_t base = nc * d.plane();
        for (std::size_t oy = 0; oy < od.h; ++oy) {
            for (std::size_t ox = 0; ox < od.w; ++ox, ++k) {
                std::size_t best = base + 2 * oy * d.w + 2 * ox;
                const std::size_t cand[3] = {best + 1, best + d.w, best + d.w + 1};
                for (std::size_t c : cand) {
                    if (src[c] > src[best]) best = c;
                }
                dst[k] = src[best];
                r.argmax[k] = best;
            }
        }
    }
    if (should_record(tape, r.out)) {
        tape.record(r.out, [x, o = r.out.get(), idx = r.argmax] {
            const auto go = o->grad();
            auto gx = x->grad();
            for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += go[i];
        });
    }
    return r;
}

template <typename T>
Var<T> batchnorm2d(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                   Tensor<T>& running_var, Mode mode, BatchNormOptions opts) {
    require(x && gamma && beta, "batchnorm2d: null input");
    const Dims d = x->dims();
    if (gamma->size() != d.c || beta->size() != d.c || running_mean.size() != d.c || running_var.size() != d.c) {
        throw std::invalid_argument("batchnorm2d: parameter length does not match channels");
    }
    const std::size_t count = d.n * d.plane();
    if (count == 0) throw std::invalid_argument("batchnorm2d: zero spatial extent");
    const std::size_t plane = d.plane();

    auto out = new_output<T>(d, wants_grad(x) || wants_grad(gamma) || wants_grad(beta));
    // Statistics stay in double; rounding them to T would bias small-variance channels.
    std::vector<double> mean(d.c), inv_std(d.c);
    for (std::size_t c = 0; c < d.c; ++c) {
        double mu = 0.0, var = 0.0;
        if (mode == Mode::train) {
            for (std::size_t n = 0; n < d.n; ++n) {
                const T* p = x->ptr() + (n * d.c + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) mu += p[i];
            }
            mu /= static_cast<double>(count);
            for (std::size_t n = 0; n < d.n; ++n) {
                const T* p = x->ptr() + (n * d.c + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    const double dv = p[i] - mu;
                    var += dv * dv;
                }
            }
            var /= static_cast<double>(count);
            running_mean.data()[c] =
                static_cast<T>(opts.momentum * running_mean.data()[c] + (1.0 - opts.momentum) * mu);
            running_var.data()[c] = static_cast<T>(opts.momentum * running_var.data()[c] + (1.0 - opts.momentum) * var);
        } else {
            mu = running_mean.data()[c];
            var = running_var.data()[c];
        }
        mean[c] = mu;
        inv_std[c] = 1.0 / std::sqrt(var + opts.eps);
        const double scale = inv_std[c] * gamma->data()[c], bt = beta->data()[c];
        for (std::size_t n = 0; n < d.n; ++n) {
            const T* p = x->ptr() + (n * d.c + c) * plane;
            T* q = out->ptr() + (n * d.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) q[i] = static_cast<T>((p[i] - mu) * scale + bt);
        }
    }

    if (should_record(tape, out)) {
        tape.record(out, [x, gamma, beta, o = out.get(), mean, inv_std, mode, count, plane] {
            const Dims d = x->dims();
            const auto go = o->grad();
            for (std::size_t c = 0; c < d.c; ++c) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::size_t n = 0; n < d.n; ++n) {
                    const std::size_t base = (n * d.c + c) * plane;
                    for (std::size_t i = 0; i < plane; ++i) {
                        const double xhat = (x->data()[base + i] - mean[c]) * inv_std[c];
                        sum_g += go[base + i];
                        sum_gx += go[base + i] * xhat;
                    }
                }
                if (wants_grad(gamma)) gamma->grad()[c] += static_cast<T>(sum_gx);
                if (wants_grad(beta)) beta->grad()[c] += static_cast<T>(sum_g);
                if (!wants_grad(x)) continue;
                auto gx = x->grad();
                const double gm = gamma->data()[c];
                const double is = inv_std[c];
                const double inv_count = 1.0 / static_cast<double>(count);
                for (std::size_t n = 0; n < d.n; ++n) {
                    const std::size_t base = (n * d.c + c) * plane;
                    for (std::size_t i = 0; i < plane; ++i) {
                        if (mode == Mode::eval) {
                            gx[base + i] += static_cast<T>(go[base + i] * gm * is);
                        } else {
                            const double xhat = (x->data()[base + i] - mean[c]) * is;
                            gx[base + i] +=
                                static_cast<T>(gm * is * (go[base + i] - inv_count * sum_g - xhat * inv_count * sum_gx));
                        }
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Var<T> activation(Tape<T>& tape, const Var<T>& x, Activation kind) {
    require(x != nullptr, "activation: null input");
    if (kind == Activation::none) return x;
    auto out = new_output<T>(x->dims(), wants_grad(x));
    const auto in = x->data();
    auto y = out->data();
    const T slope = static_cast<T>(kLeakySlope);
    switch (kind) {
        case Activation::relu:
            for (std::size_t i = 0; i < in.size(); ++i) y[i] = in[i] > T(0) ? in[i] : T(0);
            break;
        case Activation::leaky_relu:
            for (std::size_t i = 0; i < in.size(); ++i) y[i] = in[i] > T(0) ? in[i] : slope * in[i];
            break;
        case Activation::sigmoid: {
            // Clamped so that probabilities stay strictly inside (0, 1).
            const T lo = std::numeric_limits<T>::min();
            const T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
            for (std::size_t i = 0; i < in.size(); ++i) {
                const T v = in[i];
                const T s = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
                y[i] = std::clamp(s, lo, hi);
            }
            break;
        }
        case Activation::none:
            break;
    }
    if (should_record(tape, out)) {
        tape.record(out, [x, o = out.get(), kind, slope] {
            const auto go = o->grad();
            const auto in = x->data();
            const auto y = o->data();
            auto gx = x->grad();
            for (std::size_t i = 0; i < gx.size(); ++i) {
                switch (kind) {
                    case Activation::relu:
                        if (in[i] > T(0)) gx[i] += go[i];
                        break;
                    case Activation::leaky_relu:
                        gx[i] += in[i] > T(0) ? go[i] : slope * go[i];
                        break;
                    case Activation::sigmoid:
                        gx[i] += go[i] * y[i] * (T(1) - y[i]);
                        break;
                    case Activation::none:
                        break;
                }
            }
        });
    }
    return out;
}

template <typename T>
Var<T> global_avg_pool(Tape<T>& tape, const Var<T>& x) {
    require(x != nullptr, "global_avg_pool: null input");
    const Dims d = x->dims();
    if (d.size() == 0) throw std::invalid_argument("global_avg_pool: empty tensor");
    const std::size_t plane = d.plane();
    auto out = new_output<T>(Dims{d.n, d.c, 1, 1}, wants_grad(x));
    for (std::size_t k = 0; k < d.n * d.c; ++k) {
        double s = 0.0;
        const T* p = x->ptr() + k * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
        out->data()[k] = static_cast<T>(s / static_cast<double>(plane));
    }
    if (should_record(tape, out)) {
        tape.record(out, [x, o = out.get(), plane] {
            const auto go = o->grad();
            auto gx = x->grad();
            const T inv = T(1) / static_cast<T>(plane);
            for (std::size_t k = 0; k < go.size(); ++k) {
                for (std::size_t i = 0; i < plane; ++i) gx[k * plane + i] += go[k] * inv;
            }
        });
    }
    return out;
}

template <typename T>
Var<T> concat_channels(Tape<T>& tape, std::span<const Var<T>> parts) {
    require(!parts.empty(), "concat_channels: no inputs");
    const Dims d0 = parts[0]->dims();
    std::size_t channels = 0;
    bool any_grad = false;
    for (const auto& p : parts) {
        const Dims d = p->dims();
        if (d.n != d0.n || d.h != d0.h || d.w != d0.w) {
            throw std::invalid_argument("concat_channels: spatial mismatch " + to_string(d) + " vs " + to_string(d0));
        }
        channels += d.c;
        any_grad = any_grad || p->requires_grad();
    }
    const std::size_t plane = d0.plane();
    auto out = new_output<T>(Dims{d0.n, channels, d0.h, d0.w}, any_grad);
    for (std::size_t n = 0; n < d0.n; ++n) {
        T* dst = out->ptr() + n * channels * plane;
        for (const auto& p : parts) {
            const std::size_t len = p->dims().c * plane;
            std::copy_n(p->ptr() + n * len, len, dst);
            dst += len;
        }
    }
    if (should_record(tape, out)) {
        std::vector<Var<T>> inputs(parts.begin(), parts.end());
        tape.record(out, [inputs, o = out.get(), channels, plane] {
            const auto go = o->grad();
            const std::size_t batch = o->dims().n;
            std::size_t offset = 0;
            for (const auto& p : inputs) {
                const std::size_t len = p->dims().c * plane;
                if (p->requires_grad()) {
                    auto gp = p->grad();
                    for (std::size_t n = 0; n < batch; ++n) {
                        const T* src = go.data() + n * channels * plane + offset;
                        for (std::size_t i = 0; i < len; ++i) gp[n * len + i] += src[i];
                    }
                }
                offset += len;
            }
        });
    }
    return out;
}

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
    require(a && b, "add: null input");
    if (a->dims() != b->dims()) {
        throw std::invalid_argument("add: shape mismatch " + to_string(a->dims()) + " vs " + to_string(b->dims()));
    }
    auto out = new_output<T>(a->dims(), wants_grad(a) || wants_grad(b));
    for (std::size_t i = 0; i < out->size(); ++i) out->data()[i] = a->data()[i] + b->data()[i];
    if (should_record(tape, out)) {
        tape.record(out, [a, b, o = out.get()] {
            const auto go = o->grad();
            for (const auto& v : {a, b}) {
                if (!v->requires_grad()) continue;
                auto gv = v->grad();
                for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += go[i];
            }
        });
    }
    return out;
}

template <typename T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
    require(a && b, "mul: null input");
    if (a->dims() != b->dims()) throw std::invalid_argument("mul: shape mismatch");
    auto out = new_output<T>(a->dims(), wants_grad(a) || wants_grad(b));
    for (std::size_t i = 0; i < out->size(); ++i) out->data()[i] = a->data()[i] * b->data()[i];
    if (should_record(tape, out)) {
        tape.record(out, [a, b, o = out.get()] {
            const auto go = o->grad();
            // Read both operands before writing: a and b may alias.
            std::vector<T> ga(go.size()), gb(go.size());
            for (std::size_t i = 0; i < go.size(); ++i) {
                ga[i] = go[i] * b->data()[i];
                gb[i] = go[i] * a->data()[i];
            }
            if (a->requires_grad()) {
                auto g = a->grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += ga[i];
            }
            if (b->requires_grad()) {
                auto g = b->grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += gb[i];
            }
        });
    }
    return out;
}

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& x, double k) {
    require(x != nullptr, "scale: null input");
    auto out = new_output<T>(x->dims(), wants_grad(x));
    const T kk = static_cast<T>(k);
    for (std::size_t i = 0; i < out->size(); ++i) out->data()[i] = x->data()[i] * kk;
    if (should_record(tape, out)) {
        tape.record(out, [x, o = out.get(), kk] {
            const auto go = o->grad();
            auto gx = x->grad();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * kk;
        });
    }
    return out;
}

template <typename T>
Var<T> sum(Tape<T>& tape, const Var<T>& x) {
    require(x != nullptr, "sum: null input");
    auto out = new_output<T>(Dims{}, wants_grad(x));
    double s = 0.0;
    for (T v : x->data()) s += v;
    out->data()[0] = static_cast<T>(s);
    if (should_record(tape, out)) {
        tape.record(out, [x, o = out.get()] {
            const T g = o->grad()[0];
            auto gx = x->grad();
            for (auto& v : gx) v += g;
        });
    }
    return out;
}

template <typename T>
Var<T> scale_channels(Tape<T>& tape, const Var<T>& x, const Var<T>& s) {
    require(x && s, "scale_channels: null input");
    const Dims d = x->dims();
    if (s->dims() != Dims{d.n, d.c, 1, 1}) {
        throw std::invalid_argument("scale_channels: scale shape " + to_string(s->dims()) + " does not match " +
                                    to_string(d));
    }
    const std::size_t plane = d.plane();
    auto out = new_output<T>(d, wants_grad(x) || wants_grad(s));
    for (std::size_t k = 0; k < d.n * d.c; ++k) {
        const T sk = s->data()[k];
        for (std::size_t i = 0; i < plane; ++i) out->data()[k * plane + i] = x->data()[k * plane + i] * sk;
    }
    if (should_record(tape, out)) {
        tape.record(out, [x, s, o = out.get(), plane] {
            const auto go = o->grad();
            const std::size_t nc = s->size();
            for (std::size_t k = 0; k < nc; ++k) {
                double acc = 0.0;
                for (std::size_t i = 0; i < plane; ++i) {
                    const std::size_t j = k * plane + i;
                    acc += static_cast<double>(go[j]) * x->data()[j];
                }
                if (s->requires_grad()) s->grad()[k] += static_cast<T>(acc);
                if (x->requires_grad()) {
                    auto gx = x->grad();
                    const T sk = s->data()[k];
                    for (std::size_t i = 0; i < plane; ++i) gx[k * plane + i] += go[k * plane + i] * sk;
                }
            }
        });
    }
    return out;
}

template <typename T>
Var<T> scale_spatial(Tape<T>& tape, const Var<T>& x, const Var<T>& q) {
    require(x && q, "scale_spatial: null input");
    const Dims d = x->dims();
    if (q->dims() != Dims{d.n, 1, d.h, d.w}) {
        throw std::invalid_argument("scale_spatial: map shape " + to_string(q->dims()) + " does not match " +
                                    to_string(d));
    }
    const std::size_t plane = d.plane();
    auto out = new_output<T>(d, wants_grad(x) || wants_grad(q));
    for (std::size_t n = 0; n < d.n; ++n) {
        const T* qn = q->ptr() + n * plane;
        for (std::size_t c = 0; c < d.c; ++c) {
            const std::size_t base = (n * d.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) out->data()[base + i] = x->data()[base + i] * qn[i];
        }
    }
    if (should_record(tape, out)) {
        tape.record(out, [x, q, o = out.get(), plane] {
            const Dims d = x->dims();
            const auto go = o->grad();
            std::vector<double> gq(q->size(), 0.0);
            for (std::size_t n = 0; n < d.n; ++n) {
                for (std::size_t c = 0; c < d.c; ++c) {
                    const std::size_t base = (n * d.c + c) * plane;
                    for (std::size_t i = 0; i < plane; ++i) {
                        gq[n * plane + i] += static_cast<double>(go[base + i]) * x->data()[base + i];
                    }
                    if (x->requires_grad()) {
                        auto gx = x->grad();
                        const T* qn = q->ptr() + n * plane;
                        for (std::size_t i = 0; i < plane; ++i) gx[base + i] += go[base + i] * qn[i];
                    }
                }
            }
            if (q->requires_grad()) {
                auto g = q->grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<T>(gq[i]);
            }
        });
    }
    return out;
}

template <typename T>
Var<T> dropout(Tape<T>& tape, const Var<T>& x, double rate, std::mt19937_64& rng, Mode mode) {
    require(x != nullptr, "dropout: null input");
    if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout: rate must be in [0, 1)");
    if (mode == Mode::eval || rate == 0.0) return x;
    auto out = new_output<T>(x->dims(), wants_grad(x));
    std::bernoulli_distribution keep(1.0 - rate);
    const T kept = static_cast<T>(1.0 / (1.0 - rate));
    std::vector<T> mask(x->size());
    for (std::size_t i = 0; i < mask.size(); ++i) {
        mask[i] = keep(rng) ? kept : T(0);
        out->data()[i] = x->data()[i] * mask[i];
    }
    if (should_record(tape, out)) {
        tape.record(out, [x, o = out.get(), mask = std::move(mask)] {
            const auto go = o->grad();
            auto gx = x->grad();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * mask[i];
        });
    }
    return out;
}

namespace {

struct Tap {
    std::size_t lo, hi;
    double t;
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t factor) {
    std::vector<Tap> taps(in * factor);
    for (std::size_t o = 0; o < taps.size(); ++o) {
        double s = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(in - 1));
        const auto lo = static_cast<std::size_t>(std::floor(s));
        taps[o] = Tap{lo, std::min(lo + 1, in - 1), s - static_cast<double>(lo)};
    }
    return taps;
}

}  // namespace

template <typename T>
Var<T> upsample_bilinear(Tape<T>& tape, const Var<T>& x, std::size_t factor) {
    require(x != nullptr, "upsample_bilinear: null input");
    require(factor >= 1, "upsample_bilinear: factor must be positive");
    if (factor == 1) return x;
    const Dims d = x->dims();
    const Dims od{d.n, d.c, d.h * factor, d.w * factor};
    auto rows = bilinear_taps(d.h, factor);
    auto cols = bilinear_taps(d.w, factor);
    auto out = new_output<T>(od, wants_grad(x));
    for (std::size_t k = 0; k < d.n * d.c; ++k) {
        const T* src = x->ptr() + k * d.plane();
        T* dst = out->ptr() + k * od.plane();
        for (std::size_t oy = 0; oy < od.h; ++oy) {
            const Tap& r = rows[oy];
            const T ty = static_cast<T>(r.t);
            for (std::size_t ox = 0; ox < od.w; ++ox) {
                const Tap& c = cols[ox];
                const T tx = static_cast<T>(c.t);
                const T top = src[r.lo * d.w + c.lo] * (T(1) - tx) + src[r.lo * d.w + c.hi] * tx;
                const T bot = src[r.hi * d.w + c.lo] * (T(1) - tx) + src[r.hi * d.w + c.hi] * tx;
                dst[oy * od.w + ox] = top * (T(1) - ty) + bot * ty;
            }
        }
    }
    if (should_record(tape, out)) {
        tape.record(out, [x, o = out.get(), rows = std::move(rows), cols = std::move(cols)] {
            const Dims d = x->dims();
            const Dims od = o->dims();
            const auto go = o->grad();
            auto gx = x->grad();
            for (std::size_t k = 0; k < d.n * d.c; ++k) {
                const T* g = go.data() + k * od.plane();
                T* dst = gx.data() + k * d.plane();
                for (std::size_t oy = 0; oy < od.h; ++oy) {
                    const Tap& r = rows[oy];
                    const T ty = static_cast<T>(r.t);
                    for (std::size_t ox = 0; ox < od.w; ++ox) {
                        const Tap& c = cols[ox];
                        const T tx = static_cast<T>(c.t);
                        const T v = g[oy * od.w + ox];
                        dst[r.lo * d.w + c.lo] += v * (T(1) - ty) * (T(1) - tx);
                        dst[r.lo * d.w + c.hi] += v * (T(1) - ty) * tx;
                        dst[r.hi * d.w + c.lo] += v * ty * (T(1) - tx);
                        dst[r.hi * d.w + c.hi] += v * ty * tx;
                    }
                }
            }
        });
    }
    return out;
}

#define R2MF_INSTANTIATE_OPS(T)                                                                                   \
    template Var<T> conv2d(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&, std::size_t, std::size_t);      \
    template Var<T> conv_transpose2d(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&, std::size_t);         \
    template Pooled<T> maxpool2x2(Tape<T>&, const Var<T>&);                                                       \
    template Var<T> batchnorm2d(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&, Tensor<T>&, Tensor<T>&,    \
                                Mode, BatchNormOptions);                                                          \
    template Var<T> activation(Tape<T>&, const Var<T>&, Activation);                                              \
    template Var<T> global_avg_pool(Tape<T>&, const Var<T>&);                                                     \
    template Var<T> concat_channels(Tape<T>&, std::span<const Var<T>>);                                           \
    template Var<T> add(Tape<T>&, const Var<T>&, const Var<T>&);                                                  \
    template Var<T> mul(Tape<T>&, const Var<T>&, const Var<T>&);                                                  \
    template Var<T> scale(Tape<T>&, const Var<T>&, double);                                                       \
    template Var<T> sum(Tape<T>&, const Var<T>&);                                                                 \
    template Var<T> scale_channels(Tape<T>&, const Var<T>&, const Var<T>&);                                       \
    template Var<T> scale_spatial(Tape<T>&, const Var<T>&, const Var<T>&);                                        \
    template Var<T> dropout(Tape<T>&, const Var<T>&, double, std::mt19937_64&, Mode);                             \
    template Var<T> upsample_bilinear(Tape<T>&, const Var<T>&, std::size_t);

R2MF_INSTANTIATE_OPS(float)
R2MF_INSTANTIATE_OPS(double)

#undef R2MF_INSTANTIATE_OPS

}  // namespace r2mf::ops
