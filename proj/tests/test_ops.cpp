#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "r2mf/gradcheck.hpp"
#include "r2mf/ops.hpp"
#include "test_util.hpp"

using namespace r2mf;
using namespace r2mf::testing;
using ops::Activation;

namespace {

// Values bounded away from zero and from each other, so kinks (relu, max) are
// never crossed by a finite-difference step.
template <typename T>
Var<T> separated_leaf(Dims d, std::uint64_t seed) {
    std::vector<T> v(d.size());
    std::iota(v.begin(), v.end(), T(0));
    std::mt19937_64 rng(seed);
    std::shuffle(v.begin(), v.end(), rng);
    const double n = static_cast<double>(v.size());
    for (auto& x : v) x = static_cast<T>((static_cast<double>(x) - n / 2.0 + 0.5) * (2.0 / n) + (x < n / 2 ? -0.1 : 0.1));
    return make_leaf<T>(d, std::move(v));
}

// Every 2x2 window holds values at least 1 apart.
template <typename T>
Var<T> pool_leaf(Dims d, std::uint64_t seed) {
    auto v = random_values<T>(d.size(), seed, -1.0, 1.0);
    std::mt19937_64 rng(seed);
    for (std::size_t k = 0; k < d.n * d.c; ++k)
        for (std::size_t y = 0; y < d.h; y += 2)
            for (std::size_t x = 0; x < d.w; x += 2) {
                std::size_t idx[4] = {0, 1, 2, 3};
                std::shuffle(idx, idx + 4, rng);
                const std::size_t base = k * d.plane() + y * d.w + x;
                const std::size_t off[4] = {0, 1, d.w, d.w + 1};
                for (std::size_t j = 0; j < 4; ++j) v[base + off[j]] += static_cast<T>(3.0 * idx[j]);
            }
    return make_leaf<T>(d, std::move(v));
}

// <L(x), y> against <x, L^T(y)> with L^T taken from the tape.
template <typename T>
void check_adjoint(const char* what, const std::function<Var<T>(Tape<T>&, const Var<T>&)>& linear, Dims in,
                   std::uint64_t seed) {
    INFO(std::string(what));
    auto x = random_leaf<T>(in, seed);
    Tape<T> tape;
    auto lx = linear(tape, x);
    auto y = random_values<T>(lx->size(), seed + 1);
    tape.backward(lx, y);
    const double lhs = dot(*lx, Tensor<T>(lx->dims(), y));
    Tensor<T> gx(in, std::vector<T>(x->grad().begin(), x->grad().end()));
    const double rhs = dot(*x, gx);
    CHECK(std::abs(lhs - rhs) <= 1e-4 * std::max(1.0, std::abs(lhs)));
}

const Dims kShapes[3] = {Dims{1, 2, 4, 4}, Dims{2, 3, 6, 4}, Dims{1, 4, 8, 6}};

}  // namespace

TEST_CASE("conv2d 1x1 identity kernel reproduces input") {
    Tape<float> tape;
    auto x = random_const<float>(Dims{1, 1, 5, 5}, 3);
    auto w = make_var<float>(Dims{1, 1, 1, 1}, 1.f);
    auto b = make_var<float>(Dims{1, 1, 1, 1}, 0.f);
    auto y = ops::conv2d(tape, x, w, b, 1, 0);
    CHECK(y->dims() == x->dims());
    for (std::size_t i = 0; i < x->size(); ++i) CHECK(y->data()[i] == x->data()[i]);
}

TEST_CASE("conv2d all-ones 3x3 on all-ones input") {
    Tape<float> tape;
    auto x = make_var<float>(Dims{1, 1, 3, 3}, 1.f);
    auto w = make_var<float>(Dims{1, 1, 3, 3}, 1.f);
    auto y = ops::conv2d(tape, x, w, Var<float>{}, 1, 1);
    const std::vector<float> expect{4, 6, 4, 6, 9, 6, 4, 6, 4};
    for (std::size_t i = 0; i < 9; ++i) CHECK(y->data()[i] == expect[i]);
}

TEST_CASE("conv2d zero input yields bias") {
    Tape<float> tape;
    auto x = make_var<float>(Dims{1, 2, 4, 4}, 0.f);
    auto w = random_const<float>(Dims{3, 2, 3, 3}, 5);
    auto b = make_var<float>(Dims{3, 1, 1, 1}, std::vector<float>{0.5f, -1.f, 2.f});
    auto y = ops::conv2d(tape, x, w, b, 1, 1);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 16; ++i) CHECK(y->data()[c * 16 + i] == b->data()[c]);
}

TEST_CASE("conv2d matches nested-loop oracle") {
    for (std::size_t stride : {1u, 2u}) {
        for (std::size_t pad : {0u, 1u}) {
            auto x = random_const<double>(Dims{2, 3, 7, 6}, 11 + stride + pad);
            auto w = random_const<double>(Dims{4, 3, 3, 3}, 17);
            auto b = random_const<double>(Dims{4, 1, 1, 1}, 19);
            Tape<double> tape(false);
            auto y = ops::conv2d(tape, x, w, b, stride, pad);
            Dims od;
            auto ref = naive_conv2d(*x, *w, std::vector<double>(b->data().begin(), b->data().end()), stride, pad, od);
            REQUIRE(y->dims() == od);
            for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y->data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("conv2d preserves dims with pad (k-1)/2") {
    for (std::size_t k : {1u, 3u}) {
        Tape<float> tape(false);
        auto x = random_const<float>(Dims{1, 2, 9, 7}, k);
        auto w = random_const<float>(Dims{5, 2, k, k}, k + 1);
        auto y = ops::conv2d(tape, x, w, Var<float>{}, 1, (k - 1) / 2);
        CHECK(y->dims() == Dims{1, 5, 9, 7});
    }
}

TEST_CASE("conv2d errors") {
    Tape<float> tape;
    auto x = make_var<float>(Dims{1, 2, 4, 4});
    CHECK_THROWS_AS(ops::conv2d(tape, x, make_var<float>(Dims{1, 3, 3, 3}), Var<float>{}, 1, 1),
                    std::invalid_argument);
    CHECK_THROWS_AS(ops::conv2d(tape, x, make_var<float>(Dims{1, 2, 7, 7}), Var<float>{}, 1, 1),
                    std::invalid_argument);
}

TEST_CASE("conv_transpose2d single tap spread and bias") {
    Tape<float> tape;
    auto x = make_var<float>(Dims{1, 1, 1, 1}, 2.5f);
    auto w = make_var<float>(Dims{1, 1, 2, 2}, 1.f);
    auto y = ops::conv_transpose2d(tape, x, w, Var<float>{}, 2);
    CHECK(y->dims() == Dims{1, 1, 2, 2});
    for (float v : y->data()) CHECK(v == 2.5f);

    auto z = make_var<float>(Dims{1, 2, 3, 3}, 0.f);
    auto w2 = random_const<float>(Dims{2, 3, 2, 2}, 2);
    auto b = make_var<float>(Dims{3, 1, 1, 1}, std::vector<float>{1.f, 2.f, 3.f});
    auto y2 = ops::conv_transpose2d(tape, z, w2, b, 2);
    CHECK(y2->dims() == Dims{1, 3, 6, 6});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 36; ++i) CHECK(y2->data()[c * 36 + i] == b->data()[c]);
    CHECK_THROWS_AS(ops::conv_transpose2d(tape, z, make_var<float>(Dims{3, 3, 2, 2}), Var<float>{}, 2),
                    std::invalid_argument);
}

TEST_CASE("conv_transpose2d is the adjoint of the strided conv2d") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        auto x = random_const<double>(Dims{1, 3, 8, 8}, seed);
        auto w = random_const<double>(Dims{2, 3, 2, 2}, seed + 10);  // conv: 3 -> 2 channels
        auto y = random_const<double>(Dims{1, 2, 4, 4}, seed + 20);
        Tape<double> tape(false);
        auto cx = ops::conv2d(tape, x, w, Var<double>{}, 2, 0);
        auto ty = ops::conv_transpose2d(tape, y, w, Var<double>{}, 2);
        CHECK(dot(*cx, *y) == doctest::Approx(dot(*x, *ty)).epsilon(1e-12));
    }
}

TEST_CASE("linear primitives satisfy the adjoint identity") {
    for (std::uint64_t s = 0; s < 3; ++s) {
        const Dims d = kShapes[s];
        auto w = random_const<float>(Dims{3, d.c, 3, 3}, 40 + s);
        check_adjoint<float>("conv2d", [&](Tape<float>& t, const Var<float>& x) { return ops::conv2d(t, x, w, Var<float>{}, 1, 1); },
                             d, s);
        auto wt = random_const<float>(Dims{d.c, 2, 2, 2}, 50 + s);
        check_adjoint<float>("conv_transpose2d", [&](Tape<float>& t, const Var<float>& x) { return ops::conv_transpose2d(t, x, wt, Var<float>{}, 2); }, d, s);
        check_adjoint<float>("global_avg_pool", [](Tape<float>& t, const Var<float>& x) { return ops::global_avg_pool(t, x); }, d, s);
        check_adjoint<float>("upsample_bilinear", [](Tape<float>& t, const Var<float>& x) { return ops::upsample_bilinear(t, x, 4); }, d, s);
        auto other = make_var<float>(Dims{d.n, 2, d.h, d.w}, 0.f);
        check_adjoint<float>("concat_channels", [&](Tape<float>& t, const Var<float>& x) {
                const Var<float> parts[] = {other, x};
                return ops::concat_channels<float>(t, parts);
            },
            d, s);
        auto sc = random_const<float>(Dims{d.n, d.c, 1, 1}, 70 + s);
        check_adjoint<float>("scale_channels", [&](Tape<float>& t, const Var<float>& x) { return ops::scale_channels(t, x, sc); }, d, s);
        auto q = random_const<float>(Dims{d.n, 1, d.h, d.w}, 80 + s);
        check_adjoint<float>("scale_spatial", [&](Tape<float>& t, const Var<float>& x) { return ops::scale_spatial(t, x, q); }, d, s);
        check_adjoint<float>("dropout", [](Tape<float>& t, const Var<float>& x) {
                std::mt19937_64 rng(9);
                return ops::dropout(t, x, 0.3, rng, Mode::train);
            },
            d, s);
    }
}

TEST_CASE("maxpool2x2 examples") {
    Tape<float> tape;
    auto x = make_leaf<float>(Dims{1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
    auto p = ops::maxpool2x2(tape, x);
    CHECK(p.out->item() == 4.f);
    CHECK(p.argmax[0] == 3);

    auto c = make_leaf<float>(Dims{1, 1, 4, 4}, 7.f);
    auto pc = ops::maxpool2x2(tape, c);
    for (float v : pc.out->data()) CHECK(v == 7.f);
    tape.backward(ops::sum(tape, pc.out));
    // First element of each window in row-major order receives the gradient.
    const std::vector<float> expect{1, 0, 1, 0, 0, 0, 0, 0, 1, 0, 1, 0, 0, 0, 0, 0};
    for (std::size_t i = 0; i < 16; ++i) CHECK(c->grad()[i] == expect[i]);

    CHECK_THROWS_AS(ops::maxpool2x2(tape, make_var<float>(Dims{1, 1, 3, 4})), std::invalid_argument);
}

TEST_CASE("maxpool2x2 matches exhaustive window scan") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto x = random_const<float>(Dims{1, 2, 4, 4}, seed);
        Tape<float> tape(false);
        auto p = ops::maxpool2x2(tape, x);
        for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t oy = 0; oy < 2; ++oy)
                for (std::size_t ox = 0; ox < 2; ++ox) {
                    float m = -1e30f;
                    for (std::size_t i = 0; i < 2; ++i)
                        for (std::size_t j = 0; j < 2; ++j) m = std::max(m, x->at(0, c, 2 * oy + i, 2 * ox + j));
                    CHECK(p.out->at(0, c, oy, ox) == m);
                }
    }
}

TEST_CASE("batchnorm2d train mode normalizes per channel") {
    Tape<double> tape;
    auto x = random_const<double>(Dims{2, 3, 5, 4}, 4, -3.0, 5.0);
    auto gamma = make_var<double>(Dims{3, 1, 1, 1}, 1.0);
    auto beta = make_var<double>(Dims{3, 1, 1, 1}, 0.0);
    Tensor<double> rm(Dims{3, 1, 1, 1}, 0.0), rv(Dims{3, 1, 1, 1}, 1.0);
    auto y = ops::batchnorm2d(tape, x, gamma, beta, rm, rv, Mode::train);
    for (std::size_t c = 0; c < 3; ++c) {
        double mu = 0, m2 = 0, xmu = 0;
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t i = 0; i < 20; ++i) {
                mu += y->at(n, c, i / 4, i % 4);
                m2 += y->at(n, c, i / 4, i % 4) * y->at(n, c, i / 4, i % 4);
                xmu += x->at(n, c, i / 4, i % 4);
            }
        mu /= 40;
        CHECK(std::abs(mu) < 1e-12);
        CHECK(m2 / 40 == doctest::Approx(1.0).epsilon(1e-4));
        CHECK(rm.data()[c] == doctest::Approx(0.1 * xmu / 40));
    }
}

TEST_CASE("batchnorm2d with gamma zero outputs beta") {
    Tape<float> tape;
    auto x = random_const<float>(Dims{1, 2, 3, 3}, 8);
    auto gamma = make_var<float>(Dims{2, 1, 1, 1}, 0.f);
    auto beta = make_var<float>(Dims{2, 1, 1, 1}, std::vector<float>{0.25f, -2.f});
    Tensor<float> rm(Dims{2, 1, 1, 1}, 0.f), rv(Dims{2, 1, 1, 1}, 1.f);
    auto y = ops::batchnorm2d(tape, x, gamma, beta, rm, rv, Mode::train);
    for (std::size_t i = 0; i < 9; ++i) {
        CHECK(y->data()[i] == 0.25f);
        CHECK(y->data()[9 + i] == -2.f);
    }
}

TEST_CASE("batchnorm2d eval mode follows the running-statistics formula") {
    Tape<double> tape;
    auto x = make_var<double>(Dims{1, 1, 1, 2}, std::vector<double>{1.0, 4.0});
    auto gamma = make_var<double>(Dims{1, 1, 1, 1}, 2.0);
    auto beta = make_var<double>(Dims{1, 1, 1, 1}, 0.5);
    Tensor<double> rm(Dims{1, 1, 1, 1}, 2.0), rv(Dims{1, 1, 1, 1}, 3.0);
    auto y = ops::batchnorm2d(tape, x, gamma, beta, rm, rv, Mode::eval);
    const double s = std::sqrt(3.0 + 1e-5);
    CHECK(y->data()[0] == doctest::Approx((1.0 - 2.0) / s * 2.0 + 0.5).epsilon(1e-14));
    CHECK(y->data()[1] == doctest::Approx((4.0 - 2.0) / s * 2.0 + 0.5).epsilon(1e-14));
    CHECK(rm.data()[0] == 2.0);
    CHECK_THROWS_AS(ops::batchnorm2d(tape, make_var<double>(Dims{1, 1, 0, 0}), gamma, beta, rm, rv, Mode::train),
                    std::invalid_argument);
}

TEST_CASE("activation values and gradients") {
    Tape<float> tape;
    auto x = make_leaf<float>(Dims{1, 1, 1, 3}, std::vector<float>{-1.f, 0.f, 2.f});
    auto lr = ops::activation(tape, x, Activation::leaky_relu);
    CHECK(lr->data()[0] == doctest::Approx(-0.01f));
    auto sg = ops::activation(tape, x, Activation::sigmoid);
    CHECK(sg->data()[1] == 0.5f);

    Tape<float> t2;
    auto r = make_leaf<float>(Dims{1, 1, 1, 2}, std::vector<float>{2.f, -2.f});
    t2.backward(ops::sum(t2, ops::activation(t2, r, Activation::relu)));
    CHECK(r->grad()[0] == 1.f);
    CHECK(r->grad()[1] == 0.f);

    auto big = make_var<float>(Dims{1, 1, 1, 2}, std::vector<float>{80.f, -200.f});
    auto p = ops::activation(tape, big, Activation::sigmoid);
    CHECK(p->data()[0] < 1.f);
    CHECK(p->data()[1] > 0.f);
}

TEST_CASE("global_avg_pool examples") {
    Tape<float> tape;
    auto k = make_var<float>(Dims{1, 1, 3, 3}, 4.5f);
    CHECK(ops::global_avg_pool(tape, k)->item() == 4.5f);
    auto x = make_leaf<float>(Dims{1, 1, 2, 2}, std::vector<float>{0, 2, 4, 6});
    auto v = ops::global_avg_pool(tape, x);
    CHECK(v->item() == 3.f);
    tape.backward(ops::sum(tape, v));
    for (float g : x->grad()) CHECK(g == 0.25f);
}

TEST_CASE("concat_channels ordering and slicing") {
    Tape<float> tape;
    auto a = random_const<float>(Dims{2, 2, 3, 3}, 1);
    auto b = random_const<float>(Dims{2, 3, 3, 3}, 2);
    const Var<float> one[] = {a};
    auto same = ops::concat_channels<float>(tape, one);
    CHECK(std::equal(same->data().begin(), same->data().end(), a->data().begin()));
    const Var<float> two[] = {a, b};
    auto c = ops::concat_channels<float>(tape, two);
    REQUIRE(c->dims() == Dims{2, 5, 3, 3});
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t ch = 0; ch < 5; ++ch)
            for (std::size_t i = 0; i < 9; ++i) {
                const float expect = ch < 2 ? a->at(n, ch, i / 3, i % 3) : b->at(n, ch - 2, i / 3, i % 3);
                CHECK(c->at(n, ch, i / 3, i % 3) == expect);
            }
    const Var<float> bad[] = {a, make_var<float>(Dims{2, 1, 4, 3})};
    CHECK_THROWS_AS(ops::concat_channels<float>(tape, bad), std::invalid_argument);
}

TEST_CASE("broadcast scaling") {
    Tape<float> tape;
    auto x = random_const<float>(Dims{1, 3, 4, 4}, 3);
    auto ones = make_var<float>(Dims{1, 3, 1, 1}, 1.f);
    auto y = ops::scale_channels(tape, x, ones);
    CHECK(std::equal(y->data().begin(), y->data().end(), x->data().begin()));
    auto half = make_var<float>(Dims{1, 1, 4, 4}, 0.5f);
    auto z = ops::scale_spatial(tape, x, half);
    for (std::size_t i = 0; i < x->size(); ++i) CHECK(z->data()[i] == 0.5f * x->data()[i]);
    CHECK_THROWS_AS(ops::scale_channels(tape, x, make_var<float>(Dims{1, 2, 1, 1})), std::invalid_argument);
    CHECK_THROWS_AS(ops::scale_spatial(tape, x, make_var<float>(Dims{1, 1, 4, 3})), std::invalid_argument);
    CHECK_THROWS_AS(ops::add(tape, x, half), std::invalid_argument);
}

TEST_CASE("dropout contract") {
    Tape<float> tape;
    std::mt19937_64 rng(1);
    auto x = random_const<float>(Dims{1, 2, 4, 4}, 6);
    CHECK(ops::dropout(tape, x, 0.0, rng, Mode::train) == x);
    CHECK(ops::dropout(tape, x, 0.7, rng, Mode::eval) == x);
    CHECK_THROWS_AS(ops::dropout(tape, x, 1.0, rng, Mode::train), std::invalid_argument);

    auto ones = make_var<float>(Dims{1, 1, 100, 100}, 1.f);
    auto d = ops::dropout(tape, ones, 0.2, rng, Mode::train);
    double mean = 0;
    for (float v : d->data()) {
        CHECK((v == 0.f || v == doctest::Approx(1.25f)));
        mean += v;
    }
    mean /= 1e4;
    CHECK(std::abs(mean - 1.0) < 0.01);
}

TEST_CASE("upsample_bilinear keeps constants and sizes") {
    Tape<float> tape;
    auto x = make_var<float>(Dims{1, 2, 3, 3}, 1.5f);
    auto y = ops::upsample_bilinear(tape, x, 4);
    CHECK(y->dims() == Dims{1, 2, 12, 12});
    for (float v : y->data()) CHECK(v == doctest::Approx(1.5f));
    CHECK(ops::upsample_bilinear(tape, x, 1) == x);
}

TEST_CASE_TEMPLATE("primitive gradients match central differences", T, float, double) {
    for (std::uint64_t s = 0; s < 3; ++s) {
        const Dims d = kShapes[s];
        CAPTURE(s);
        auto x = separated_leaf<T>(d, s);
        auto w = random_leaf<T>(Dims{3, d.c, 3, 3}, 100 + s);
        auto b = random_leaf<T>(Dims{3, 1, 1, 1}, 110 + s);
        grad_check<T>("conv2d s1", [&](Tape<T>& t) { return ops::conv2d(t, x, w, b, 1, 1); }, {{"x", x}, {"w", w}, {"b", b}});
        grad_check<T>("conv2d s2", [&](Tape<T>& t) { return ops::conv2d(t, x, w, b, 2, 1); }, {{"x", x}, {"w", w}, {"b", b}});

        auto wt = random_leaf<T>(Dims{d.c, 2, 2, 2}, 120 + s);
        auto bt = random_leaf<T>(Dims{2, 1, 1, 1}, 130 + s);
        grad_check<T>("conv_transpose2d", [&](Tape<T>& t) { return ops::conv_transpose2d(t, x, wt, bt, 2); },
                      {{"x", x}, {"w", wt}, {"b", bt}});

        auto pool_in = pool_leaf<T>(d, s);
        grad_check<T>("maxpool2x2", [&](Tape<T>& t) { return ops::maxpool2x2(t, pool_in).out; }, {{"x", pool_in}});

        auto gamma = random_leaf<T>(Dims{d.c, 1, 1, 1}, 140 + s, 0.5, 1.5);
        auto beta = random_leaf<T>(Dims{d.c, 1, 1, 1}, 150 + s);
        for (Mode mode : {Mode::train, Mode::eval}) {
            Tensor<T> rm(Dims{d.c, 1, 1, 1}, T(0.1)), rv(Dims{d.c, 1, 1, 1}, T(0.8));
            grad_check<T>("batchnorm2d", [&](Tape<T>& t) {
                    Tensor<T> m = rm, v = rv;  // keep the probe free of running-stat drift
                    return ops::batchnorm2d(t, x, gamma, beta, m, v, mode);
                },
                {{"x", x}, {"gamma", gamma}, {"beta", beta}});
        }

        for (Activation a : {Activation::relu, Activation::leaky_relu, Activation::sigmoid}) {
            grad_check<T>("activation", [&](Tape<T>& t) { return ops::activation(t, x, a); }, {{"x", x}});
        }
        grad_check<T>("global_avg_pool", [&](Tape<T>& t) { return ops::global_avg_pool(t, x); }, {{"x", x}});

        auto other = random_leaf<T>(Dims{d.n, 2, d.h, d.w}, 160 + s);
        grad_check<T>("concat_channels", [&](Tape<T>& t) {
                const Var<T> parts[] = {x, other};
                return ops::concat_channels<T>(t, parts);
            },
            {{"x", x}, {"other", other}});

        auto sc = random_leaf<T>(Dims{d.n, d.c, 1, 1}, 170 + s);
        grad_check<T>("scale_channels", [&](Tape<T>& t) { return ops::scale_channels(t, x, sc); }, {{"x", x}, {"s", sc}});
        auto q = random_leaf<T>(Dims{d.n, 1, d.h, d.w}, 180 + s);
        grad_check<T>("scale_spatial", [&](Tape<T>& t) { return ops::scale_spatial(t, x, q); }, {{"x", x}, {"q", q}});
        auto y = random_leaf<T>(d, 190 + s);
        grad_check<T>("add", [&](Tape<T>& t) { return ops::add(t, x, y); }, {{"x", x}, {"y", y}});
        grad_check<T>("mul", [&](Tape<T>& t) { return ops::mul(t, x, y); }, {{"x", x}, {"y", y}});
        grad_check<T>("scale", [&](Tape<T>& t) { return ops::scale(t, x, -1.75); }, {{"x", x}});
        grad_check<T>("dropout", [&](Tape<T>& t) {
                std::mt19937_64 rng(3);
                return ops::dropout(t, x, 0.2, rng, Mode::train);
            },
            {{"x", x}});
        grad_check<T>("upsample_bilinear", [&](Tape<T>& t) { return ops::upsample_bilinear(t, x, 2); }, {{"x", x}});
    }
}

TEST_CASE("finite_diff_check on a quadratic in 64-bit mode") {
    auto x = make_leaf<double>(Dims{1, 1, 1, 5}, std::vector<double>{-2.0, -0.5, 0.3, 1.0, 4.0});
    CheckOptions opts;
    opts.eps = 1e-3;
    opts.tol = 1e-6;
    const NamedParam<double> params[] = {{"x", x}};
    auto r = finite_diff_check<double>([&](Tape<double>& t) { return ops::sum(t, ops::mul(t, x, x)); }, params, opts);
    CHECK(r.passed);
    CHECK(r.max_rel_error < 1e-6);
    CHECK(r.checked == 5);
    for (std::size_t i = 0; i < 5; ++i) CHECK(x->grad()[i] == 2.0 * x->data()[i]);
}

TEST_CASE("finite_diff_check flags a corrupted backward") {
    auto x = random_leaf<float>(Dims{1, 2, 5, 5}, 1);
    auto w = random_leaf<float>(Dims{2, 2, 3, 3}, 2);
    const NamedParam<float> params[] = {{"w", w}};
    CheckOptions opts;
    opts.eps = 1e-2;
    opts.tol = 1e-3;
    ops::fault::set_conv_weight_grad_scale(2.0);
    auto bad = finite_diff_check<float>([&](Tape<float>& t) { return ops::conv2d(t, x, w, Var<float>{}, 1, 1); },
                                        params, opts);
    ops::fault::set_conv_weight_grad_scale(1.0);
    CHECK_FALSE(bad.passed);
    CHECK(bad.max_rel_error == doctest::Approx(0.5).epsilon(1e-2));
    auto good = finite_diff_check<float>([&](Tape<float>& t) { return ops::conv2d(t, x, w, Var<float>{}, 1, 1); },
                                         params, opts);
    CHECK(good.passed);
}

TEST_CASE("finite_diff_check detects a non-deterministic function") {
    auto x = random_leaf<float>(Dims{1, 1, 4, 4}, 1);
    const NamedParam<float> params[] = {{"x", x}};
    std::mt19937_64 rng(5);  // shared stream: each evaluation draws a new mask
    CHECK_THROWS_AS(finite_diff_check<float>(
                        [&](Tape<float>& t) { return ops::sum(t, ops::dropout(t, x, 0.5, rng, Mode::train)); }, params,
                        CheckOptions{}),
                    NonDeterministicFunction);
}

TEST_CASE("kink screen skips coordinates whose step straddles a kink") {
    // relu at exact zeros and just inside the step, smooth elsewhere.
    auto x = make_leaf<double>(Dims{1, 1, 1, 6}, std::vector<double>{0.0, 5e-6, -0.7, 0.4, 1.3, -2.0});
    const NamedParam<double> params[] = {{"x", x}};
    auto fn = [&](Tape<double>& t) { return ops::sum(t, ops::activation(t, x, Activation::relu)); };
    CheckOptions opts;
    opts.eps = 1e-5;
    opts.tol = 1e-6;

    auto plain = finite_diff_check<double>(fn, params, opts);
    CHECK_FALSE(plain.passed);
    CHECK(plain.skipped == 0);

    opts.kink_screen = true;
    auto screened = finite_diff_check<double>(fn, params, opts);
    CHECK(screened.passed);
    CHECK(screened.skipped == 2);
    CHECK(screened.checked == 4);
}

TEST_CASE("kink screen draws replacements and fails when too few smooth coordinates exist") {
    std::vector<double> v(40, 0.0);
    for (std::size_t i = 0; i < 10; ++i) v[i] = 0.5 + 0.1 * static_cast<double>(i);
    auto x = make_leaf<double>(Dims{1, 1, 1, 40}, v);
    const NamedParam<double> params[] = {{"x", x}};
    auto fn = [&](Tape<double>& t) { return ops::sum(t, ops::activation(t, x, Activation::relu)); };
    CheckOptions opts;
    opts.eps = 1e-5;
    opts.tol = 1e-6;
    opts.kink_screen = true;
    opts.samples = 5;
    opts.max_draw_factor = 8;  // all 40 coordinates are candidates
    auto enough = finite_diff_check<double>(fn, params, opts);
    CHECK(enough.passed);
    CHECK(enough.checked == 5);

    opts.samples = 12;  // only 10 smooth coordinates exist
    opts.max_draw_factor = 4;
    auto short_of = finite_diff_check<double>(fn, params, opts);
    CHECK_FALSE(short_of.passed);
    CHECK(short_of.checked == 10);
    CHECK(short_of.skipped == 30);
}

TEST_CASE("kink screen does not hide a corrupted backward") {
    auto x = random_leaf<float>(Dims{1, 2, 5, 5}, 1);
    auto w = random_leaf<float>(Dims{2, 2, 3, 3}, 2);
    const NamedParam<float> params[] = {{"w", w}};
    CheckOptions opts;
    opts.eps = 1e-2;
    opts.tol = 1e-3;
    opts.kink_screen = true;
    ops::fault::set_conv_weight_grad_scale(2.0);
    auto bad = finite_diff_check<float>(
        [&](Tape<float>& t) { return ops::activation(t, ops::conv2d(t, x, w, Var<float>{}, 1, 1), Activation::leaky_relu); },
        params, opts);
    ops::fault::set_conv_weight_grad_scale(1.0);
    CHECK_FALSE(bad.passed);
    CHECK(bad.checked > 0);
}
