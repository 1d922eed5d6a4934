#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "fd_check.hpp"
#include "imgshield/attacks.hpp"
#include "imgshield/tensor.hpp"

#include <cmath>
#include <numeric>

using namespace imgshield;
using doctest::Approx;
using fdcheck::check_gradient;

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
}

// ---------------------------------------------------------------------------
// Tensor handle semantics.
// ---------------------------------------------------------------------------

TEST_CASE("tensor copies share storage, clone is a deep copy") {
    Tensor<float> a = Tensor<float>::full({2, 2}, 3.0f);
    Tensor<float> b = a;
    b.data()[0] = 7.0f;
    CHECK(a.data()[0] == 7.0f);
    CHECK(a.id() == b.id());

    a.set_requires_grad(true);
    Tensor<float> c = a.clone();
    CHECK(c.id() != a.id());
    CHECK_FALSE(c.requires_grad());
    c.data()[1] = -1.0f;
    CHECK(a.data()[1] == 3.0f);
}

TEST_CASE("default tensor is empty and shape helpers agree") {
    Tensor<double> t;
    CHECK(t.numel() == 0);
    CHECK(t.rank() == 0);
    CHECK(shape_numel({2, 3, 4}) == 24);
    CHECK(shape_str({1, 3, 8, 8}) == "[1,3,8,8]");
}

TEST_CASE("from_vec validates the element count") {
    CHECK_THROWS_WITH_AS(Tensor<float>::from_vec({2, 2}, {1.0f, 2.0f}),
                         "from_vec: 2 values for shape [2,2]", std::invalid_argument);
}

TEST_CASE("item requires exactly one element") {
    Tensor<float> t = Tensor<float>::zeros({2});
    CHECK_THROWS_AS((void)t.item(), std::invalid_argument);
    CHECK(Tensor<float>::full({1}, 5.0f).item() == 5.0f);
}

// ---------------------------------------------------------------------------
// Elementwise forward values.
// ---------------------------------------------------------------------------

TEST_CASE("elementwise forward values, including scalar broadcast") {
    Tape<double> tape;
    Tensor<double> a = Tensor<double>::from_vec({3}, {1.0, -2.0, 0.5});
    Tensor<double> b = Tensor<double>::from_vec({3}, {2.0, 3.0, -1.0});
    Tensor<double> s = Tensor<double>::full({1}, 10.0);

    CHECK(add(tape, a, b).data()[1] == 1.0);
    CHECK(sub(tape, a, b).data()[0] == -1.0);
    CHECK(mul(tape, a, b).data()[2] == -0.5);
    CHECK(add(tape, a, 1.0).data()[1] == -1.0);
    CHECK(mul(tape, a, -2.0).data()[0] == -2.0);

    // One-element tensors broadcast on either side.
    Tensor<double> l = mul(tape, s, b);
    Tensor<double> r = mul(tape, b, s);
    for (int i = 0; i < 3; ++i) {
        CHECK(l.data()[i] == 10.0 * b.data()[i]);
        CHECK(r.data()[i] == l.data()[i]);
    }

    CHECK(leaky_relu(tape, a, 0.2).data()[1] == Approx(-0.4));
    CHECK(clamp(tape, a, -1.0, 1.0).data()[1] == -1.0);
    CHECK(abs(tape, a).data()[1] == 2.0);
    CHECK(square(tape, a).data()[1] == 4.0);
    CHECK(tanh(tape, Tensor<double>::zeros({1})).item() == 0.0);
    CHECK(sum(tape, b).item() == 4.0);
    CHECK(mean(tape, b).item() == Approx(4.0 / 3.0));
}

TEST_CASE("leaky_relu with slope 0.2 maps -1 to -0.2") {
    Tape<float> tape;
    Tensor<float> x = Tensor<float>::full({1}, -1.0f);
    CHECK(leaky_relu(tape, x, 0.2f).item() == Approx(-0.2f));
}

TEST_CASE("adding zero is the identity") {
    Tape<float> tape;
    Tensor<float> x = Tensor<float>::from_vec({4}, {0.1f, -0.5f, 2.0f, 0.0f});
    Tensor<float> y = add(tape, x, 0.0f);
    for (int i = 0; i < 4; ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("shape mismatch raises a descriptive error") {
    Tape<float> tape;
    Tensor<float> a = Tensor<float>::zeros({2, 2});
    Tensor<float> b = Tensor<float>::zeros({4});
    CHECK_THROWS_WITH_AS(add(tape, a, b), "add: shape mismatch [2,2] vs [4]",
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(loss_l2(tape, a, b), "loss_l2: shape mismatch [2,2] vs [4]",
                         std::invalid_argument);
}

TEST_CASE("clamp rejects inverted bounds") {
    Tape<float> tape;
    Tensor<float> a = Tensor<float>::zeros({1});
    CHECK_THROWS_WITH_AS(clamp(tape, a, 1.0f, -1.0f), "clamp: lo > hi", std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Rounding surrogates.
// ---------------------------------------------------------------------------

TEST_CASE("rounding mode forward values") {
    Tape<double> tape;
    Tensor<double> x =
        Tensor<double>::from_vec({6}, {3.0, 0.25, 0.4, 0.5, -0.5, 2.4});

    SUBCASE("true rounding is round-half-away-from-zero") {
        auto r = round_approx(tape, x, Round::true_round);
        CHECK(r.data()[0] == 3.0);
        CHECK(r.data()[3] == 1.0);
        CHECK(r.data()[4] == -1.0);
        CHECK(r.data()[5] == 2.0);
    }
    SUBCASE("sin surrogate fixes integers and bends fractions") {
        auto r = round_approx(tape, x, Round::sin);
        CHECK(r.data()[0] == Approx(3.0).epsilon(1e-12));
        CHECK(r.data()[1] == Approx(0.25 - 1.0 / kTwoPi)); // 0.0908450569...
    }
    SUBCASE("cubic surrogate cubes the fractional offset") {
        auto r = round_approx(tape, x, Round::cubic);
        CHECK(r.data()[2] == Approx(0.064));
    }
    SUBCASE("identity mode passes values through") {
        auto r = round_approx(tape, x, Round::identity);
        for (int i = 0; i < 6; ++i) CHECK(r.data()[i] == x.data()[i]);
    }
}

TEST_CASE("soft mode: true-round forward, smooth-surrogate gradient") {
    Rng rng(41);
    std::vector<double> xs = fdcheck::random_vec(rng, 64, -3.0, 3.0);
    Shape shape{64};
    Tensor<double> x = Tensor<double>::from_vec(shape, xs);

    Tape<double> t1;
    auto a = round_approx(t1, x, Round::soft);
    auto b = round_approx(t1, x, Round::true_round);
    for (int i = 0; i < 64; ++i) CHECK(a.data()[i] == b.data()[i]); // bitwise

    // The pulled-back gradient equals the sin surrogate's at the same point.
    auto grad_mode = [&](Round m) {
        return fdcheck::tape_gradient(shape, xs, [&](Tape<double>& tp, Tensor<double>& t) {
            return sum(tp, round_approx(tp, t, m));
        });
    };
    auto gs = grad_mode(Round::soft);
    auto gn = grad_mode(Round::sin);
    auto gt = grad_mode(Round::true_round);
    for (int i = 0; i < 64; ++i) {
        CHECK(gs[i] == gn[i]);
        CHECK(gt[i] == 0.0);
    }
}

TEST_CASE("round mode names round-trip and reject unknowns") {
    for (Round r : {Round::true_round, Round::identity, Round::cubic, Round::soft, Round::sin})
        CHECK(round_from_name(round_name(r)) == r);
    CHECK_THROWS_WITH_AS(round_from_name("bananas"), "unknown round mode 'bananas'",
                         std::invalid_argument);
    for (Norm n : {Norm::l1, Norm::l2, Norm::linf_smooth})
        CHECK(norm_from_name(norm_name(n)) == n);
    CHECK_THROWS_AS(norm_from_name("l3"), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Tape contracts.
// ---------------------------------------------------------------------------

TEST_CASE("backward of a sum yields all-ones and grads accumulate over reuse") {
    Tensor<double> x = Tensor<double>::from_vec({3}, {1.0, 2.0, 3.0});
    x.set_requires_grad(true);
    Tape<double> tape;
    Tensor<double> root = sum(tape, x);
    tape.backward(root);
    for (double g : *tape.grad_ptr(x)) CHECK(g == 1.0);

    // mul(x, x): both derivative paths land on the same accumulator.
    Tensor<double> y = Tensor<double>::from_vec({3}, {1.0, -2.0, 0.5});
    y.set_requires_grad(true);
    Tape<double> t2;
    t2.backward(sum(t2, mul(t2, y, y)));
    auto g = *t2.grad_ptr(y);
    for (int i = 0; i < 3; ++i) CHECK(g[i] == Approx(2.0 * y.data()[i]));
}

TEST_CASE("mean-square gradient is 2x/n against a zero target") {
    Tensor<double> x = Tensor<double>::from_vec({4}, {0.5, -1.0, 2.0, 0.25});
    x.set_requires_grad(true);
    Tape<double> tape;
    tape.backward(loss_l2(tape, x, Tensor<double>::zeros({4})));
    auto g = *tape.grad_ptr(x);
    for (int i = 0; i < 4; ++i) CHECK(g[i] == Approx(2.0 * x.data()[i] / 4.0));
}

TEST_CASE("tape is single-use and validates its root") {
    Tensor<double> x = Tensor<double>::full({2}, 1.0);
    x.set_requires_grad(true);
    Tape<double> tape;
    Tensor<double> s = sum(tape, x);
    tape.backward(s);
    CHECK_THROWS_WITH_AS(tape.backward(s), "tape: backward called twice; rebuild the graph",
                         std::runtime_error);
    CHECK_THROWS_WITH_AS(sum(tape, x), "tape: recording after backward; use a fresh tape",
                         std::runtime_error);

    Tape<double> t2;
    Tensor<double> v = add(t2, x, x); // non-scalar
    CHECK_THROWS_WITH_AS(t2.backward(v), "tape: backward root must be a scalar",
                         std::invalid_argument);

    Tape<double> t3;
    Tensor<double> detached = Tensor<double>::full({1}, 1.0);
    CHECK_THROWS_WITH_AS(t3.backward(detached),
                         "tape: backward root was not recorded on this tape",
                         std::invalid_argument);
}

TEST_CASE("gradients exist only for tensors touched by backward") {
    Tensor<double> x = Tensor<double>::full({2}, 1.0);
    Tensor<double> y = Tensor<double>::full({2}, 1.0);
    x.set_requires_grad(true);
    y.set_requires_grad(true);
    Tape<double> tape;
    Tensor<double> s = sum(tape, x);
    sum(tape, y); // recorded but not part of the root's history
    tape.backward(s);
    CHECK(tape.grad_ptr(x) != nullptr);
    CHECK(tape.grad_ptr(y) == nullptr);
    CHECK(tape.has_grad(x));
    CHECK_FALSE(tape.has_grad(y));
    CHECK_THROWS_AS((void)tape.grad(y), std::runtime_error);
    CHECK(tape.grad(x).shape() == x.shape());
}

TEST_CASE("ops on constant inputs record nothing") {
    Tensor<double> x = Tensor<double>::full({4}, 2.0);
    Tape<double> tape;
    Tensor<double> y = mul(tape, square(tape, x), 3.0);
    CHECK(tape.recorded_ops() == 0);
    CHECK_FALSE(y.requires_grad());
}

// ---------------------------------------------------------------------------
// Losses.
// ---------------------------------------------------------------------------

TEST_CASE("identical inputs give zero under every loss kind") {
    Rng rng(7);
    Shape shape{2, 3};
    auto v = fdcheck::random_vec(rng, 6);
    Tensor<double> a = Tensor<double>::from_vec(shape, v);
    Tensor<double> b = Tensor<double>::from_vec(shape, v);
    Tape<double> tape;
    CHECK(loss_l1(tape, a, b).item() == 0.0);
    CHECK(loss_l2(tape, a, b, true).item() == 0.0);
    CHECK(loss_l2(tape, a, b, false).item() == 0.0);
    CHECK(loss_linf_smooth(tape, a, b).item() == 0.0);

    // Euclidean mode has a 1/sqrt kink at zero; the subgradient there is 0.
    Tensor<double> c = Tensor<double>::from_vec(shape, v);
    c.set_requires_grad(true);
    Tape<double> t2;
    t2.backward(loss_l2(t2, c, b, false));
    for (double g : *t2.grad_ptr(c)) CHECK(g == 0.0);
}

TEST_CASE("mean-square of ([0,0],[1,1]) against zeros is 0.5") {
    Tape<double> tape;
    Tensor<double> a = Tensor<double>::from_vec({2, 2}, {0.0, 0.0, 1.0, 1.0});
    CHECK(loss_l2(tape, a, Tensor<double>::zeros({2, 2})).item() == Approx(0.5));
}

TEST_CASE("smooth max is sandwiched between max and max - log(n)/t") {
    Rng rng(11);
    const int n = 32;
    auto va = fdcheck::random_vec(rng, n);
    auto vb = fdcheck::random_vec(rng, n);
    double m = 0.0;
    for (int i = 0; i < n; ++i) m = std::max(m, std::abs(va[i] - vb[i]));
    Tape<double> tape;
    Tensor<double> a = Tensor<double>::from_vec({n}, va);
    Tensor<double> b = Tensor<double>::from_vec({n}, vb);
    const double t = 50.0;
    const double val = loss_linf_smooth(tape, a, b, t).item();
    CHECK(val <= m + 1e-12);
    CHECK(val >= m - std::log(static_cast<double>(n)) / t - 1e-12);
    // Sharper temperature approaches the true max.
    const double val2 = loss_linf_smooth(tape, a, b, 2000.0).item();
    CHECK(std::abs(val2 - m) < 5e-3);
    CHECK_THROWS_WITH_AS(loss_linf_smooth(tape, a, b, 0.0), "loss_linf: t must be > 0",
                         std::invalid_argument);
}

TEST_CASE("loss dispatcher matches the direct calls") {
    Rng rng(13);
    auto va = fdcheck::random_vec(rng, 8);
    auto vb = fdcheck::random_vec(rng, 8);
    Tensor<double> a = Tensor<double>::from_vec({8}, va);
    Tensor<double> b = Tensor<double>::from_vec({8}, vb);
    Tape<double> tape;
    CHECK(loss(tape, Norm::l1, a, b).item() == loss_l1(tape, a, b).item());
    CHECK(loss(tape, Norm::l2, a, b).item() == loss_l2(tape, a, b, true).item());
    LossOpts eu;
    eu.l2_mean = false;
    CHECK(loss(tape, Norm::l2, a, b, eu).item() == loss_l2(tape, a, b, false).item());
    CHECK(loss(tape, Norm::linf_smooth, a, b).item() == loss_linf_smooth(tape, a, b).item());
}

TEST_CASE("all_finite flags NaN and infinity") {
    Tensor<double> t = Tensor<double>::from_vec({2}, {1.0, 2.0});
    CHECK(all_finite(t));
    t.data()[1] = std::nan("");
    CHECK_FALSE(all_finite(t));
    t.data()[1] = INFINITY;
    CHECK_FALSE(all_finite(t));
}

// ---------------------------------------------------------------------------
// Finite-difference sweeps over the elementwise primitives. Inputs avoid each
// op's kinks so the comparison is against a true derivative.
// ---------------------------------------------------------------------------

TEST_CASE("elementwise and reduction gradients match central differences") {
    Rng rng(101);
    const Shape shape{2, 3, 4};
    const size_t n = 24;
    const double tol = 1e-6;

    for (int trial = 0; trial < 3; ++trial) {
        auto x = fdcheck::random_vec(rng, n);
        auto other = fdcheck::random_vec(rng, n);
        Tensor<double> b = Tensor<double>::from_vec(shape, other);
        Tensor<double> probe = fdcheck::make_probe<double>(rng, shape);

        auto dot = [&](Tape<double>& tp, Tensor<double> t) {
            return fdcheck::dot_probe(tp, t, probe);
        };

        CHECK(check_gradient(shape, x, [&](Tape<double>& tp, Tensor<double>& t) {
                  return dot(tp, add(tp, t, b));
              }) < tol);
        CHECK(check_gradient(shape, x, [&](Tape<double>& tp, Tensor<double>& t) {
                  return dot(tp, sub(tp, b, t));
              }) < tol);
        CHECK(check_gradient(shape, x, [&](Tape<double>& tp, Tensor<double>& t) {
                  return dot(tp, mul(tp, t, b));
              }) < tol);
        CHECK(check_gradient(shape, x, [&](Tape<double>& tp, Tensor<double>& t) {
                  return dot(tp, add(tp, t, 0.7));
              }) < tol);
        CHECK(check_gradient(shape, x, [&](Tape<double>& tp, Tensor<double>& t) {
                  return dot(tp, mul(tp, t, -1.3));
              }) < tol);
        CHECK(check_gradient(shape, x, [&](Tape<double>& tp, Tensor<double>& t) {
                  return dot(tp, imgshield::sin(tp, t));
              }) < tol);
        CHECK(check_gradient(shape, x, [&](Tape<double>& tp, Tensor<double>& t) {
                  return dot(tp, imgshield::tanh(tp, t));
              }) < tol);
        CHECK(check_gradient(shape, x, [&](Tape<double>& tp, Tensor<double>& t) {
                  return dot(tp, square(tp, t));
              }) < tol);
        CHECK(check_gradient(shape, x, [&](Tape<double>& tp, Tensor<double>& t) {
                  return dot(tp, round_approx(tp, t, Round::sin));
              }) < tol);
        CHECK(check_gradient(shape, x, [&](Tape<double>& tp, Tensor<double>& t) {
                  return mean(tp, square(tp, t));
              }) < tol);
        CHECK(check_gradient(shape, x, [&](Tape<double>& tp, Tensor<double>& t) {
                  return loss_l2(tp, t, b, true);
              }) < tol);
        CHECK(check_gradient(shape, x, [&](Tape<double>& tp, Tensor<double>& t) {
                  return loss_l2(tp, t, b, false);
              }) < tol);
        CHECK(check_gradient(shape, x, [&](Tape<double>& tp, Tensor<double>& t) {
                  return loss_linf_smooth(tp, t, b, 13.0);
              }) < tol);

        // Kinked ops: keep a margin around the non-smooth set.
        auto xk = x;
        fdcheck::avoid_kinks(xk, 0.05, [](double) { return 0.0; });
        CHECK(check_gradient(shape, xk, [&](Tape<double>& tp, Tensor<double>& t) {
                  return dot(tp, imgshield::abs(tp, t));
              }) < tol);
        CHECK(check_gradient(shape, xk, [&](Tape<double>& tp, Tensor<double>& t) {
                  return dot(tp, leaky_relu(tp, t, 0.2));
              }) < tol);
        CHECK(check_gradient(shape, xk, [&](Tape<double>& tp, Tensor<double>& t) {
                  return loss_l1(tp, t, Tensor<double>::zeros(shape));
              }) < tol);

        auto xc = x;
        fdcheck::avoid_kinks(xc, 0.05, [](double v) { return v < 0 ? -1.0 : 1.0; });
        CHECK(check_gradient(shape, xc, [&](Tape<double>& tp, Tensor<double>& t) {
                  return dot(tp, clamp(tp, t, -1.0, 1.0));
              }) < tol);

        auto xr = x;
        fdcheck::avoid_kinks(xr, 0.1, [](double v) {
            return std::floor(v) + 0.5; // rounding switches at half-integers
        });
        CHECK(check_gradient(shape, xr, [&](Tape<double>& tp, Tensor<double>& t) {
                  return dot(tp, round_approx(tp, t, Round::cubic));
              }) < tol);
        CHECK(check_gradient(shape, xr, [&](Tape<double>& tp, Tensor<double>& t) {
                  return dot(tp, round_approx(tp, t, Round::identity));
              }) < tol);
    }
}

TEST_CASE("broadcast gradients flow into the one-element side") {
    Rng rng(103);
    Shape big{2, 3};
    auto vb = fdcheck::random_vec(rng, 6);
    Tensor<double> b = Tensor<double>::from_vec(big, vb);
    Tensor<double> probe = fdcheck::make_probe<double>(rng, big);
    const std::vector<double> s{1.3};

    CHECK(check_gradient({1}, s, [&](Tape<double>& tp, Tensor<double>& t) {
              return fdcheck::dot_probe(tp, mul(tp, t, b), probe);
          }) < 1e-7);
    CHECK(check_gradient({1}, s, [&](Tape<double>& tp, Tensor<double>& t) {
              return fdcheck::dot_probe(tp, sub(tp, b, t), probe);
          }) < 1e-7);
}

// ---------------------------------------------------------------------------
// Convolution oracles.
// ---------------------------------------------------------------------------

TEST_CASE("conv2d hand-worked values") {
    Tape<double> tape;
    Tensor<double> x = Tensor<double>::from_vec({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor<double> w = Tensor<double>::full({1, 1, 2, 2}, 1.0);
    Tensor<double> y = conv2d(tape, x, w, 1, 0);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.item() == 10.0);

    // A unit 1x1 kernel is the identity.
    Tensor<double> k1 = Tensor<double>::full({1, 1, 1, 1}, 1.0);
    Tensor<double> idy = conv2d(tape, x, k1, 1, 0);
    for (int i = 0; i < 4; ++i) CHECK(idy.data()[i] == x.data()[i]);

    CHECK_THROWS_WITH_AS(conv2d(tape, x, Tensor<double>::zeros({1, 3, 2, 2}), 1, 0),
                         "conv2d: weight expects 3 input channels, tensor has 1",
                         std::invalid_argument);
    CHECK_THROWS_AS(conv2d(tape, x, Tensor<double>::zeros({1, 1, 5, 5}), 1, 0),
                    std::invalid_argument);
    CHECK_THROWS_AS(conv2d(tape, x, w, 0, 0), std::invalid_argument);
}

TEST_CASE("conv2d against a direct-summation oracle") {
    Rng rng(107);
    const int64_t N = 2, Ci = 3, H = 5, W = 6, Co = 4, k = 3;
    for (auto [stride, pad] : {std::pair<int64_t, int64_t>{1, 1}, {2, 1}, {1, 0}}) {
        auto xv = fdcheck::random_vec(rng, N * Ci * H * W);
        auto wv = fdcheck::random_vec(rng, Co * Ci * k * k);
        Tensor<double> x = Tensor<double>::from_vec({N, Ci, H, W}, xv);
        Tensor<double> w = Tensor<double>::from_vec({Co, Ci, k, k}, wv);
        Tape<double> tape;
        Tensor<double> y = conv2d(tape, x, w, stride, pad);
        const int64_t Ho = (H + 2 * pad - k) / stride + 1;
        const int64_t Wo = (W + 2 * pad - k) / stride + 1;
        REQUIRE(y.shape() == Shape{N, Co, Ho, Wo});
        for (int64_t n = 0; n < N; ++n)
            for (int64_t co = 0; co < Co; ++co)
                for (int64_t i = 0; i < Ho; ++i)
                    for (int64_t j = 0; j < Wo; ++j) {
                        double acc = 0.0;
                        for (int64_t ci = 0; ci < Ci; ++ci)
                            for (int64_t u = 0; u < k; ++u)
                                for (int64_t v = 0; v < k; ++v) {
                                    const int64_t ii = i * stride + u - pad;
                                    const int64_t jj = j * stride + v - pad;
                                    if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
                                    acc += wv[((co * Ci + ci) * k + u) * k + v] *
                                           xv[((n * Ci + ci) * H + ii) * W + jj];
                                }
                        CHECK(y.data()[((n * Co + co) * Ho + i) * Wo + j] == Approx(acc));
                    }
    }
}

TEST_CASE("conv_transpose2d hand-worked values") {
    Tape<double> tape;
    // Unit 1x1 kernel, stride 1: identity.
    Tensor<double> x = Tensor<double>::from_vec({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor<double> k1 = Tensor<double>::full({1, 1, 1, 1}, 1.0);
    Tensor<double> idy = conv_transpose2d(tape, x, k1, 1, 0);
    for (int i = 0; i < 4; ++i) CHECK(idy.data()[i] == x.data()[i]);

    // A single input pixel paints the kernel scaled by its value.
    Tensor<double> one = Tensor<double>::full({1, 1, 1, 1}, 2.5);
    std::vector<double> kv(16);
    std::iota(kv.begin(), kv.end(), 1.0);
    Tensor<double> k4 = Tensor<double>::from_vec({1, 1, 4, 4}, kv);
    Tensor<double> up = conv_transpose2d(tape, one, k4, 2, 0);
    REQUIRE(up.shape() == Shape{1, 1, 4, 4});
    for (int i = 0; i < 16; ++i) CHECK(up.data()[i] == Approx(2.5 * kv[i]));

    CHECK_THROWS_WITH_AS(conv_transpose2d(tape, x, Tensor<double>::zeros({3, 1, 2, 2}), 1, 0),
                         "conv_transpose2d: weight expects 3 input channels, tensor has 1",
                         std::invalid_argument);
}

TEST_CASE("conv_transpose2d is the exact adjoint of conv2d") {
    Rng rng(109);
    // stride/pad/kernel/extent combinations where the window tiles exactly,
    // so the transpose restores the original extent.
    struct Cfg {
        int64_t stride, pad, k, H;
    };
    for (auto [stride, pad, k, H] : {Cfg{1, 1, 3, 6}, Cfg{2, 1, 3, 7}, Cfg{2, 1, 4, 6}}) {
        const int64_t N = 2, Ci = 3, W = H, Co = 4;
        auto xv = fdcheck::random_vec(rng, N * Ci * H * W);
        auto wv = fdcheck::random_vec(rng, Co * Ci * k * k);
        Tensor<double> x = Tensor<double>::from_vec({N, Ci, H, W}, xv);
        Tensor<double> w = Tensor<double>::from_vec({Co, Ci, k, k}, wv);
        Tape<double> tape;
        Tensor<double> cx = conv2d(tape, x, w, stride, pad);
        auto yv = fdcheck::random_vec(rng, cx.numel());
        Tensor<double> y = Tensor<double>::from_vec(cx.shape(), yv);
        Tensor<double> ty = conv_transpose2d(tape, y, w, stride, pad);
        REQUIRE(ty.shape() == x.shape());

        double lhs = 0.0, rhs = 0.0;
        for (int64_t i = 0; i < cx.numel(); ++i) lhs += cx.data()[i] * yv[i];
        for (int64_t i = 0; i < x.numel(); ++i) rhs += xv[i] * ty.data()[i];
        CHECK(std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)) < 1e-10);
    }
}

TEST_CASE("convolution gradients match central differences") {
    Rng rng(113);
    const Shape xs{1, 2, 5, 5}, ws{3, 2, 3, 3};
    auto xv = fdcheck::random_vec(rng, shape_numel(xs), -1.0, 1.0);
    auto wv = fdcheck::random_vec(rng, shape_numel(ws), -1.0, 1.0);
    Tensor<double> wfix = Tensor<double>::from_vec(ws, wv);
    Tensor<double> xfix = Tensor<double>::from_vec(xs, xv);

    for (auto [stride, pad] : {std::pair<int64_t, int64_t>{1, 1}, {2, 1}}) {
        Shape os;
        {
            Tape<double> t;
            os = conv2d(t, xfix, wfix, stride, pad).shape();
        }
        Tensor<double> probe = fdcheck::make_probe<double>(rng, os);
        const int64_t s = stride, p = pad;
        CHECK(check_gradient(xs, xv, [&](Tape<double>& tp, Tensor<double>& t) {
                  return fdcheck::dot_probe(tp, conv2d(tp, t, wfix, s, p), probe);
              }) < 1e-6);
        CHECK(check_gradient(ws, wv, [&](Tape<double>& tp, Tensor<double>& t) {
                  return fdcheck::dot_probe(tp, conv2d(tp, xfix, t, s, p), probe);
              }) < 1e-6);

        Shape ts;
        {
            Tape<double> t;
            Tensor<double> wt = Tensor<double>::from_vec({2, 3, 3, 3},
                                                         fdcheck::random_vec(rng, 54));
            ts = conv_transpose2d(t, xfix, wt, s, p).shape();
        }
        auto wtv = fdcheck::random_vec(rng, 2 * 3 * 3 * 3, -1.0, 1.0);
        Tensor<double> wt = Tensor<double>::from_vec({2, 3, 3, 3}, wtv);
        Tensor<double> probe_t = fdcheck::make_probe<double>(rng, ts);
        CHECK(check_gradient(xs, xv, [&](Tape<double>& tp, Tensor<double>& t) {
                  return fdcheck::dot_probe(tp, conv_transpose2d(tp, t, wt, s, p), probe_t);
              }) < 1e-6);
        CHECK(check_gradient({2, 3, 3, 3}, wtv, [&](Tape<double>& tp, Tensor<double>& t) {
                  return fdcheck::dot_probe(tp, conv_transpose2d(tp, xfix, t, s, p), probe_t);
              }) < 1e-6);
    }
}

// ---------------------------------------------------------------------------
// Structural ops.
// ---------------------------------------------------------------------------

TEST_CASE("concat_channels stacks and splits gradients") {
    Tape<double> tape;
    Tensor<double> a = Tensor<double>::full({1, 3, 2, 2}, 1.0);
    Tensor<double> b = Tensor<double>::full({1, 3, 2, 2}, 2.0);
    Tensor<double> c = concat_channels(tape, a, b);
    CHECK(c.shape() == Shape{1, 6, 2, 2});
    CHECK(c.data()[0] == 1.0);
    CHECK(c.data()[3 * 4] == 2.0);
    CHECK_THROWS_AS(concat_channels(tape, a, Tensor<double>::zeros({1, 3, 4, 4})),
                    std::invalid_argument);

    Tensor<double> ga = Tensor<double>::full({1, 2, 2, 2}, 1.0);
    Tensor<double> gb = Tensor<double>::full({1, 1, 2, 2}, 2.0);
    ga.set_requires_grad(true);
    gb.set_requires_grad(true);
    Tape<double> t2;
    t2.backward(sum(t2, concat_channels(t2, ga, gb)));
    for (double g : *t2.grad_ptr(ga)) CHECK(g == 1.0);
    for (double g : *t2.grad_ptr(gb)) CHECK(g == 1.0);
}

TEST_CASE("structural op gradients match central differences") {
    Rng rng(127);
    const Shape shape{1, 3, 4, 4};
    auto xv = fdcheck::random_vec(rng, shape_numel(shape));

    {
        Tensor<double> probe = fdcheck::make_probe<double>(rng, {1, 6, 4, 4});
        Tensor<double> other = Tensor<double>::from_vec(
            shape, fdcheck::random_vec(rng, shape_numel(shape)));
        CHECK(check_gradient(shape, xv, [&](Tape<double>& tp, Tensor<double>& t) {
                  return fdcheck::dot_probe(tp, concat_channels(tp, t, other), probe);
              }) < 1e-6);
    }
    {
        Tensor<double> probe = fdcheck::make_probe<double>(rng, {1, 2, 4, 4});
        CHECK(check_gradient(shape, xv, [&](Tape<double>& tp, Tensor<double>& t) {
                  return fdcheck::dot_probe(tp, slice_channels(tp, t, 1, 3), probe);
              }) < 1e-6);
    }
    {
        Tensor<double> probe = fdcheck::make_probe<double>(rng, {1, 3, 2, 2});
        CHECK(check_gradient(shape, xv, [&](Tape<double>& tp, Tensor<double>& t) {
                  return fdcheck::dot_probe(tp, avgpool2(tp, t), probe);
              }) < 1e-6);
    }
    {
        Tensor<double> probe = fdcheck::make_probe<double>(rng, {1, 3, 8, 8});
        CHECK(check_gradient(shape, xv, [&](Tape<double>& tp, Tensor<double>& t) {
                  return fdcheck::dot_probe(tp, upsample_nearest2(tp, t), probe);
              }) < 1e-6);
    }
    {
        // Gather with duplicated sources exercises the scatter-add adjoint.
        std::vector<int64_t> map{0, 0, 5, 7, 7, 7, 11, 2};
        Tensor<double> probe = fdcheck::make_probe<double>(rng, {1, 8});
        CHECK(check_gradient({1, 12}, fdcheck::random_vec(rng, 12),
                             [&](Tape<double>& tp, Tensor<double>& t) {
                                 return fdcheck::dot_probe(
                                     tp, gather_tail(tp, t, map, {8}), probe);
                             }) < 1e-6);
    }
    {
        Tensor<double> probe = fdcheck::make_probe<double>(rng, shape);
        std::array<double, 9> M{0.3, 0.5, 0.2, -0.1, 0.6, 0.4, 0.25, -0.25, 1.0};
        std::array<double, 3> bias{1.0, -2.0, 0.5};
        CHECK(check_gradient(shape, xv, [&](Tape<double>& tp, Tensor<double>& t) {
                  return fdcheck::dot_probe(tp, affine_color3(tp, t, M, bias), probe);
              }) < 1e-6);
    }
    {
        Tensor<double> probe = fdcheck::make_probe<double>(rng, shape);
        Tensor<double> bias_fixed = Tensor<double>::from_vec({3}, {0.1, -0.2, 0.3});
        CHECK(check_gradient(shape, xv, [&](Tape<double>& tp, Tensor<double>& t) {
                  return fdcheck::dot_probe(tp, add_channel_bias(tp, t, bias_fixed), probe);
              }) < 1e-6);
        Tensor<double> xfix = Tensor<double>::from_vec(shape, xv);
        CHECK(check_gradient({3}, {0.1, -0.2, 0.3}, [&](Tape<double>& tp, Tensor<double>& t) {
                  return fdcheck::dot_probe(tp, add_channel_bias(tp, xfix, t), probe);
              }) < 1e-6);
    }
}

TEST_CASE("avgpool2 and friends validate their inputs") {
    Tape<double> tape;
    CHECK_THROWS_WITH_AS(avgpool2(tape, Tensor<double>::zeros({1, 1, 3, 4})),
                         "avgpool2: extents must be even, got [1,1,3,4]",
                         std::invalid_argument);
    CHECK_THROWS_AS(avgpool2(tape, Tensor<double>::zeros({3, 4})), std::invalid_argument);
    CHECK_THROWS_AS(slice_channels(tape, Tensor<double>::zeros({1, 3, 2, 2}), 2, 2),
                    std::invalid_argument);
    CHECK_THROWS_AS(gather_tail(tape, Tensor<double>::zeros({1, 4}), {0, 1, 2}, {4}),
                    std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Adam.
// ---------------------------------------------------------------------------

TEST_CASE("single Adam step moves by lr times the gradient sign") {
    // At t=1 the bias corrections cancel: mhat = g, vhat = g*g.
    AdamState<double> st;
    Tensor<double> p = Tensor<double>::from_vec({3}, {1.0, 2.0, 3.0});
    std::vector<double> g{0.5, -2.0, 1e-3};
    Tensor<double> params[] = {p};
    const std::vector<double>* grads[] = {&g};
    adam_step<double>(st, params, grads, 0.001);
    CHECK(p.data()[0] == Approx(1.0 - 0.001).epsilon(1e-6));
    CHECK(p.data()[1] == Approx(2.0 + 0.001).epsilon(1e-6));
    CHECK(p.data()[2] == Approx(3.0 - 0.001).epsilon(1e-4)); // eps softens tiny g
}

TEST_CASE("Adam matches an independent scalar recurrence over several steps") {
    AdamState<double> st;
    Tensor<double> p = Tensor<double>::full({1}, 0.7);
    const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    double ref = 0.7, m = 0.0, v = 0.0;
    Rng rng(301);
    for (int t = 1; t <= 20; ++t) {
        const double g = rng.uniform(-2.0, 2.0);
        std::vector<double> gv{g};
        Tensor<double> params[] = {p};
        const std::vector<double>* grads[] = {&gv};
        adam_step<double>(st, params, grads, lr);

        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mhat = m / (1 - std::pow(b1, t));
        const double vhat = v / (1 - std::pow(b2, t));
        ref -= lr * mhat / (std::sqrt(vhat) + eps);
        CHECK(p.data()[0] == Approx(ref).epsilon(1e-12));
    }
}

TEST_CASE("null gradient counts as zero and the moments decay") {
    AdamState<double> st;
    Tensor<double> p = Tensor<double>::full({1}, 1.0);
    std::vector<double> g{1.0};
    Tensor<double> params[] = {p};
    const std::vector<double>* grads[] = {&g};
    adam_step<double>(st, params, grads, 0.001);
    const double after_first = p.data()[0];

    const std::vector<double>* null_grads[] = {nullptr};
    adam_step<double>(st, params, null_grads, 0.001);
    // Momentum keeps pushing, but strictly less than a fresh gradient would.
    CHECK(p.data()[0] < after_first);
    CHECK(after_first - p.data()[0] < 0.001 + 1e-9);
}

TEST_CASE("update magnitude stays near the learning rate") {
    Rng rng(303);
    AdamState<double> st;
    Tensor<double> p = Tensor<double>::full({8}, 0.0);
    Tensor<double> params[] = {p};
    const double lr = 0.001;
    for (int t = 0; t < 50; ++t) {
        std::vector<double> g(8);
        for (auto& x : g) x = rng.uniform(-2.0, 2.0);
        std::vector<double> before(p.data().begin(), p.data().end());
        const std::vector<double>* grads[] = {&g};
        adam_step<double>(st, params, grads, lr);
        for (int i = 0; i < 8; ++i)
            CHECK(std::abs(p.data()[i] - before[i]) <= lr * 1.5);
    }
}

TEST_CASE("Adam validates its parameter list") {
    AdamState<double> st;
    Tensor<double> p = Tensor<double>::full({2}, 1.0);
    std::vector<double> g{1.0, 1.0};
    Tensor<double> params[] = {p};
    const std::vector<double>* grads2[] = {&g, &g};
    CHECK_THROWS_WITH_AS(
        adam_step<double>(st, params, std::span<const std::vector<double>* const>(grads2, 2),
                          0.1),
        "adam_step: params/grads size mismatch", std::invalid_argument);

    const std::vector<double>* grads[] = {&g};
    adam_step<double>(st, params, grads, 0.1);
    Tensor<double> q = Tensor<double>::full({3}, 1.0);
    Tensor<double> params_changed[] = {q};
    std::vector<double> g3{1.0, 1.0, 1.0};
    const std::vector<double>* grads3[] = {&g3};
    CHECK_THROWS_WITH_AS(adam_step<double>(st, params_changed, grads3, 0.1),
                         "adam_step: parameter shape changed under the state",
                         std::invalid_argument);
}
