#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace imgshield {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

namespace detail {
inline std::atomic<int64_t>& tensor_id_counter() {
    static std::atomic<int64_t> c{0};
    return c;
}
} // namespace detail

// Dense n-dimensional tensor. Copies share storage (shallow handle); use
// clone() for a deep copy. The element type is float by default across the
// project, with double builds used for gradient verification.
template <typename T>
class Tensor {
    static_assert(std::is_floating_point_v<T>);

    struct Data {
        Shape shape;
        std::vector<T> values;
        bool requires_grad = false;
        int64_t id = detail::tensor_id_counter()++;
    };

public:
    Tensor() : d_(std::make_shared<Data>()) {}

    static Tensor zeros(Shape s) {
        Tensor t;
        t.d_->shape = std::move(s);
        t.d_->values.assign(shape_numel(t.d_->shape), T(0));
        return t;
    }

    static Tensor full(Shape s, T v) {
        Tensor t = zeros(std::move(s));
        std::fill(t.d_->values.begin(), t.d_->values.end(), v);
        return t;
    }

    static Tensor uninit(Shape s) {
        Tensor t;
        t.d_->shape = std::move(s);
        t.d_->values.resize(shape_numel(t.d_->shape));
        return t;
    }

    static Tensor from_vec(Shape s, std::vector<T> v) {
        if (static_cast<int64_t>(v.size()) != shape_numel(s))
            throw std::invalid_argument("from_vec: " + std::to_string(v.size()) +
                                        " values for shape " + shape_str(s));
        Tensor t;
        t.d_->shape = std::move(s);
        t.d_->values = std::move(v);
        return t;
    }

    const Shape& shape() const { return d_->shape; }
    int64_t dim(size_t i) const { return d_->shape.at(i); }
    size_t rank() const { return d_->shape.size(); }
    int64_t numel() const { return static_cast<int64_t>(d_->values.size()); }
    int64_t id() const { return d_->id; }

    std::span<T> data() { return d_->values; }
    std::span<const T> data() const { return d_->values; }
    std::vector<T>& vec() { return d_->values; }
    const std::vector<T>& vec() const { return d_->values; }

    T item() const {
        if (numel() != 1)
            throw std::invalid_argument("item: tensor has " + std::to_string(numel()) +
                                        " elements");
        return d_->values[0];
    }

    bool requires_grad() const { return d_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        d_->requires_grad = b;
        return *this;
    }

    // Deep copy with a fresh id; gradient flag is not inherited.
    Tensor clone() const {
        Tensor t;
        t.d_->shape = d_->shape;
        t.d_->values = d_->values;
        return t;
    }

    bool same_shape(const Tensor& o) const { return d_->shape == o.d_->shape; }

private:
    std::shared_ptr<Data> d_;
};

// Reverse-mode tape. Operations append themselves while any input requires a
// gradient; backward(root) replays them once in reverse. A tape is single-use:
// rebuild the graph to differentiate again.
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(const Tensor<T>& out, std::function<void(Tape&)> pull) {
        if (spent_)
            throw std::runtime_error("tape: recording after backward; use a fresh tape");
        const_cast<Tensor<T>&>(out).set_requires_grad(true);
        on_tape_.insert(out.id());
        steps_.push_back(Step{out, std::move(pull)});
    }

    void backward(const Tensor<T>& root) {
        if (spent_)
            throw std::runtime_error("tape: backward called twice; rebuild the graph");
        if (root.numel() != 1)
            throw std::invalid_argument("tape: backward root must be a scalar");
        if (!on_tape_.count(root.id()))
            throw std::invalid_argument("tape: backward root was not recorded on this tape");
        grads_[root.id()] = std::vector<T>(1, T(1));
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
            if (grads_.find(it->out.id()) == grads_.end()) continue;
            it->pull(*this);
        }
        spent_ = true;
    }

    bool has_grad(const Tensor<T>& t) const { return grads_.count(t.id()) != 0; }

    Tensor<T> grad(const Tensor<T>& t) const {
        auto it = grads_.find(t.id());
        if (it == grads_.end())
            throw std::runtime_error("tape: no gradient for tensor id " +
                                     std::to_string(t.id()));
        return Tensor<T>::from_vec(t.shape(), it->second);
    }

    // Accumulation buffer for an input tensor, zero-initialised on first use.
    // Elements of grads_ are stable under rehash, so pointers stay valid.
    std::vector<T>& grad_acc(const Tensor<T>& t) {
        auto it = grads_.find(t.id());
        if (it == grads_.end())
            it = grads_.emplace(t.id(), std::vector<T>(t.numel(), T(0))).first;
        return it->second;
    }

    const std::vector<T>* grad_ptr(const Tensor<T>& t) const {
        auto it = grads_.find(t.id());
        return it == grads_.end() ? nullptr : &it->second;
    }

    size_t recorded_ops() const { return steps_.size(); }

private:
    struct Step {
        Tensor<T> out;
        std::function<void(Tape&)> pull;
    };
    std::vector<Step> steps_;
    std::unordered_map<int64_t, std::vector<T>> grads_;
    std::unordered_set<int64_t> on_tape_;
    bool spent_ = false;
};

namespace detail {

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Elementwise unary op: out[i] = f(a[i]); d/da picked up from (a[i], out[i]).
template <typename T, class F, class DF>
Tensor<T> unary_op(Tape<T>& tape, const Tensor<T>& a, F f, DF dfdx) {
    Tensor<T> out = Tensor<T>::uninit(a.shape());
    auto av = a.data();
    auto ov = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) ov[i] = f(av[i]);
    if (a.requires_grad()) {
        tape.record(out, [a, out, dfdx](Tape<T>& tp) {
            auto& ga = tp.grad_acc(a);
            const std::vector<T>& go = *tp.grad_ptr(out);
            auto av2 = a.data();
            auto ov2 = out.data();
            for (size_t i = 0; i < ga.size(); ++i)
                ga[i] += go[i] * dfdx(av2[i], ov2[i]);
        });
    }
    return out;
}

// Elementwise binary op with scalar broadcast (either side may be a
// one-element tensor). dfa/dfb give local derivatives from (a, b).
template <typename T, class F, class DFA, class DFB>
Tensor<T> binary_op(const char* name, Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b,
                    F f, DFA dfa, DFB dfb) {
    const bool abc = a.numel() == 1 && b.numel() != 1; // broadcast a
    const bool bbc = b.numel() == 1 && a.numel() != 1; // broadcast b
    if (!abc && !bbc) check_same_shape(name, a, b);
    const Shape& os = abc ? b.shape() : a.shape();
    Tensor<T> out = Tensor<T>::uninit(os);
    auto av = a.data();
    auto bv = b.data();
    auto ov = out.data();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) ov[i] = f(av[abc ? 0 : i], bv[bbc ? 0 : i]);
    if (a.requires_grad() || b.requires_grad()) {
        const bool na = a.requires_grad();
        const bool nb = b.requires_grad();
        tape.record(out, [=](Tape<T>& tp) {
            const std::vector<T>& go = *tp.grad_ptr(out);
            auto av2 = a.data();
            auto bv2 = b.data();
            if (na) {
                auto& ga = tp.grad_acc(a);
                for (int64_t i = 0; i < n; ++i)
                    ga[abc ? 0 : i] += go[i] * dfa(av2[abc ? 0 : i], bv2[bbc ? 0 : i]);
            }
            if (nb) {
                auto& gb = tp.grad_acc(b);
                for (int64_t i = 0; i < n; ++i)
                    gb[bbc ? 0 : i] += go[i] * dfb(av2[abc ? 0 : i], bv2[bbc ? 0 : i]);
            }
        });
    }
    return out;
}

} // namespace detail

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "add", tape, a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
        [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "sub", tape, a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
        [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "mul", tape, a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
        [](T x, T) { return x; });
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, T s) {
    return detail::unary_op<T>(
        tape, a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, T s) {
    return detail::unary_op<T>(
        tape, a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> sin(Tape<T>& tape, const Tensor<T>& a) {
    return detail::unary_op<T>(
        tape, a, [](T x) { return std::sin(x); }, [](T x, T) { return std::cos(x); });
}

template <typename T>
Tensor<T> tanh(Tape<T>& tape, const Tensor<T>& a) {
    return detail::unary_op<T>(
        tape, a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

// Gradient at x == 0 takes the negative-side slope.
template <typename T>
Tensor<T> leaky_relu(Tape<T>& tape, const Tensor<T>& a, T slope) {
    return detail::unary_op<T>(
        tape, a, [slope](T x) { return x > T(0) ? x : slope * x; },
        [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

// Subgradient is zero outside [lo, hi] and one inside (boundaries inclusive).
template <typename T>
Tensor<T> clamp(Tape<T>& tape, const Tensor<T>& a, T lo, T hi) {
    if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
    return detail::unary_op<T>(
        tape, a, [lo, hi](T x) { return std::min(hi, std::max(lo, x)); },
        [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

// Subgradient at zero is zero.
template <typename T>
Tensor<T> abs(Tape<T>& tape, const Tensor<T>& a) {
    return detail::unary_op<T>(
        tape, a, [](T x) { return std::abs(x); },
        [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> square(Tape<T>& tape, const Tensor<T>& a) {
    return detail::unary_op<T>(
        tape, a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// Rounding used inside the quantisation step of the compression surrogate.
//   true_round : round half away from zero; gradient zero (reference codec)
//   identity   : no rounding (quantisation ablation)
//   cubic      : round(x) + (x - round(x))^3
//   soft       : forward identical to true_round, gradient of the sin surrogate
//   sin        : x - sin(2*pi*x) / (2*pi), smooth everywhere
enum class Round { true_round, identity, cubic, soft, sin };

inline const char* round_name(Round r) {
    switch (r) {
        case Round::true_round: return "true_round";
        case Round::identity: return "identity";
        case Round::cubic: return "cubic";
        case Round::soft: return "soft";
        case Round::sin: return "sin";
    }
    return "?";
}

inline Round round_from_name(const std::string& s) {
    for (Round r : {Round::true_round, Round::identity, Round::cubic, Round::soft, Round::sin})
        if (s == round_name(r)) return r;
    throw std::invalid_argument("unknown round mode '" + s + "'");
}

template <typename T>
Tensor<T> round_approx(Tape<T>& tape, const Tensor<T>& a, Round mode) {
    constexpr T two_pi = T(6.283185307179586476925286766559L);
    switch (mode) {
        case Round::true_round:
            return detail::unary_op<T>(
                tape, a, [](T x) { return std::round(x); }, [](T, T) { return T(0); });
        case Round::identity:
            return detail::unary_op<T>(
                tape, a, [](T x) { return x; }, [](T, T) { return T(1); });
        case Round::cubic:
            return detail::unary_op<T>(
                tape, a,
                [](T x) {
                    T r = std::round(x);
                    T d = x - r;
                    return r + d * d * d;
                },
                [](T x, T) {
                    T d = x - std::round(x);
                    return T(3) * d * d;
                });
        case Round::soft:
            return detail::unary_op<T>(
                tape, a, [](T x) { return std::round(x); },
                [two_pi](T x, T) { return T(1) - std::cos(two_pi * x); });
        case Round::sin:
            return detail::unary_op<T>(
                tape, a, [two_pi](T x) { return x - std::sin(two_pi * x) / two_pi; },
                [two_pi](T x, T) { return T(1) - std::cos(two_pi * x); });
    }
    throw std::invalid_argument("round_approx: bad mode");
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a) {
    double acc = 0.0;
    for (T v : a.data()) acc += static_cast<double>(v);
    Tensor<T> out = Tensor<T>::from_vec({1}, {static_cast<T>(acc)});
    if (a.requires_grad()) {
        tape.record(out, [a, out](Tape<T>& tp) {
            auto& ga = tp.grad_acc(a);
            const T g = (*tp.grad_ptr(out))[0];
            for (auto& v : ga) v += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& a) {
    const T inv = static_cast<T>(1.0 / static_cast<double>(a.numel()));
    return mul(tape, sum(tape, a), inv);
}

// ---------------------------------------------------------------------------
// Distance losses between two same-shape tensors, reduced to a scalar.
// ---------------------------------------------------------------------------

enum class Norm { l1, l2, linf_smooth };

inline const char* norm_name(Norm n) {
    switch (n) {
        case Norm::l1: return "l1";
        case Norm::l2: return "l2";
        case Norm::linf_smooth: return "linf";
    }
    return "?";
}

inline Norm norm_from_name(const std::string& s) {
    for (Norm n : {Norm::l1, Norm::l2, Norm::linf_smooth})
        if (s == norm_name(n)) return n;
    throw std::invalid_argument("unknown norm '" + s + "'");
}

struct LossOpts {
    // l2_mean=true gives mean squared error (the default everywhere);
    // false gives the plain euclidean norm sqrt(sum d^2) for ablations.
    bool l2_mean = true;
    // Sharpness of the smooth max in the linf loss.
    double t = 50.0;
};

// Mean absolute difference.
template <typename T>
Tensor<T> loss_l1(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("loss_l1", a, b);
    const int64_t n = a.numel();
    auto av = a.data();
    auto bv = b.data();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += std::abs(static_cast<double>(av[i]) - bv[i]);
    Tensor<T> out = Tensor<T>::from_vec({1}, {static_cast<T>(acc / n)});
    if (a.requires_grad() || b.requires_grad()) {
        tape.record(out, [a, b, out, n](Tape<T>& tp) {
            const T g = (*tp.grad_ptr(out))[0] / static_cast<T>(n);
            auto av2 = a.data();
            auto bv2 = b.data();
            auto sgn = [](T d) { return d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)); };
            if (a.requires_grad()) {
                auto& ga = tp.grad_acc(a);
                for (int64_t i = 0; i < n; ++i) ga[i] += g * sgn(av2[i] - bv2[i]);
            }
            if (b.requires_grad()) {
                auto& gb = tp.grad_acc(b);
                for (int64_t i = 0; i < n; ++i) gb[i] -= g * sgn(av2[i] - bv2[i]);
            }
        });
    }
    return out;
}

// Mean squared error, or euclidean norm when mean=false.
template <typename T>
Tensor<T> loss_l2(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, bool mean = true) {
    detail::check_same_shape("loss_l2", a, b);
    const int64_t n = a.numel();
    auto av = a.data();
    auto bv = b.data();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double d = static_cast<double>(av[i]) - bv[i];
        acc += d * d;
    }
    const double val = mean ? acc / n : std::sqrt(acc);
    Tensor<T> out = Tensor<T>::from_vec({1}, {static_cast<T>(val)});
    if (a.requires_grad() || b.requires_grad()) {
        tape.record(out, [a, b, out, n, mean](Tape<T>& tp) {
            const T g = (*tp.grad_ptr(out))[0];
            auto av2 = a.data();
            auto bv2 = b.data();
            const T y = out.data()[0];
            for (int pass = 0; pass < 2; ++pass) {
                const Tensor<T>& t = pass == 0 ? a : b;
                if (!t.requires_grad()) continue;
                const T sign = pass == 0 ? T(1) : T(-1);
                auto& gt = tp.grad_acc(t);
                if (mean) {
                    const T c = sign * g * T(2) / static_cast<T>(n);
                    for (int64_t i = 0; i < n; ++i) gt[i] += c * (av2[i] - bv2[i]);
                } else {
                    // d sqrt(S)/dx = d / sqrt(S); zero at identical inputs.
                    if (y <= T(0)) continue;
                    const T c = sign * g / y;
                    for (int64_t i = 0; i < n; ++i) gt[i] += c * (av2[i] - bv2[i]);
                }
            }
        });
    }
    return out;
}

// Smooth maximum of |a - b|: m + log(mean exp(t (d - m))) / t with m = max d.
// Normalised by the element count so identical tensors give exactly zero;
// t -> inf recovers the true maximum.
template <typename T>
Tensor<T> loss_linf_smooth(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b,
                           double t = 50.0) {
    detail::check_same_shape("loss_linf", a, b);
    if (!(t > 0.0)) throw std::invalid_argument("loss_linf: t must be > 0");
    const int64_t n = a.numel();
    auto av = a.data();
    auto bv = b.data();
    double m = 0.0;
    for (int64_t i = 0; i < n; ++i)
        m = std::max(m, std::abs(static_cast<double>(av[i]) - bv[i]));
    double z = 0.0;
    for (int64_t i = 0; i < n; ++i)
        z += std::exp(t * (std::abs(static_cast<double>(av[i]) - bv[i]) - m));
    const double val = m + std::log(z / n) / t;
    Tensor<T> out = Tensor<T>::from_vec({1}, {static_cast<T>(val)});
    if (a.requires_grad() || b.requires_grad()) {
        tape.record(out, [a, b, out, n, t, m, z](Tape<T>& tp) {
            const T g = (*tp.grad_ptr(out))[0];
            auto av2 = a.data();
            auto bv2 = b.data();
            for (int pass = 0; pass < 2; ++pass) {
                const Tensor<T>& tt = pass == 0 ? a : b;
                if (!tt.requires_grad()) continue;
                const T sign = pass == 0 ? T(1) : T(-1);
                auto& gt = tp.grad_acc(tt);
                for (int64_t i = 0; i < n; ++i) {
                    double d = static_cast<double>(av2[i]) - bv2[i];
                    double w = std::exp(t * (std::abs(d) - m)) / z;
                    double sg = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
                    gt[i] += sign * g * static_cast<T>(w * sg);
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> loss(Tape<T>& tape, Norm kind, const Tensor<T>& a, const Tensor<T>& b,
               const LossOpts& opts = {}) {
    switch (kind) {
        case Norm::l1: return loss_l1(tape, a, b);
        case Norm::l2: return loss_l2(tape, a, b, opts.l2_mean);
        case Norm::linf_smooth: return loss_linf_smooth(tape, a, b, opts.t);
    }
    throw std::invalid_argument("loss: bad norm");
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (T v : t.data())
        if (!std::isfinite(v)) return false;
    return true;
}

} // namespace imgshield
