#pragma once

#include "imgshield/nn.hpp"
#include "imgshield/rng.hpp"
#include "imgshield/tensor.hpp"

#include <array>
#include <cstdio>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace imgshield {

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T> value;
};

// A named parameter set plus an architecture descriptor that is enough to
// rebuild the layer shapes (used by checkpoint loading for validation).
template <typename T>
struct ModelParams {
    std::string arch;
    uint64_t seed = 0;
    std::vector<NamedParam<T>> params;

    Tensor<T>& at(const std::string& name) {
        for (auto& p : params)
            if (p.name == name) return p.value;
        throw std::runtime_error("model '" + arch + "' has no parameter '" + name + "'");
    }
    const Tensor<T>& at(const std::string& name) const {
        return const_cast<ModelParams*>(this)->at(name);
    }

    void set_trainable(bool b) {
        for (auto& p : params) p.value.set_requires_grad(b);
    }

    int64_t scalar_count() const {
        int64_t n = 0;
        for (const auto& p : params) n += p.value.numel();
        return n;
    }
};

template <typename T>
Tensor<T> normal_init(Shape s, Rng& rng, double stddev) {
    Tensor<T> t = Tensor<T>::uninit(std::move(s));
    for (auto& v : t.vec()) v = static_cast<T>(stddev * rng.normal());
    return t;
}

// ---------------------------------------------------------------------------
// Toy image-manipulation networks. Small frozen encoder/decoders that stand
// in for full-scale manipulation models: cheap to run, differentiable, and
// sensitive enough to input perturbations to be steerable.
// ---------------------------------------------------------------------------

// conv 4x4/2 (3or6->8) + lrelu, convT 4x4/2 (8->8) + lrelu, conv 1x1 (8->3),
// tanh mapped to [0,1]. A size-preserving stride-1 4x4 conv does not exist for
// integer padding, hence the 1x1 head.
template <typename T>
Tensor<T> toy_forward(Tape<T>& tape, const ModelParams<T>& m, const Tensor<T>& in) {
    Tensor<T> h = conv2d(tape, in, m.at("enc.w"), 2, 1);
    h = add_channel_bias(tape, h, m.at("enc.b"));
    h = leaky_relu(tape, h, T(0.2));
    h = conv_transpose2d(tape, h, m.at("dec.w"), 2, 1);
    h = add_channel_bias(tape, h, m.at("dec.b"));
    h = leaky_relu(tape, h, T(0.2));
    h = conv2d(tape, h, m.at("out.w"), 1, 0);
    h = add_channel_bias(tape, h, m.at("out.b"));
    h = tanh(tape, h);
    return mul(tape, add(tape, h, T(1)), T(0.5));
}

template <typename T>
ModelParams<T> make_toy_params(uint64_t seed, int64_t in_channels, const std::string& arch) {
    Rng rng = Rng::derive(seed, "init:" + arch);
    ModelParams<T> m;
    m.arch = arch;
    m.seed = seed;
    auto w = [&](Shape s, double fan_in) {
        return normal_init<T>(std::move(s), rng, 2.0 / std::sqrt(fan_in));
    };
    m.params.push_back({"enc.w", w({8, in_channels, 4, 4}, 16.0 * in_channels)});
    m.params.push_back({"enc.b", Tensor<T>::zeros({8})});
    m.params.push_back({"dec.w", w({8, 8, 4, 4}, 16.0 * 8)});
    m.params.push_back({"dec.b", Tensor<T>::zeros({8})});
    m.params.push_back({"out.w", w({3, 8, 1, 1}, 8.0)});
    m.params.push_back({"out.b", Tensor<T>::zeros({3})});
    m.set_trainable(false); // manipulation models stay frozen
    return m;
}

// ---------------------------------------------------------------------------
// UNet perturbation generator.
// ---------------------------------------------------------------------------

struct UnetDesc {
    int64_t in_channels = 6;
    int64_t base_width = 16;
    int64_t depth = 4;

    // Bottleneck at 4x4: depth = log2(size) - 2.
    static UnetDesc for_size(int64_t size, int64_t base_width, int64_t in_channels) {
        UnetDesc d;
        d.in_channels = in_channels;
        d.base_width = base_width;
        d.depth = 0;
        int64_t s = size;
        while (s > 4 && s % 2 == 0) {
            s /= 2;
            ++d.depth;
        }
        if (d.depth < 1 || (size >> d.depth) << d.depth != size)
            throw std::invalid_argument("unet: unsupported input size " + std::to_string(size));
        return d;
    }

    int64_t width(int64_t level) const { // level 1..depth
        int64_t f = int64_t(1) << (level - 1);
        return base_width * std::min<int64_t>(f, 8);
    }

    std::string arch() const {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "unet:in=%lld,bw=%lld,depth=%lld",
                      static_cast<long long>(in_channels), static_cast<long long>(base_width),
                      static_cast<long long>(depth));
        return buf;
    }

    static UnetDesc parse(const std::string& arch) {
        UnetDesc d;
        long long in = 0, bw = 0, depth = 0;
        if (std::sscanf(arch.c_str(), "unet:in=%lld,bw=%lld,depth=%lld", &in, &bw, &depth) != 3)
            throw std::invalid_argument("not a unet arch descriptor: '" + arch + "'");
        d.in_channels = in;
        d.base_width = bw;
        d.depth = depth;
        if (in < 1 || depth < 1 || bw < 1)
            throw std::invalid_argument("bad unet arch descriptor: '" + arch + "'");
        return d;
    }
};

template <typename T>
ModelParams<T> make_unet_params(const UnetDesc& d, uint64_t seed) {
    static const int64_t allowed[] = {8, 16, 32, 64};
    bool ok = false;
    for (int64_t a : allowed) ok = ok || a == d.base_width;
    if (!ok)
        throw std::invalid_argument("unet base_width must be one of 8/16/32/64, got " +
                                    std::to_string(d.base_width));
    Rng rng = Rng::derive(seed, "init:" + d.arch());
    ModelParams<T> m;
    m.arch = d.arch();
    m.seed = seed;
    auto name = [](const char* kind, int64_t k) {
        return std::string(kind) + std::to_string(k) + ".w";
    };
    auto bname = [](const char* kind, int64_t k) {
        return std::string(kind) + std::to_string(k) + ".b";
    };
    // Weights N(0, 0.02), biases zero; a zeroed generator emits a zero field.
    for (int64_t k = 1; k <= d.depth; ++k) {
        int64_t cin = k == 1 ? d.in_channels : d.width(k - 1);
        int64_t cout = d.width(k);
        m.params.push_back({name("down", k), normal_init<T>({cout, cin, 4, 4}, rng, 0.02)});
        m.params.push_back({bname("down", k), Tensor<T>::zeros({cout})});
    }
    for (int64_t k = d.depth; k >= 1; --k) {
        int64_t cin = k == d.depth ? d.width(k) : 2 * d.width(k);
        int64_t cout = k == 1 ? 3 : d.width(k - 1);
        m.params.push_back({name("up", k), normal_init<T>({cin, cout, 4, 4}, rng, 0.02)});
        m.params.push_back({bname("up", k), Tensor<T>::zeros({cout})});
    }
    m.set_trainable(true);
    return m;
}

template <typename T>
Tensor<T> unet_forward(Tape<T>& tape, const ModelParams<T>& m, const Tensor<T>& x) {
    const UnetDesc d = UnetDesc::parse(m.arch);
    if (x.rank() != 4 || x.dim(1) != d.in_channels)
        throw std::invalid_argument("unet: input " + shape_str(x.shape()) + " for arch " +
                                    m.arch);
    if (x.dim(2) % (int64_t(1) << d.depth) || x.dim(3) % (int64_t(1) << d.depth))
        throw std::invalid_argument("unet: spatial extent of " + shape_str(x.shape()) +
                                    " not divisible by 2^" + std::to_string(d.depth));
    std::vector<Tensor<T>> skip(static_cast<size_t>(d.depth) + 1);
    Tensor<T> a = x;
    for (int64_t k = 1; k <= d.depth; ++k) {
        std::string ks = std::to_string(k);
        Tensor<T> pre = conv2d(tape, a, m.at("down" + ks + ".w"), 2, 1);
        pre = add_channel_bias(tape, pre, m.at("down" + ks + ".b"));
        skip[static_cast<size_t>(k)] = pre;
        a = leaky_relu(tape, pre, T(0.2));
    }
    Tensor<T> u = conv_transpose2d(tape, a, m.at("up" + std::to_string(d.depth) + ".w"), 2, 1);
    u = add_channel_bias(tape, u, m.at("up" + std::to_string(d.depth) + ".b"));
    for (int64_t k = d.depth - 1; k >= 1; --k) {
        std::string ks = std::to_string(k);
        Tensor<T> cat = concat_channels(tape, u, skip[static_cast<size_t>(k)]);
        u = conv_transpose2d(tape, leaky_relu(tape, cat, T(0.2)), m.at("up" + ks + ".w"), 2, 1);
        u = add_channel_bias(tape, u, m.at("up" + ks + ".b"));
    }
    return u; // identity output head: the perturbation field is unbounded here
}

// ---------------------------------------------------------------------------
// Manipulation model wrapper: frozen network, arity, and a solid-colour
// steering target.
// ---------------------------------------------------------------------------

template <typename T>
struct ManipulationSpec {
    std::string name;
    int arity = 1;
    std::array<double, 3> target_color = {1.0, 1.0, 1.0};
    ModelParams<T> model;
    std::function<Tensor<T>(Tape<T>&, const ModelParams<T>&, std::span<const Tensor<T>>)>
        forward;

    Tensor<T> run(Tape<T>& tape, std::span<const Tensor<T>> inputs) const {
        if (static_cast<int>(inputs.size()) != arity)
            throw std::invalid_argument("model '" + name + "' takes " + std::to_string(arity) +
                                        " inputs, got " + std::to_string(inputs.size()));
        return forward(tape, model, inputs);
    }

    Tensor<T> make_target(const Shape& s) const {
        Tensor<T> t = Tensor<T>::uninit(s);
        const int64_t HW = s[2] * s[3];
        auto d = t.data();
        for (int64_t n = 0; n < s[0]; ++n)
            for (int64_t c = 0; c < 3; ++c)
                std::fill_n(d.data() + (n * 3 + c) * HW, HW, static_cast<T>(target_color[c]));
        return t;
    }
};

// Self-reconstruction stand-in; steered towards solid white.
template <typename T>
ManipulationSpec<T> toy_recon_model(uint64_t seed) {
    ManipulationSpec<T> spec;
    spec.name = "toy_recon";
    spec.arity = 1;
    spec.target_color = {1.0, 1.0, 1.0};
    spec.model = make_toy_params<T>(seed, 3, "toy_recon");
    spec.forward = [](Tape<T>& tape, const ModelParams<T>& m, std::span<const Tensor<T>> in) {
        return toy_forward(tape, m, in[0]);
    };
    return spec;
}

// Two-input blending stand-in (source, target); steered towards solid blue.
// Protection is always applied to the second (target) input.
template <typename T>
ManipulationSpec<T> toy_blend_model(uint64_t seed) {
    ManipulationSpec<T> spec;
    spec.name = "toy_blend";
    spec.arity = 2;
    spec.target_color = {0.0, 0.0, 1.0};
    spec.model = make_toy_params<T>(seed, 6, "toy_blend");
    spec.forward = [](Tape<T>& tape, const ModelParams<T>& m, std::span<const Tensor<T>> in) {
        return toy_forward(tape, m, concat_channels(tape, in[0], in[1]));
    };
    return spec;
}

// Pass-through model for closed-form attack checks.
template <typename T>
ManipulationSpec<T> identity_model() {
    ManipulationSpec<T> spec;
    spec.name = "identity";
    spec.arity = 1;
    spec.target_color = {1.0, 1.0, 1.0};
    spec.model.arch = "identity";
    spec.forward = [](Tape<T>&, const ModelParams<T>&, std::span<const Tensor<T>> in) {
        return in[0];
    };
    return spec;
}

// ---------------------------------------------------------------------------
// Protection application: perturbations act within an L-inf budget and the
// protected image stays a valid image.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> apply_protection(Tape<T>& tape, const Tensor<T>& image, const Tensor<T>& delta,
                           T eps) {
    if (!(eps > T(0))) throw std::invalid_argument("apply_protection: eps must be > 0");
    Tensor<T> d = clamp(tape, delta, -eps, eps);
    return clamp(tape, add(tape, image, d), T(0), T(1));
}

// Per-image perturbation emitted by the generator, optionally conditioned on
// a dataset-global perturbation via channel concatenation.
template <typename T>
Tensor<T> generator_delta(Tape<T>& tape, const ModelParams<T>& gen, const Tensor<T>& image,
                          const Tensor<T>* global_delta) {
    const UnetDesc d = UnetDesc::parse(gen.arch);
    if (d.in_channels == 6) {
        if (!global_delta)
            throw std::invalid_argument("generator expects a global perturbation channel");
        return unet_forward(tape, gen, concat_channels(tape, image, *global_delta));
    }
    return unet_forward(tape, gen, image);
}

} // namespace imgshield
