#pragma once

#include "imgshield/jpeg.hpp"
#include "imgshield/models.hpp"
#include "imgshield/rng.hpp"
#include "imgshield/tensor.hpp"

#include <cmath>
#include <map>
#include <ostream>
#include <span>

namespace imgshield {

// ---------------------------------------------------------------------------
// Adam optimiser on raw parameter storage (updates happen outside the tape).
// ---------------------------------------------------------------------------

template <typename T>
struct AdamState {
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    int64_t t = 0;
    std::vector<std::vector<T>> m, v;
};

// One update: p -= lr * mhat / (sqrt(vhat) + eps). Null gradients count as
// zero (moments keep decaying).
template <typename T>
void adam_step(AdamState<T>& st, std::span<Tensor<T>> params,
               std::span<const std::vector<T>* const> grads, T lr) {
    if (params.size() != grads.size())
        throw std::invalid_argument("adam_step: params/grads size mismatch");
    if (st.m.empty()) {
        st.m.resize(params.size());
        st.v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            st.m[i].assign(params[i].numel(), T(0));
            st.v[i].assign(params[i].numel(), T(0));
        }
    }
    if (st.m.size() != params.size())
        throw std::invalid_argument("adam_step: state tracks a different parameter list");
    ++st.t;
    const T bc1 = T(1) - std::pow(st.beta1, static_cast<T>(st.t));
    const T bc2 = T(1) - std::pow(st.beta2, static_cast<T>(st.t));
    for (size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].data();
        auto& m = st.m[i];
        auto& v = st.v[i];
        if (m.size() != static_cast<size_t>(params[i].numel()))
            throw std::invalid_argument("adam_step: parameter shape changed under the state");
        const std::vector<T>* g = grads[i];
        for (size_t j = 0; j < m.size(); ++j) {
            const T gj = g ? (*g)[j] : T(0);
            m[j] = st.beta1 * m[j] + (T(1) - st.beta1) * gj;
            v[j] = st.beta2 * v[j] + (T(1) - st.beta2) * gj * gj;
            const T mhat = m[j] / bc1;
            const T vhat = v[j] / bc2;
            p[j] -= lr * mhat / (std::sqrt(vhat) + st.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Attack / training configuration.
// ---------------------------------------------------------------------------

enum class JpegMode { off, fixed, random };

inline const char* jpeg_mode_name(JpegMode m) {
    switch (m) {
        case JpegMode::off: return "off";
        case JpegMode::fixed: return "fixed";
        case JpegMode::random: return "random";
    }
    return "?";
}

struct AttackConfig {
    double eps = 0.05;   // L-inf perturbation budget in [0,1] pixel units
    double alpha = 0.01; // sign-step size or Adam learning rate
    int steps = 100;
    double lambda = 0.1; // weight of the perturbation penalty
    Norm norm = Norm::l2;
    LossOpts loss_opts{};
    JpegMode jpeg = JpegMode::off;
    int jpeg_quality = 80;
    bool jpeg_420 = true;
    Round jpeg_round = Round::sin;
    uint64_t seed = 1;

    void validate() const {
        if (!(eps > 0)) throw std::invalid_argument("epsilon must be > 0, got " + fmt(eps));
        if (!(alpha > 0)) throw std::invalid_argument("alpha must be > 0, got " + fmt(alpha));
        if (steps < 0)
            throw std::invalid_argument("steps must be >= 0, got " + std::to_string(steps));
        if (!(lambda >= 0))
            throw std::invalid_argument("lambda must be >= 0, got " + fmt(lambda));
        if (jpeg != JpegMode::off && (jpeg_quality < 1 || jpeg_quality > 99))
            throw std::invalid_argument("quality must be in [1,99], got " +
                                        std::to_string(jpeg_quality));
    }

private:
    static std::string fmt(double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%g", v);
        return buf;
    }
};

// A frozen manipulation model plus its dataset slice. Each sample carries
// `arity` images; the last one is the image that receives protection.
// lambda_override < 0 means "use the shared config value".
template <typename T>
struct TaskData {
    ManipulationSpec<T> spec;
    std::vector<std::vector<Tensor<T>>> samples;
    double lambda_override = -1.0;
};

namespace detail {

template <typename T>
void check_source_frozen(std::span<const Tensor<T>> inputs) {
    for (size_t i = 0; i + 1 < inputs.size(); ++i)
        if (inputs[i].requires_grad())
            throw std::logic_error("attack loops never differentiate source inputs");
}

// [0,1] image -> optional compression cycle -> [0,1].
template <typename T>
Tensor<T> maybe_compress01(Tape<T>& tape, const Tensor<T>& x01, const AttackConfig& cfg,
                           int quality) {
    if (cfg.jpeg == JpegMode::off) return x01;
    JpegConfig jc;
    jc.quality = quality;
    jc.round = cfg.jpeg_round;
    jc.chroma_420 = cfg.jpeg_420;
    Tensor<T> x255 = mul(tape, x01, T(255));
    return mul(tape, jpeg_pipeline(tape, x255, jc), static_cast<T>(1.0 / 255.0));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Per-image iterative baselines. Both enforce the L-inf ball around the
// original and the valid pixel range after every step; the loss is the
// reconstruction term only.
// ---------------------------------------------------------------------------

template <typename T>
struct AttackResult {
    Tensor<T> protected_image;
    std::vector<double> loss_trace;
};

template <typename T>
AttackResult<T> iterative_sign_attack(const ManipulationSpec<T>& spec,
                                      std::span<const Tensor<T>> inputs,
                                      const AttackConfig& cfg) {
    cfg.validate();
    detail::check_source_frozen(inputs);
    const Tensor<T>& orig = inputs[inputs.size() - 1];
    const T eps = static_cast<T>(cfg.eps);
    const T alpha = static_cast<T>(cfg.alpha);
    std::vector<T> xp(orig.data().begin(), orig.data().end());
    const auto x0 = orig.data();
    Tensor<T> target;
    AttackResult<T> res;

    std::vector<Tensor<T>> cur(inputs.begin(), inputs.end());
    for (int step = 0; step < cfg.steps; ++step) {
        Tape<T> tape;
        Tensor<T> x = Tensor<T>::from_vec(orig.shape(), xp);
        x.set_requires_grad(true);
        cur.back() = x;
        Tensor<T> out = spec.run(tape, cur);
        if (target.numel() == 0) target = spec.make_target(out.shape());
        Tensor<T> l = loss_l2(tape, out, target, true);
        const double lv = static_cast<double>(l.item());
        if (!std::isfinite(lv))
            throw std::runtime_error("non-finite loss at step " + std::to_string(step));
        res.loss_trace.push_back(lv);
        tape.backward(l);
        const std::vector<T>* g = tape.grad_ptr(x);
        for (size_t i = 0; i < xp.size(); ++i) {
            const T gi = g ? (*g)[i] : T(0);
            const T sg = gi > T(0) ? T(1) : (gi < T(0) ? T(-1) : T(0));
            T pert = xp[i] - alpha * sg - x0[i];
            pert = std::min(eps, std::max(-eps, pert));
            xp[i] = std::min(T(1), std::max(T(0), x0[i] + pert));
        }
    }
    res.protected_image = Tensor<T>::from_vec(orig.shape(), std::move(xp));
    return res;
}

template <typename T>
AttackResult<T> ifgsm(const ManipulationSpec<T>& spec, std::span<const Tensor<T>> inputs,
                      const AttackConfig& cfg) {
    return iterative_sign_attack(spec, inputs, cfg);
}

// Projected variant: identical update with an explicit projection onto the
// L-inf ball intersected with [0,1] (numerically the same composition).
template <typename T>
AttackResult<T> ipgd(const ManipulationSpec<T>& spec, std::span<const Tensor<T>> inputs,
                     const AttackConfig& cfg) {
    return iterative_sign_attack(spec, inputs, cfg);
}

// ---------------------------------------------------------------------------
// Dataset-global perturbation, optimised with Adam across all tasks.
// ---------------------------------------------------------------------------

struct StepRecord {
    int step = 0;
    int task = 0;
    int sample = 0;
    int quality = 0; // 0 = no compression this step
    double recon = 0.0;
    double perturb = 0.0;
    double total = 0.0;
};

inline void log_step(std::ostream* os, const StepRecord& r) {
    if (!os) return;
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "step=%d task=%d sample=%d q=%d recon=%.8g perturb=%.8g total=%.8g\n", r.step,
                  r.task, r.sample, r.quality, r.recon, r.perturb, r.total);
    (*os) << buf;
}

namespace detail {

// Shared per-step objective: protect -> optionally compress -> run the frozen
// model -> reconstruction + lambda * perturbation penalty.
template <typename T>
Tensor<T> protection_objective(Tape<T>& tape, const TaskData<T>& task, size_t sample_idx,
                               const Tensor<T>& protected_img, const AttackConfig& cfg,
                               int quality, StepRecord* rec) {
    const auto& sample = task.samples[sample_idx];
    const Tensor<T>& orig = sample.back();
    Tensor<T> fed = maybe_compress01(tape, protected_img, cfg, quality);
    std::vector<Tensor<T>> inputs(sample.begin(), sample.end());
    inputs.back() = fed;
    Tensor<T> out = task.spec.run(tape, inputs);
    Tensor<T> target = task.spec.make_target(out.shape());
    Tensor<T> recon = loss(tape, cfg.norm, out, target, cfg.loss_opts);
    Tensor<T> pert = loss(tape, cfg.norm, protected_img, orig, cfg.loss_opts);
    const double lam = task.lambda_override >= 0 ? task.lambda_override : cfg.lambda;
    Tensor<T> total = add(tape, recon, mul(tape, pert, static_cast<T>(lam)));
    if (rec) {
        rec->recon = static_cast<double>(recon.item());
        rec->perturb = static_cast<double>(pert.item());
        rec->total = static_cast<double>(total.item());
    }
    return total;
}

inline int sample_quality(const AttackConfig& cfg, Rng& rng) {
    switch (cfg.jpeg) {
        case JpegMode::off: return 0;
        case JpegMode::fixed: return cfg.jpeg_quality;
        case JpegMode::random: return static_cast<int>(rng.uniform_int(1, 99));
    }
    return 0;
}

} // namespace detail

template <typename T>
struct GlobalPert {
    Tensor<T> delta; // entries within [-eps, eps]
    std::map<std::string, std::string> meta;
};

template <typename T>
GlobalPert<T> optimize_global(std::span<const TaskData<T>> tasks, const AttackConfig& cfg,
                              std::ostream* log = nullptr) {
    cfg.validate();
    if (tasks.empty()) throw std::invalid_argument("optimize_global: no tasks");
    for (const auto& t : tasks) {
        if (t.samples.empty())
            throw std::invalid_argument("optimize_global: task '" + t.spec.name +
                                        "' has no samples");
        for (const auto& s : t.samples) detail::check_source_frozen<T>(s);
    }
    const Shape shape = tasks[0].samples[0].back().shape();
    const T eps = static_cast<T>(cfg.eps);

    // Uniform [0,1] noise rescaled into the perturbation budget.
    Rng init_rng = Rng::derive(cfg.seed, "global:init");
    Tensor<T> delta = Tensor<T>::uninit(shape);
    for (auto& v : delta.vec()) v = static_cast<T>((2.0 * init_rng.uniform() - 1.0) * cfg.eps);

    Rng rng = Rng::derive(cfg.seed, "global:steps");
    AdamState<T> adam;
    double first = 0.0, last = 0.0;
    for (int step = 0; step < cfg.steps; ++step) {
        const int k = static_cast<int>(rng.uniform_int(0, static_cast<int64_t>(tasks.size()) - 1));
        const auto& task = tasks[k];
        const int i =
            static_cast<int>(rng.uniform_int(0, static_cast<int64_t>(task.samples.size()) - 1));
        const int q = detail::sample_quality(cfg, rng);

        Tape<T> tape;
        delta.set_requires_grad(true);
        const Tensor<T>& orig = task.samples[i].back();
        if (orig.shape() != shape)
            throw std::invalid_argument("optimize_global: all images must share one shape");
        Tensor<T> xp = apply_protection(tape, orig, delta, eps);
        StepRecord rec;
        rec.step = step;
        rec.task = k;
        rec.sample = i;
        rec.quality = q;
        Tensor<T> total = detail::protection_objective(tape, task, i, xp, cfg, q, &rec);
        if (!std::isfinite(rec.total))
            throw std::runtime_error("non-finite loss at step " + std::to_string(step));
        if (step == 0) first = rec.total;
        last = rec.total;
        log_step(log, rec);
        tape.backward(total);

        Tensor<T> params[] = {delta};
        const std::vector<T>* grads[] = {tape.grad_ptr(delta)};
        adam_step<T>(adam, params, grads, static_cast<T>(cfg.alpha));
        delta = params[0];
        delta.set_requires_grad(false);
    }
    // Store the admissible perturbation, not the raw optimiser variable.
    for (auto& v : delta.vec()) v = std::min(eps, std::max(-eps, v));

    GlobalPert<T> out;
    out.delta = delta;
    out.meta["iterations"] = std::to_string(cfg.steps);
    out.meta["eps"] = std::to_string(cfg.eps);
    out.meta["first_loss"] = std::to_string(first);
    out.meta["final_loss"] = std::to_string(last);
    return out;
}

// ---------------------------------------------------------------------------
// Conditional generator training. The generator is conditioned on the image
// (3-channel input) or on image + global perturbation (6-channel input).
// ---------------------------------------------------------------------------

template <typename T>
struct GenTrainStats {
    double first_loss = 0.0;
    double final_loss = 0.0;
    int steps = 0;
};

template <typename T>
GenTrainStats<T> train_generator(ModelParams<T>& gen, std::span<const TaskData<T>> tasks,
                                 const Tensor<T>* global_delta, const AttackConfig& cfg,
                                 std::ostream* log = nullptr) {
    cfg.validate();
    if (tasks.empty()) throw std::invalid_argument("train_generator: no tasks");
    for (const auto& t : tasks)
        if (t.samples.empty())
            throw std::invalid_argument("train_generator: task '" + t.spec.name +
                                        "' has no samples");
    const UnetDesc desc = UnetDesc::parse(gen.arch);
    if (desc.in_channels == 6 && !global_delta)
        throw std::invalid_argument("train_generator: generator arch expects a global "
                                    "perturbation input");
    gen.set_trainable(true);
    const T eps = static_cast<T>(cfg.eps);

    Rng rng = Rng::derive(cfg.seed, "gen:steps");
    AdamState<T> adam;
    GenTrainStats<T> stats;
    std::vector<Tensor<T>> params;
    for (auto& p : gen.params) params.push_back(p.value);

    for (int step = 0; step < cfg.steps; ++step) {
        const int k = static_cast<int>(rng.uniform_int(0, static_cast<int64_t>(tasks.size()) - 1));
        const auto& task = tasks[k];
        const int i =
            static_cast<int>(rng.uniform_int(0, static_cast<int64_t>(task.samples.size()) - 1));
        const int q = detail::sample_quality(cfg, rng);
        for (const auto& s : task.samples) detail::check_source_frozen<T>(s);

        Tape<T> tape;
        const Tensor<T>& orig = task.samples[i].back();
        Tensor<T> di = generator_delta(tape, gen, orig, global_delta);
        Tensor<T> xp = apply_protection(tape, orig, di, eps);
        StepRecord rec;
        rec.step = step;
        rec.task = k;
        rec.sample = i;
        rec.quality = q;
        Tensor<T> total = detail::protection_objective(tape, task, i, xp, cfg, q, &rec);
        if (!std::isfinite(rec.total))
            throw std::runtime_error("non-finite loss at step " + std::to_string(step));
        if (step == 0) stats.first_loss = rec.total;
        stats.final_loss = rec.total;
        log_step(log, rec);
        tape.backward(total);

        std::vector<const std::vector<T>*> grads;
        for (auto& p : params) grads.push_back(tape.grad_ptr(p));
        adam_step<T>(adam, std::span<Tensor<T>>(params), grads, static_cast<T>(cfg.alpha));
        ++stats.steps;
    }
    return stats;
}

// Protect one image with a trained generator (single forward pass, no tape).
template <typename T>
Tensor<T> protect_with_generator(const ModelParams<T>& gen, const Tensor<T>& image,
                                 const Tensor<T>* global_delta, T eps) {
    Tape<T> tape;
    Tensor<T> img = image.requires_grad() ? image.clone() : image;
    Tensor<T> di = generator_delta(tape, gen, img, global_delta);
    return apply_protection(tape, img, di, eps);
}

} // namespace imgshield
