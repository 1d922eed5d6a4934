#pragma once

#include "imgshield/attacks.hpp"
#include "imgshield/jpeg.hpp"
#include "imgshield/models.hpp"
#include "imgshield/tensor.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <functional>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

namespace imgshield {

// ---------------------------------------------------------------------------
// Scalar metrics.
// ---------------------------------------------------------------------------

template <typename T>
double mse(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("mse", a, b);
    auto av = a.data();
    auto bv = b.data();
    double acc = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(a.numel());
}

// 10*log10(max^2 / mse); identical inputs report an infinite sentinel.
inline double psnr_from_mse(double mse_value, double max_val) {
    if (mse_value <= 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(max_val * max_val / mse_value);
}

template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double max_val) {
    return psnr_from_mse(mse(a, b), max_val);
}

// ---------------------------------------------------------------------------
// Text output helpers. Doubles are printed with %.10g so that equal numbers
// always serialise to equal bytes.
// ---------------------------------------------------------------------------

inline std::string fmt_g(double v) {
    if (v == std::numeric_limits<double>::infinity()) return "inf";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

inline void write_csv_row(std::ostream& os, std::span<const std::string> cells) {
    for (size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
    os << "\n";
}

inline void write_kv(std::ostream& os, std::span<const std::pair<std::string, std::string>> kv) {
    for (const auto& [k, v] : kv) os << k << " = " << v << "\n";
}

// ---------------------------------------------------------------------------
// Per-image evaluation records.
// ---------------------------------------------------------------------------

struct MetricsRecord {
    std::string method;
    int image = 0;
    double pert_mse = 0.0;
    double pert_psnr = 0.0;
    double out_mse = 0.0;
    double out_psnr = 0.0;
    std::string quality = "none"; // e.g. "none", "80", "30+80"
    uint64_t seed = 0;
};

inline const std::vector<std::string>& metrics_header() {
    static const std::vector<std::string> h = {"method",  "image",    "pert_mse", "pert_psnr",
                                               "out_mse", "out_psnr", "quality",  "seed"};
    return h;
}

inline void write_metrics_csv(std::ostream& os, std::span<const MetricsRecord> recs) {
    write_csv_row(os, metrics_header());
    for (const auto& r : recs) {
        const std::string row[] = {r.method,
                                   std::to_string(r.image),
                                   fmt_g(r.pert_mse),
                                   fmt_g(r.pert_psnr),
                                   fmt_g(r.out_mse),
                                   fmt_g(r.out_psnr),
                                   r.quality,
                                   std::to_string(r.seed)};
        write_csv_row(os, row);
    }
}

// Run disjoint per-index work on up to `jobs` threads; results must land in
// pre-sized slots so the outcome is independent of scheduling.
inline void parallel_for(int jobs, int64_t n, const std::function<void(int64_t)>& fn) {
    if (jobs <= 1 || n <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int64_t> next{0};
    std::vector<std::thread> pool;
    const int nt = static_cast<int>(std::min<int64_t>(jobs, n));
    pool.reserve(static_cast<size_t>(nt));
    for (int t = 0; t < nt; ++t)
        pool.emplace_back([&] {
            for (int64_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    for (auto& th : pool) th.join();
}

namespace detail {

inline std::string quality_label(std::span<const int> qualities) {
    if (qualities.empty()) return "none";
    std::string s;
    for (size_t i = 0; i < qualities.size(); ++i)
        s += (i ? "+" : "") + std::to_string(qualities[i]);
    return s;
}

// Apply the true-round reference compression cycle for each listed quality in
// order (evaluation never uses the differentiable surrogate).
template <typename T>
Tensor<T> compress_eval(const Tensor<T>& x01, std::span<const int> qualities) {
    Tensor<T> x = x01;
    for (int q : qualities) {
        Tensor<T> x255 = x.clone();
        for (auto& v : x255.vec()) v *= T(255);
        Tensor<T> y = jpeg_reference(x255, q);
        for (auto& v : y.vec()) v *= static_cast<T>(1.0 / 255.0);
        x = y;
    }
    return x;
}

} // namespace detail

// Output-vs-target MSE for one sample whose final input was replaced by
// `protected_img`, after optional true-round compression passes.
template <typename T>
double output_target_mse(const TaskData<T>& task, size_t sample_idx, const Tensor<T>& protected_img,
                         std::span<const int> qualities = {}) {
    Tensor<T> fed = detail::compress_eval(protected_img, qualities);
    if (fed.requires_grad()) fed = fed.clone();
    Tape<T> tape;
    std::vector<Tensor<T>> inputs(task.samples[sample_idx].begin(),
                                  task.samples[sample_idx].end());
    inputs.back() = fed;
    Tensor<T> out = task.spec.run(tape, inputs);
    return mse(out, task.spec.make_target(out.shape()));
}

// Full per-image records for one protection method over one task's corpus.
// `protected_imgs` aligns with `task.samples`.
template <typename T>
std::vector<MetricsRecord> corpus_metrics(const std::string& method, const TaskData<T>& task,
                                          std::span<const Tensor<T>> protected_imgs,
                                          std::span<const int> qualities, uint64_t seed,
                                          int jobs = 1) {
    if (protected_imgs.size() != task.samples.size())
        throw std::invalid_argument("corpus_metrics: " + std::to_string(protected_imgs.size()) +
                                    " protected images for " +
                                    std::to_string(task.samples.size()) + " samples");
    std::vector<MetricsRecord> recs(protected_imgs.size());
    const std::string qlabel = detail::quality_label(qualities);
    parallel_for(jobs, static_cast<int64_t>(protected_imgs.size()), [&](int64_t i) {
        const Tensor<T>& orig = task.samples[static_cast<size_t>(i)].back();
        MetricsRecord r;
        r.method = method;
        r.image = static_cast<int>(i);
        r.pert_mse = mse(protected_imgs[static_cast<size_t>(i)], orig);
        r.pert_psnr = psnr_from_mse(r.pert_mse, 1.0);
        r.out_mse = output_target_mse(task, static_cast<size_t>(i),
                                      protected_imgs[static_cast<size_t>(i)], qualities);
        r.out_psnr = psnr_from_mse(r.out_mse, 1.0);
        r.quality = qlabel;
        r.seed = seed;
        recs[static_cast<size_t>(i)] = std::move(r);
    });
    return recs;
}

// ---------------------------------------------------------------------------
// Distribution summary (per-image error list -> mean / variance / max).
// ---------------------------------------------------------------------------

struct DistSummary {
    double mean = 0.0;
    double variance = 0.0; // population variance
    double max = 0.0;
    double max_over_mean = 0.0;
};

inline DistSummary summarize(std::span<const double> xs) {
    DistSummary s;
    if (xs.empty()) return s;
    for (double x : xs) {
        s.mean += x;
        s.max = std::max(s.max, x);
    }
    s.mean /= static_cast<double>(xs.size());
    for (double x : xs) s.variance += (x - s.mean) * (x - s.mean);
    s.variance /= static_cast<double>(xs.size());
    s.max_over_mean = s.mean > 0.0 ? s.max / s.mean : 0.0;
    return s;
}

inline std::vector<double> out_mses(std::span<const MetricsRecord> recs) {
    std::vector<double> v;
    v.reserve(recs.size());
    for (const auto& r : recs) v.push_back(r.out_mse);
    return v;
}

inline std::vector<double> pert_mses(std::span<const MetricsRecord> recs) {
    std::vector<double> v;
    v.reserve(recs.size());
    for (const auto& r : recs) v.push_back(r.pert_mse);
    return v;
}

// ---------------------------------------------------------------------------
// Sweep curve: one row per operating point (lambda for learned methods,
// epsilon for the iterative baselines).
// ---------------------------------------------------------------------------

struct SweepPoint {
    std::string method;
    double knob = 0.0; // lambda or epsilon
    double mean_pert_mse = 0.0;
    double mean_out_mse = 0.0;
    double mean_out_psnr = 0.0;
};

template <typename T>
SweepPoint sweep_point(const std::string& method, double knob, const TaskData<T>& task,
                       std::span<const Tensor<T>> protected_imgs, uint64_t seed, int jobs = 1) {
    auto recs = corpus_metrics(method, task, protected_imgs, {}, seed, jobs);
    SweepPoint p;
    p.method = method;
    p.knob = knob;
    DistSummary pert = summarize(pert_mses(recs));
    DistSummary out = summarize(out_mses(recs));
    p.mean_pert_mse = pert.mean;
    p.mean_out_mse = out.mean;
    p.mean_out_psnr = psnr_from_mse(out.mean, 1.0);
    return p;
}

inline void write_sweep_csv(std::ostream& os, std::span<const SweepPoint> pts) {
    const std::string header[] = {"method", "knob", "mean_pert_mse", "mean_out_mse",
                                  "mean_out_psnr"};
    write_csv_row(os, header);
    for (const auto& p : pts) {
        const std::string row[] = {p.method, fmt_g(p.knob), fmt_g(p.mean_pert_mse),
                                   fmt_g(p.mean_out_mse), fmt_g(p.mean_out_psnr)};
        write_csv_row(os, row);
    }
}

// ---------------------------------------------------------------------------
// Robustness table: mean output-target error after true-round compression at
// each quality sequence (levels=2 rows look like "30+80").
// ---------------------------------------------------------------------------

struct RobustRow {
    std::string method;
    std::string quality; // "none", "80", "30+80", ...
    double mean_out_mse = 0.0;
    double mean_out_psnr = 0.0;
};

template <typename T>
RobustRow robustness_row(const std::string& method, const TaskData<T>& task,
                         std::span<const Tensor<T>> protected_imgs, std::span<const int> qualities,
                         uint64_t seed, int jobs = 1) {
    auto recs = corpus_metrics(method, task, protected_imgs, qualities, seed, jobs);
    RobustRow row;
    row.method = method;
    row.quality = detail::quality_label(qualities);
    row.mean_out_mse = summarize(out_mses(recs)).mean;
    row.mean_out_psnr = psnr_from_mse(row.mean_out_mse, 1.0);
    return row;
}

inline void write_robust_csv(std::ostream& os, std::span<const RobustRow> rows) {
    const std::string header[] = {"method", "quality", "mean_out_mse", "mean_out_psnr"};
    write_csv_row(os, header);
    for (const auto& r : rows) {
        const std::string row[] = {r.method, r.quality, fmt_g(r.mean_out_mse),
                                   fmt_g(r.mean_out_psnr)};
        write_csv_row(os, row);
    }
}

// ---------------------------------------------------------------------------
// Wall-clock benchmark: one warm-up call, then `repeats` timed calls.
// ---------------------------------------------------------------------------

struct BenchRow {
    std::string method;
    int repeats = 0;
    int inner = 1; // calls per timed run (amortises sub-millisecond work)
    double mean_ms = 0.0;   // wall clock per call
    double stddev_ms = 0.0; // over the timed runs
    double cpu_mean_ms = 0.0;   // process CPU time per call; immune to
    double cpu_stddev_ms = 0.0; // preemption on a shared machine
};

inline double cpu_now_ms() {
    timespec ts;
    clock_gettime(CLOCK_PROCESS_CPUTIME_ID, &ts);
    return static_cast<double>(ts.tv_sec) * 1e3 + static_cast<double>(ts.tv_nsec) * 1e-6;
}

// Mean per-call time over `repeats` timed runs, one untimed warm-up first.
// Each run times enough back-to-back calls (calibrated after warm-up) to make
// the measured quantum ~target_run_ms, well above clock resolution and
// scheduler noise.
template <typename F>
BenchRow bench(const std::string& method, F&& fn, int repeats = 10,
               double target_run_ms = 25.0) {
    if (repeats < 1) throw std::invalid_argument("bench: repeats must be >= 1");
    fn(); // warm-up, excluded
    const double c0 = cpu_now_ms();
    fn(); // calibration call sizes the timed quantum
    const double single = std::max(cpu_now_ms() - c0, 1e-3);
    const int inner =
        static_cast<int>(std::min(100000.0, std::max(1.0, std::ceil(target_run_ms / single))));

    std::vector<double> wall(static_cast<size_t>(repeats)), cpu(static_cast<size_t>(repeats));
    for (int r = 0; r < repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        const double p0 = cpu_now_ms();
        for (int i = 0; i < inner; ++i) fn();
        const double p1 = cpu_now_ms();
        const auto t1 = std::chrono::steady_clock::now();
        wall[static_cast<size_t>(r)] =
            std::chrono::duration<double, std::milli>(t1 - t0).count() / inner;
        cpu[static_cast<size_t>(r)] = (p1 - p0) / inner;
    }
    DistSummary ws = summarize(wall), cs = summarize(cpu);
    BenchRow row;
    row.method = method;
    row.repeats = repeats;
    row.inner = inner;
    row.mean_ms = ws.mean;
    row.stddev_ms = std::sqrt(ws.variance);
    row.cpu_mean_ms = cs.mean;
    row.cpu_stddev_ms = std::sqrt(cs.variance);
    return row;
}

inline void write_bench_csv(std::ostream& os, std::span<const BenchRow> rows) {
    const std::string header[] = {"method",    "repeats",     "inner",        "mean_ms",
                                  "stddev_ms", "cpu_mean_ms", "cpu_stddev_ms"};
    write_csv_row(os, header);
    for (const auto& r : rows) {
        const std::string row[] = {r.method,          std::to_string(r.repeats),
                                   std::to_string(r.inner), fmt_g(r.mean_ms),
                                   fmt_g(r.stddev_ms),      fmt_g(r.cpu_mean_ms),
                                   fmt_g(r.cpu_stddev_ms)};
        write_csv_row(os, row);
    }
}

} // namespace imgshield
