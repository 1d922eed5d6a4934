#pragma once

#include "imgshield/nn.hpp"
#include "imgshield/tensor.hpp"

#include <array>

namespace imgshield {

// Base luminance/chrominance quantisation tables (JPEG Annex K), row-major.
const std::array<int, 64>& base_luma_table();
const std::array<int, 64>& base_chroma_table();

// libjpeg-style quality scaling: scale = 5000/q below 50 else 200 - 2q,
// entry = clamp(floor((base * scale + 50) / 100), 1, 255). Quality in [1, 99].
std::array<int, 64> scaled_quant_table(const std::array<int, 64>& base, int quality);

struct QuantTables {
    std::array<double, 64> luma;
    std::array<double, 64> chroma;
};

QuantTables quality_to_tables(int quality);

// Orthonormal 8x8 DCT-II matrix: D[u][x] = a(u) cos((2x+1) u pi / 16),
// a(0) = sqrt(1/8), a(u>0) = 1/2.
const std::array<double, 64>& dct8_matrix();

namespace detail {

// dst = A * src * B^T for 8x8 row-major blocks.
template <typename T>
void sandwich8(const T* src, T* dst, const double* A, const double* B) {
    double tmp[64];
    for (int u = 0; u < 8; ++u)
        for (int y = 0; y < 8; ++y) {
            double acc = 0.0;
            for (int x = 0; x < 8; ++x) acc += A[u * 8 + x] * static_cast<double>(src[x * 8 + y]);
            tmp[u * 8 + y] = acc;
        }
    for (int u = 0; u < 8; ++u)
        for (int v = 0; v < 8; ++v) {
            double acc = 0.0;
            for (int y = 0; y < 8; ++y) acc += tmp[u * 8 + y] * B[v * 8 + y];
            dst[u * 8 + v] = static_cast<T>(acc);
        }
}

template <typename T>
void check_blocks(const char* op, const Tensor<T>& x) {
    if (x.rank() < 2 || x.dim(x.rank() - 1) != 8 || x.dim(x.rank() - 2) != 8)
        throw std::invalid_argument(std::string(op) + ": expected [..,8,8] blocks, got " +
                                    shape_str(x.shape()));
}

inline std::array<double, 64> transpose8(const std::array<double, 64>& m) {
    std::array<double, 64> t{};
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) t[i * 8 + j] = m[j * 8 + i];
    return t;
}

} // namespace detail

// Forward DCT over trailing 8x8 blocks: C = D B D^T. Implemented as two
// matrix multiplications; the adjoint is D^T G D.
template <typename T>
Tensor<T> dct8(Tape<T>& tape, const Tensor<T>& x) {
    detail::check_blocks("dct8", x);
    const auto& D = dct8_matrix();
    static const std::array<double, 64> Dt = detail::transpose8(dct8_matrix());
    const int64_t nb = x.numel() / 64;
    Tensor<T> out = Tensor<T>::uninit(x.shape());
    for (int64_t b = 0; b < nb; ++b)
        detail::sandwich8(x.data().data() + b * 64, out.data().data() + b * 64, D.data(),
                          D.data());
    if (x.requires_grad()) {
        tape.record(out, [x, out, nb](Tape<T>& tp) {
            auto& gx = tp.grad_acc(x);
            const std::vector<T>& go = *tp.grad_ptr(out);
            std::array<T, 64> blk;
            for (int64_t b = 0; b < nb; ++b) {
                detail::sandwich8(go.data() + b * 64, blk.data(), Dt.data(), Dt.data());
                for (int i = 0; i < 64; ++i) gx[b * 64 + i] += blk[i];
            }
        });
    }
    return out;
}

// Inverse DCT over trailing 8x8 blocks: B = D^T C D.
template <typename T>
Tensor<T> idct8(Tape<T>& tape, const Tensor<T>& x) {
    detail::check_blocks("idct8", x);
    static const std::array<double, 64> Dt = detail::transpose8(dct8_matrix());
    const int64_t nb = x.numel() / 64;
    Tensor<T> out = Tensor<T>::uninit(x.shape());
    for (int64_t b = 0; b < nb; ++b)
        detail::sandwich8(x.data().data() + b * 64, out.data().data() + b * 64, Dt.data(),
                          Dt.data());
    if (x.requires_grad()) {
        tape.record(out, [x, out, nb](Tape<T>& tp) {
            auto& gx = tp.grad_acc(x);
            const std::vector<T>& go = *tp.grad_ptr(out);
            std::array<T, 64> blk;
            const auto& D2 = dct8_matrix();
            for (int64_t b = 0; b < nb; ++b) {
                detail::sandwich8(go.data() + b * 64, blk.data(), D2.data(), D2.data());
                for (int i = 0; i < 64; ++i) gx[b * 64 + i] += blk[i];
            }
        });
    }
    return out;
}

// Divide (quantise) or multiply (dequantise) trailing 8x8 blocks by a
// positive per-coefficient table. Float math throughout.
template <typename T>
Tensor<T> block_scale(Tape<T>& tape, const Tensor<T>& x, const std::array<double, 64>& table,
                      bool divide) {
    detail::check_blocks("block_scale", x);
    for (double v : table)
        if (!(v > 0.0)) throw std::invalid_argument("block_scale: table entries must be > 0");
    std::array<T, 64> f;
    for (int i = 0; i < 64; ++i)
        f[i] = divide ? static_cast<T>(1.0 / table[i]) : static_cast<T>(table[i]);
    // Division is applied as an exact division to stay faithful to the
    // reference codec; the cached reciprocal is only used for the adjoint.
    const int64_t n = x.numel();
    Tensor<T> out = Tensor<T>::uninit(x.shape());
    {
        auto xv = x.data();
        auto ov = out.data();
        if (divide) {
            std::array<T, 64> tb;
            for (int i = 0; i < 64; ++i) tb[i] = static_cast<T>(table[i]);
            for (int64_t i = 0; i < n; ++i) ov[i] = xv[i] / tb[i % 64];
        } else {
            for (int64_t i = 0; i < n; ++i) ov[i] = xv[i] * f[i % 64];
        }
    }
    if (x.requires_grad()) {
        tape.record(out, [x, out, f, n](Tape<T>& tp) {
            auto& gx = tp.grad_acc(x);
            const std::vector<T>& go = *tp.grad_ptr(out);
            for (int64_t i = 0; i < n; ++i) gx[i] += go[i] * f[i % 64];
        });
    }
    return out;
}

// Full-range BT.601 colour transforms on [0,255]-scaled tensors. The inverse
// matrix is the exact algebraic inverse of the forward one so that an
// unquantised encode/decode cycle is lossless to floating-point precision.
namespace detail {
constexpr double kKr = 0.299, kKg = 0.587, kKb = 0.114;
}

template <typename T>
Tensor<T> rgb_to_ycbcr(Tape<T>& tape, const Tensor<T>& rgb) {
    using namespace detail;
    static const std::array<double, 9> M = {
        kKr, kKg, kKb,                                                   // Y
        -0.5 * kKr / (1 - kKb), -0.5 * kKg / (1 - kKb), 0.5,             // Cb
        0.5, -0.5 * kKg / (1 - kKr), -0.5 * kKb / (1 - kKr),             // Cr
    };
    static const std::array<double, 3> b = {0.0, 128.0, 128.0};
    return affine_color3(tape, rgb, M, b);
}

template <typename T>
Tensor<T> ycbcr_to_rgb(Tape<T>& tape, const Tensor<T>& ycc) {
    using namespace detail;
    const double crr = 2 * (1 - kKr);
    const double cbb = 2 * (1 - kKb);
    const double cgb = 2 * kKb * (1 - kKb) / kKg;
    const double cgr = 2 * kKr * (1 - kKr) / kKg;
    static const std::array<double, 9> M = {
        1.0, 0.0,  crr,  // R
        1.0, -cgb, -cgr, // G
        1.0, cbb,  0.0,  // B
    };
    static const std::array<double, 3> b = {-128.0 * crr, 128.0 * (cgb + cgr), -128.0 * cbb};
    return affine_color3(tape, ycc, M, b);
}

// --------------------------------------------------------------------------
// Index maps for padding, block split/merge and cropping (used via gather).
// --------------------------------------------------------------------------

inline std::vector<int64_t> pad_replicate_map(int64_t c, int64_t h, int64_t w, int64_t hp,
                                              int64_t wp) {
    std::vector<int64_t> map(static_cast<size_t>(c * hp * wp));
    size_t k = 0;
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < hp; ++i)
            for (int64_t j = 0; j < wp; ++j)
                map[k++] = ch * h * w + std::min(i, h - 1) * w + std::min(j, w - 1);
    return map;
}

inline std::vector<int64_t> crop_map(int64_t c, int64_t h, int64_t w, int64_t hc, int64_t wc) {
    std::vector<int64_t> map(static_cast<size_t>(c * hc * wc));
    size_t k = 0;
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < hc; ++i)
            for (int64_t j = 0; j < wc; ++j) map[k++] = ch * h * w + i * w + j;
    return map;
}

// Plane [1, hp, wp] (multiples of 8) -> blocks [nb, 8, 8] in row-major block
// order.
inline std::vector<int64_t> block_split_map(int64_t hp, int64_t wp) {
    const int64_t bh = hp / 8, bw = wp / 8;
    std::vector<int64_t> map(static_cast<size_t>(hp * wp));
    size_t k = 0;
    for (int64_t by = 0; by < bh; ++by)
        for (int64_t bx = 0; bx < bw; ++bx)
            for (int64_t u = 0; u < 8; ++u)
                for (int64_t v = 0; v < 8; ++v) map[k++] = (by * 8 + u) * wp + bx * 8 + v;
    return map;
}

// Blocks [nb, 8, 8] -> plane [1, h, w], dropping padding rows/columns.
inline std::vector<int64_t> block_merge_map(int64_t h, int64_t w, int64_t wp) {
    const int64_t bw = wp / 8;
    std::vector<int64_t> map(static_cast<size_t>(h * w));
    size_t k = 0;
    for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j)
            map[k++] = (((i / 8) * bw + j / 8) * 8 + i % 8) * 8 + j % 8;
    return map;
}

// --------------------------------------------------------------------------
// Differentiable encode/decode cycle.
// --------------------------------------------------------------------------

struct JpegConfig {
    int quality = 80;
    Round round = Round::sin;
    bool chroma_420 = true; // 4:2:0 subsampling; false = 4:4:4
};

namespace detail {

template <typename T>
Tensor<T> plane_cycle(Tape<T>& tape, Tensor<T> plane, const std::array<double, 64>& table,
                      Round mode) {
    const int64_t h = plane.dim(2), w = plane.dim(3);
    const int64_t hp = (h + 7) / 8 * 8, wp = (w + 7) / 8 * 8;
    if (hp != h || wp != w)
        plane = gather_tail(tape, plane, pad_replicate_map(1, h, w, hp, wp), {1, hp, wp});
    Tensor<T> centered = add(tape, plane, T(-128));
    Tensor<T> blocks =
        gather_tail(tape, centered, block_split_map(hp, wp), {hp * wp / 64, 8, 8});
    Tensor<T> coeff = dct8(tape, blocks);
    Tensor<T> q = block_scale(tape, coeff, table, /*divide=*/true);
    Tensor<T> r = round_approx(tape, q, mode);
    Tensor<T> dq = block_scale(tape, r, table, /*divide=*/false);
    Tensor<T> rec = idct8(tape, dq);
    Tensor<T> merged = gather_tail(tape, rec, block_merge_map(h, w, wp), {1, h, w});
    return add(tape, merged, T(128));
}

} // namespace detail

// Encode/decode an RGB image scaled to [0, 255]. Entropy coding is not
// modelled: it is lossless and has no effect on pixel values. Every stage is
// differentiable (rounding via the configured surrogate), so gradients flow
// from the output back to the input image.
template <typename T>
Tensor<T> jpeg_pipeline(Tape<T>& tape, const Tensor<T>& rgb255, const JpegConfig& cfg) {
    detail::check_rank4("jpeg_pipeline", rgb255);
    if (rgb255.dim(1) != 3)
        throw std::invalid_argument("jpeg_pipeline: expected 3 channels, got " +
                                    shape_str(rgb255.shape()));
    const QuantTables qt = quality_to_tables(cfg.quality);
    const int64_t H = rgb255.dim(2), W = rgb255.dim(3);

    Tensor<T> img = rgb255;
    int64_t h = H, w = W;
    if (cfg.chroma_420 && (H % 2 || W % 2)) {
        h = (H + 1) / 2 * 2;
        w = (W + 1) / 2 * 2;
        img = gather_tail(tape, img, pad_replicate_map(3, H, W, h, w), {3, h, w});
    }

    Tensor<T> ycc = rgb_to_ycbcr(tape, img);
    Tensor<T> y = slice_channels(tape, ycc, 0, 1);
    Tensor<T> cb = slice_channels(tape, ycc, 1, 2);
    Tensor<T> cr = slice_channels(tape, ycc, 2, 3);

    y = detail::plane_cycle(tape, y, qt.luma, cfg.round);
    if (cfg.chroma_420) {
        cb = avgpool2(tape, cb);
        cr = avgpool2(tape, cr);
        cb = detail::plane_cycle(tape, cb, qt.chroma, cfg.round);
        cr = detail::plane_cycle(tape, cr, qt.chroma, cfg.round);
        cb = upsample_nearest2(tape, cb);
        cr = upsample_nearest2(tape, cr);
    } else {
        cb = detail::plane_cycle(tape, cb, qt.chroma, cfg.round);
        cr = detail::plane_cycle(tape, cr, qt.chroma, cfg.round);
    }

    Tensor<T> out = concat_channels(tape, concat_channels(tape, y, cb), cr);
    out = ycbcr_to_rgb(tape, out);
    out = clamp(tape, out, T(0), T(255));
    if (h != H || w != W) out = gather_tail(tape, out, crop_map(3, h, w, H, W), {3, H, W});
    return out;
}

// Reference encode/decode with true rounding and no gradient tracking.
template <typename T>
Tensor<T> jpeg_reference(const Tensor<T>& rgb255, int quality, bool chroma_420 = true) {
    Tape<T> tape;
    JpegConfig cfg;
    cfg.quality = quality;
    cfg.round = Round::true_round;
    cfg.chroma_420 = chroma_420;
    // Detach so nothing is recorded; handles share state, hence the clone.
    Tensor<T> in = rgb255.requires_grad() ? rgb255.clone() : rgb255;
    return jpeg_pipeline(tape, in, cfg);
}

} // namespace imgshield
