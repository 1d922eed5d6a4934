#pragma once

#include "imgshield/tensor.hpp"

#include <array>

namespace imgshield {

namespace detail {

inline int64_t ceil_div(int64_t a, int64_t b) {
    return a >= 0 ? (a + b - 1) / b : -((-a) / b);
}
inline int64_t floor_div(int64_t a, int64_t b) {
    return a >= 0 ? a / b : -((-a + b - 1) / b);
}

template <typename T>
void check_rank4(const char* op, const Tensor<T>& t) {
    if (t.rank() != 4)
        throw std::invalid_argument(std::string(op) + ": expected NCHW tensor, got " +
                                    shape_str(t.shape()));
}

} // namespace detail

// Cross-correlation with zero padding. x: [N,Ci,H,W], w: [Co,Ci,kh,kw].
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, int64_t stride,
                 int64_t pad) {
    detail::check_rank4("conv2d", x);
    detail::check_rank4("conv2d", w);
    if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride/padding");
    const int64_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != Ci)
        throw std::invalid_argument("conv2d: weight expects " + std::to_string(w.dim(1)) +
                                    " input channels, tensor has " + std::to_string(Ci));
    const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
    const int64_t Wo = (W + 2 * pad - kw) / stride + 1;
    if (H + 2 * pad < kh || W + 2 * pad < kw || Ho < 1 || Wo < 1)
        throw std::invalid_argument("conv2d: output extent < 1 for input " +
                                    shape_str(x.shape()));

    Tensor<T> out = Tensor<T>::zeros({N, Co, Ho, Wo});
    {
        const T* xp = x.data().data();
        const T* wp = w.data().data();
        T* op = out.data().data();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t co = 0; co < Co; ++co) {
                T* oplane = op + ((n * Co + co) * Ho) * Wo;
                for (int64_t ci = 0; ci < Ci; ++ci) {
                    const T* xplane = xp + ((n * Ci + ci) * H) * W;
                    const T* wk = wp + ((co * Ci + ci) * kh) * kw;
                    for (int64_t u = 0; u < kh; ++u)
                        for (int64_t v = 0; v < kw; ++v) {
                            const T wv = wk[u * kw + v];
                            if (wv == T(0)) continue;
                            const int64_t j0 =
                                std::max<int64_t>(0, detail::ceil_div(pad - v, stride));
                            const int64_t j1 = std::min<int64_t>(
                                Wo - 1, detail::floor_div(W - 1 + pad - v, stride));
                            for (int64_t i = 0; i < Ho; ++i) {
                                const int64_t ii = i * stride + u - pad;
                                if (ii < 0 || ii >= H) continue;
                                const T* xrow = xplane + ii * W;
                                T* orow = oplane + i * Wo;
                                for (int64_t j = j0; j <= j1; ++j)
                                    orow[j] += wv * xrow[j * stride + v - pad];
                            }
                        }
                }
            }
    }

    if (x.requires_grad() || w.requires_grad()) {
        const bool nx = x.requires_grad(), nw = w.requires_grad();
        tape.record(out, [=](Tape<T>& tp) {
            const T* wp = w.data().data();
            const T* xp = x.data().data();
            if (nx) {
                auto& gx = tp.grad_acc(x);
                const std::vector<T>& go = *tp.grad_ptr(out);
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t co = 0; co < Co; ++co) {
                        const T* gplane = go.data() + ((n * Co + co) * Ho) * Wo;
                        for (int64_t ci = 0; ci < Ci; ++ci) {
                            T* gxplane = gx.data() + ((n * Ci + ci) * H) * W;
                            const T* wk = wp + ((co * Ci + ci) * kh) * kw;
                            for (int64_t u = 0; u < kh; ++u)
                                for (int64_t v = 0; v < kw; ++v) {
                                    const T wv = wk[u * kw + v];
                                    if (wv == T(0)) continue;
                                    const int64_t j0 = std::max<int64_t>(
                                        0, detail::ceil_div(pad - v, stride));
                                    const int64_t j1 = std::min<int64_t>(
                                        Wo - 1, detail::floor_div(W - 1 + pad - v, stride));
                                    for (int64_t i = 0; i < Ho; ++i) {
                                        const int64_t ii = i * stride + u - pad;
                                        if (ii < 0 || ii >= H) continue;
                                        T* gxrow = gxplane + ii * W;
                                        const T* grow = gplane + i * Wo;
                                        for (int64_t j = j0; j <= j1; ++j)
                                            gxrow[j * stride + v - pad] += wv * grow[j];
                                    }
                                }
                        }
                    }
            }
            if (nw) {
                auto& gw = tp.grad_acc(w);
                const std::vector<T>& go = *tp.grad_ptr(out);
                for (int64_t co = 0; co < Co; ++co)
                    for (int64_t ci = 0; ci < Ci; ++ci)
                        for (int64_t u = 0; u < kh; ++u)
                            for (int64_t v = 0; v < kw; ++v) {
                                double acc = 0.0;
                                const int64_t j0 =
                                    std::max<int64_t>(0, detail::ceil_div(pad - v, stride));
                                const int64_t j1 = std::min<int64_t>(
                                    Wo - 1, detail::floor_div(W - 1 + pad - v, stride));
                                for (int64_t n = 0; n < N; ++n) {
                                    const T* gplane = go.data() + ((n * Co + co) * Ho) * Wo;
                                    const T* xplane = xp + ((n * Ci + ci) * H) * W;
                                    for (int64_t i = 0; i < Ho; ++i) {
                                        const int64_t ii = i * stride + u - pad;
                                        if (ii < 0 || ii >= H) continue;
                                        const T* xrow = xplane + ii * W;
                                        const T* grow = gplane + i * Wo;
                                        for (int64_t j = j0; j <= j1; ++j)
                                            acc += static_cast<double>(grow[j]) *
                                                   xrow[j * stride + v - pad];
                                    }
                                }
                                gw[((co * Ci + ci) * kh + u) * kw + v] += static_cast<T>(acc);
                            }
            }
        });
    }
    return out;
}

// Adjoint of conv2d over the same stride/padding. x: [N,Ci,H,W],
// w: [Ci,Co,kh,kw]; output extent (H-1)*stride - 2*pad + kh.
template <typename T>
Tensor<T> conv_transpose2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w,
                           int64_t stride, int64_t pad) {
    detail::check_rank4("conv_transpose2d", x);
    detail::check_rank4("conv_transpose2d", w);
    if (stride < 1 || pad < 0)
        throw std::invalid_argument("conv_transpose2d: bad stride/padding");
    const int64_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(0) != Ci)
        throw std::invalid_argument("conv_transpose2d: weight expects " +
                                    std::to_string(w.dim(0)) + " input channels, tensor has " +
                                    std::to_string(Ci));
    const int64_t Ho = (H - 1) * stride - 2 * pad + kh;
    const int64_t Wo = (W - 1) * stride - 2 * pad + kw;
    if (Ho < 1 || Wo < 1)
        throw std::invalid_argument("conv_transpose2d: output extent < 1 for input " +
                                    shape_str(x.shape()));

    Tensor<T> out = Tensor<T>::zeros({N, Co, Ho, Wo});
    {
        const T* xp = x.data().data();
        const T* wp = w.data().data();
        T* op = out.data().data();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t ci = 0; ci < Ci; ++ci) {
                const T* xplane = xp + ((n * Ci + ci) * H) * W;
                for (int64_t co = 0; co < Co; ++co) {
                    T* oplane = op + ((n * Co + co) * Ho) * Wo;
                    const T* wk = wp + ((ci * Co + co) * kh) * kw;
                    for (int64_t u = 0; u < kh; ++u)
                        for (int64_t v = 0; v < kw; ++v) {
                            const T wv = wk[u * kw + v];
                            if (wv == T(0)) continue;
                            const int64_t j0 =
                                std::max<int64_t>(0, detail::ceil_div(pad - v, stride));
                            const int64_t j1 = std::min<int64_t>(
                                W - 1, detail::floor_div(Wo - 1 + pad - v, stride));
                            for (int64_t i = 0; i < H; ++i) {
                                const int64_t oi = i * stride + u - pad;
                                if (oi < 0 || oi >= Ho) continue;
                                const T* xrow = xplane + i * W;
                                T* orow = oplane + oi * Wo;
                                for (int64_t j = j0; j <= j1; ++j)
                                    orow[j * stride + v - pad] += wv * xrow[j];
                            }
                        }
                }
            }
    }

    if (x.requires_grad() || w.requires_grad()) {
        const bool nx = x.requires_grad(), nw = w.requires_grad();
        tape.record(out, [=](Tape<T>& tp) {
            const T* wp = w.data().data();
            const T* xp = x.data().data();
            const std::vector<T>& go = *tp.grad_ptr(out);
            if (nx) {
                auto& gx = tp.grad_acc(x);
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t ci = 0; ci < Ci; ++ci) {
                        T* gxplane = gx.data() + ((n * Ci + ci) * H) * W;
                        for (int64_t co = 0; co < Co; ++co) {
                            const T* gplane = go.data() + ((n * Co + co) * Ho) * Wo;
                            const T* wk = wp + ((ci * Co + co) * kh) * kw;
                            for (int64_t u = 0; u < kh; ++u)
                                for (int64_t v = 0; v < kw; ++v) {
                                    const T wv = wk[u * kw + v];
                                    if (wv == T(0)) continue;
                                    const int64_t j0 = std::max<int64_t>(
                                        0, detail::ceil_div(pad - v, stride));
                                    const int64_t j1 = std::min<int64_t>(
                                        W - 1, detail::floor_div(Wo - 1 + pad - v, stride));
                                    for (int64_t i = 0; i < H; ++i) {
                                        const int64_t oi = i * stride + u - pad;
                                        if (oi < 0 || oi >= Ho) continue;
                                        T* gxrow = gxplane + i * W;
                                        const T* grow = gplane + oi * Wo;
                                        for (int64_t j = j0; j <= j1; ++j)
                                            gxrow[j] += wv * grow[j * stride + v - pad];
                                    }
                                }
                        }
                    }
            }
            if (nw) {
                auto& gw = tp.grad_acc(w);
                for (int64_t ci = 0; ci < Ci; ++ci)
                    for (int64_t co = 0; co < Co; ++co)
                        for (int64_t u = 0; u < kh; ++u)
                            for (int64_t v = 0; v < kw; ++v) {
                                double acc = 0.0;
                                const int64_t j0 =
                                    std::max<int64_t>(0, detail::ceil_div(pad - v, stride));
                                const int64_t j1 = std::min<int64_t>(
                                    W - 1, detail::floor_div(Wo - 1 + pad - v, stride));
                                for (int64_t n = 0; n < N; ++n) {
                                    const T* xplane = xp + ((n * Ci + ci) * H) * W;
                                    const T* gplane = go.data() + ((n * Co + co) * Ho) * Wo;
                                    for (int64_t i = 0; i < H; ++i) {
                                        const int64_t oi = i * stride + u - pad;
                                        if (oi < 0 || oi >= Ho) continue;
                                        const T* xrow = xplane + i * W;
                                        const T* grow = gplane + oi * Wo;
                                        for (int64_t j = j0; j <= j1; ++j)
                                            acc += static_cast<double>(xrow[j]) *
                                                   grow[j * stride + v - pad];
                                    }
                                }
                                gw[((ci * Co + co) * kh + u) * kw + v] += static_cast<T>(acc);
                            }
            }
        });
    }
    return out;
}

// Per-channel bias broadcast over N, H, W.
template <typename T>
Tensor<T> add_channel_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& b) {
    detail::check_rank4("add_channel_bias", x);
    if (b.rank() != 1 || b.dim(0) != x.dim(1))
        throw std::invalid_argument("add_channel_bias: bias shape " + shape_str(b.shape()) +
                                    " for input " + shape_str(x.shape()));
    const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor<T> out = Tensor<T>::uninit(x.shape());
    {
        const T* xp = x.data().data();
        const T* bp = b.data().data();
        T* op = out.data().data();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                const T bv = bp[c];
                const T* xr = xp + (n * C + c) * HW;
                T* orow = op + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) orow[i] = xr[i] + bv;
            }
    }
    if (x.requires_grad() || b.requires_grad()) {
        const bool nx = x.requires_grad(), nb = b.requires_grad();
        tape.record(out, [=](Tape<T>& tp) {
            const std::vector<T>& go = *tp.grad_ptr(out);
            if (nx) {
                auto& gx = tp.grad_acc(x);
                for (size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
            }
            if (nb) {
                auto& gb = tp.grad_acc(b);
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < C; ++c) {
                        double acc = 0.0;
                        const T* grow = go.data() + (n * C + c) * HW;
                        for (int64_t i = 0; i < HW; ++i) acc += grow[i];
                        gb[c] += static_cast<T>(acc);
                    }
            }
        });
    }
    return out;
}

// Channel concatenation of two NCHW tensors with equal N, H, W.
template <typename T>
Tensor<T> concat_channels(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_rank4("concat_channels", a);
    detail::check_rank4("concat_channels", b);
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw std::invalid_argument("concat_channels: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    const int64_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
    Tensor<T> out = Tensor<T>::uninit({N, Ca + Cb, a.dim(2), a.dim(3)});
    {
        const T* ap = a.data().data();
        const T* bp = b.data().data();
        T* op = out.data().data();
        for (int64_t n = 0; n < N; ++n) {
            std::copy(ap + n * Ca * HW, ap + (n + 1) * Ca * HW, op + n * (Ca + Cb) * HW);
            std::copy(bp + n * Cb * HW, bp + (n + 1) * Cb * HW,
                      op + (n * (Ca + Cb) + Ca) * HW);
        }
    }
    if (a.requires_grad() || b.requires_grad()) {
        const bool na = a.requires_grad(), nb = b.requires_grad();
        tape.record(out, [=](Tape<T>& tp) {
            const std::vector<T>& go = *tp.grad_ptr(out);
            if (na) {
                auto& ga = tp.grad_acc(a);
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t i = 0; i < Ca * HW; ++i)
                        ga[n * Ca * HW + i] += go[n * (Ca + Cb) * HW + i];
            }
            if (nb) {
                auto& gb = tp.grad_acc(b);
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t i = 0; i < Cb * HW; ++i)
                        gb[n * Cb * HW + i] += go[(n * (Ca + Cb) + Ca) * HW + i];
            }
        });
    }
    return out;
}

// View of channels [c0, c1) as a new tensor.
template <typename T>
Tensor<T> slice_channels(Tape<T>& tape, const Tensor<T>& x, int64_t c0, int64_t c1) {
    detail::check_rank4("slice_channels", x);
    const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (c0 < 0 || c1 > C || c0 >= c1)
        throw std::invalid_argument("slice_channels: bad range [" + std::to_string(c0) + "," +
                                    std::to_string(c1) + ") for " + shape_str(x.shape()));
    const int64_t Cs = c1 - c0;
    Tensor<T> out = Tensor<T>::uninit({N, Cs, x.dim(2), x.dim(3)});
    {
        const T* xp = x.data().data();
        T* op = out.data().data();
        for (int64_t n = 0; n < N; ++n)
            std::copy(xp + (n * C + c0) * HW, xp + (n * C + c1) * HW, op + n * Cs * HW);
    }
    if (x.requires_grad()) {
        tape.record(out, [=](Tape<T>& tp) {
            auto& gx = tp.grad_acc(x);
            const std::vector<T>& go = *tp.grad_ptr(out);
            for (int64_t n = 0; n < N; ++n)
                for (int64_t i = 0; i < Cs * HW; ++i)
                    gx[(n * C + c0) * HW + i] += go[n * Cs * HW + i];
        });
    }
    return out;
}

// 2x2 average pooling with stride 2; extents must be even.
template <typename T>
Tensor<T> avgpool2(Tape<T>& tape, const Tensor<T>& x) {
    detail::check_rank4("avgpool2", x);
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % 2 || W % 2)
        throw std::invalid_argument("avgpool2: extents must be even, got " +
                                    shape_str(x.shape()));
    Tensor<T> out = Tensor<T>::uninit({N, C, H / 2, W / 2});
    {
        const T* xp = x.data().data();
        T* op = out.data().data();
        for (int64_t nc = 0; nc < N * C; ++nc) {
            const T* plane = xp + nc * H * W;
            T* oplane = op + nc * (H / 2) * (W / 2);
            for (int64_t i = 0; i < H / 2; ++i)
                for (int64_t j = 0; j < W / 2; ++j) {
                    const T* r0 = plane + (2 * i) * W + 2 * j;
                    const T* r1 = r0 + W;
                    oplane[i * (W / 2) + j] = (r0[0] + r0[1] + r1[0] + r1[1]) * T(0.25);
                }
        }
    }
    if (x.requires_grad()) {
        tape.record(out, [=](Tape<T>& tp) {
            auto& gx = tp.grad_acc(x);
            const std::vector<T>& go = *tp.grad_ptr(out);
            for (int64_t nc = 0; nc < N * C; ++nc) {
                T* gplane = gx.data() + nc * H * W;
                const T* gop = go.data() + nc * (H / 2) * (W / 2);
                for (int64_t i = 0; i < H / 2; ++i)
                    for (int64_t j = 0; j < W / 2; ++j) {
                        const T g = gop[i * (W / 2) + j] * T(0.25);
                        T* r0 = gplane + (2 * i) * W + 2 * j;
                        T* r1 = r0 + W;
                        r0[0] += g;
                        r0[1] += g;
                        r1[0] += g;
                        r1[1] += g;
                    }
            }
        });
    }
    return out;
}

// Nearest-neighbour 2x upsampling.
template <typename T>
Tensor<T> upsample_nearest2(Tape<T>& tape, const Tensor<T>& x) {
    detail::check_rank4("upsample_nearest2", x);
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<T> out = Tensor<T>::uninit({N, C, 2 * H, 2 * W});
    {
        const T* xp = x.data().data();
        T* op = out.data().data();
        for (int64_t nc = 0; nc < N * C; ++nc) {
            const T* plane = xp + nc * H * W;
            T* oplane = op + nc * 4 * H * W;
            for (int64_t i = 0; i < H; ++i)
                for (int64_t j = 0; j < W; ++j) {
                    const T v = plane[i * W + j];
                    T* o = oplane + (2 * i) * (2 * W) + 2 * j;
                    o[0] = v;
                    o[1] = v;
                    o[2 * W] = v;
                    o[2 * W + 1] = v;
                }
        }
    }
    if (x.requires_grad()) {
        tape.record(out, [=](Tape<T>& tp) {
            auto& gx = tp.grad_acc(x);
            const std::vector<T>& go = *tp.grad_ptr(out);
            for (int64_t nc = 0; nc < N * C; ++nc) {
                T* gplane = gx.data() + nc * H * W;
                const T* gop = go.data() + nc * 4 * H * W;
                for (int64_t i = 0; i < H; ++i)
                    for (int64_t j = 0; j < W; ++j) {
                        const T* o = gop + (2 * i) * (2 * W) + 2 * j;
                        gplane[i * W + j] += o[0] + o[1] + o[2 * W] + o[2 * W + 1];
                    }
            }
        });
    }
    return out;
}

// Rearrangement over all dims past the batch dim: out[n, k] = x[n, map[k]].
// Duplicated source indices are allowed (the adjoint scatter-adds), which
// covers replication padding, block split/merge and cropping.
template <typename T>
Tensor<T> gather_tail(Tape<T>& tape, const Tensor<T>& x, const std::vector<int64_t>& map,
                      Shape out_tail) {
    if (x.rank() < 2) throw std::invalid_argument("gather_tail: need a batch dim");
    const int64_t N = x.dim(0);
    const int64_t F = x.numel() / N;
    const int64_t Fo = shape_numel(out_tail);
    if (static_cast<int64_t>(map.size()) != Fo)
        throw std::invalid_argument("gather_tail: map size does not match output tail");
    Shape os;
    os.push_back(N);
    for (int64_t d : out_tail) os.push_back(d);
    Tensor<T> out = Tensor<T>::uninit(os);
    {
        const T* xp = x.data().data();
        T* op = out.data().data();
        for (int64_t n = 0; n < N; ++n) {
            const T* src = xp + n * F;
            T* dst = op + n * Fo;
            for (int64_t k = 0; k < Fo; ++k) dst[k] = src[map[k]];
        }
    }
    if (x.requires_grad()) {
        tape.record(out, [x, out, map, N, F, Fo](Tape<T>& tp) {
            auto& gx = tp.grad_acc(x);
            const std::vector<T>& go = *tp.grad_ptr(out);
            for (int64_t n = 0; n < N; ++n) {
                T* dst = gx.data() + n * F;
                const T* src = go.data() + n * Fo;
                for (int64_t k = 0; k < Fo; ++k) dst[map[k]] += src[k];
            }
        });
    }
    return out;
}

// Per-pixel 3x3 channel mix: out_c = sum_d M[c][d] * x_d + bias_c. The matrix
// is a fixed constant (colourspace conversion), not a trainable parameter.
template <typename T>
Tensor<T> affine_color3(Tape<T>& tape, const Tensor<T>& x, const std::array<double, 9>& M,
                        const std::array<double, 3>& bias) {
    detail::check_rank4("affine_color3", x);
    if (x.dim(1) != 3)
        throw std::invalid_argument("affine_color3: expected 3 channels, got " +
                                    shape_str(x.shape()));
    const int64_t N = x.dim(0), HW = x.dim(2) * x.dim(3);
    Tensor<T> out = Tensor<T>::uninit(x.shape());
    {
        const T* xp = x.data().data();
        T* op = out.data().data();
        for (int64_t n = 0; n < N; ++n) {
            const T* p0 = xp + (n * 3 + 0) * HW;
            const T* p1 = xp + (n * 3 + 1) * HW;
            const T* p2 = xp + (n * 3 + 2) * HW;
            for (int c = 0; c < 3; ++c) {
                T* o = op + (n * 3 + c) * HW;
                const T m0 = static_cast<T>(M[c * 3 + 0]);
                const T m1 = static_cast<T>(M[c * 3 + 1]);
                const T m2 = static_cast<T>(M[c * 3 + 2]);
                const T bc = static_cast<T>(bias[c]);
                for (int64_t i = 0; i < HW; ++i) o[i] = m0 * p0[i] + m1 * p1[i] + m2 * p2[i] + bc;
            }
        }
    }
    if (x.requires_grad()) {
        tape.record(out, [x, out, M, N, HW](Tape<T>& tp) {
            auto& gx = tp.grad_acc(x);
            const std::vector<T>& go = *tp.grad_ptr(out);
            for (int64_t n = 0; n < N; ++n)
                for (int d = 0; d < 3; ++d) {
                    T* g = gx.data() + (n * 3 + d) * HW;
                    const T* q0 = go.data() + (n * 3 + 0) * HW;
                    const T* q1 = go.data() + (n * 3 + 1) * HW;
                    const T* q2 = go.data() + (n * 3 + 2) * HW;
                    const T m0 = static_cast<T>(M[0 * 3 + d]);
                    const T m1 = static_cast<T>(M[1 * 3 + d]);
                    const T m2 = static_cast<T>(M[2 * 3 + d]);
                    for (int64_t i = 0; i < HW; ++i)
                        g[i] += m0 * q0[i] + m1 * q1[i] + m2 * q2[i];
                }
        });
    }
    return out;
}

} // namespace imgshield
