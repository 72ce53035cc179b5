#pragma once

#include <optional>

#include "fwi/tensor.hpp"

namespace fwi {

namespace detail {

// Gather canvas[C, ch, cw] into cols[C*kh*kw, ih*iw]: column (oi,oj) holds the
// receptive-field patch at canvas position (oi*sh + u - ph, oj*sw + v - pw),
// zero where it falls outside. The same routine serves conv2d forward and the
// backward-input pass of conv_transpose2d.
template <typename T>
void im2col(const T* canvas, size_t C, size_t ch, size_t cw,
            size_t kh, size_t kw, size_t sh, size_t sw, size_t ph, size_t pw,
            size_t ih, size_t iw, T* cols) {
    for (size_t c = 0; c < C; ++c)
        for (size_t u = 0; u < kh; ++u)
            for (size_t v = 0; v < kw; ++v) {
                T* row = cols + ((c * kh + u) * kw + v) * (ih * iw);
                for (size_t oi = 0; oi < ih; ++oi) {
                    long ii = long(oi * sh + u) - long(ph);
                    if (ii < 0 || ii >= long(ch)) {
                        std::fill(row + oi * iw, row + (oi + 1) * iw, T(0));
                        continue;
                    }
                    const T* src = canvas + (c * ch + size_t(ii)) * cw;
                    for (size_t oj = 0; oj < iw; ++oj) {
                        long jj = long(oj * sw + v) - long(pw);
                        row[oi * iw + oj] =
                            (jj < 0 || jj >= long(cw)) ? T(0) : src[size_t(jj)];
                    }
                }
            }
}

// Scatter-add of im2col's transpose: cols[C*kh*kw, ih*iw] accumulates back
// into canvas[C, ch, cw].
template <typename T>
void col2im_add(const T* cols, size_t C, size_t ch, size_t cw,
                size_t kh, size_t kw, size_t sh, size_t sw, size_t ph, size_t pw,
                size_t ih, size_t iw, T* canvas) {
    for (size_t c = 0; c < C; ++c)
        for (size_t u = 0; u < kh; ++u)
            for (size_t v = 0; v < kw; ++v) {
                const T* row = cols + ((c * kh + u) * kw + v) * (ih * iw);
                for (size_t oi = 0; oi < ih; ++oi) {
                    long ii = long(oi * sh + u) - long(ph);
                    if (ii < 0 || ii >= long(ch)) continue;
                    T* dst = canvas + (c * ch + size_t(ii)) * cw;
                    for (size_t oj = 0; oj < iw; ++oj) {
                        long jj = long(oj * sw + v) - long(pw);
                        if (jj < 0 || jj >= long(cw)) continue;
                        dst[size_t(jj)] += row[oi * iw + oj];
                    }
                }
            }
}

struct ConvGeom {
    size_t B, Cin, H, W, Cout, kh, kw, sh, sw, ph, pw, oh, ow;
};

inline ConvGeom conv_geometry(const std::vector<size_t>& xs, const std::vector<size_t>& ws,
                              size_t sh, size_t sw, size_t ph, size_t pw) {
    if (xs.size() != 4) throw ValueError("conv2d: input must be [B,C,H,W], got " + shape_str(xs));
    if (ws.size() != 4)
        throw ValueError("conv2d: weight must be [Cout,Cin,kh,kw], got " + shape_str(ws));
    if (sh < 1 || sw < 1) throw ValueError("conv2d: stride must be >= 1");
    ConvGeom g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], sh, sw, ph, pw, 0, 0};
    if (ws[1] != g.Cin)
        throw ValueError(str("conv2d: weight expects ", ws[1], " input channels, input has ",
                             g.Cin, " (input ", shape_str(xs), ", weight ", shape_str(ws), ")"));
    if (g.H + 2 * ph < g.kh || g.W + 2 * pw < g.kw)
        throw ValueError(str("conv2d: non-positive output extent for input ", shape_str(xs),
                             ", kernel ", g.kh, "x", g.kw, ", padding ", ph, "x", pw));
    g.oh = (g.H + 2 * ph - g.kh) / sh + 1;
    g.ow = (g.W + 2 * pw - g.kw) / sw + 1;
    return g;
}

} // namespace detail

/// 2-D convolution over [B,Cin,H,W] with weight [Cout,Cin,kh,kw], zero
/// padding, differentiable w.r.t. input, weight and bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                 size_t sh, size_t sw, size_t ph, size_t pw) {
    auto g = detail::conv_geometry(x.shape(), weight.shape(), sh, sw, ph, pw);
    if (bias && bias->numel() != g.Cout)
        throw ValueError(str("conv2d: bias has ", bias->numel(), " entries, expected ", g.Cout));
    const size_t K = g.Cin * g.kh * g.kw, P = g.oh * g.ow;
    std::vector<T> out(g.B * g.Cout * P);
    std::vector<T> cols(K * P);
    for (size_t b = 0; b < g.B; ++b) {
        detail::im2col(x.data().data() + b * g.Cin * g.H * g.W, g.Cin, g.H, g.W, g.kh, g.kw,
                       g.sh, g.sw, g.ph, g.pw, g.oh, g.ow, cols.data());
        detail::gemm<T>(false, false, g.Cout, P, K, weight.data().data(), cols.data(),
                        out.data() + b * g.Cout * P, false);
        if (bias)
            for (size_t o = 0; o < g.Cout; ++o) {
                T bv = bias->data()[o];
                T* dst = out.data() + (b * g.Cout + o) * P;
                for (size_t p = 0; p < P; ++p) dst[p] += bv;
            }
    }
    bool req = x.requires_grad() || weight.requires_grad() || (bias && bias->requires_grad());
    Tensor<T> y = detail::make_result<T>({g.B, g.Cout, g.oh, g.ow}, std::move(out), req);
    if (y.requires_grad()) {
        auto sx = x.storage();
        auto sw_ = weight.storage();
        auto sb = bias ? bias->storage() : detail::StoragePtr<T>{};
        auto sy = y.storage();
        Tape<T>::active()->record([sx, sw_, sb, sy, g, K, P]() {
            if (detail::no_out_grad(sy)) return;
            std::vector<T> buf(K * P);
            if (detail::wants_grad(sx)) {
                sx->ensure_grad();
                for (size_t b = 0; b < g.B; ++b) {
                    detail::gemm<T>(true, false, K, P, g.Cout, sw_->data.data(),
                                    sy->grad.data() + b * g.Cout * P, buf.data(), false);
                    detail::col2im_add(buf.data(), g.Cin, g.H, g.W, g.kh, g.kw, g.sh, g.sw,
                                       g.ph, g.pw, g.oh, g.ow,
                                       sx->grad.data() + b * g.Cin * g.H * g.W);
                }
            }
            if (detail::wants_grad(sw_)) {
                sw_->ensure_grad();
                for (size_t b = 0; b < g.B; ++b) {
                    detail::im2col(sx->data.data() + b * g.Cin * g.H * g.W, g.Cin, g.H, g.W,
                                   g.kh, g.kw, g.sh, g.sw, g.ph, g.pw, g.oh, g.ow, buf.data());
                    detail::gemm<T>(false, true, g.Cout, K, P,
                                    sy->grad.data() + b * g.Cout * P, buf.data(),
                                    sw_->grad.data(), true);
                }
            }
            if (sb && detail::wants_grad(sb)) {
                sb->ensure_grad();
                for (size_t b = 0; b < g.B; ++b)
                    for (size_t o = 0; o < g.Cout; ++o) {
                        const T* src = sy->grad.data() + (b * g.Cout + o) * P;
                        T acc = T(0);
                        for (size_t p = 0; p < P; ++p) acc += src[p];
                        sb->grad[o] += acc;
                    }
            }
        });
    }
    return y;
}

/// Transposed 2-D convolution (the exact adjoint of conv2d with the same
/// stride/padding). Weight layout [Cin,Cout,kh,kw]; output spatial extent is
/// (in-1)*stride - 2*pad + kernel.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                           size_t sh, size_t sw, size_t ph, size_t pw) {
    const auto& xs = x.shape();
    const auto& ws = weight.shape();
    if (xs.size() != 4)
        throw ValueError("conv_transpose2d: input must be [B,C,H,W], got " + shape_str(xs));
    if (ws.size() != 4)
        throw ValueError("conv_transpose2d: weight must be [Cin,Cout,kh,kw], got " +
                         shape_str(ws));
    if (sh < 1 || sw < 1) throw ValueError("conv_transpose2d: stride must be >= 1");
    const size_t B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
    const size_t Cout = ws[1], kh = ws[2], kw = ws[3];
    if (ws[0] != Cin)
        throw ValueError(str("conv_transpose2d: weight expects ", ws[0],
                             " input channels, input has ", Cin, " (input ", shape_str(xs),
                             ", weight ", shape_str(ws), ")"));
    const long oh_l = long(H - 1) * long(sh) - 2 * long(ph) + long(kh);
    const long ow_l = long(W - 1) * long(sw) - 2 * long(pw) + long(kw);
    if (oh_l < 1 || ow_l < 1)
        throw ValueError(str("conv_transpose2d: non-positive output extent ", oh_l, "x", ow_l));
    const size_t oh = size_t(oh_l), ow = size_t(ow_l);
    if (bias && bias->numel() != Cout)
        throw ValueError(str("conv_transpose2d: bias has ", bias->numel(), " entries, expected ",
                             Cout));

    const size_t K = Cout * kh * kw, Pin = H * W;
    std::vector<T> out(B * Cout * oh * ow, T(0));
    std::vector<T> cols(K * Pin);
    for (size_t b = 0; b < B; ++b) {
        // cols = W^T x_b, with W viewed as [Cin, Cout*kh*kw]
        detail::gemm<T>(true, false, K, Pin, Cin, weight.data().data(),
                        x.data().data() + b * Cin * Pin, cols.data(), false);
        detail::col2im_add(cols.data(), Cout, oh, ow, kh, kw, sh, sw, ph, pw, H, W,
                           out.data() + b * Cout * oh * ow);
        if (bias)
            for (size_t o = 0; o < Cout; ++o) {
                T bv = bias->data()[o];
                T* dst = out.data() + (b * Cout + o) * oh * ow;
                for (size_t p = 0; p < oh * ow; ++p) dst[p] += bv;
            }
    }
    bool req = x.requires_grad() || weight.requires_grad() || (bias && bias->requires_grad());
    Tensor<T> y = detail::make_result<T>({B, Cout, oh, ow}, std::move(out), req);
    if (y.requires_grad()) {
        auto sx = x.storage();
        auto sw_ = weight.storage();
        auto sb = bias ? bias->storage() : detail::StoragePtr<T>{};
        auto sy = y.storage();
        Tape<T>::active()->record([sx, sw_, sb, sy, B, Cin, Cout, H, W, oh, ow, kh, kw, sh, sw,
                                   ph, pw, K, Pin]() {
            if (detail::no_out_grad(sy)) return;
            std::vector<T> buf(K * Pin);
            const bool need_x = detail::wants_grad(sx);
            const bool need_w = detail::wants_grad(sw_);
            if (need_x) sx->ensure_grad();
            if (need_w) sw_->ensure_grad();
            for (size_t b = 0; b < B && (need_x || need_w); ++b) {
                detail::im2col(sy->grad.data() + b * Cout * oh * ow, Cout, oh, ow, kh, kw,
                               sh, sw, ph, pw, H, W, buf.data());
                if (need_x) // dx = W cols(dy)
                    detail::gemm<T>(false, false, Cin, Pin, K, sw_->data.data(), buf.data(),
                                    sx->grad.data() + b * Cin * Pin, true);
                if (need_w) // dW = x cols(dy)^T
                    detail::gemm<T>(false, true, Cin, K, Pin, sx->data.data() + b * Cin * Pin,
                                    buf.data(), sw_->grad.data(), true);
            }
            if (sb && detail::wants_grad(sb)) {
                sb->ensure_grad();
                for (size_t b = 0; b < B; ++b)
                    for (size_t o = 0; o < Cout; ++o) {
                        const T* src = sy->grad.data() + (b * Cout + o) * oh * ow;
                        T acc = T(0);
                        for (size_t p = 0; p < oh * ow; ++p) acc += src[p];
                        sb->grad[o] += acc;
                    }
            }
        });
    }
    return y;
}

/// Batch normalization over [B,C,H,W]. Train mode normalizes with batch
/// statistics (population variance) and, when `update_running` is set, folds
/// them into the running buffers; eval mode normalizes with the running
/// statistics only.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, T momentum, T eps,
                      bool train_mode, bool update_running = true) {
    if (x.ndim() != 4)
        throw ValueError("batchnorm2d: input must be [B,C,H,W], got " + shape_str(x.shape()));
    const size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C ||
        running_var.numel() != C)
        throw ValueError(str("batchnorm2d: parameter length mismatch for ", C, " channels"));
    const size_t n = B * H * W;
    const size_t plane = H * W;
    if (train_mode && n < 2)
        throw ValueError("batchnorm2d: train mode needs at least 2 values per channel");

    std::vector<T> mean(C), inv(C);
    auto xd = x.data();
    if (train_mode) {
        for (size_t c = 0; c < C; ++c) {
            T m = T(0);
            for (size_t b = 0; b < B; ++b) {
                const T* p = &xd[(b * C + c) * plane];
                for (size_t i = 0; i < plane; ++i) m += p[i];
            }
            m /= T(n);
            T var = T(0);
            for (size_t b = 0; b < B; ++b) {
                const T* p = &xd[(b * C + c) * plane];
                for (size_t i = 0; i < plane; ++i) {
                    T d = p[i] - m;
                    var += d * d;
                }
            }
            var /= T(n);
            mean[c] = m;
            inv[c] = T(1) / std::sqrt(var + eps);
            if (update_running) {
                auto rm = running_mean.data_mut();
                auto rv = running_var.data_mut();
                rm[c] = (T(1) - momentum) * rm[c] + momentum * m;
                rv[c] = (T(1) - momentum) * rv[c] + momentum * var;
            }
        }
    } else {
        for (size_t c = 0; c < C; ++c) {
            mean[c] = running_mean.data()[c];
            inv[c] = T(1) / std::sqrt(running_var.data()[c] + eps);
        }
    }

    std::vector<T> xhat(x.numel());
    std::vector<T> out(x.numel());
    for (size_t b = 0; b < B; ++b)
        for (size_t c = 0; c < C; ++c) {
            const T* p = &xd[(b * C + c) * plane];
            T* ph_ = &xhat[(b * C + c) * plane];
            T* po = &out[(b * C + c) * plane];
            T gm = gamma.data()[c], bt = beta.data()[c], mc = mean[c], ic = inv[c];
            for (size_t i = 0; i < plane; ++i) {
                ph_[i] = (p[i] - mc) * ic;
                po[i] = gm * ph_[i] + bt;
            }
        }

    bool req = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    Tensor<T> y = detail::make_result<T>(x.shape(), std::move(out), req);
    if (y.requires_grad()) {
        auto sx = x.storage();
        auto sg = gamma.storage();
        auto sbta = beta.storage();
        auto sy = y.storage();
        Tape<T>::active()->record([sx, sg, sbta, sy, xhat = std::move(xhat),
                                   inv = std::move(inv), B, C, plane, n, train_mode]() {
            if (detail::no_out_grad(sy)) return;
            for (size_t c = 0; c < C; ++c) {
                T s1 = T(0), s2 = T(0);
                for (size_t b = 0; b < B; ++b) {
                    const T* dy = &sy->grad[(b * C + c) * plane];
                    const T* xh = &xhat[(b * C + c) * plane];
                    for (size_t i = 0; i < plane; ++i) {
                        s1 += dy[i];
                        s2 += dy[i] * xh[i];
                    }
                }
                if (detail::wants_grad(sbta)) {
                    sbta->ensure_grad();
                    sbta->grad[c] += s1;
                }
                if (detail::wants_grad(sg)) {
                    sg->ensure_grad();
                    sg->grad[c] += s2;
                }
                if (detail::wants_grad(sx)) {
                    sx->ensure_grad();
                    T gm = sg->data[c], ic = inv[c];
                    T m1 = s1 / T(n), m2 = s2 / T(n);
                    for (size_t b = 0; b < B; ++b) {
                        const T* dy = &sy->grad[(b * C + c) * plane];
                        const T* xh = &xhat[(b * C + c) * plane];
                        T* dx = &sx->grad[(b * C + c) * plane];
                        if (train_mode)
                            for (size_t i = 0; i < plane; ++i)
                                dx[i] += gm * ic * (dy[i] - m1 - xh[i] * m2);
                        else
                            for (size_t i = 0; i < plane; ++i) dx[i] += gm * ic * dy[i];
                    }
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// layer objects
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2dLayer {
    Parameter<T> weight; // [Cout,Cin,kh,kw]
    std::optional<Parameter<T>> bias;
    size_t stride_h = 1, stride_w = 1, pad_h = 0, pad_w = 0;

    Tensor<T> forward(const Tensor<T>& x) const { return forward(x, weight.value); }
    Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& w) const {
        return conv2d(x, w, bias ? &bias->value : nullptr, stride_h, stride_w, pad_h, pad_w);
    }
};

template <typename T>
struct ConvTranspose2dLayer {
    Parameter<T> weight; // [Cin,Cout,kh,kw]
    std::optional<Parameter<T>> bias;
    size_t stride_h = 1, stride_w = 1, pad_h = 0, pad_w = 0;

    Tensor<T> forward(const Tensor<T>& x) const { return forward(x, weight.value); }
    Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& w) const {
        return conv_transpose2d(x, w, bias ? &bias->value : nullptr, stride_h, stride_w,
                                pad_h, pad_w);
    }
};

template <typename T>
struct BatchNorm2dLayer {
    Parameter<T> gamma, beta;
    Tensor<T> running_mean, running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);

    static BatchNorm2dLayer make(const std::string& name_prefix, size_t channels) {
        BatchNorm2dLayer l;
        l.gamma = Parameter<T>(name_prefix + ".gamma", Tensor<T>::full({channels}, T(1)));
        l.beta = Parameter<T>(name_prefix + ".beta", Tensor<T>::zeros({channels}));
        l.running_mean = Tensor<T>::zeros({channels});
        l.running_var = Tensor<T>::full({channels}, T(1));
        return l;
    }

    Tensor<T> forward(const Tensor<T>& x, bool train_mode, bool update_running = true) {
        return batchnorm2d(x, gamma.value, beta.value, running_mean, running_var, momentum,
                           eps, train_mode, update_running);
    }
};

} // namespace fwi
