#include "imf/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>

namespace imf {

namespace {

template <class T>
bool want_tape(std::initializer_list<const Tensor<T>*> inputs) {
    if (!GradMode::enabled()) return false;
    for (auto* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
}

// col has layout [C*k*k, P] with P = Ho*Wo.
template <class T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* col) {
    const std::size_t P = static_cast<std::size_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c) {
        for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
                const int q = (c * k + kh) * k + kw;
                T* dst = col + static_cast<std::size_t>(q) * P;
                for (int oh = 0; oh < Ho; ++oh) {
                    const int ih = oh * stride - pad + kh;
                    if (ih < 0 || ih >= H) {
                        std::fill(dst + static_cast<std::size_t>(oh) * Wo,
                                  dst + static_cast<std::size_t>(oh + 1) * Wo, T(0));
                        continue;
                    }
                    const T* src = x + (static_cast<std::size_t>(c) * H + ih) * W;
                    T* row = dst + static_cast<std::size_t>(oh) * Wo;
                    for (int ow = 0; ow < Wo; ++ow) {
                        const int iw = ow * stride - pad + kw;
                        row[ow] = (iw >= 0 && iw < W) ? src[iw] : T(0);
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const T* col, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo,
                T* dx) {
    const std::size_t P = static_cast<std::size_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c) {
        for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
                const int q = (c * k + kh) * k + kw;
                const T* src = col + static_cast<std::size_t>(q) * P;
                for (int oh = 0; oh < Ho; ++oh) {
                    const int ih = oh * stride - pad + kh;
                    if (ih < 0 || ih >= H) continue;
                    T* dst = dx + (static_cast<std::size_t>(c) * H + ih) * W;
                    const T* row = src + static_cast<std::size_t>(oh) * Wo;
                    for (int ow = 0; ow < Wo; ++ow) {
                        const int iw = ow * stride - pad + kw;
                        if (iw >= 0 && iw < W) dst[iw] += row[ow];
                    }
                }
            }
        }
    }
}

// C[M,N] += A[M,K] * B[K,N]
template <class T>
void gemm_acc(int M, int K, int N, const T* A, const T* B, T* C) {
    for (int m = 0; m < M; ++m) {
        const T* a = A + static_cast<std::size_t>(m) * K;
        T* c = C + static_cast<std::size_t>(m) * N;
        for (int kk = 0; kk < K; ++kk) {
            const T av = a[kk];
            const T* b = B + static_cast<std::size_t>(kk) * N;
            for (int n = 0; n < N; ++n) c[n] += av * b[n];
        }
    }
}

}  // namespace

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (want_tape<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        GradTape<T>::instance().record([an, bn, on] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "sub");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    if (want_tape<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        GradTape<T>::instance().record([an, bn, on] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "mul");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (want_tape<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        GradTape<T>::instance().record([an, bn, on] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i)
                    an->grad[i] += on->grad[i] * bn->data[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i)
                    bn->grad[i] += on->grad[i] * an->data[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> affine(const Tensor<T>& x, T scale, T shift) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = scale * x.data()[i] + shift;
    if (want_tape<T>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        GradTape<T>::instance().record([xn, on, scale] {
            if (on->grad.empty()) return;
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += scale * on->grad[i];
        });
    }
    return out;
}

template <class T>
Tensor<T> scalar_mul(const Tensor<T>& x, T scale) {
    return affine(x, scale, T(0));
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) acc += static_cast<double>(x.data()[i]);
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
    if (want_tape<T>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        GradTape<T>::instance().record([xn, on] {
            if (on->grad.empty()) return;
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const T g = on->grad[0];
            for (auto& v : xn->grad) v += g;
        });
    }
    return out;
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (x.ndim() != 2 || weight.ndim() != 2 || bias.ndim() != 1)
        throw ConfigError("linear: expected x [N,D], weight [Dout,D], bias [Dout], got " +
                          shape_str(x.shape()) + ", " + shape_str(weight.shape()) + ", " +
                          shape_str(bias.shape()));
    const std::size_t N = x.dim(0), D = x.dim(1), Dout = weight.dim(0);
    if (weight.dim(1) != D || bias.dim(0) != Dout)
        throw ConfigError("linear: inner dimension mismatch, x " + shape_str(x.shape()) +
                          " vs weight " + shape_str(weight.shape()));
    Tensor<T> out = Tensor<T>::zeros({N, Dout});
    for (std::size_t n = 0; n < N; ++n) {
        const T* xr = x.data() + n * D;
        T* yr = out.data() + n * Dout;
        for (std::size_t o = 0; o < Dout; ++o) {
            const T* wr = weight.data() + o * D;
            double acc = static_cast<double>(bias.data()[o]);
            for (std::size_t d = 0; d < D; ++d) acc += static_cast<double>(xr[d]) * wr[d];
            yr[o] = static_cast<T>(acc);
        }
    }
    if (want_tape<T>({&x, &weight, &bias})) {
        out.set_requires_grad(true);
        auto xn = x.node(), wn = weight.node(), bn = bias.node(), on = out.node();
        GradTape<T>::instance().record([xn, wn, bn, on, N, D, Dout] {
            if (on->grad.empty()) return;
            const T* dy = on->grad.data();
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t n = 0; n < N; ++n) {
                    T* dxr = xn->grad.data() + n * D;
                    const T* dyr = dy + n * Dout;
                    for (std::size_t o = 0; o < Dout; ++o) {
                        const T g = dyr[o];
                        const T* wr = wn->data.data() + o * D;
                        for (std::size_t d = 0; d < D; ++d) dxr[d] += g * wr[d];
                    }
                }
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                for (std::size_t n = 0; n < N; ++n) {
                    const T* xr = xn->data.data() + n * D;
                    const T* dyr = dy + n * Dout;
                    for (std::size_t o = 0; o < Dout; ++o) {
                        const T g = dyr[o];
                        T* dwr = wn->grad.data() + o * D;
                        for (std::size_t d = 0; d < D; ++d) dwr[d] += g * xr[d];
                    }
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t n = 0; n < N; ++n) {
                    const T* dyr = dy + n * Dout;
                    for (std::size_t o = 0; o < Dout; ++o) bn->grad[o] += dyr[o];
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int padding) {
    if (x.ndim() != 4 || weight.ndim() != 4 || bias.ndim() != 1)
        throw ConfigError("conv2d: expected x [N,C,H,W], weight [Cout,C,k,k], bias [Cout], got " +
                          shape_str(x.shape()) + ", " + shape_str(weight.shape()));
    const int N = static_cast<int>(x.dim(0)), C = static_cast<int>(x.dim(1)),
              H = static_cast<int>(x.dim(2)), W = static_cast<int>(x.dim(3));
    const int Co = static_cast<int>(weight.dim(0)), k = static_cast<int>(weight.dim(2));
    if (weight.dim(1) != x.dim(1))
        throw ConfigError("conv2d: input channels " + shape_str(x.shape()) +
                          " do not match weight channels " + shape_str(weight.shape()));
    if (weight.dim(2) != weight.dim(3))
        throw ConfigError("conv2d: only square kernels supported, weight " +
                          shape_str(weight.shape()));
    if (bias.dim(0) != weight.dim(0))
        throw ConfigError("conv2d: bias " + shape_str(bias.shape()) + " vs weight " +
                          shape_str(weight.shape()));
    if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
    if (padding < 0) throw ConfigError("conv2d: padding must be >= 0");
    if (k > H + 2 * padding || k > W + 2 * padding)
        throw ConfigError("conv2d: kernel " + std::to_string(k) + " exceeds padded input " +
                          shape_str(x.shape()) + " with padding " + std::to_string(padding));

    const int Ho = conv_out_extent(H, k, stride, padding);
    const int Wo = conv_out_extent(W, k, stride, padding);
    const std::size_t P = static_cast<std::size_t>(Ho) * Wo;
    const std::size_t Q = static_cast<std::size_t>(C) * k * k;

    Tensor<T> out = Tensor<T>::zeros({static_cast<std::size_t>(N), static_cast<std::size_t>(Co),
                                      static_cast<std::size_t>(Ho), static_cast<std::size_t>(Wo)});
    std::vector<T> col(Q * P);
    for (int n = 0; n < N; ++n) {
        im2col(x.data() + static_cast<std::size_t>(n) * C * H * W, C, H, W, k, stride, padding, Ho,
               Wo, col.data());
        T* yn = out.data() + static_cast<std::size_t>(n) * Co * P;
        for (int co = 0; co < Co; ++co)
            std::fill(yn + static_cast<std::size_t>(co) * P, yn + static_cast<std::size_t>(co + 1) * P,
                      bias.data()[co]);
        gemm_acc(Co, static_cast<int>(Q), static_cast<int>(P), weight.data(), col.data(), yn);
    }

    if (want_tape<T>({&x, &weight, &bias})) {
        out.set_requires_grad(true);
        auto xn = x.node(), wn = weight.node(), bn = bias.node(), on = out.node();
        GradTape<T>::instance().record([xn, wn, bn, on, N, C, H, W, Co, k, stride, padding, Ho, Wo,
                                        P, Q] {
            if (on->grad.empty()) return;
            std::vector<T> col(Q * P);
            std::vector<T> dcol;
            if (xn->requires_grad) {
                xn->ensure_grad();
                dcol.assign(Q * P, T(0));
            }
            if (wn->requires_grad) wn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const T* dyn = on->grad.data() + static_cast<std::size_t>(n) * Co * P;
                const bool need_col = wn->requires_grad;
                if (need_col)
                    im2col(xn->data.data() + static_cast<std::size_t>(n) * C * H * W, C, H, W, k,
                           stride, padding, Ho, Wo, col.data());
                if (bn->requires_grad) {
                    for (int co = 0; co < Co; ++co) {
                        double acc = 0.0;
                        const T* dyr = dyn + static_cast<std::size_t>(co) * P;
                        for (std::size_t p = 0; p < P; ++p) acc += static_cast<double>(dyr[p]);
                        bn->grad[co] += static_cast<T>(acc);
                    }
                }
                if (wn->requires_grad) {
                    // dW[co,q] += dot(dy[co,:], col[q,:])
                    for (int co = 0; co < Co; ++co) {
                        const T* dyr = dyn + static_cast<std::size_t>(co) * P;
                        T* dwr = wn->grad.data() + static_cast<std::size_t>(co) * Q;
                        for (std::size_t q = 0; q < Q; ++q) {
                            const T* cr = col.data() + q * P;
                            double acc = 0.0;
                            for (std::size_t p = 0; p < P; ++p)
                                acc += static_cast<double>(dyr[p]) * cr[p];
                            dwr[q] += static_cast<T>(acc);
                        }
                    }
                }
                if (xn->requires_grad) {
                    // dcol[q,:] = sum_co W[co,q] * dy[co,:], then scatter back.
                    std::fill(dcol.begin(), dcol.end(), T(0));
                    for (int co = 0; co < Co; ++co) {
                        const T* dyr = dyn + static_cast<std::size_t>(co) * P;
                        const T* wr = wn->data.data() + static_cast<std::size_t>(co) * Q;
                        for (std::size_t q = 0; q < Q; ++q) {
                            const T wv = wr[q];
                            T* dcr = dcol.data() + q * P;
                            for (std::size_t p = 0; p < P; ++p) dcr[p] += wv * dyr[p];
                        }
                    }
                    col2im_add(dcol.data(), C, H, W, k, stride, padding, Ho, Wo,
                               xn->grad.data() + static_cast<std::size_t>(n) * C * H * W);
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> maxpool2d(const Tensor<T>& x, int k, int stride, int padding) {
    if (x.ndim() != 4)
        throw ConfigError("maxpool2d: expected [N,C,H,W], got " + shape_str(x.shape()));
    const int N = static_cast<int>(x.dim(0)), C = static_cast<int>(x.dim(1)),
              H = static_cast<int>(x.dim(2)), W = static_cast<int>(x.dim(3));
    if (stride < 1) throw ConfigError("maxpool2d: stride must be >= 1");
    if (padding < 0) throw ConfigError("maxpool2d: padding must be >= 0");
    if (k > H + 2 * padding || k > W + 2 * padding)
        throw ConfigError("maxpool2d: window " + std::to_string(k) + " exceeds padded input " +
                          shape_str(x.shape()) + " with padding " + std::to_string(padding));
    const int Ho = conv_out_extent(H, k, stride, padding);
    const int Wo = conv_out_extent(W, k, stride, padding);

    Tensor<T> out = Tensor<T>::zeros({static_cast<std::size_t>(N), static_cast<std::size_t>(C),
                                      static_cast<std::size_t>(Ho), static_cast<std::size_t>(Wo)});
    std::vector<std::int64_t> argmax(out.numel(), -1);
    std::size_t oi = 0;
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const T* plane = x.data() + (static_cast<std::size_t>(n) * C + c) * H * W;
            const std::size_t plane_off = (static_cast<std::size_t>(n) * C + c) * H * W;
            for (int oh = 0; oh < Ho; ++oh) {
                for (int ow = 0; ow < Wo; ++ow, ++oi) {
                    T best = -std::numeric_limits<T>::infinity();
                    std::int64_t best_idx = -1;
                    for (int kh = 0; kh < k; ++kh) {
                        const int ih = oh * stride - padding + kh;
                        if (ih < 0 || ih >= H) continue;
                        for (int kw = 0; kw < k; ++kw) {
                            const int iw = ow * stride - padding + kw;
                            if (iw < 0 || iw >= W) continue;
                            const T v = plane[ih * W + iw];
                            if (v > best) {
                                best = v;
                                best_idx = static_cast<std::int64_t>(plane_off) + ih * W + iw;
                            }
                        }
                    }
                    out.data()[oi] = best_idx >= 0 ? best : T(0);
                    argmax[oi] = best_idx;
                }
            }
        }
    }

    if (want_tape<T>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        GradTape<T>::instance().record([xn, on, argmax = std::move(argmax)] {
            if (on->grad.empty()) return;
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < argmax.size(); ++i)
                if (argmax[i] >= 0) xn->grad[argmax[i]] += on->grad[i];
        });
    }
    return out;
}

template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      RunningStats<T>& stats, bool training, T momentum, T eps) {
    if (x.ndim() != 4)
        throw ConfigError("batchnorm2d: expected [N,C,H,W], got " + shape_str(x.shape()));
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gamma.numel() != C || beta.numel() != C || stats.mean.size() != C || stats.var.size() != C)
        throw ConfigError("batchnorm2d: parameter size mismatch for " + std::to_string(C) +
                          " channels");
    if (training && N < 2)
        throw ConfigError("batchnorm2d: batch size must be >= 2 in training mode, got " +
                          std::to_string(N));

    const std::size_t HW = H * W;
    const std::size_t m = N * HW;
    Tensor<T> out = Tensor<T>::zeros(x.shape());

    std::vector<T> xhat(x.numel());
    std::vector<T> invstd(C);

    if (training) {
        for (std::size_t c = 0; c < C; ++c) {
            double sum = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                const T* p = x.data() + (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) sum += static_cast<double>(p[i]);
            }
            const double mu = sum / static_cast<double>(m);
            double sq = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                const T* p = x.data() + (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) {
                    const double d = static_cast<double>(p[i]) - mu;
                    sq += d * d;
                }
            }
            const double var = sq / static_cast<double>(m);
            const double istd = 1.0 / std::sqrt(var + static_cast<double>(eps));
            invstd[c] = static_cast<T>(istd);
            const T g = gamma.data()[c], b = beta.data()[c];
            for (std::size_t n = 0; n < N; ++n) {
                const T* p = x.data() + (n * C + c) * HW;
                T* xh = xhat.data() + (n * C + c) * HW;
                T* y = out.data() + (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) {
                    xh[i] = static_cast<T>((static_cast<double>(p[i]) - mu) * istd);
                    y[i] = g * xh[i] + b;
                }
            }
            // Running stats keep the unbiased variance; normalization above
            // uses the biased one.
            const double var_unbiased = m > 1 ? sq / static_cast<double>(m - 1) : var;
            stats.mean[c] = static_cast<T>((1.0 - static_cast<double>(momentum)) *
                                               static_cast<double>(stats.mean[c]) +
                                           static_cast<double>(momentum) * mu);
            stats.var[c] = static_cast<T>((1.0 - static_cast<double>(momentum)) *
                                              static_cast<double>(stats.var[c]) +
                                          static_cast<double>(momentum) * var_unbiased);
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            const double istd = 1.0 / std::sqrt(static_cast<double>(stats.var[c]) +
                                                static_cast<double>(eps));
            invstd[c] = static_cast<T>(istd);
            const double mu = static_cast<double>(stats.mean[c]);
            const T g = gamma.data()[c], b = beta.data()[c];
            for (std::size_t n = 0; n < N; ++n) {
                const T* p = x.data() + (n * C + c) * HW;
                T* xh = xhat.data() + (n * C + c) * HW;
                T* y = out.data() + (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) {
                    xh[i] = static_cast<T>((static_cast<double>(p[i]) - mu) * istd);
                    y[i] = g * xh[i] + b;
                }
            }
        }
    }

    if (want_tape<T>({&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
        GradTape<T>::instance().record([xn, gn, bn, on, xhat = std::move(xhat),
                                        invstd = std::move(invstd), N, C, HW, m, training] {
            if (on->grad.empty()) return;
            for (std::size_t c = 0; c < C; ++c) {
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (std::size_t n = 0; n < N; ++n) {
                    const T* dy = on->grad.data() + (n * C + c) * HW;
                    const T* xh = xhat.data() + (n * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) {
                        sum_dy += static_cast<double>(dy[i]);
                        sum_dy_xhat += static_cast<double>(dy[i]) * xh[i];
                    }
                }
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    gn->grad[c] += static_cast<T>(sum_dy_xhat);
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    bn->grad[c] += static_cast<T>(sum_dy);
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    const double g = static_cast<double>(gn->data[c]);
                    const double istd = static_cast<double>(invstd[c]);
                    if (training) {
                        const double mean_dy = sum_dy / static_cast<double>(m);
                        const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(m);
                        for (std::size_t n = 0; n < N; ++n) {
                            const T* dy = on->grad.data() + (n * C + c) * HW;
                            const T* xh = xhat.data() + (n * C + c) * HW;
                            T* dx = xn->grad.data() + (n * C + c) * HW;
                            for (std::size_t i = 0; i < HW; ++i)
                                dx[i] += static_cast<T>(
                                    g * istd *
                                    (static_cast<double>(dy[i]) - mean_dy -
                                     static_cast<double>(xh[i]) * mean_dy_xhat));
                        }
                    } else {
                        for (std::size_t n = 0; n < N; ++n) {
                            const T* dy = on->grad.data() + (n * C + c) * HW;
                            T* dx = xn->grad.data() + (n * C + c) * HW;
                            for (std::size_t i = 0; i < HW; ++i)
                                dx[i] += static_cast<T>(g * istd * static_cast<double>(dy[i]));
                        }
                    }
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
    if (want_tape<T>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        GradTape<T>::instance().record([xn, on] {
            if (on->grad.empty()) return;
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i)
                if (xn->data[i] > T(0)) xn->grad[i] += on->grad[i];
        });
    }
    return out;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double v = static_cast<double>(x.data()[i]);
        out.data()[i] = static_cast<T>(1.0 / (1.0 + std::exp(-v)));
    }
    if (want_tape<T>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        GradTape<T>::instance().record([xn, on] {
            if (on->grad.empty()) return;
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                const T s = on->data[i];
                xn->grad[i] += on->grad[i] * s * (T(1) - s);
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    if (x.ndim() != 2 || x.dim(1) == 0 || x.dim(0) == 0)
        throw ConfigError("softmax_rows: expected non-empty [N,K], got " + shape_str(x.shape()));
    const std::size_t N = x.dim(0), K = x.dim(1);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::size_t n = 0; n < N; ++n) {
        const T* xr = x.data() + n * K;
        T* yr = out.data() + n * K;
        double mx = static_cast<double>(xr[0]);
        for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(xr[k]));
        double denom = 0.0;
        for (std::size_t k = 0; k < K; ++k) denom += std::exp(static_cast<double>(xr[k]) - mx);
        for (std::size_t k = 0; k < K; ++k)
            yr[k] = static_cast<T>(std::exp(static_cast<double>(xr[k]) - mx) / denom);
    }
    if (want_tape<T>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        GradTape<T>::instance().record([xn, on, N, K] {
            if (on->grad.empty()) return;
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t n = 0; n < N; ++n) {
                const T* s = on->data.data() + n * K;
                const T* dy = on->grad.data() + n * K;
                T* dx = xn->grad.data() + n * K;
                double dot = 0.0;
                for (std::size_t k = 0; k < K; ++k) dot += static_cast<double>(dy[k]) * s[k];
                for (std::size_t k = 0; k < K; ++k)
                    dx[k] += static_cast<T>(s[k] * (static_cast<double>(dy[k]) - dot));
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must be in [0,1)");
    if (!training || p == 0.0) return x;
    const T scale = static_cast<T>(1.0 / (1.0 - p));
    std::vector<T> mask(x.numel());
    for (auto& mv : mask) mv = rng.uniform() >= p ? scale : T(0);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] * mask[i];
    if (want_tape<T>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        GradTape<T>::instance().record([xn, on, mask = std::move(mask)] {
            if (on->grad.empty()) return;
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i] * mask[i];
        });
    }
    return out;
}

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    if (x.ndim() != 4)
        throw ConfigError("global_avg_pool: expected [N,C,H,W], got " + shape_str(x.shape()));
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor<T> out = Tensor<T>::zeros({N, C});
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const T* p = x.data() + (n * C + c) * HW;
            double acc = 0.0;
            for (std::size_t i = 0; i < HW; ++i) acc += static_cast<double>(p[i]);
            out.data()[n * C + c] = static_cast<T>(acc / static_cast<double>(HW));
        }
    }
    if (want_tape<T>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        GradTape<T>::instance().record([xn, on, N, C, HW] {
            if (on->grad.empty()) return;
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const T inv = static_cast<T>(1.0 / static_cast<double>(HW));
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c) {
                    const T g = on->grad[n * C + c] * inv;
                    T* dx = xn->grad.data() + (n * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) dx[i] += g;
                }
        });
    }
    return out;
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != b.ndim() || (a.ndim() != 2 && a.ndim() != 4))
        throw ConfigError("concat_channels: expected matching 2D or 4D inputs, got " +
                          shape_str(a.shape()) + " and " + shape_str(b.shape()));
    if (a.dim(0) != b.dim(0))
        throw ConfigError("concat_channels: batch mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    std::size_t inner_a = 1, inner_b = 1;
    if (a.ndim() == 4) {
        if (a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
            throw ConfigError("concat_channels: spatial mismatch " + shape_str(a.shape()) +
                              " vs " + shape_str(b.shape()));
        inner_a = a.dim(2) * a.dim(3);
        inner_b = inner_a;
    }
    const std::size_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
    std::vector<std::size_t> oshape = a.shape();
    oshape[1] = Ca + Cb;
    Tensor<T> out = Tensor<T>::zeros(oshape);
    const std::size_t stride_a = Ca * inner_a, stride_b = Cb * inner_b,
                      stride_o = stride_a + stride_b;
    for (std::size_t n = 0; n < N; ++n) {
        std::copy(a.data() + n * stride_a, a.data() + (n + 1) * stride_a,
                  out.data() + n * stride_o);
        std::copy(b.data() + n * stride_b, b.data() + (n + 1) * stride_b,
                  out.data() + n * stride_o + stride_a);
    }
    if (want_tape<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        GradTape<T>::instance().record([an, bn, on, N, stride_a, stride_b, stride_o] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t i = 0; i < stride_a; ++i)
                        an->grad[n * stride_a + i] += on->grad[n * stride_o + i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t i = 0; i < stride_b; ++i)
                        bn->grad[n * stride_b + i] += on->grad[n * stride_o + stride_a + i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> scale_per_sample(const Tensor<T>& x, const Tensor<T>& s) {
    if (x.ndim() != 4)
        throw ConfigError("scale_per_sample: expected x [N,C,H,W], got " + shape_str(x.shape()));
    const std::size_t N = x.dim(0);
    if (s.numel() != N)
        throw ConfigError("scale_per_sample: scale " + shape_str(s.shape()) +
                          " does not have one entry per sample of " + shape_str(x.shape()));
    const std::size_t inner = x.numel() / N;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::size_t n = 0; n < N; ++n) {
        const T sv = s.data()[n];
        const T* xp = x.data() + n * inner;
        T* yp = out.data() + n * inner;
        for (std::size_t i = 0; i < inner; ++i) yp[i] = xp[i] * sv;
    }
    if (want_tape<T>({&x, &s})) {
        out.set_requires_grad(true);
        auto xn = x.node(), sn = s.node(), on = out.node();
        GradTape<T>::instance().record([xn, sn, on, N, inner] {
            if (on->grad.empty()) return;
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t n = 0; n < N; ++n) {
                    const T sv = sn->data[n];
                    for (std::size_t i = 0; i < inner; ++i)
                        xn->grad[n * inner + i] += on->grad[n * inner + i] * sv;
                }
            }
            if (sn->requires_grad) {
                sn->ensure_grad();
                for (std::size_t n = 0; n < N; ++n) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < inner; ++i)
                        acc += static_cast<double>(on->grad[n * inner + i]) * xn->data[n * inner + i];
                    sn->grad[n] += static_cast<T>(acc);
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> scale_per_channel(const Tensor<T>& x, const Tensor<T>& g) {
    if (x.ndim() != 4 || g.ndim() != 2)
        throw ConfigError("scale_per_channel: expected x [N,C,H,W] and gate [N,C], got " +
                          shape_str(x.shape()) + " and " + shape_str(g.shape()));
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (g.dim(0) != N || g.dim(1) != C)
        throw ConfigError("scale_per_channel: gate " + shape_str(g.shape()) +
                          " does not match feature channels of " + shape_str(x.shape()));
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const T gv = g.data()[n * C + c];
            const T* xp = x.data() + (n * C + c) * HW;
            T* yp = out.data() + (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) yp[i] = xp[i] * gv;
        }
    if (want_tape<T>({&x, &g})) {
        out.set_requires_grad(true);
        auto xn = x.node(), gn = g.node(), on = out.node();
        GradTape<T>::instance().record([xn, gn, on, N, C, HW] {
            if (on->grad.empty()) return;
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t c = 0; c < C; ++c) {
                        const T gv = gn->data[n * C + c];
                        const std::size_t off = (n * C + c) * HW;
                        for (std::size_t i = 0; i < HW; ++i)
                            xn->grad[off + i] += on->grad[off + i] * gv;
                    }
            }
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t c = 0; c < C; ++c) {
                        const std::size_t off = (n * C + c) * HW;
                        double acc = 0.0;
                        for (std::size_t i = 0; i < HW; ++i)
                            acc += static_cast<double>(on->grad[off + i]) * xn->data[off + i];
                        gn->grad[n * C + c] += static_cast<T>(acc);
                    }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> mul_rowvec(const Tensor<T>& x, const std::vector<T>& w) {
    if (x.ndim() != 2 || x.dim(1) != w.size())
        throw ConfigError("mul_rowvec: expected [N," + std::to_string(w.size()) + "], got " +
                          shape_str(x.shape()));
    const std::size_t N = x.dim(0), K = x.dim(1);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < K; ++k) out.data()[n * K + k] = x.data()[n * K + k] * w[k];
    if (want_tape<T>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        GradTape<T>::instance().record([xn, on, w, N, K] {
            if (on->grad.empty()) return;
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t k = 0; k < K; ++k)
                    xn->grad[n * K + k] += on->grad[n * K + k] * w[k];
        });
    }
    return out;
}

template <class T>
Tensor<T> sum_rows(const Tensor<T>& x) {
    if (x.ndim() != 2) throw ConfigError("sum_rows: expected [N,K], got " + shape_str(x.shape()));
    const std::size_t N = x.dim(0), K = x.dim(1);
    Tensor<T> out = Tensor<T>::zeros({N, 1});
    for (std::size_t n = 0; n < N; ++n) {
        double acc = 0.0;
        for (std::size_t k = 0; k < K; ++k) acc += static_cast<double>(x.data()[n * K + k]);
        out.data()[n] = static_cast<T>(acc);
    }
    if (want_tape<T>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        GradTape<T>::instance().record([xn, on, N, K] {
            if (on->grad.empty()) return;
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t n = 0; n < N; ++n) {
                const T g = on->grad[n];
                for (std::size_t k = 0; k < K; ++k) xn->grad[n * K + k] += g;
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.ndim() != 2 || logits.dim(1) == 0)
        throw ConfigError("cross_entropy: expected logits [N,K], got " + shape_str(logits.shape()));
    const std::size_t N = logits.dim(0), K = logits.dim(1);
    if (labels.size() != N)
        throw ConfigError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                          std::to_string(N) + " rows");
    for (std::size_t n = 0; n < N; ++n)
        if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= K)
            throw ConfigError("cross_entropy: label " + std::to_string(labels[n]) +
                              " outside [0," + std::to_string(K) + ") at row " + std::to_string(n));

    double total = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
        const T* xr = logits.data() + n * K;
        double mx = static_cast<double>(xr[0]);
        for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(xr[k]));
        double denom = 0.0;
        for (std::size_t k = 0; k < K; ++k) denom += std::exp(static_cast<double>(xr[k]) - mx);
        total += mx + std::log(denom) - static_cast<double>(xr[labels[n]]);
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(N)));

    if (want_tape<T>({&logits})) {
        out.set_requires_grad(true);
        auto xn = logits.node(), on = out.node();
        GradTape<T>::instance().record([xn, on, labels, N, K] {
            if (on->grad.empty()) return;
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const double g = static_cast<double>(on->grad[0]) / static_cast<double>(N);
            for (std::size_t n = 0; n < N; ++n) {
                const T* xr = xn->data.data() + n * K;
                double mx = static_cast<double>(xr[0]);
                for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(xr[k]));
                double denom = 0.0;
                for (std::size_t k = 0; k < K; ++k)
                    denom += std::exp(static_cast<double>(xr[k]) - mx);
                T* dx = xn->grad.data() + n * K;
                for (std::size_t k = 0; k < K; ++k) {
                    const double p = std::exp(static_cast<double>(xr[k]) - mx) / denom;
                    const double onehot = (static_cast<std::size_t>(labels[n]) == k) ? 1.0 : 0.0;
                    dx[k] += static_cast<T>(g * (p - onehot));
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> nll_probs(const Tensor<T>& probs, const std::vector<int>& labels) {
    if (probs.ndim() != 2 || probs.dim(1) == 0)
        throw ConfigError("nll_probs: expected probs [N,K], got " + shape_str(probs.shape()));
    const std::size_t N = probs.dim(0), K = probs.dim(1);
    if (labels.size() != N)
        throw ConfigError("nll_probs: " + std::to_string(labels.size()) + " labels for " +
                          std::to_string(N) + " rows");
    constexpr double floor = 1e-12;
    double total = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
        if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= K)
            throw ConfigError("nll_probs: label out of range at row " + std::to_string(n));
        total -= std::log(std::max(static_cast<double>(probs.data()[n * K + labels[n]]), floor));
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(N)));
    if (want_tape<T>({&probs})) {
        out.set_requires_grad(true);
        auto xn = probs.node(), on = out.node();
        GradTape<T>::instance().record([xn, on, labels, N, K] {
            if (on->grad.empty()) return;
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const double g = static_cast<double>(on->grad[0]) / static_cast<double>(N);
            for (std::size_t n = 0; n < N; ++n) {
                const double p =
                    std::max(static_cast<double>(xn->data[n * K + labels[n]]), floor);
                xn->grad[n * K + labels[n]] += static_cast<T>(-g / p);
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> mse_scalar_targets(const Tensor<T>& x, const std::vector<T>& targets) {
    const std::size_t N = targets.size();
    if (x.numel() != N)
        throw ConfigError("mse_scalar_targets: " + std::to_string(N) + " targets for tensor " +
                          shape_str(x.shape()));
    double total = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
        const double d = static_cast<double>(x.data()[n]) - static_cast<double>(targets[n]);
        total += d * d;
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(N)));
    if (want_tape<T>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        GradTape<T>::instance().record([xn, on, targets, N] {
            if (on->grad.empty()) return;
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const double g = static_cast<double>(on->grad[0]);
            for (std::size_t n = 0; n < N; ++n)
                xn->grad[n] += static_cast<T>(
                    g * 2.0 * (static_cast<double>(xn->data[n]) - static_cast<double>(targets[n])) /
                    static_cast<double>(N));
        });
    }
    return out;
}

#define IMF_INSTANTIATE_OPS(T)                                                                   \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
    template Tensor<T> affine(const Tensor<T>&, T, T);                                           \
    template Tensor<T> scalar_mul(const Tensor<T>&, T);                                          \
    template Tensor<T> sum(const Tensor<T>&);                                                    \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);   \
    template Tensor<T> maxpool2d(const Tensor<T>&, int, int, int);                               \
    template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                   RunningStats<T>&, bool, T, T);                                \
    template Tensor<T> relu(const Tensor<T>&);                                                   \
    template Tensor<T> sigmoid(const Tensor<T>&);                                                \
    template Tensor<T> softmax_rows(const Tensor<T>&);                                           \
    template Tensor<T> dropout(const Tensor<T>&, double, bool, Rng&);                            \
    template Tensor<T> global_avg_pool(const Tensor<T>&);                                        \
    template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                      \
    template Tensor<T> scale_per_sample(const Tensor<T>&, const Tensor<T>&);                     \
    template Tensor<T> scale_per_channel(const Tensor<T>&, const Tensor<T>&);                    \
    template Tensor<T> mul_rowvec(const Tensor<T>&, const std::vector<T>&);                      \
    template Tensor<T> sum_rows(const Tensor<T>&);                                               \
    template Tensor<T> cross_entropy(const Tensor<T>&, const std::vector<int>&);                 \
    template Tensor<T> nll_probs(const Tensor<T>&, const std::vector<int>&);                     \
    template Tensor<T> mse_scalar_targets(const Tensor<T>&, const std::vector<T>&);

IMF_INSTANTIATE_OPS(float)
IMF_INSTANTIATE_OPS(double)

#undef IMF_INSTANTIATE_OPS

}  // namespace imf
