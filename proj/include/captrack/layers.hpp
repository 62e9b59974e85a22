#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstring>
#include <vector>

#include "captrack/tensor.hpp"

// Layer kernels for the joint estimator: each forward op has an explicit
// backward counterpart; there is no general autodiff graph. Convolutions run
// as im2col + GEMM.

namespace captrack {
namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConst = Eigen::Map<const RowMat>;

/// C(m x n) = A(m x k) * B(k x n), optionally accumulating.
inline void gemm_nn(const double* a, int m, int k, const double* b, int n, double* c, bool acc) {
    MapConst A(a, m, k), B(b, k, n);
    MapMat C(c, m, n);
    if (acc)
        C.noalias() += A * B;
    else
        C.noalias() = A * B;
}

/// C(m x k) = A(m x n) * B(k x n)^T.
inline void gemm_nt(const double* a, int m, int n, const double* b, int k, double* c, bool acc) {
    MapConst A(a, m, n), B(b, k, n);
    MapMat C(c, m, k);
    if (acc)
        C.noalias() += A * B.transpose();
    else
        C.noalias() = A * B.transpose();
}

/// C(k x n) = A(m x k)^T * B(m x n).
inline void gemm_tn(const double* a, int m, int k, const double* b, int n, double* c, bool acc) {
    MapConst A(a, m, k), B(b, m, n);
    MapMat C(c, k, n);
    if (acc)
        C.noalias() += A.transpose() * B;
    else
        C.noalias() = A.transpose() * B;
}

inline int conv_out_dim(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

/// Reusable per-thread scratch for im2col matrices: these reach tens of MB,
/// so fresh allocations (and their page faults) dominate otherwise.
inline dvec& scratch(int which) {
    thread_local dvec bufs[4];
    return bufs[which];
}

/// Unfold x [C,H,W] into C*kh*kw rows of OH*OW starting at `col`. Writes
/// every element (zeroes included), so the buffer may hold stale data.
inline void im2col_into(const Tensor& x, int kh, int kw, int stride, int pad, double* col,
                        int oh, int ow) {
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const size_t plane = static_cast<size_t>(oh) * ow;
    for (int c = 0; c < C; ++c) {
        const double* xc = x.data.data() + static_cast<size_t>(c) * H * W;
        for (int kr = 0; kr < kh; ++kr) {
            for (int kc = 0; kc < kw; ++kc) {
                double* row = col + ((static_cast<size_t>(c) * kh + kr) * kw + kc) * plane;
                for (int r = 0; r < oh; ++r) {
                    int ih = r * stride - pad + kr;
                    double* dst = row + static_cast<size_t>(r) * ow;
                    if (ih < 0 || ih >= H) {
                        std::fill(dst, dst + ow, 0.0);
                        continue;
                    }
                    const double* src = xc + static_cast<size_t>(ih) * W;
                    if (stride == 1) {
                        int lo = std::max(0, pad - kc);
                        int hi = std::min(ow, W + pad - kc);
                        std::fill(dst, dst + std::max(0, lo), 0.0);
                        if (hi > lo)
                            std::memcpy(dst + lo, src + lo - pad + kc,
                                        static_cast<size_t>(hi - lo) * sizeof(double));
                        if (hi < ow) std::fill(dst + std::max(lo, hi), dst + ow, 0.0);
                    } else {
                        for (int q = 0; q < ow; ++q) {
                            int iw = q * stride - pad + kc;
                            dst[q] = (iw >= 0 && iw < W) ? src[iw] : 0.0;
                        }
                    }
                }
            }
        }
    }
}

inline void im2col(const Tensor& x, int kh, int kw, int stride, int pad, dvec& col, int oh,
                   int ow) {
    col.resize(static_cast<size_t>(x.dim(0)) * kh * kw * oh * ow);
    im2col_into(x, kh, kw, stride, pad, col.data(), oh, ow);
}

/// Fold C*kh*kw rows of col back into gx [C,H,W], accumulating.
inline void col2im_add_from(const double* col, int kh, int kw, int stride, int pad, Tensor& gx,
                            int oh, int ow) {
    const int C = gx.dim(0), H = gx.dim(1), W = gx.dim(2);
    const size_t plane = static_cast<size_t>(oh) * ow;
    for (int c = 0; c < C; ++c) {
        double* xc = gx.data.data() + static_cast<size_t>(c) * H * W;
        for (int kr = 0; kr < kh; ++kr) {
            for (int kc = 0; kc < kw; ++kc) {
                const double* row = col + ((static_cast<size_t>(c) * kh + kr) * kw + kc) * plane;
                for (int r = 0; r < oh; ++r) {
                    int ih = r * stride - pad + kr;
                    if (ih < 0 || ih >= H) continue;
                    const double* src = row + static_cast<size_t>(r) * ow;
                    double* dst = xc + static_cast<size_t>(ih) * W;
                    if (stride == 1) {
                        int lo = std::max(0, pad - kc);
                        int hi = std::min(ow, W + pad - kc);
                        const double* s = src + lo;
                        double* d = dst + lo - pad + kc;
                        for (int q = 0; q < hi - lo; ++q) d[q] += s[q];
                    } else {
                        for (int q = 0; q < ow; ++q) {
                            int iw = q * stride - pad + kc;
                            if (iw >= 0 && iw < W) dst[iw] += src[q];
                        }
                    }
                }
            }
        }
    }
}

inline void col2im_add(const dvec& col, int kh, int kw, int stride, int pad, Tensor& gx, int oh,
                       int ow) {
    col2im_add_from(col.data(), kh, kw, stride, pad, gx, oh, ow);
}

// ---------------------------------------------------------------------------
// Direct 3x3 stride-1 pad-1 convolution as nine shifted GEMMs. Avoids the
// im2col matrix (9x the input size), which dominates memory traffic in the
// ConvGRU. Each tap runs one GEMM over the valid flat range; the two columns
// that wrap across row boundaries are then corrected explicitly.
// ---------------------------------------------------------------------------

using StrideMat = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using StrideConst = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

struct TapRange {
    long a, b, s;  // output flat range [a,b), input offset s
};

inline TapRange tap_range(int dy, int dx, int H, int W) {
    long s = static_cast<long>(dy) * W + dx;
    long r0 = std::max(0, -dy), r1 = std::min(H, H - dy);
    long a = std::max(r0 * W, -s);
    long b = std::min(r1 * W, static_cast<long>(H) * W - s);
    return {a, b, s};
}

/// Rows r whose column-`col_in_row` output lies in [a, b).
inline std::pair<long, long> rows_covering(long a, long b, int W, int col_in_row) {
    long lo = (a - col_in_row + W - 1) / W;       // ceil((a - c) / W)
    long hi = (b - col_in_row + W - 1) / W;       // first row past the range
    return {std::max(lo, 0L), hi};
}

/// y[Cout,H,W] = bias + sum over taps; x [Cin,H,W].
inline void conv3x3_fwd(const Tensor& x, const Tensor& w, const Tensor& b, Tensor& y) {
    const int cin = x.dim(0), H = x.dim(1), W = x.dim(2), cout = w.dim(0);
    const long HW = static_cast<long>(H) * W;
    for (int c = 0; c < cout; ++c)
        std::fill(y.data.data() + c * HW, y.data.data() + (c + 1) * HW, b(c));
    dvec& wt = scratch(2);
    wt.resize(static_cast<size_t>(cout) * cin);
    for (int kr = 0; kr < 3; ++kr) {
        for (int kc = 0; kc < 3; ++kc) {
            for (int a = 0; a < cout; ++a)
                for (int bb = 0; bb < cin; ++bb)
                    wt[static_cast<size_t>(a) * cin + bb] = w(a, bb, kr, kc);
            MapConst Wt(wt.data(), cout, cin);
            TapRange tr = tap_range(kr - 1, kc - 1, H, W);
            if (tr.b <= tr.a) continue;
            StrideConst X(x.data.data() + tr.a + tr.s, cin, tr.b - tr.a,
                          Eigen::OuterStride<>(HW));
            StrideMat Y(y.data.data() + tr.a, cout, tr.b - tr.a, Eigen::OuterStride<>(HW));
            Y.noalias() += Wt * X;
            int dx = kc - 1;
            if (dx != 0) {
                int col = dx < 0 ? 0 : W - 1;
                auto [rlo, rhi] = rows_covering(tr.a, tr.b, W, col);
                for (long r = rlo; r < rhi; ++r) {
                    long oflat = r * W + col;
                    StrideConst xv(x.data.data() + oflat + tr.s, cin, 1, Eigen::OuterStride<>(HW));
                    StrideMat yv(y.data.data() + oflat, cout, 1, Eigen::OuterStride<>(HW));
                    yv.noalias() -= Wt * xv;
                }
            }
        }
    }
}

/// gx += adjoint of conv3x3_fwd; gx must be pre-zeroed or hold a partial sum.
inline void conv3x3_bwd_input(const Tensor& gy, const Tensor& w, Tensor& gx) {
    const int cin = gx.dim(0), H = gx.dim(1), W = gx.dim(2), cout = w.dim(0);
    const long HW = static_cast<long>(H) * W;
    dvec& wt = scratch(2);
    wt.resize(static_cast<size_t>(cout) * cin);
    for (int kr = 0; kr < 3; ++kr) {
        for (int kc = 0; kc < 3; ++kc) {
            for (int a = 0; a < cout; ++a)
                for (int bb = 0; bb < cin; ++bb)
                    wt[static_cast<size_t>(a) * cin + bb] = w(a, bb, kr, kc);
            MapConst Wt(wt.data(), cout, cin);
            TapRange tr = tap_range(kr - 1, kc - 1, H, W);
            if (tr.b <= tr.a) continue;
            StrideConst GY(gy.data.data() + tr.a, cout, tr.b - tr.a, Eigen::OuterStride<>(HW));
            StrideMat GX(gx.data.data() + tr.a + tr.s, cin, tr.b - tr.a, Eigen::OuterStride<>(HW));
            GX.noalias() += Wt.transpose() * GY;
            int dx = kc - 1;
            if (dx != 0) {
                int col = dx < 0 ? 0 : W - 1;
                auto [rlo, rhi] = rows_covering(tr.a, tr.b, W, col);
                for (long r = rlo; r < rhi; ++r) {
                    long oflat = r * W + col;
                    StrideConst gyv(gy.data.data() + oflat, cout, 1, Eigen::OuterStride<>(HW));
                    StrideMat gxv(gx.data.data() + oflat + tr.s, cin, 1, Eigen::OuterStride<>(HW));
                    gxv.noalias() -= Wt.transpose() * gyv;
                }
            }
        }
    }
}

/// gw[Cout,Cin,3,3] += d(loss)/d(w); gb[Cout] += d(loss)/d(b). Accumulates
/// tap products over column tiles so gy and x stream through cache once.
inline void conv3x3_bwd_weight(const Tensor& x, const Tensor& gy, Tensor& gw, Tensor& gb) {
    const int cin = x.dim(0), H = x.dim(1), W = x.dim(2), cout = gy.dim(0);
    const long HW = static_cast<long>(H) * W;
    const size_t mat = static_cast<size_t>(cout) * cin;
    dvec& gwt = scratch(2);
    gwt.assign(9 * mat, 0.0);
    const long tile = std::max<long>(3 * W, 2048);
    for (long t0 = 0; t0 < HW; t0 += tile) {
        const long t1 = std::min(HW, t0 + tile);
        int tap = 0;
        for (int kr = 0; kr < 3; ++kr) {
            for (int kc = 0; kc < 3; ++kc, ++tap) {
                TapRange tr = tap_range(kr - 1, kc - 1, H, W);
                long a = std::max(tr.a, t0), b = std::min(tr.b, t1);
                if (b <= a) continue;
                StrideConst GY(gy.data.data() + a, cout, b - a, Eigen::OuterStride<>(HW));
                StrideConst X(x.data.data() + a + tr.s, cin, b - a, Eigen::OuterStride<>(HW));
                MapMat GWt(gwt.data() + tap * mat, cout, cin);
                GWt.noalias() += GY * X.transpose();
            }
        }
    }
    int tap = 0;
    for (int kr = 0; kr < 3; ++kr) {
        for (int kc = 0; kc < 3; ++kc, ++tap) {
            MapMat GWt(gwt.data() + tap * mat, cout, cin);
            TapRange tr = tap_range(kr - 1, kc - 1, H, W);
            int dx = kc - 1;
            if (dx != 0 && tr.b > tr.a) {
                int col = dx < 0 ? 0 : W - 1;
                auto [rlo, rhi] = rows_covering(tr.a, tr.b, W, col);
                for (long r = rlo; r < rhi; ++r) {
                    long oflat = r * W + col;
                    StrideConst gyv(gy.data.data() + oflat, cout, 1, Eigen::OuterStride<>(HW));
                    StrideConst xv(x.data.data() + oflat + tr.s, cin, 1, Eigen::OuterStride<>(HW));
                    GWt.noalias() -= gyv * xv.transpose();
                }
            }
            for (int a = 0; a < cout; ++a)
                for (int bb = 0; bb < cin; ++bb)
                    gw(a, bb, kr, kc) += GWt(a, bb);
        }
    }
    for (int c = 0; c < cout; ++c) {
        const double* g = gy.data.data() + c * HW;
        double s = 0.0;
        for (long i = 0; i < HW; ++i) s += g[i];
        gb(c) += s;
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Cross-correlation of x [Cin,H,W] with w [Cout,Cin,kh,kw] plus bias [Cout].
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    require(x.rank() == 3 && w.rank() == 4, "conv2d: expects x rank 3, w rank 4");
    require(x.dim(0) == w.dim(1), "conv2d: input channels mismatch");
    const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    require(b.numel() == static_cast<size_t>(cout), "conv2d: bias size mismatch");
    const int oh = detail::conv_out_dim(x.dim(1), kh, stride, pad);
    const int ow = detail::conv_out_dim(x.dim(2), kw, stride, pad);
    require(oh > 0 && ow > 0, "conv2d: kernel larger than padded input");
    Tensor y = Tensor::uninit({cout, oh, ow});
    const int k = x.dim(0) * kh * kw;
    if (kh == 1 && kw == 1 && stride == 1 && pad == 0) {
        detail::gemm_nn(w.data.data(), cout, k, x.data.data(), oh * ow, y.data.data(), false);
    } else {
        dvec& col = detail::scratch(0);
        detail::im2col(x, kh, kw, stride, pad, col, oh, ow);
        detail::gemm_nn(w.data.data(), cout, k, col.data(), oh * ow, y.data.data(), false);
    }
    const size_t plane = static_cast<size_t>(oh) * ow;
    for (int c = 0; c < cout; ++c) {
        double* yc = y.data.data() + c * plane;
        for (size_t i = 0; i < plane; ++i) yc[i] += b(c);
    }
    return y;
}

/// Gradients of conv2d. gw/gb accumulate; gx is freshly computed.
inline Tensor conv2d_backward(const Tensor& x, const Tensor& w, int stride, int pad,
                              const Tensor& gy, Tensor& gw, Tensor& gb) {
    const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int oh = gy.dim(1), ow = gy.dim(2);
    const int k = x.dim(0) * kh * kw;
    const size_t plane = static_cast<size_t>(oh) * ow;
    for (int c = 0; c < cout; ++c) {
        const double* gyc = gy.data.data() + c * plane;
        double s = 0.0;
        for (size_t i = 0; i < plane; ++i) s += gyc[i];
        gb(c) += s;
    }
    if (kh == 1 && kw == 1 && stride == 1 && pad == 0) {
        detail::gemm_nt(gy.data.data(), cout, oh * ow, x.data.data(), k, gw.data.data(), true);
        Tensor gx = Tensor::uninit(x.shape);
        detail::gemm_tn(w.data.data(), cout, k, gy.data.data(), oh * ow, gx.data.data(), false);
        return gx;
    }
    dvec& col = detail::scratch(0);
    detail::im2col(x, kh, kw, stride, pad, col, oh, ow);
    detail::gemm_nt(gy.data.data(), cout, oh * ow, col.data(), k, gw.data.data(), true);
    dvec& gcol = detail::scratch(1);
    gcol.resize(static_cast<size_t>(k) * plane);
    detail::gemm_tn(w.data.data(), cout, k, gy.data.data(), oh * ow, gcol.data(), false);
    Tensor gx(x.shape);
    detail::col2im_add(gcol, kh, kw, stride, pad, gx, oh, ow);
    return gx;
}

// ---------------------------------------------------------------------------
// Transposed convolution
// ---------------------------------------------------------------------------

/// Transposed convolution ("upconv") of x [Cin,H,W] with w [Cin,Cout,kh,kw].
/// Output spatial size: (in-1)*stride - 2*pad + k + out_pad.
inline Tensor upconv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad = 0,
                       int out_pad = 0) {
    require(x.rank() == 3 && w.rank() == 4, "upconv2d: expects x rank 3, w rank 4");
    require(x.dim(0) == w.dim(0), "upconv2d: input channels mismatch");
    const int cin = w.dim(0), cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const int h = x.dim(1), wd = x.dim(2);
    const int oh = (h - 1) * stride - 2 * pad + kh + out_pad;
    const int ow = (wd - 1) * stride - 2 * pad + kw + out_pad;
    require(oh > 0 && ow > 0, "upconv2d: non-positive output size");
    const int k2 = cout * kh * kw;
    dvec& col = detail::scratch(0);
    col.resize(static_cast<size_t>(k2) * h * wd);
    // w viewed as [Cin x (Cout*kh*kw)] is contiguous row-major.
    detail::gemm_tn(w.data.data(), cin, k2, x.data.data(), h * wd, col.data(), false);
    Tensor y({cout, oh, ow});
    detail::col2im_add(col, kh, kw, stride, pad, y, h, wd);
    const size_t plane = static_cast<size_t>(oh) * ow;
    for (int c = 0; c < cout; ++c) {
        double* yc = y.data.data() + c * plane;
        for (size_t i = 0; i < plane; ++i) yc[i] += b(c);
    }
    return y;
}

inline Tensor upconv2d_backward(const Tensor& x, const Tensor& w, int stride, int pad, int out_pad,
                                const Tensor& gy, Tensor& gw, Tensor& gb) {
    (void)out_pad;  // trailing zero rows/cols of gy simply never get sampled
    const int cin = w.dim(0), cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const int h = x.dim(1), wd = x.dim(2);
    const int k2 = cout * kh * kw;
    dvec& col = detail::scratch(0);
    detail::im2col(gy, kh, kw, stride, pad, col, h, wd);
    Tensor gx(x.shape);
    detail::gemm_nn(w.data.data(), cin, k2, col.data(), h * wd, gx.data.data(), false);
    detail::gemm_nt(x.data.data(), cin, h * wd, col.data(), k2, gw.data.data(), true);
    const size_t plane = static_cast<size_t>(gy.dim(1)) * gy.dim(2);
    for (int c = 0; c < cout; ++c) {
        const double* gyc = gy.data.data() + c * plane;
        double s = 0.0;
        for (size_t i = 0; i < plane; ++i) s += gyc[i];
        gb(c) += s;
    }
    return gx;
}

// ---------------------------------------------------------------------------
// Batch normalization (per-frame statistics in training mode)
// ---------------------------------------------------------------------------

struct BnParams {
    Tensor gamma, beta, run_mean, run_var;

    explicit BnParams(int channels = 0)
        : gamma(Tensor::full({channels}, 1.0)),
          beta(Tensor::zeros({channels})),
          run_mean(Tensor::zeros({channels})),
          run_var(Tensor::full({channels}, 1.0)) {}
};

struct BnCache {
    Tensor xhat;
    std::vector<double> invstd;
    bool train = true;
};

/// Per-channel batch statistics of this call, for a training driver that
/// folds running stats outside worker threads.
struct BnBatchStats {
    std::vector<double> mean, var;
};

inline Tensor batch_norm(const Tensor& x, BnParams& p, bool train, double momentum = 0.9,
                         double eps = 1e-5, BnCache* cache = nullptr,
                         bool update_running = true, BnBatchStats* stats = nullptr) {
    const int C = x.dim(0);
    const size_t n = x.numel() / static_cast<size_t>(C);
    require(p.gamma.numel() == static_cast<size_t>(C), "batch_norm: channel mismatch");
    Tensor y = Tensor::uninit(x.shape);
    if (cache) {
        cache->xhat = Tensor::uninit(x.shape);
        cache->invstd.assign(C, 0.0);
        cache->train = train;
    }
    if (stats) {
        stats->mean.assign(static_cast<size_t>(C), 0.0);
        stats->var.assign(static_cast<size_t>(C), 0.0);
    }
    for (int c = 0; c < C; ++c) {
        const double* xc = x.data.data() + c * n;
        double* yc = y.data.data() + c * n;
        double mean, var;
        if (train) {
            double s = 0.0;
            for (size_t i = 0; i < n; ++i) s += xc[i];
            mean = s / static_cast<double>(n);
            double sv = 0.0;
            for (size_t i = 0; i < n; ++i) {
                double d = xc[i] - mean;
                sv += d * d;
            }
            var = sv / static_cast<double>(n);
            if (update_running) {
                p.run_mean(c) = momentum * p.run_mean(c) + (1.0 - momentum) * mean;
                p.run_var(c) = momentum * p.run_var(c) + (1.0 - momentum) * var;
            }
            if (stats) {
                stats->mean[static_cast<size_t>(c)] = mean;
                stats->var[static_cast<size_t>(c)] = var;
            }
        } else {
            mean = p.run_mean(c);
            var = p.run_var(c);
        }
        double invstd = 1.0 / std::sqrt(var + eps);
        double g = p.gamma(c), b = p.beta(c);
        if (cache) {
            cache->invstd[static_cast<size_t>(c)] = invstd;
            double* xh = cache->xhat.data.data() + c * n;
            for (size_t i = 0; i < n; ++i) {
                xh[i] = (xc[i] - mean) * invstd;
                yc[i] = g * xh[i] + b;
            }
        } else {
            for (size_t i = 0; i < n; ++i) yc[i] = g * (xc[i] - mean) * invstd + b;
        }
    }
    return y;
}

inline Tensor batch_norm_backward(const BnParams& p, const BnCache& cache, const Tensor& gy,
                                  Tensor& ggamma, Tensor& gbeta) {
    const int C = gy.dim(0);
    const size_t n = gy.numel() / static_cast<size_t>(C);
    Tensor gx = Tensor::uninit(gy.shape);
    for (int c = 0; c < C; ++c) {
        const double* gyc = gy.data.data() + c * n;
        const double* xh = cache.xhat.data.data() + c * n;
        double* gxc = gx.data.data() + c * n;
        double g = p.gamma(c), invstd = cache.invstd[static_cast<size_t>(c)];
        double sg = 0.0, sgx = 0.0;
        for (size_t i = 0; i < n; ++i) {
            sg += gyc[i];
            sgx += gyc[i] * xh[i];
        }
        ggamma(c) += sgx;
        gbeta(c) += sg;
        if (cache.train) {
            double mg = sg / static_cast<double>(n);
            double mgx = sgx / static_cast<double>(n);
            for (size_t i = 0; i < n; ++i)
                gxc[i] = g * invstd * (gyc[i] - mg - xh[i] * mgx);
        } else {
            for (size_t i = 0; i < n; ++i) gxc[i] = g * invstd * gyc[i];
        }
    }
    return gx;
}

// ---------------------------------------------------------------------------
// Pointwise activations
// ---------------------------------------------------------------------------

inline Tensor leaky_relu(const Tensor& x, double slope) {
    Tensor y = Tensor::uninit(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i)
        y.data[i] = x.data[i] > 0.0 ? x.data[i] : slope * x.data[i];
    return y;
}

inline Tensor leaky_relu_backward(const Tensor& x, double slope, const Tensor& gy) {
    Tensor gx = Tensor::uninit(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i)
        gx.data[i] = x.data[i] > 0.0 ? gy.data[i] : slope * gy.data[i];
    return gx;
}

inline Tensor sigmoid(const Tensor& x) {
    Tensor y = Tensor::uninit(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) y.data[i] = 1.0 / (1.0 + std::exp(-x.data[i]));
    return y;
}

/// Backward given the forward *output* y.
inline Tensor sigmoid_backward(const Tensor& y, const Tensor& gy) {
    Tensor gx = Tensor::uninit(y.shape);
    for (size_t i = 0; i < y.data.size(); ++i)
        gx.data[i] = gy.data[i] * y.data[i] * (1.0 - y.data[i]);
    return gx;
}

inline Tensor tanh_op(const Tensor& x) {
    Tensor y = Tensor::uninit(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) y.data[i] = std::tanh(x.data[i]);
    return y;
}

inline Tensor tanh_backward(const Tensor& y, const Tensor& gy) {
    Tensor gx = Tensor::uninit(y.shape);
    for (size_t i = 0; i < y.data.size(); ++i)
        gx.data[i] = gy.data[i] * (1.0 - y.data[i] * y.data[i]);
    return gx;
}

// ---------------------------------------------------------------------------
// Softmax over one axis
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& x, int axis) {
    require(axis >= 0 && axis < x.rank(), "softmax: axis out of range");
    const int n = x.dim(axis);
    require(n > 0, "softmax: empty axis");
    size_t inner = 1, outer = 1;
    for (int i = axis + 1; i < x.rank(); ++i) inner *= static_cast<size_t>(x.dim(i));
    for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(x.dim(i));
    Tensor y = Tensor::uninit(x.shape);
    for (size_t o = 0; o < outer; ++o) {
        for (size_t in = 0; in < inner; ++in) {
            const size_t base = o * n * inner + in;
            double m = -std::numeric_limits<double>::infinity();
            for (int i = 0; i < n; ++i) m = std::max(m, x.data[base + i * inner]);
            double s = 0.0;
            for (int i = 0; i < n; ++i) {
                double e = std::exp(x.data[base + i * inner] - m);
                y.data[base + i * inner] = e;
                s += e;
            }
            for (int i = 0; i < n; ++i) y.data[base + i * inner] /= s;
        }
    }
    return y;
}

/// Backward given the forward output y.
inline Tensor softmax_backward(const Tensor& y, int axis, const Tensor& gy) {
    const int n = y.dim(axis);
    size_t inner = 1, outer = 1;
    for (int i = axis + 1; i < y.rank(); ++i) inner *= static_cast<size_t>(y.dim(i));
    for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(y.dim(i));
    Tensor gx = Tensor::uninit(y.shape);
    for (size_t o = 0; o < outer; ++o) {
        for (size_t in = 0; in < inner; ++in) {
            const size_t base = o * n * inner + in;
            double s = 0.0;
            for (int i = 0; i < n; ++i) s += gy.data[base + i * inner] * y.data[base + i * inner];
            for (int i = 0; i < n; ++i)
                gx.data[base + i * inner] =
                    y.data[base + i * inner] * (gy.data[base + i * inner] - s);
        }
    }
    return gx;
}

// ---------------------------------------------------------------------------
// Fully connected / pooling / concat
// ---------------------------------------------------------------------------

/// y = W x + b for a flat input vector.
inline Tensor fully_connected(const Tensor& x, const Tensor& w, const Tensor& b) {
    const int m = w.dim(0), n = w.dim(1);
    require(x.numel() == static_cast<size_t>(n), "fully_connected: input size mismatch");
    require(b.numel() == static_cast<size_t>(m), "fully_connected: bias size mismatch");
    Tensor y({m});
    detail::gemm_nn(w.data.data(), m, n, x.data.data(), 1, y.data.data(), false);
    for (int i = 0; i < m; ++i) y(i) += b(i);
    return y;
}

inline Tensor fully_connected_backward(const Tensor& x, const Tensor& w, const Tensor& gy,
                                       Tensor& gw, Tensor& gb) {
    const int m = w.dim(0), n = w.dim(1);
    for (int i = 0; i < m; ++i) {
        gb(i) += gy(i);
        const double g = gy(i);
        double* gwrow = gw.data.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) gwrow[j] += g * x(j);
    }
    Tensor gx({n});
    detail::gemm_tn(w.data.data(), m, n, gy.data.data(), 1, gx.data.data(), false);
    return gx;
}

inline Tensor global_avg_pool(const Tensor& x) {
    const int C = x.dim(0);
    const size_t n = x.numel() / static_cast<size_t>(C);
    Tensor y({C});
    for (int c = 0; c < C; ++c) {
        const double* xc = x.data.data() + c * n;
        double s = 0.0;
        for (size_t i = 0; i < n; ++i) s += xc[i];
        y(c) = s / static_cast<double>(n);
    }
    return y;
}

inline Tensor global_avg_pool_backward(const std::vector<int>& xshape, const Tensor& gy) {
    Tensor gx = Tensor::uninit(xshape);
    const int C = xshape[0];
    const size_t n = gx.numel() / static_cast<size_t>(C);
    for (int c = 0; c < C; ++c) {
        double g = gy(c) / static_cast<double>(n);
        double* gxc = gx.data.data() + c * n;
        for (size_t i = 0; i < n; ++i) gxc[i] = g;
    }
    return gx;
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require(a.dim(1) == b.dim(1) && a.dim(2) == b.dim(2), "concat: spatial dims mismatch");
    Tensor y = Tensor::uninit({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
    std::memcpy(y.data.data(), a.data.data(), a.data.size() * sizeof(double));
    std::memcpy(y.data.data() + a.data.size(), b.data.data(), b.data.size() * sizeof(double));
    return y;
}

inline void split_channels(const Tensor& y, Tensor& a, Tensor& b) {
    std::memcpy(a.data.data(), y.data.data(), a.data.size() * sizeof(double));
    std::memcpy(b.data.data(), y.data.data() + a.data.size(), b.data.size() * sizeof(double));
}

// ---------------------------------------------------------------------------
// Squeeze-and-excitation block
// ---------------------------------------------------------------------------

struct SeParams {
    Tensor w1, b1, w2, b2;  // w1 [C/r, C], w2 [C, C/r]
};

struct SeCache {
    Tensor squeeze, hidden_pre, hidden, excite;
};

inline Tensor se_block(const Tensor& x, const SeParams& p, SeCache* cache = nullptr) {
    require(p.w1.dim(1) == x.dim(0) && p.w2.dim(0) == x.dim(0), "se_block: channel mismatch");
    Tensor s = global_avg_pool(x);
    Tensor h0 = fully_connected(s, p.w1, p.b1);
    Tensor h(h0.shape);
    for (size_t i = 0; i < h0.data.size(); ++i) h.data[i] = std::max(0.0, h0.data[i]);
    Tensor e = sigmoid(fully_connected(h, p.w2, p.b2));
    Tensor y = Tensor::uninit(x.shape);
    const int C = x.dim(0);
    const size_t n = x.numel() / static_cast<size_t>(C);
    for (int c = 0; c < C; ++c) {
        const double* xc = x.data.data() + c * n;
        double* yc = y.data.data() + c * n;
        for (size_t i = 0; i < n; ++i) yc[i] = xc[i] * e(c);
    }
    if (cache) *cache = SeCache{std::move(s), std::move(h0), std::move(h), std::move(e)};
    return y;
}

using SeGrads = SeParams;

inline Tensor se_block_backward(const Tensor& x, const SeParams& p, const SeCache& cache,
                                const Tensor& gy, SeGrads& g) {
    const int C = x.dim(0);
    const size_t n = x.numel() / static_cast<size_t>(C);
    Tensor ge = Tensor::uninit({C});
    Tensor gx = Tensor::uninit(x.shape);
    for (int c = 0; c < C; ++c) {
        const double* xc = x.data.data() + c * n;
        const double* gyc = gy.data.data() + c * n;
        double* gxc = gx.data.data() + c * n;
        double s = 0.0, e = cache.excite(c);
        for (size_t i = 0; i < n; ++i) {
            s += gyc[i] * xc[i];
            gxc[i] = gyc[i] * e;
        }
        ge(c) = s;
    }
    Tensor gpre2 = sigmoid_backward(cache.excite, ge);
    Tensor gh = fully_connected_backward(cache.hidden, p.w2, gpre2, g.w2, g.b2);
    for (size_t i = 0; i < gh.data.size(); ++i)
        if (cache.hidden_pre.data[i] <= 0.0) gh.data[i] = 0.0;
    Tensor gs = fully_connected_backward(cache.squeeze, p.w1, gh, g.w1, g.b1);
    Tensor gpool = global_avg_pool_backward(x.shape, gs);
    gx += gpool;
    return gx;
}

// ---------------------------------------------------------------------------
// Convolutional GRU step (3x3 gates, stride 1, pad 1)
// ---------------------------------------------------------------------------

struct GruParams {
    Tensor wz, bz, wr, br, wc, bc;  // w* [Ch, Ch+Cx, 3, 3]
};

struct GruCache {
    Tensor cat1;  // [h, x]
    Tensor cat2;  // [r*h, x]
    Tensor z, r, cand;
};

namespace detail {

/// wz and wr stacked along the output axis so both gates run as one conv.
inline Tensor stack_gate_weights(const Tensor& wz, const Tensor& wr) {
    Tensor wzr = Tensor::uninit({2 * wz.dim(0), wz.dim(1), 3, 3});
    std::memcpy(wzr.data.data(), wz.data.data(), wz.data.size() * sizeof(double));
    std::memcpy(wzr.data.data() + wz.data.size(), wr.data.data(),
                wr.data.size() * sizeof(double));
    return wzr;
}

}  // namespace detail

/// z = sig(conv[h,x]), r = sig(conv[h,x]), c = tanh(conv[r*h, x]),
/// h' = (1-z)*h + z*c. Both gate convolutions run as one stacked direct
/// 3x3 convolution.
inline Tensor conv_gru_step(const Tensor& h, const Tensor& x, const GruParams& p,
                            GruCache* cache = nullptr) {
    require(h.dim(1) == x.dim(1) && h.dim(2) == x.dim(2), "conv_gru_step: spatial dims differ");
    const int ch = h.dim(0), hh = h.dim(1), ww = h.dim(2);
    require(p.wz.dim(0) == ch && p.wz.dim(1) == ch + x.dim(0),
            "conv_gru_step: gate parameter shape mismatch");
    const size_t plane = static_cast<size_t>(hh) * ww;
    const size_t hn = h.data.size();

    Tensor cat1 = concat_channels(h, x);
    Tensor wzr = detail::stack_gate_weights(p.wz, p.wr);
    Tensor bzr = Tensor::uninit({2 * ch});
    std::memcpy(bzr.data.data(), p.bz.data.data(), p.bz.data.size() * sizeof(double));
    std::memcpy(bzr.data.data() + ch, p.br.data.data(), p.br.data.size() * sizeof(double));
    Tensor zr = Tensor::uninit({2 * ch, hh, ww});
    detail::conv3x3_fwd(cat1, wzr, bzr, zr);
    Tensor z = Tensor::uninit({ch, hh, ww}), r = Tensor::uninit({ch, hh, ww});
    {
        using Arr = Eigen::Map<Eigen::ArrayXd>;
        using CArr = Eigen::Map<const Eigen::ArrayXd>;
        Arr(z.data.data(), hn) = 1.0 / (1.0 + (-CArr(zr.data.data(), hn)).exp());
        Arr(r.data.data(), hn) = 1.0 / (1.0 + (-CArr(zr.data.data() + hn, hn)).exp());
    }

    Tensor cat2 = Tensor::uninit(cat1.shape);
    for (size_t i = 0; i < hn; ++i) cat2.data[i] = r.data[i] * h.data[i];
    std::memcpy(cat2.data.data() + hn, cat1.data.data() + hn,
                (cat1.data.size() - hn) * sizeof(double));
    Tensor cand = Tensor::uninit({ch, hh, ww});
    detail::conv3x3_fwd(cat2, p.wc, p.bc, cand);
    {
        using Arr = Eigen::Map<Eigen::ArrayXd>;
        Arr c(cand.data.data(), hn);
        c = c.tanh();
    }

    Tensor h2 = Tensor::uninit(h.shape);
    for (size_t i = 0; i < hn; ++i)
        h2.data[i] = (1.0 - z.data[i]) * h.data[i] + z.data[i] * cand.data[i];
    (void)plane;
    if (cache)
        *cache = GruCache{std::move(cat1), std::move(cat2), std::move(z), std::move(r),
                          std::move(cand)};
    return h2;
}

using GruGrads = GruParams;

struct GruStepGrads {
    Tensor gh, gx;
};

inline GruStepGrads conv_gru_backward(const GruParams& p, const GruCache& cache, int x_channels,
                                      const Tensor& gh2, GruGrads& g) {
    const int ch = gh2.dim(0), hh = gh2.dim(1), ww = gh2.dim(2);
    require(cache.cat1.dim(0) == ch + x_channels, "conv_gru_backward: x channel mismatch");
    const size_t plane = static_cast<size_t>(hh) * ww;
    const size_t hn = static_cast<size_t>(ch) * plane;
    const double* hdat = cache.cat1.data.data();  // h occupies the leading channels

    Tensor gz = Tensor::uninit({ch, hh, ww}), gcand = Tensor::uninit({ch, hh, ww});
    Tensor gh = Tensor::uninit({ch, hh, ww});
    for (size_t i = 0; i < hn; ++i) {
        double z = cache.z.data[i];
        gz.data[i] = gh2.data[i] * (cache.cand.data[i] - hdat[i]);
        gcand.data[i] = gh2.data[i] * z;
        gh.data[i] = gh2.data[i] * (1.0 - z);
    }

    // Candidate path.
    Tensor gpre_c = tanh_backward(cache.cand, gcand);
    detail::conv3x3_bwd_weight(cache.cat2, gpre_c, g.wc, g.bc);
    Tensor gcat2(cache.cat2.shape);
    detail::conv3x3_bwd_input(gpre_c, p.wc, gcat2);

    Tensor gr = Tensor::uninit({ch, hh, ww});
    Tensor gx = Tensor::uninit({x_channels, hh, ww});
    for (size_t i = 0; i < hn; ++i) {
        gr.data[i] = gcat2.data[i] * hdat[i];
        gh.data[i] += gcat2.data[i] * cache.r.data[i];
    }
    std::memcpy(gx.data.data(), gcat2.data.data() + hn, gx.data.size() * sizeof(double));

    // Both gates at once.
    Tensor gpre_zr = Tensor::uninit({2 * ch, hh, ww});
    for (size_t i = 0; i < hn; ++i) {
        double zv = cache.z.data[i];
        double rv = cache.r.data[i];
        gpre_zr.data[i] = gz.data[i] * zv * (1.0 - zv);
        gpre_zr.data[hn + i] = gr.data[i] * rv * (1.0 - rv);
    }
    Tensor gwzr({2 * ch, ch + x_channels, 3, 3});
    Tensor gbzr({2 * ch});
    detail::conv3x3_bwd_weight(cache.cat1, gpre_zr, gwzr, gbzr);
    for (size_t i = 0; i < g.wz.data.size(); ++i) g.wz.data[i] += gwzr.data[i];
    for (size_t i = 0; i < g.wr.data.size(); ++i)
        g.wr.data[i] += gwzr.data[g.wz.data.size() + i];
    for (int c = 0; c < ch; ++c) {
        g.bz(c) += gbzr(c);
        g.br(c) += gbzr(ch + c);
    }
    Tensor wzr = detail::stack_gate_weights(p.wz, p.wr);
    Tensor gcat1(cache.cat1.shape);
    detail::conv3x3_bwd_input(gpre_zr, wzr, gcat1);
    for (size_t i = 0; i < hn; ++i) gh.data[i] += gcat1.data[i];
    const double* gx1 = gcat1.data.data() + hn;
    for (size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += gx1[i];
    return GruStepGrads{std::move(gh), std::move(gx)};
}

}  // namespace captrack
