#pragma once

#include <cmath>
#include <cstdint>
#include <thread>
#include <vector>

#include "dfn/tensor.hpp"

namespace dfn {

enum class Mode { Train, Eval };

namespace detail {

// Dense kernels behind conv2d. Each output element accumulates over k in a
// fixed ascending order, so results are bitwise identical no matter how the
// rows are split across threads.

inline bool& in_parallel_worker() {
    thread_local bool flag = false;
    return flag;
}

inline void parallel_rows(std::int64_t rows, std::int64_t work_per_row,
                          const std::function<void(std::int64_t, std::int64_t)>& fn) {
    const unsigned hw = std::thread::hardware_concurrency();
    const std::int64_t total = rows * work_per_row;
    if (hw < 2 || rows < 2 || total < (1 << 16) || in_parallel_worker()) {
        fn(0, rows);
        return;
    }
    const std::int64_t nthreads = std::min<std::int64_t>(hw, rows);
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(nthreads));
    for (std::int64_t t = 0; t < nthreads; ++t) {
        const std::int64_t r0 = rows * t / nthreads;
        const std::int64_t r1 = rows * (t + 1) / nthreads;
        pool.emplace_back([&fn, r0, r1] {
            in_parallel_worker() = true;
            fn(r0, r1);
            in_parallel_worker() = false;
        });
    }
    for (auto& th : pool) th.join();
}

constexpr std::int64_t kGemmColTile = 1024;

/// C[M x N] += A[M x K] * B[K x N].
///
/// Columns are tiled so the active C rows stay cache-resident while B tiles
/// stream once per 4-row block; each C element still accumulates over k in
/// ascending order, so tiling and threading never change the result bits.
inline void gemm_acc(std::int64_t M, std::int64_t K, std::int64_t N,
                     const double* A, const double* B, double* C) {
    const std::int64_t tiles = (N + kGemmColTile - 1) / kGemmColTile;
    parallel_rows(tiles, M * K * kGemmColTile, [&](std::int64_t t0, std::int64_t t1) {
        for (std::int64_t t = t0; t < t1; ++t) {
            const std::int64_t j0 = t * kGemmColTile;
            const std::int64_t j1 = std::min(N, j0 + kGemmColTile);
            std::int64_t i = 0;
            for (; i + 4 <= M; i += 4) {
                double* c0 = C + (i + 0) * N;
                double* c1 = C + (i + 1) * N;
                double* c2 = C + (i + 2) * N;
                double* c3 = C + (i + 3) * N;
                for (std::int64_t k = 0; k < K; ++k) {
                    const double a0 = A[(i + 0) * K + k];
                    const double a1 = A[(i + 1) * K + k];
                    const double a2 = A[(i + 2) * K + k];
                    const double a3 = A[(i + 3) * K + k];
                    const double* b = B + k * N;
                    for (std::int64_t j = j0; j < j1; ++j) {
                        const double bv = b[j];
                        c0[j] += a0 * bv;
                        c1[j] += a1 * bv;
                        c2[j] += a2 * bv;
                        c3[j] += a3 * bv;
                    }
                }
            }
            for (; i < M; ++i) {
                double* c = C + i * N;
                for (std::int64_t k = 0; k < K; ++k) {
                    const double av = A[i * K + k];
                    const double* b = B + k * N;
                    for (std::int64_t j = j0; j < j1; ++j) c[j] += av * b[j];
                }
            }
        }
    });
}

/// C[M x N] += A[M x K] * B[N x K]^T (rows of B reused across 4 A rows).
/// Dots run over eight independent lanes combined in a fixed order, so the
/// reduction both vectorizes and stays deterministic.
inline void gemm_abT_acc(std::int64_t M, std::int64_t K, std::int64_t N,
                         const double* A, const double* B, double* C) {
    const std::int64_t blocks = (M + 3) / 4;
    parallel_rows(blocks, 4 * K * N, [&](std::int64_t b0, std::int64_t b1) {
        for (std::int64_t blk = b0; blk < b1; ++blk) {
            const std::int64_t i = blk * 4;
            const std::int64_t rows = std::min<std::int64_t>(4, M - i);
            for (std::int64_t j = 0; j < N; ++j) {
                const double* b = B + j * K;
                for (std::int64_t r = 0; r < rows; ++r) {
                    const double* a = A + (i + r) * K;
                    double lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
                    std::int64_t k = 0;
                    for (; k + 8 <= K; k += 8) {
                        for (int l = 0; l < 8; ++l) {
                            lane[l] += a[k + l] * b[k + l];
                        }
                    }
                    double s = ((lane[0] + lane[1]) + (lane[2] + lane[3])) +
                               ((lane[4] + lane[5]) + (lane[6] + lane[7]));
                    for (; k < K; ++k) s += a[k] * b[k];
                    C[(i + r) * N + j] += s;
                }
            }
        }
    });
}

/// C[M x N] += A[K x M]^T * B[K x N]
inline void gemm_aTb_acc(std::int64_t M, std::int64_t K, std::int64_t N,
                         const double* A, const double* B, double* C) {
    const std::int64_t tiles = (N + kGemmColTile - 1) / kGemmColTile;
    parallel_rows(tiles, M * K * kGemmColTile, [&](std::int64_t t0, std::int64_t t1) {
        for (std::int64_t t = t0; t < t1; ++t) {
            const std::int64_t j0 = t * kGemmColTile;
            const std::int64_t j1 = std::min(N, j0 + kGemmColTile);
            std::int64_t i = 0;
            for (; i + 4 <= M; i += 4) {
                double* c0 = C + (i + 0) * N;
                double* c1 = C + (i + 1) * N;
                double* c2 = C + (i + 2) * N;
                double* c3 = C + (i + 3) * N;
                for (std::int64_t k = 0; k < K; ++k) {
                    const double* ak = A + k * M + i;
                    const double a0 = ak[0], a1 = ak[1], a2 = ak[2], a3 = ak[3];
                    const double* b = B + k * N;
                    for (std::int64_t j = j0; j < j1; ++j) {
                        const double bv = b[j];
                        c0[j] += a0 * bv;
                        c1[j] += a1 * bv;
                        c2[j] += a2 * bv;
                        c3[j] += a3 * bv;
                    }
                }
            }
            for (; i < M; ++i) {
                double* c = C + i * N;
                for (std::int64_t k = 0; k < K; ++k) {
                    const double av = A[k * M + i];
                    const double* b = B + k * N;
                    for (std::int64_t j = j0; j < j1; ++j) c[j] += av * b[j];
                }
            }
        }
    });
}

struct ConvDims {
    std::int64_t batch, cin, h, w;
    std::int64_t cout, kh, kw;
    std::int64_t stride, pad;
    std::int64_t oh, ow;
    std::int64_t patch() const { return cin * kh * kw; }
    std::int64_t opixels() const { return oh * ow; }
};

inline ConvDims conv_dims(const Shape& x, const Shape& w, const Shape& b,
                          std::int64_t stride, std::int64_t pad) {
    if (x.size() != 4 || w.size() != 4) {
        throw ShapeError("conv2d expects 4-d input and weight, got " +
                         shape_str(x) + " and " + shape_str(w));
    }
    if (b.size() != 1 || b[0] != w[0]) {
        throw ShapeError("conv2d bias must be [Cout]=" + std::to_string(w[0]));
    }
    if (x[1] != w[1]) {
        throw ShapeError("conv2d channel mismatch: input has " +
                         std::to_string(x[1]) + ", weight expects " +
                         std::to_string(w[1]));
    }
    if (stride < 1 || pad < 0) throw ShapeError("conv2d: bad stride/padding");
    ConvDims d{x[0], x[1], x[2], x[3], w[0], w[2], w[3], stride, pad, 0, 0};
    const std::int64_t eh = d.h + 2 * pad - d.kh;
    const std::int64_t ew = d.w + 2 * pad - d.kw;
    if (eh < 0 || ew < 0) throw ShapeError("conv2d: kernel exceeds padded input");
    if (eh % stride != 0 || ew % stride != 0) {
        throw ShapeError("conv2d: output extent not integral for stride " +
                         std::to_string(stride));
    }
    d.oh = eh / stride + 1;
    d.ow = ew / stride + 1;
    return d;
}

/// Gathers conv patches: cols[(ci*kh+ky)*kw+kx][oy*ow+ox].
inline void im2col(const double* x, const ConvDims& d, double* cols) {
    for (std::int64_t ci = 0; ci < d.cin; ++ci) {
        const double* xc = x + ci * d.h * d.w;
        for (std::int64_t ky = 0; ky < d.kh; ++ky) {
            for (std::int64_t kx = 0; kx < d.kw; ++kx) {
                double* row = cols + ((ci * d.kh + ky) * d.kw + kx) * d.opixels();
                for (std::int64_t oy = 0; oy < d.oh; ++oy) {
                    const std::int64_t iy = oy * d.stride - d.pad + ky;
                    if (iy < 0 || iy >= d.h) {
                        for (std::int64_t ox = 0; ox < d.ow; ++ox)
                            row[oy * d.ow + ox] = 0.0;
                        continue;
                    }
                    for (std::int64_t ox = 0; ox < d.ow; ++ox) {
                        const std::int64_t ix = ox * d.stride - d.pad + kx;
                        row[oy * d.ow + ox] =
                            (ix >= 0 && ix < d.w) ? xc[iy * d.w + ix] : 0.0;
                    }
                }
            }
        }
    }
}

/// Scatter-add of column gradients back into the input image.
inline void col2im_acc(const double* cols, const ConvDims& d, double* dx) {
    for (std::int64_t ci = 0; ci < d.cin; ++ci) {
        double* xc = dx + ci * d.h * d.w;
        for (std::int64_t ky = 0; ky < d.kh; ++ky) {
            for (std::int64_t kx = 0; kx < d.kw; ++kx) {
                const double* row =
                    cols + ((ci * d.kh + ky) * d.kw + kx) * d.opixels();
                for (std::int64_t oy = 0; oy < d.oh; ++oy) {
                    const std::int64_t iy = oy * d.stride - d.pad + ky;
                    if (iy < 0 || iy >= d.h) continue;
                    for (std::int64_t ox = 0; ox < d.ow; ++ox) {
                        const std::int64_t ix = ox * d.stride - d.pad + kx;
                        if (ix >= 0 && ix < d.w)
                            xc[iy * d.w + ix] += row[oy * d.ow + ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// 2-d cross-correlation: x[B,Cin,H,W] * w[Cout,Cin,kh,kw] + b[Cout].
///
/// Forward and backward parallelize across batch items. Per-item weight and
/// bias contributions are folded back in ascending item order, which is the
/// exact accumulation order of the sequential loop, so threading never
/// changes a single bit of the result.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
                     std::int64_t stride = 1, std::int64_t padding = 0) {
    const auto d = detail::conv_dims(x.shape(), w.shape(), b.shape(), stride,
                                     padding);
    const std::int64_t opix = d.opixels(), patch = d.patch();
    std::vector<double> out(static_cast<std::size_t>(d.batch * d.cout * opix));
    detail::parallel_rows(d.batch, d.cout * patch * opix,
                          [&](std::int64_t b0, std::int64_t b1) {
        std::vector<double> cols(static_cast<std::size_t>(patch * opix));
        for (std::int64_t bi = b0; bi < b1; ++bi) {
            detail::im2col(x.raw() + bi * d.cin * d.h * d.w, d, cols.data());
            double* ob = out.data() + bi * d.cout * opix;
            for (std::int64_t co = 0; co < d.cout; ++co) {
                const double bias = b.raw()[co];
                for (std::int64_t p = 0; p < opix; ++p) ob[co * opix + p] = bias;
            }
            detail::gemm_acc(d.cout, patch, opix, w.raw(), cols.data(), ob);
        }
    });

    auto xn = x.node(), wn = w.node(), bn = b.node();
    return detail::make_op(
        {d.batch, d.cout, d.oh, d.ow}, std::move(out),
        detail::grad_parents({x, w, b}),
        [xn, wn, bn, d](detail::TensorNode* self) {
            const std::int64_t opix = d.opixels(), patch = d.patch();
            const std::size_t wsize = static_cast<std::size_t>(d.cout) * patch;
            std::vector<std::vector<double>> dw_parts, db_parts;
            if (wn->requires_grad) {
                dw_parts.assign(static_cast<std::size_t>(d.batch),
                                std::vector<double>(wsize, 0.0));
            }
            if (bn->requires_grad) {
                db_parts.assign(static_cast<std::size_t>(d.batch),
                                std::vector<double>(static_cast<std::size_t>(d.cout), 0.0));
            }
            detail::parallel_rows(d.batch, 2 * d.cout * patch * opix,
                                  [&](std::int64_t b0, std::int64_t b1) {
                std::vector<double> cols(static_cast<std::size_t>(patch * opix));
                std::vector<double> dcols;
                if (xn->requires_grad) {
                    dcols.assign(static_cast<std::size_t>(patch * opix), 0.0);
                }
                for (std::int64_t bi = b0; bi < b1; ++bi) {
                    const double* go = self->pass_grad.data() + bi * d.cout * opix;
                    if (bn->requires_grad) {
                        auto& db = db_parts[static_cast<std::size_t>(bi)];
                        for (std::int64_t co = 0; co < d.cout; ++co) {
                            double acc = 0.0;
                            for (std::int64_t p = 0; p < opix; ++p)
                                acc += go[co * opix + p];
                            db[static_cast<std::size_t>(co)] = acc;
                        }
                    }
                    if (wn->requires_grad) {
                        detail::im2col(xn->data.data() + bi * d.cin * d.h * d.w,
                                       d, cols.data());
                        detail::gemm_abT_acc(d.cout, opix, patch, go, cols.data(),
                                             dw_parts[static_cast<std::size_t>(bi)].data());
                    }
                    if (xn->requires_grad) {
                        std::fill(dcols.begin(), dcols.end(), 0.0);
                        detail::gemm_aTb_acc(patch, d.cout, opix, wn->data.data(),
                                             go, dcols.data());
                        detail::col2im_acc(dcols.data(), d,
                                           xn->pass_grad.data() +
                                               bi * d.cin * d.h * d.w);
                    }
                }
            });
            for (std::int64_t bi = 0; bi < d.batch; ++bi) {
                if (wn->requires_grad) {
                    const auto& dw = dw_parts[static_cast<std::size_t>(bi)];
                    for (std::size_t i = 0; i < wsize; ++i) wn->pass_grad[i] += dw[i];
                }
                if (bn->requires_grad) {
                    const auto& db = db_parts[static_cast<std::size_t>(bi)];
                    for (std::int64_t co = 0; co < d.cout; ++co)
                        bn->pass_grad[static_cast<std::size_t>(co)] += db[static_cast<std::size_t>(co)];
                }
            }
        });
}

inline Tensor leaky_relu(const Tensor& x, double slope) {
    std::vector<double> out(x.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x.raw()[i];
        out[i] = v >= 0.0 ? v : slope * v;
    }
    auto xn = x.node();
    return detail::make_op(x.shape(), std::move(out),
                           detail::grad_parents({x}),
                           [xn, slope](detail::TensorNode* self) {
                               const auto& g = self->pass_grad;
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   const double m =
                                       xn->data[i] >= 0.0 ? 1.0 : slope;
                                   detail::accum(xn, i, g[i] * m);
                               }
                           });
}

inline Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x.raw()[i];
        out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                          : std::exp(v) / (1.0 + std::exp(v));
    }
    auto xn = x.node();
    return detail::make_op(x.shape(), std::move(out),
                           detail::grad_parents({x}),
                           [xn](detail::TensorNode* self) {
                               const auto& g = self->pass_grad;
                               const auto& y = self->data;
                               for (std::size_t i = 0; i < g.size(); ++i)
                                   detail::accum(xn, i,
                                                 g[i] * y[i] * (1.0 - y[i]));
                           });
}

struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;

    explicit BatchNormState(std::int64_t channels = 0)
        : running_mean(static_cast<std::size_t>(channels), 0.0),
          running_var(static_cast<std::size_t>(channels), 1.0) {}
};

/// Batch normalization over [B,C,H,W]. Train mode normalizes by batch
/// statistics (biased variance) and updates the running stats in place;
/// eval mode normalizes by the running stats.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, BatchNormState& state, Mode mode,
                         double epsilon = 1e-5, double momentum = 0.1) {
    const auto& s = x.shape();
    if (s.size() != 4) throw ShapeError("batch_norm expects [B,C,H,W]");
    const std::int64_t B = s[0], C = s[1], H = s[2], W = s[3];
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
        throw ShapeError("batch_norm: gamma/beta must be [C]=" +
                         std::to_string(C));
    }
    if (static_cast<std::int64_t>(state.running_mean.size()) != C) {
        throw ShapeError("batch_norm: running stats sized for " +
                         std::to_string(state.running_mean.size()) +
                         " channels, input has " + std::to_string(C));
    }
    const std::int64_t plane = H * W;
    const std::int64_t n = B * plane;

    std::vector<double> mean(static_cast<std::size_t>(C), 0.0);
    std::vector<double> invstd(static_cast<std::size_t>(C), 0.0);
    if (mode == Mode::Train) {
        for (std::int64_t c = 0; c < C; ++c) {
            double acc = 0.0;
            for (std::int64_t bi = 0; bi < B; ++bi) {
                const double* p = x.raw() + (bi * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
            }
            const double mu = acc / static_cast<double>(n);
            double vacc = 0.0;
            for (std::int64_t bi = 0; bi < B; ++bi) {
                const double* p = x.raw() + (bi * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    const double dlt = p[i] - mu;
                    vacc += dlt * dlt;
                }
            }
            const double var = vacc / static_cast<double>(n);
            mean[c] = mu;
            invstd[c] = 1.0 / std::sqrt(var + epsilon);
            state.running_mean[c] =
                (1.0 - momentum) * state.running_mean[c] + momentum * mu;
            state.running_var[c] =
                (1.0 - momentum) * state.running_var[c] + momentum * var;
        }
    } else {
        for (std::int64_t c = 0; c < C; ++c) {
            mean[c] = state.running_mean[c];
            invstd[c] = 1.0 / std::sqrt(state.running_var[c] + epsilon);
        }
    }

    std::vector<double> out(x.data().size());
    for (std::int64_t bi = 0; bi < B; ++bi) {
        for (std::int64_t c = 0; c < C; ++c) {
            const double* p = x.raw() + (bi * C + c) * plane;
            double* o = out.data() + (bi * C + c) * plane;
            const double mu = mean[c], is = invstd[c];
            const double g = gamma.raw()[c], bt = beta.raw()[c];
            for (std::int64_t i = 0; i < plane; ++i)
                o[i] = g * (p[i] - mu) * is + bt;
        }
    }

    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    const bool train = mode == Mode::Train;
    return detail::make_op(
        s, std::move(out), detail::grad_parents({x, gamma, beta}),
        [xn, gn, bn, mean, invstd, B, C, plane, n,
         train](detail::TensorNode* self) {
            const auto& gout = self->pass_grad;
            for (std::int64_t c = 0; c < C; ++c) {
                const double mu = mean[c], is = invstd[c];
                const double gam = gn->data[c];
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (std::int64_t bi = 0; bi < B; ++bi) {
                    const double* xp = xn->data.data() + (bi * C + c) * plane;
                    const double* gp = gout.data() + (bi * C + c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        sum_dy += gp[i];
                        sum_dy_xhat += gp[i] * (xp[i] - mu) * is;
                    }
                }
                if (gn->requires_grad) gn->pass_grad[c] += sum_dy_xhat;
                if (bn->requires_grad) bn->pass_grad[c] += sum_dy;
                if (!xn->requires_grad) continue;
                if (train) {
                    // d/dx through the batch statistics.
                    const double inv_n = 1.0 / static_cast<double>(n);
                    for (std::int64_t bi = 0; bi < B; ++bi) {
                        const double* xp =
                            xn->data.data() + (bi * C + c) * plane;
                        const double* gp = gout.data() + (bi * C + c) * plane;
                        double* dp = xn->pass_grad.data() + (bi * C + c) * plane;
                        for (std::int64_t i = 0; i < plane; ++i) {
                            const double xhat = (xp[i] - mu) * is;
                            dp[i] += gam * is *
                                     (gp[i] - inv_n * sum_dy -
                                      inv_n * xhat * sum_dy_xhat);
                        }
                    }
                } else {
                    for (std::int64_t bi = 0; bi < B; ++bi) {
                        const double* gp = gout.data() + (bi * C + c) * plane;
                        double* dp = xn->pass_grad.data() + (bi * C + c) * plane;
                        for (std::int64_t i = 0; i < plane; ++i)
                            dp[i] += gam * is * gp[i];
                    }
                }
            }
        });
}

/// Nearest-neighbor 2x upsampling of [B,C,H,W].
inline Tensor upsample_nearest_2x(const Tensor& x) {
    const auto& s = x.shape();
    if (s.size() != 4) throw ShapeError("upsample_nearest_2x expects [B,C,H,W]");
    const std::int64_t B = s[0], C = s[1], H = s[2], W = s[3];
    std::vector<double> out(static_cast<std::size_t>(B * C * 4 * H * W));
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const double* p = x.raw() + bc * H * W;
        double* o = out.data() + bc * 4 * H * W;
        for (std::int64_t y = 0; y < 2 * H; ++y) {
            const double* row = p + (y / 2) * W;
            double* orow = o + y * 2 * W;
            for (std::int64_t xw = 0; xw < 2 * W; ++xw) orow[xw] = row[xw / 2];
        }
    }
    auto xn = x.node();
    return detail::make_op({B, C, 2 * H, 2 * W}, std::move(out),
                           detail::grad_parents({x}),
                           [xn, B, C, H, W](detail::TensorNode* self) {
                               for (std::int64_t bc = 0; bc < B * C; ++bc) {
                                   const double* g =
                                       self->pass_grad.data() + bc * 4 * H * W;
                                   double* d =
                                       xn->pass_grad.data() + bc * H * W;
                                   for (std::int64_t y = 0; y < 2 * H; ++y)
                                       for (std::int64_t xw = 0; xw < 2 * W;
                                            ++xw)
                                           d[(y / 2) * W + xw / 2] +=
                                               g[y * 2 * W + xw];
                               }
                           });
}

/// 2x average-pool downsampling of [B,C,H,W]; extents must be even.
inline Tensor downsample_avg_2x(const Tensor& x) {
    const auto& s = x.shape();
    if (s.size() != 4) throw ShapeError("downsample_avg_2x expects [B,C,H,W]");
    const std::int64_t B = s[0], C = s[1], H = s[2], W = s[3];
    if (H % 2 != 0 || W % 2 != 0) {
        throw ShapeError("downsample_avg_2x: extents must be even, got " +
                         shape_str(s));
    }
    const std::int64_t OH = H / 2, OW = W / 2;
    std::vector<double> out(static_cast<std::size_t>(B * C * OH * OW));
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const double* p = x.raw() + bc * H * W;
        double* o = out.data() + bc * OH * OW;
        for (std::int64_t y = 0; y < OH; ++y) {
            for (std::int64_t xw = 0; xw < OW; ++xw) {
                const double* q = p + 2 * y * W + 2 * xw;
                o[y * OW + xw] = 0.25 * (q[0] + q[1] + q[W] + q[W + 1]);
            }
        }
    }
    auto xn = x.node();
    return detail::make_op({B, C, OH, OW}, std::move(out),
                           detail::grad_parents({x}),
                           [xn, B, C, H, W, OH, OW](detail::TensorNode* self) {
                               for (std::int64_t bc = 0; bc < B * C; ++bc) {
                                   const double* g =
                                       self->pass_grad.data() + bc * OH * OW;
                                   double* d = xn->pass_grad.data() + bc * H * W;
                                   for (std::int64_t y = 0; y < OH; ++y) {
                                       for (std::int64_t xw = 0; xw < OW; ++xw) {
                                           const double gv =
                                               0.25 * g[y * OW + xw];
                                           double* q = d + 2 * y * W + 2 * xw;
                                           q[0] += gv;
                                           q[1] += gv;
                                           q[W] += gv;
                                           q[W + 1] += gv;
                                       }
                                   }
                               }
                           });
}

/// Stacks two [B,*,H,W] tensors along the channel axis.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != 4 || sb.size() != 4 || sa[0] != sb[0] || sa[2] != sb[2] ||
        sa[3] != sb[3]) {
        throw ShapeError("concat_channels: incompatible shapes " +
                         shape_str(sa) + " vs " + shape_str(sb));
    }
    const std::int64_t B = sa[0], Ca = sa[1], Cb = sb[1], plane = sa[2] * sa[3];
    std::vector<double> out(static_cast<std::size_t>(B * (Ca + Cb) * plane));
    for (std::int64_t bi = 0; bi < B; ++bi) {
        double* o = out.data() + bi * (Ca + Cb) * plane;
        std::copy_n(a.raw() + bi * Ca * plane, Ca * plane, o);
        std::copy_n(b.raw() + bi * Cb * plane, Cb * plane, o + Ca * plane);
    }
    auto an = a.node(), bn = b.node();
    return detail::make_op(
        {B, Ca + Cb, sa[2], sa[3]}, std::move(out),
        detail::grad_parents({a, b}),
        [an, bn, B, Ca, Cb, plane](detail::TensorNode* self) {
            for (std::int64_t bi = 0; bi < B; ++bi) {
                const double* g = self->pass_grad.data() + bi * (Ca + Cb) * plane;
                if (an->requires_grad) {
                    double* d = an->pass_grad.data() + bi * Ca * plane;
                    for (std::int64_t i = 0; i < Ca * plane; ++i) d[i] += g[i];
                }
                if (bn->requires_grad) {
                    double* d = bn->pass_grad.data() + bi * Cb * plane;
                    for (std::int64_t i = 0; i < Cb * plane; ++i)
                        d[i] += g[Ca * plane + i];
                }
            }
        });
}

}  // namespace dfn
