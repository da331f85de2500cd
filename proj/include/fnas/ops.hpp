#pragma once

// Differentiable primitives over fnas::Tensor.
//
// Every op takes the tape first; pass nullptr for inference. An op records a
// backward closure only when a tape is given and some input requires a grad.

#include <fnas/tensor.hpp>

#include <Eigen/Core>

#include <array>
#include <limits>

namespace fnas {

namespace detail {

inline bool tracking(Tape* tape, std::initializer_list<const Tensor*> inputs) {
    if (tape == nullptr) return false;
    for (const Tensor* t : inputs)
        if (t != nullptr && t->defined() && t->requires_grad()) return true;
    return false;
}

inline std::vector<real>& grad_of(const Tensor& t) { return ensure_grad(t.impl()); }

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank)
        throw Error(std::string(op) + ": expected rank " + std::to_string(rank) + " tensor, got " +
                    to_string(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw Error(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                    to_string(b.shape()));
}

struct ConvGeometry {
    std::size_t n, c, h, w;     // input
    std::size_t o, cg, og;      // output channels, input/output channels per group
    std::size_t kh, kw;
    std::size_t oh, ow;
    long stride, padding, dilation;

    // Range of output columns whose input column (ox*stride + offset) is inside [0, w).
    std::pair<long, long> valid_cols(long offset) const {
        long lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
        long hi_incl = (static_cast<long>(w) - 1 - offset);
        long hi = hi_incl < 0 ? 0 : hi_incl / stride + 1;
        hi = std::min(hi, static_cast<long>(ow));
        return {lo, std::max(lo, hi)};
    }
};

// out[n,o,y,x] = sum over (c, ky, kx) in that order of w * in. The naive oracle
// in the tests accumulates in the same order, so results agree bit for bit.
inline void conv_forward(const ConvGeometry& g, const real* in, const real* w, real* out) {
    const std::size_t in_plane = g.h * g.w, out_plane = g.oh * g.ow;
    const bool pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.padding == 0;
    for (std::size_t n = 0; n < g.n; ++n) {
        for (std::size_t o = 0; o < g.o; ++o) {
            real* op = out + (n * g.o + o) * out_plane;
            const std::size_t group = o / g.og;
            for (std::size_t c = 0; c < g.cg; ++c) {
                const real* ip = in + (n * g.c + group * g.cg + c) * in_plane;
                const real* wp = w + (o * g.cg + c) * g.kh * g.kw;
                if (pointwise) {
                    const real wv = wp[0];
                    for (std::size_t i = 0; i < out_plane; ++i) op[i] += wv * ip[i];
                    continue;
                }
                for (std::size_t ky = 0; ky < g.kh; ++ky) {
                    const long off_y = static_cast<long>(ky) * g.dilation - g.padding;
                    for (std::size_t kx = 0; kx < g.kw; ++kx) {
                        const real wv = wp[ky * g.kw + kx];
                        const long off_x = static_cast<long>(kx) * g.dilation - g.padding;
                        const auto [lo, hi] = g.valid_cols(off_x);
                        for (std::size_t oy = 0; oy < g.oh; ++oy) {
                            const long iy = static_cast<long>(oy) * g.stride + off_y;
                            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                            real* orow = op + oy * g.ow;
                            const real* irow = ip + iy * static_cast<long>(g.w) + off_x;
                            if (g.stride == 1) {
                                for (long ox = lo; ox < hi; ++ox) orow[ox] += wv * irow[ox];
                            } else {
                                for (long ox = lo; ox < hi; ++ox) orow[ox] += wv * irow[ox * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

inline void conv_backward_input(const ConvGeometry& g, const real* gout, const real* w, real* gin) {
    const std::size_t in_plane = g.h * g.w, out_plane = g.oh * g.ow;
    const bool pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.padding == 0;
    for (std::size_t n = 0; n < g.n; ++n) {
        for (std::size_t o = 0; o < g.o; ++o) {
            const real* gp = gout + (n * g.o + o) * out_plane;
            const std::size_t group = o / g.og;
            for (std::size_t c = 0; c < g.cg; ++c) {
                real* ip = gin + (n * g.c + group * g.cg + c) * in_plane;
                const real* wp = w + (o * g.cg + c) * g.kh * g.kw;
                if (pointwise) {
                    const real wv = wp[0];
                    for (std::size_t i = 0; i < out_plane; ++i) ip[i] += wv * gp[i];
                    continue;
                }
                for (std::size_t ky = 0; ky < g.kh; ++ky) {
                    const long off_y = static_cast<long>(ky) * g.dilation - g.padding;
                    for (std::size_t kx = 0; kx < g.kw; ++kx) {
                        const real wv = wp[ky * g.kw + kx];
                        const long off_x = static_cast<long>(kx) * g.dilation - g.padding;
                        const auto [lo, hi] = g.valid_cols(off_x);
                        for (std::size_t oy = 0; oy < g.oh; ++oy) {
                            const long iy = static_cast<long>(oy) * g.stride + off_y;
                            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                            const real* grow = gp + oy * g.ow;
                            real* irow = ip + iy * static_cast<long>(g.w) + off_x;
                            if (g.stride == 1) {
                                for (long ox = lo; ox < hi; ++ox) irow[ox] += wv * grow[ox];
                            } else {
                                for (long ox = lo; ox < hi; ++ox) irow[ox * g.stride] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

inline void conv_backward_weight(const ConvGeometry& g, const real* gout, const real* in, real* gw) {
    const std::size_t in_plane = g.h * g.w, out_plane = g.oh * g.ow;
    const bool pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.padding == 0;
    for (std::size_t n = 0; n < g.n; ++n) {
        for (std::size_t o = 0; o < g.o; ++o) {
            const real* gp = gout + (n * g.o + o) * out_plane;
            const std::size_t group = o / g.og;
            for (std::size_t c = 0; c < g.cg; ++c) {
                const real* ip = in + (n * g.c + group * g.cg + c) * in_plane;
                real* wp = gw + (o * g.cg + c) * g.kh * g.kw;
                if (pointwise) {
                    real acc = 0;
                    for (std::size_t i = 0; i < out_plane; ++i) acc += gp[i] * ip[i];
                    wp[0] += acc;
                    continue;
                }
                for (std::size_t ky = 0; ky < g.kh; ++ky) {
                    const long off_y = static_cast<long>(ky) * g.dilation - g.padding;
                    for (std::size_t kx = 0; kx < g.kw; ++kx) {
                        const long off_x = static_cast<long>(kx) * g.dilation - g.padding;
                        const auto [lo, hi] = g.valid_cols(off_x);
                        real acc = 0;
                        for (std::size_t oy = 0; oy < g.oh; ++oy) {
                            const long iy = static_cast<long>(oy) * g.stride + off_y;
                            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                            const real* grow = gp + oy * g.ow;
                            const real* irow = ip + iy * static_cast<long>(g.w) + off_x;
                            if (g.stride == 1) {
                                for (long ox = lo; ox < hi; ++ox) acc += grow[ox] * irow[ox];
                            } else {
                                for (long ox = lo; ox < hi; ++ox) acc += grow[ox] * irow[ox * g.stride];
                            }
                        }
                        wp[ky * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
}

// Dense (non-depthwise) convolutions run as per-image, per-group GEMMs over
// an im2col buffer; 1x1 stride-1 unpadded convs use the input directly.
using RowMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMat>;

inline bool direct_conv(const ConvGeometry& g) { return g.cg == 1 && g.og == 1; }
inline bool plain_pointwise(const ConvGeometry& g) {
    return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.padding == 0;
}

// col[(c, ky, kx), (oy, ox)] for one image and group.
inline void im2col(const ConvGeometry& g, const real* in, real* col) {
    const std::size_t out_plane = g.oh * g.ow;
    for (std::size_t c = 0; c < g.cg; ++c) {
        const real* ip = in + c * g.h * g.w;
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                real* row = col + ((c * g.kh + ky) * g.kw + kx) * out_plane;
                const long off_y = static_cast<long>(ky) * g.dilation - g.padding;
                const long off_x = static_cast<long>(kx) * g.dilation - g.padding;
                const auto [lo, hi] = g.valid_cols(off_x);
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    real* r = row + oy * g.ow;
                    const long iy = static_cast<long>(oy) * g.stride + off_y;
                    if (iy < 0 || iy >= static_cast<long>(g.h)) {
                        std::fill(r, r + g.ow, real(0));
                        continue;
                    }
                    const real* irow = ip + iy * static_cast<long>(g.w) + off_x;
                    std::fill(r, r + lo, real(0));
                    for (long ox = lo; ox < hi; ++ox) r[ox] = irow[ox * g.stride];
                    std::fill(r + hi, r + g.ow, real(0));
                }
            }
    }
}

inline void col2im_add(const ConvGeometry& g, const real* col, real* gin) {
    const std::size_t out_plane = g.oh * g.ow;
    for (std::size_t c = 0; c < g.cg; ++c) {
        real* ip = gin + c * g.h * g.w;
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const real* row = col + ((c * g.kh + ky) * g.kw + kx) * out_plane;
                const long off_y = static_cast<long>(ky) * g.dilation - g.padding;
                const long off_x = static_cast<long>(kx) * g.dilation - g.padding;
                const auto [lo, hi] = g.valid_cols(off_x);
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const long iy = static_cast<long>(oy) * g.stride + off_y;
                    if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                    real* irow = ip + iy * static_cast<long>(g.w) + off_x;
                    const real* r = row + oy * g.ow;
                    for (long ox = lo; ox < hi; ++ox) irow[ox * g.stride] += r[ox];
                }
            }
    }
}

// Eigen peels vectorized loops by pointer alignment, which reorders sums. Every
// product therefore runs on owned, maximally aligned matrices, so results do
// not depend on where tensor storage happens to be allocated.
struct GemmScratch {
    RowMat a, b, c;
};

inline GemmScratch& gemm_scratch() {
    thread_local GemmScratch s;
    return s;
}

inline void conv_forward_gemm(const ConvGeometry& g, const real* in, const real* w, real* out) {
    const auto out_plane = static_cast<Eigen::Index>(g.oh * g.ow);
    const auto k = static_cast<Eigen::Index>(g.cg * g.kh * g.kw);
    const auto og = static_cast<Eigen::Index>(g.og);
    const std::size_t groups = g.o / g.og;
    auto& s = gemm_scratch();
    for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t gr = 0; gr < groups; ++gr) {
            const real* x = in + (n * g.c + gr * g.cg) * g.h * g.w;
            if (plain_pointwise(g)) {
                s.b = ConstRowMap(x, k, out_plane);
            } else {
                s.b.resize(k, out_plane);
                im2col(g, x, s.b.data());
            }
            s.a = ConstRowMap(w + gr * g.og * static_cast<std::size_t>(k), og, k);
            s.c.noalias() = s.a * s.b;
            std::copy(s.c.data(), s.c.data() + s.c.size(), out + (n * g.o + gr * g.og) * static_cast<std::size_t>(out_plane));
        }
}

inline void conv_backward_input_gemm(const ConvGeometry& g, const real* gout, const real* w, real* gin) {
    const auto out_plane = static_cast<Eigen::Index>(g.oh * g.ow);
    const auto k = static_cast<Eigen::Index>(g.cg * g.kh * g.kw);
    const auto og = static_cast<Eigen::Index>(g.og);
    const std::size_t groups = g.o / g.og;
    auto& s = gemm_scratch();
    for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t gr = 0; gr < groups; ++gr) {
            s.a = ConstRowMap(w + gr * g.og * static_cast<std::size_t>(k), og, k);
            s.b = ConstRowMap(gout + (n * g.o + gr * g.og) * static_cast<std::size_t>(out_plane), og, out_plane);
            s.c.noalias() = s.a.transpose() * s.b;
            real* gx = gin + (n * g.c + gr * g.cg) * g.h * g.w;
            if (plain_pointwise(g)) {
                for (Eigen::Index i = 0; i < s.c.size(); ++i) gx[i] += s.c.data()[i];
            } else {
                col2im_add(g, s.c.data(), gx);
            }
        }
}

inline void conv_backward_weight_gemm(const ConvGeometry& g, const real* gout, const real* in, real* gw) {
    const auto out_plane = static_cast<Eigen::Index>(g.oh * g.ow);
    const auto k = static_cast<Eigen::Index>(g.cg * g.kh * g.kw);
    const auto og = static_cast<Eigen::Index>(g.og);
    const std::size_t groups = g.o / g.og;
    auto& s = gemm_scratch();
    for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t gr = 0; gr < groups; ++gr) {
            const real* x = in + (n * g.c + gr * g.cg) * g.h * g.w;
            if (plain_pointwise(g)) {
                s.b = ConstRowMap(x, k, out_plane);
            } else {
                s.b.resize(k, out_plane);
                im2col(g, x, s.b.data());
            }
            s.a = ConstRowMap(gout + (n * g.o + gr * g.og) * static_cast<std::size_t>(out_plane), og, out_plane);
            s.c.noalias() = s.a * s.b.transpose();
            real* gwp = gw + gr * g.og * static_cast<std::size_t>(k);
            for (Eigen::Index i = 0; i < s.c.size(); ++i) gwp[i] += s.c.data()[i];
        }
}

}  // namespace detail

struct Conv2dOptions {
    int stride = 1;
    int padding = 0;
    int dilation = 1;
    int groups = 1;
};

inline std::size_t conv_output_extent(std::size_t in, std::size_t k, const Conv2dOptions& o) {
    long span = static_cast<long>(in) + 2L * o.padding - static_cast<long>(o.dilation) * (static_cast<long>(k) - 1) - 1;
    if (span < 0) return 0;
    return static_cast<std::size_t>(span / o.stride + 1);
}

// Cross-correlation of x [N,C,H,W] with kernel [O, C/groups, kh, kw].
inline Tensor conv2d(Tape* tape, const Tensor& x, const Tensor& kernel, Conv2dOptions opt = {}) {
    detail::require_rank(x, 4, "conv2d");
    detail::require_rank(kernel, 4, "conv2d kernel");
    if (opt.stride < 1 || opt.dilation < 1 || opt.padding < 0 || opt.groups < 1)
        throw Error("conv2d: stride, dilation and groups must be >= 1 and padding >= 0");
    const auto& xs = x.shape();
    const auto& ks = kernel.shape();
    const std::size_t groups = static_cast<std::size_t>(opt.groups);
    if (xs[1] % groups != 0 || ks[0] % groups != 0)
        throw Error("conv2d: channels " + std::to_string(xs[1]) + " -> " + std::to_string(ks[0]) +
                    " not divisible by groups " + std::to_string(groups));
    if (ks[1] != xs[1] / groups)
        throw Error("conv2d: kernel " + to_string(ks) + " does not match input " + to_string(xs) +
                    " with groups " + std::to_string(groups));
    const std::size_t oh = conv_output_extent(xs[2], ks[2], opt);
    const std::size_t ow = conv_output_extent(xs[3], ks[3], opt);
    if (oh == 0 || ow == 0)
        throw Error("conv2d: non-positive output extent for input " + to_string(xs) + " kernel " +
                    to_string(ks));

    detail::ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ks[0], ks[1], ks[0] / groups, ks[2], ks[3],
                           oh, ow, opt.stride, opt.padding, opt.dilation};
    Tensor out = Tensor::zeros({g.n, g.o, oh, ow});
    if (detail::direct_conv(g))
        detail::conv_forward(g, x.data().data(), kernel.data().data(), out.mutable_data().data());
    else
        detail::conv_forward_gemm(g, x.data().data(), kernel.data().data(), out.mutable_data().data());

    if (detail::tracking(tape, {&x, &kernel})) {
        const bool gx = x.requires_grad(), gk = kernel.requires_grad();
        tape->record(out, [x, kernel, g, gx, gk](std::span<const real> gout) {
            const bool direct = detail::direct_conv(g);
            if (gx) {
                auto& gi = detail::grad_of(x);
                if (direct) detail::conv_backward_input(g, gout.data(), kernel.data().data(), gi.data());
                else detail::conv_backward_input_gemm(g, gout.data(), kernel.data().data(), gi.data());
            }
            if (gk) {
                auto& gw = detail::grad_of(kernel);
                if (direct) detail::conv_backward_weight(g, gout.data(), x.data().data(), gw.data());
                else detail::conv_backward_weight_gemm(g, gout.data(), x.data().data(), gw.data());
            }
        });
    }
    return out;
}

// Replaces each kernel's center tap with w_center - theta * sum(w). A conv with
// the folded kernel equals vanilla conv plus theta * (-x(p0) * sum(w)).
inline Tensor center_fold(Tape* tape, const Tensor& kernel, real theta) {
    detail::require_rank(kernel, 4, "center_fold");
    const auto& ks = kernel.shape();
    if (ks[2] % 2 == 0 || ks[3] % 2 == 0)
        throw Error("center_fold: kernel " + to_string(ks) + " has no center tap (even size)");
    const std::size_t taps = ks[2] * ks[3];
    const std::size_t center = (ks[2] / 2) * ks[3] + ks[3] / 2;
    const std::size_t planes = ks[0] * ks[1];
    std::vector<real> folded(kernel.data().begin(), kernel.data().end());
    for (std::size_t p = 0; p < planes; ++p) {
        const real* w = kernel.data().data() + p * taps;
        real s = 0;
        for (std::size_t t = 0; t < taps; ++t) s += w[t];
        folded[p * taps + center] = w[center] - theta * s;
    }
    Tensor out(ks, std::move(folded));
    if (detail::tracking(tape, {&kernel})) {
        tape->record(out, [kernel, taps, center, planes, theta](std::span<const real> gout) {
            auto& gk = detail::grad_of(kernel);
            for (std::size_t p = 0; p < planes; ++p) {
                const real gc = gout[p * taps + center];
                for (std::size_t t = 0; t < taps; ++t) gk[p * taps + t] += gout[p * taps + t] - theta * gc;
            }
        });
    }
    return out;
}

struct RunningStats {
    std::vector<real> mean;
    std::vector<real> var;

    static RunningStats identity(std::size_t channels) {
        return {std::vector<real>(channels, real(0)), std::vector<real>(channels, real(1))};
    }
};

struct BatchNormOptions {
    bool training = true;
    real momentum = real(0.1);
    real eps = real(1e-5);
};

// Per-channel normalization over (N, H, W). gamma/beta are optional (affine off
// when both are null). In training mode running stats, if given, are updated
// with the unbiased batch variance.
inline Tensor batch_norm(Tape* tape, const Tensor& x, const Tensor* gamma, const Tensor* beta,
                         RunningStats* stats, BatchNormOptions opt = {}) {
    detail::require_rank(x, 4, "batch_norm");
    const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    const std::size_t m = n * plane;
    if (gamma && gamma->numel() != c) throw Error("batch_norm: gamma size mismatch");
    if (beta && beta->numel() != c) throw Error("batch_norm: beta size mismatch");
    if (stats && (stats->mean.size() != c || stats->var.size() != c))
        throw Error("batch_norm: running stats size mismatch");
    if (!opt.training && !stats) throw Error("batch_norm: inference mode requires running statistics");
    if (opt.training && m < 2)
        throw Error("batch_norm: training mode needs at least 2 values per channel, got " + std::to_string(m));

    const real* xd = x.data().data();
    std::vector<real> out(x.numel());
    std::vector<real> xhat(x.numel());
    std::vector<real> inv_std(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        real mean, var;
        if (opt.training) {
            real s = 0;
            for (std::size_t b = 0; b < n; ++b) {
                const real* p = xd + (b * c + ch) * plane;
                for (std::size_t i = 0; i < plane; ++i) s += p[i];
            }
            mean = s / static_cast<real>(m);
            real ss = 0;
            for (std::size_t b = 0; b < n; ++b) {
                const real* p = xd + (b * c + ch) * plane;
                for (std::size_t i = 0; i < plane; ++i) ss += (p[i] - mean) * (p[i] - mean);
            }
            var = ss / static_cast<real>(m);
            if (stats) {
                const real unbiased = ss / static_cast<real>(m - 1);
                stats->mean[ch] = (1 - opt.momentum) * stats->mean[ch] + opt.momentum * mean;
                stats->var[ch] = (1 - opt.momentum) * stats->var[ch] + opt.momentum * unbiased;
            }
        } else {
            mean = stats->mean[ch];
            var = stats->var[ch];
        }
        const real is = real(1) / std::sqrt(var + opt.eps);
        inv_std[ch] = is;
        const real gm = gamma ? (*gamma)[ch] : real(1);
        const real bt = beta ? (*beta)[ch] : real(0);
        for (std::size_t b = 0; b < n; ++b) {
            const std::size_t base = (b * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                const real h = (xd[base + i] - mean) * is;
                xhat[base + i] = h;
                out[base + i] = gm * h + bt;
            }
        }
    }
    Tensor y(x.shape(), std::move(out));
    if (detail::tracking(tape, {&x, gamma, beta})) {
        Tensor g = gamma ? *gamma : Tensor();
        Tensor bt = beta ? *beta : Tensor();
        const bool gx = x.requires_grad();
        const bool training = opt.training;
        tape->record(y, [x, g, bt, gx, training, n, c, plane, m, xhat = std::move(xhat),
                         inv_std = std::move(inv_std)](std::span<const real> gout) {
            const bool gg = g.defined() && g.requires_grad();
            const bool gb = bt.defined() && bt.requires_grad();
            for (std::size_t ch = 0; ch < c; ++ch) {
                real sum_dy = 0, sum_dy_xhat = 0;
                for (std::size_t b = 0; b < n; ++b) {
                    const std::size_t base = (b * c + ch) * plane;
                    for (std::size_t i = 0; i < plane; ++i) {
                        sum_dy += gout[base + i];
                        sum_dy_xhat += gout[base + i] * xhat[base + i];
                    }
                }
                if (gg) detail::grad_of(g)[ch] += sum_dy_xhat;
                if (gb) detail::grad_of(bt)[ch] += sum_dy;
                if (!gx) continue;
                const real gm = g.defined() ? g[ch] : real(1);
                auto& gin = detail::grad_of(x);
                const real scale = gm * inv_std[ch];
                if (training) {
                    const real inv_m = real(1) / static_cast<real>(m);
                    for (std::size_t b = 0; b < n; ++b) {
                        const std::size_t base = (b * c + ch) * plane;
                        for (std::size_t i = 0; i < plane; ++i)
                            gin[base + i] += scale * (gout[base + i] - inv_m * sum_dy -
                                                      xhat[base + i] * inv_m * sum_dy_xhat);
                    }
                } else {
                    for (std::size_t b = 0; b < n; ++b) {
                        const std::size_t base = (b * c + ch) * plane;
                        for (std::size_t i = 0; i < plane; ++i) gin[base + i] += scale * gout[base + i];
                    }
                }
            }
        });
    }
    return y;
}

inline Tensor relu(Tape* tape, const Tensor& x) {
    std::vector<real> out(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] <= 0 ? real(0) : xd[i];  // NaN propagates
    Tensor y(x.shape(), std::move(out));
    if (detail::tracking(tape, {&x})) {
        tape->record(y, [x](std::span<const real> gout) {
            auto& g = detail::grad_of(x);
            auto xd = x.data();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (xd[i] > 0) g[i] += gout[i];
        });
    }
    return y;
}

inline Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    Tensor y(a.shape(), std::move(out));
    if (detail::tracking(tape, {&a, &b})) {
        const bool ga = a.requires_grad(), gb = b.requires_grad();
        tape->record(y, [a, b, ga, gb](std::span<const real> gout) {
            if (ga) {
                auto& g = detail::grad_of(a);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i];
            }
            if (gb) {
                auto& g = detail::grad_of(b);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i];
            }
        });
    }
    return y;
}

inline Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    Tensor y(a.shape(), std::move(out));
    if (detail::tracking(tape, {&a, &b})) {
        const bool ga = a.requires_grad(), gb = b.requires_grad();
        tape->record(y, [a, b, ga, gb](std::span<const real> gout) {
            if (ga) {
                auto& g = detail::grad_of(a);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i] * b[i];
            }
            if (gb) {
                auto& g = detail::grad_of(b);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i] * a[i];
            }
        });
    }
    return y;
}

inline Tensor scale(Tape* tape, const Tensor& x, real factor) {
    std::vector<real> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
    Tensor y(x.shape(), std::move(out));
    if (detail::tracking(tape, {&x})) {
        tape->record(y, [x, factor](std::span<const real> gout) {
            auto& g = detail::grad_of(x);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i] * factor;
        });
    }
    return y;
}

// Elementwise x + c for a constant vector c of the same length.
inline Tensor add_const(Tape* tape, const Tensor& x, std::span<const real> c) {
    if (c.size() != x.numel()) throw Error("add_const: size mismatch");
    std::vector<real> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + c[i];
    Tensor y(x.shape(), std::move(out));
    if (detail::tracking(tape, {&x})) {
        tape->record(y, [x](std::span<const real> gout) {
            auto& g = detail::grad_of(x);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i];
        });
    }
    return y;
}

inline Tensor sum(Tape* tape, const Tensor& x) {
    real s = 0;
    for (auto v : x.data()) s += v;
    Tensor y = Tensor::scalar(s);
    if (detail::tracking(tape, {&x})) {
        tape->record(y, [x](std::span<const real> gout) {
            auto& g = detail::grad_of(x);
            for (auto& v : g) v += gout[0];
        });
    }
    return y;
}

// Scalar holding x.data()[index].
inline Tensor pick(Tape* tape, const Tensor& x, std::size_t index) {
    if (index >= x.numel()) throw Error("pick: index out of range");
    Tensor y = Tensor::scalar(x[index]);
    if (detail::tracking(tape, {&x})) {
        tape->record(y, [x, index](std::span<const real> gout) { detail::grad_of(x)[index] += gout[0]; });
    }
    return y;
}

// Softmax over the last axis of a rank-1 or rank-2 tensor, max-subtracted.
inline Tensor softmax(Tape* tape, const Tensor& x) {
    if (x.rank() != 1 && x.rank() != 2) throw Error("softmax: expected rank 1 or 2, got " + to_string(x.shape()));
    const std::size_t cols = x.shape().back();
    const std::size_t rows = x.numel() / cols;
    std::vector<real> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const real* in = x.data().data() + r * cols;
        real* o = out.data() + r * cols;
        const real mx = *std::max_element(in, in + cols);
        real z = 0;
        for (std::size_t k = 0; k < cols; ++k) z += (o[k] = std::exp(in[k] - mx));
        for (std::size_t k = 0; k < cols; ++k) o[k] /= z;
    }
    Tensor y(x.shape(), std::move(out));
    if (detail::tracking(tape, {&x})) {
        tape->record(y, [x, y_vals = std::vector<real>(y.data().begin(), y.data().end()), rows,
                         cols](std::span<const real> gout) {
            auto& g = detail::grad_of(x);
            for (std::size_t r = 0; r < rows; ++r) {
                const real* s = y_vals.data() + r * cols;
                const real* go = gout.data() + r * cols;
                real dot = 0;
                for (std::size_t k = 0; k < cols; ++k) dot += go[k] * s[k];
                for (std::size_t k = 0; k < cols; ++k) g[r * cols + k] += s[k] * (go[k] - dot);
            }
        });
    }
    return y;
}

// Mean over the batch of -log softmax(logits)[label].
inline Tensor softmax_cross_entropy(Tape* tape, const Tensor& logits, std::span<const int> labels) {
    detail::require_rank(logits, 2, "softmax_cross_entropy");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    if (labels.size() != n) throw Error("softmax_cross_entropy: label count does not match batch");
    std::vector<real> probs(n * k);
    real loss = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
            throw Error("softmax_cross_entropy: label " + std::to_string(labels[i]) + " outside [0, " +
                        std::to_string(k) + ")");
        const real* row = logits.data().data() + i * k;
        const real mx = *std::max_element(row, row + k);
        real z = 0;
        for (std::size_t c = 0; c < k; ++c) z += std::exp(row[c] - mx);
        const real log_z = std::log(z) + mx;
        loss += log_z - row[labels[i]];
        for (std::size_t c = 0; c < k; ++c) probs[i * k + c] = std::exp(row[c] - log_z);
    }
    Tensor y = Tensor::scalar(loss / static_cast<real>(n));
    if (detail::tracking(tape, {&logits})) {
        std::vector<int> lab(labels.begin(), labels.end());
        tape->record(y, [logits, probs = std::move(probs), lab = std::move(lab), n, k](std::span<const real> gout) {
            auto& g = detail::grad_of(logits);
            const real s = gout[0] / static_cast<real>(n);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < k; ++c)
                    g[i * k + c] += s * (probs[i * k + c] - (static_cast<int>(c) == lab[i] ? real(1) : real(0)));
        });
    }
    return y;
}

// x [N,F] times w^T ([O,F]) plus optional bias [O].
inline Tensor linear(Tape* tape, const Tensor& x, const Tensor& w, const Tensor* bias = nullptr) {
    detail::require_rank(x, 2, "linear");
    detail::require_rank(w, 2, "linear weight");
    const std::size_t n = x.dim(0), f = x.dim(1), o = w.dim(0);
    if (w.dim(1) != f) throw Error("linear: weight " + to_string(w.shape()) + " vs input " + to_string(x.shape()));
    if (bias && bias->numel() != o) throw Error("linear: bias size mismatch");
    std::vector<real> out(n * o);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < o; ++j) {
            real acc = bias ? (*bias)[j] : real(0);
            const real* xr = x.data().data() + i * f;
            const real* wr = w.data().data() + j * f;
            for (std::size_t t = 0; t < f; ++t) acc += xr[t] * wr[t];
            out[i * o + j] = acc;
        }
    Tensor y({n, o}, std::move(out));
    if (detail::tracking(tape, {&x, &w, bias})) {
        Tensor b = bias ? *bias : Tensor();
        const bool gx = x.requires_grad(), gw = w.requires_grad(), gb = b.defined() && b.requires_grad();
        tape->record(y, [x, w, b, gx, gw, gb, n, f, o](std::span<const real> gout) {
            if (gx) {
                auto& g = detail::grad_of(x);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < o; ++j) {
                        const real go = gout[i * o + j];
                        for (std::size_t t = 0; t < f; ++t) g[i * f + t] += go * w[j * f + t];
                    }
            }
            if (gw) {
                auto& g = detail::grad_of(w);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < o; ++j) {
                        const real go = gout[i * o + j];
                        for (std::size_t t = 0; t < f; ++t) g[j * f + t] += go * x[i * f + t];
                    }
            }
            if (gb) {
                auto& g = detail::grad_of(b);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < o; ++j) g[j] += gout[i * o + j];
            }
        });
    }
    return y;
}

// [N,C,H,W] -> [N,C]
inline Tensor global_avg_pool(Tape* tape, const Tensor& x) {
    detail::require_rank(x, 4, "global_avg_pool");
    const std::size_t nc = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
    std::vector<real> out(nc);
    for (std::size_t i = 0; i < nc; ++i) {
        real s = 0;
        for (std::size_t p = 0; p < plane; ++p) s += x[i * plane + p];
        out[i] = s / static_cast<real>(plane);
    }
    Tensor y({x.dim(0), x.dim(1)}, std::move(out));
    if (detail::tracking(tape, {&x})) {
        tape->record(y, [x, nc, plane](std::span<const real> gout) {
            auto& g = detail::grad_of(x);
            for (std::size_t i = 0; i < nc; ++i) {
                const real v = gout[i] / static_cast<real>(plane);
                for (std::size_t p = 0; p < plane; ++p) g[i * plane + p] += v;
            }
        });
    }
    return y;
}

namespace detail {

struct PoolGeometry {
    std::size_t n, c, h, w, oh, ow;
    long k, stride, padding;
};

inline PoolGeometry pool_geometry(const Tensor& x, int k, int stride, int padding, const char* op) {
    require_rank(x, 4, op);
    if (k < 1 || stride < 1 || padding < 0 || 2 * padding > k)
        throw Error(std::string(op) + ": invalid window parameters");
    Conv2dOptions o{stride, padding, 1, 1};
    const auto oh = conv_output_extent(x.dim(2), static_cast<std::size_t>(k), o);
    const auto ow = conv_output_extent(x.dim(3), static_cast<std::size_t>(k), o);
    if (oh == 0 || ow == 0) throw Error(std::string(op) + ": non-positive output extent for " + to_string(x.shape()));
    return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), oh, ow, k, stride, padding};
}

}  // namespace detail

// Max over k x k windows; padding never wins.
inline Tensor max_pool2d(Tape* tape, const Tensor& x, int k, int stride, int padding) {
    const auto g = detail::pool_geometry(x, k, stride, padding, "max_pool2d");
    std::vector<real> out(g.n * g.c * g.oh * g.ow);
    std::vector<std::size_t> argmax(out.size());
    for (std::size_t p = 0; p < g.n * g.c; ++p) {
        const real* in = x.data().data() + p * g.h * g.w;
        for (std::size_t oy = 0; oy < g.oh; ++oy)
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
                real best = -std::numeric_limits<real>::infinity();
                std::size_t arg = 0;
                for (long ky = 0; ky < g.k; ++ky) {
                    const long iy = static_cast<long>(oy) * g.stride - g.padding + ky;
                    if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                    for (long kx = 0; kx < g.k; ++kx) {
                        const long ix = static_cast<long>(ox) * g.stride - g.padding + kx;
                        if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
                        const real v = in[iy * g.w + ix];
                        if (v > best) {
                            best = v;
                            arg = static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix);
                        }
                    }
                }
                const std::size_t o = (p * g.oh + oy) * g.ow + ox;
                out[o] = best;
                argmax[o] = p * g.h * g.w + arg;
            }
    }
    Tensor y({g.n, g.c, g.oh, g.ow}, std::move(out));
    if (detail::tracking(tape, {&x})) {
        tape->record(y, [x, argmax = std::move(argmax)](std::span<const real> gout) {
            auto& gx = detail::grad_of(x);
            for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += gout[i];
        });
    }
    return y;
}

// Mean over k x k windows, counting only in-bounds elements.
inline Tensor avg_pool2d(Tape* tape, const Tensor& x, int k, int stride, int padding) {
    const auto g = detail::pool_geometry(x, k, stride, padding, "avg_pool2d");
    auto window = [g](std::size_t oy, std::size_t ox) {
        const long y0 = std::max(0L, static_cast<long>(oy) * g.stride - g.padding);
        const long x0 = std::max(0L, static_cast<long>(ox) * g.stride - g.padding);
        const long y1 = std::min(static_cast<long>(g.h), static_cast<long>(oy) * g.stride - g.padding + g.k);
        const long x1 = std::min(static_cast<long>(g.w), static_cast<long>(ox) * g.stride - g.padding + g.k);
        return std::array<long, 4>{y0, x0, y1, x1};
    };
    std::vector<real> out(g.n * g.c * g.oh * g.ow);
    for (std::size_t p = 0; p < g.n * g.c; ++p) {
        const real* in = x.data().data() + p * g.h * g.w;
        for (std::size_t oy = 0; oy < g.oh; ++oy)
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
                const auto [y0, x0, y1, x1] = window(oy, ox);
                real s = 0;
                for (long iy = y0; iy < y1; ++iy)
                    for (long ix = x0; ix < x1; ++ix) s += in[iy * static_cast<long>(g.w) + ix];
                out[(p * g.oh + oy) * g.ow + ox] = s / static_cast<real>((y1 - y0) * (x1 - x0));
            }
    }
    Tensor y({g.n, g.c, g.oh, g.ow}, std::move(out));
    if (detail::tracking(tape, {&x})) {
        tape->record(y, [x, g, window](std::span<const real> gout) {
            auto& gx = detail::grad_of(x);
            for (std::size_t p = 0; p < g.n * g.c; ++p)
                for (std::size_t oy = 0; oy < g.oh; ++oy)
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const auto [y0, x0, y1, x1] = window(oy, ox);
                        const real v = gout[(p * g.oh + oy) * g.ow + ox] / static_cast<real>((y1 - y0) * (x1 - x0));
                        for (long iy = y0; iy < y1; ++iy)
                            for (long ix = x0; ix < x1; ++ix) gx[p * g.h * g.w + iy * static_cast<long>(g.w) + ix] += v;
                    }
        });
    }
    return y;
}

// Concatenation along axis 1 of rank-4 tensors sharing N, H, W.
inline Tensor concat_channels(Tape* tape, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw Error("concat_channels: no inputs");
    const std::size_t n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
    std::size_t c_total = 0;
    for (const auto& p : parts) {
        detail::require_rank(p, 4, "concat_channels");
        if (p.dim(0) != n || p.dim(2) != h || p.dim(3) != w)
            throw Error("concat_channels: incompatible part " + to_string(p.shape()));
        c_total += p.dim(1);
    }
    const std::size_t plane = h * w;
    std::vector<real> out(n * c_total * plane);
    for (std::size_t b = 0; b < n; ++b) {
        std::size_t off = 0;
        for (const auto& p : parts) {
            const std::size_t len = p.dim(1) * plane;
            std::copy_n(p.data().data() + b * len, len, out.data() + (b * c_total + off) * plane);
            off += p.dim(1);
        }
    }
    Tensor y({n, c_total, h, w}, std::move(out));
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (tape && any) {
        tape->record(y, [parts, n, c_total, plane](std::span<const real> gout) {
            std::size_t off = 0;
            for (const auto& p : parts) {
                const std::size_t len = p.dim(1) * plane;
                if (p.requires_grad()) {
                    auto& g = detail::grad_of(p);
                    for (std::size_t b = 0; b < n; ++b) {
                        const real* src = gout.data() + (b * c_total + off) * plane;
                        real* dst = g.data() + b * len;
                        for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
                    }
                }
                off += p.dim(1);
            }
        });
    }
    return y;
}

// Concatenation of rank-1 tensors.
inline Tensor concat1d(Tape* tape, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw Error("concat1d: no inputs");
    std::vector<real> out;
    bool any = false;
    for (const auto& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
        any = any || p.requires_grad();
    }
    const std::size_t total = out.size();
    Tensor y({total}, std::move(out));
    if (tape && any) {
        tape->record(y, [parts](std::span<const real> gout) {
            std::size_t off = 0;
            for (const auto& p : parts) {
                if (p.requires_grad()) {
                    auto& g = detail::grad_of(p);
                    for (std::size_t i = 0; i < p.numel(); ++i) g[i] += gout[off + i];
                }
                off += p.numel();
            }
        });
    }
    return y;
}

// Selects entries idx along axis `axis`; out.shape[axis] == idx.size().
inline Tensor index_select(Tape* tape, const Tensor& x, std::size_t axis, std::span<const std::size_t> idx) {
    if (axis >= x.rank()) throw Error("index_select: axis out of range");
    if (idx.empty()) throw Error("index_select: empty index");
    const auto& s = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t extent = s[axis];
    for (auto i : idx)
        if (i >= extent) throw Error("index_select: index " + std::to_string(i) + " out of range");
    Shape os = s;
    os[axis] = idx.size();
    std::vector<real> out(numel_of(os));
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < idx.size(); ++j)
            std::copy_n(x.data().data() + (o * extent + idx[j]) * inner, inner,
                        out.data() + (o * idx.size() + j) * inner);
    Tensor y(std::move(os), std::move(out));
    if (detail::tracking(tape, {&x})) {
        tape->record(y, [x, outer, inner, extent, ix = std::vector<std::size_t>(idx.begin(), idx.end())](
                            std::span<const real> gout) {
            auto& g = detail::grad_of(x);
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t j = 0; j < ix.size(); ++j) {
                    const real* src = gout.data() + (o * ix.size() + j) * inner;
                    real* dst = g.data() + (o * extent + ix[j]) * inner;
                    for (std::size_t t = 0; t < inner; ++t) dst[t] += src[t];
                }
        });
    }
    return y;
}

// Copy of `base` whose channels idx[j] are replaced by channel j of `sub`.
inline Tensor scatter_channels(Tape* tape, const Tensor& base, const Tensor& sub, std::span<const std::size_t> idx) {
    detail::require_rank(base, 4, "scatter_channels");
    detail::require_rank(sub, 4, "scatter_channels");
    const std::size_t n = base.dim(0), c = base.dim(1), plane = base.dim(2) * base.dim(3);
    if (sub.dim(0) != n || sub.dim(1) != idx.size() || sub.dim(2) != base.dim(2) || sub.dim(3) != base.dim(3))
        throw Error("scatter_channels: sub " + to_string(sub.shape()) + " incompatible with base " +
                    to_string(base.shape()));
    std::vector<char> replaced(c, 0);
    for (auto i : idx) {
        if (i >= c || replaced[i]) throw Error("scatter_channels: invalid or repeated channel index");
        replaced[i] = 1;
    }
    std::vector<real> out(base.data().begin(), base.data().end());
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t j = 0; j < idx.size(); ++j)
            std::copy_n(sub.data().data() + (b * idx.size() + j) * plane, plane,
                        out.data() + (b * c + idx[j]) * plane);
    Tensor y(base.shape(), std::move(out));
    if (detail::tracking(tape, {&base, &sub})) {
        const bool gb = base.requires_grad(), gs = sub.requires_grad();
        tape->record(y, [base, sub, gb, gs, n, c, plane, replaced = std::move(replaced),
                         ix = std::vector<std::size_t>(idx.begin(), idx.end())](std::span<const real> gout) {
            if (gb) {
                auto& g = detail::grad_of(base);
                for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        if (replaced[ch]) continue;
                        const std::size_t off = (b * c + ch) * plane;
                        for (std::size_t p = 0; p < plane; ++p) g[off + p] += gout[off + p];
                    }
            }
            if (gs) {
                auto& g = detail::grad_of(sub);
                for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t j = 0; j < ix.size(); ++j) {
                        const real* src = gout.data() + (b * c + ix[j]) * plane;
                        real* dst = g.data() + (b * ix.size() + j) * plane;
                        for (std::size_t p = 0; p < plane; ++p) dst[p] += src[p];
                    }
            }
        });
    }
    return y;
}

// Drops the first row and column: x[:, :, 1:, 1:].
inline Tensor crop_top_left(Tape* tape, const Tensor& x) {
    detail::require_rank(x, 4, "crop_top_left");
    const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h < 2 || w < 2) throw Error("crop_top_left: spatial extent too small " + to_string(x.shape()));
    std::vector<real> out(nc * (h - 1) * (w - 1));
    for (std::size_t p = 0; p < nc; ++p)
        for (std::size_t y = 1; y < h; ++y)
            std::copy_n(x.data().data() + (p * h + y) * w + 1, w - 1, out.data() + (p * (h - 1) + y - 1) * (w - 1));
    Tensor y({x.dim(0), x.dim(1), h - 1, w - 1}, std::move(out));
    if (detail::tracking(tape, {&x})) {
        tape->record(y, [x, nc, h, w](std::span<const real> gout) {
            auto& g = detail::grad_of(x);
            for (std::size_t p = 0; p < nc; ++p)
                for (std::size_t yy = 1; yy < h; ++yy)
                    for (std::size_t xx = 1; xx < w; ++xx)
                        g[(p * h + yy) * w + xx] += gout[(p * (h - 1) + yy - 1) * (w - 1) + xx - 1];
        });
    }
    return y;
}

// Multiplies channel c of a rank-4 tensor by the constant factors[c].
inline Tensor mul_channel_const(Tape* tape, const Tensor& x, std::span<const real> factors) {
    detail::require_rank(x, 4, "mul_channel_const");
    const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    if (factors.size() != c) throw Error("mul_channel_const: factor count mismatch");
    std::vector<real> out(x.numel());
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < plane; ++p) {
                const std::size_t i = (b * c + ch) * plane + p;
                out[i] = x[i] * factors[ch];
            }
    Tensor y(x.shape(), std::move(out));
    if (detail::tracking(tape, {&x})) {
        tape->record(y, [x, f = std::vector<real>(factors.begin(), factors.end()), n, c, plane](std::span<const real> gout) {
            auto& g = detail::grad_of(x);
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t p = 0; p < plane; ++p) {
                        const std::size_t i = (b * c + ch) * plane + p;
                        g[i] += gout[i] * f[ch];
                    }
        });
    }
    return y;
}

// sum_i weights[i] * xs[i] for same-shape xs and a rank-1 weight vector.
inline Tensor weighted_sum(Tape* tape, const std::vector<Tensor>& xs, const Tensor& weights) {
    if (xs.empty()) throw Error("weighted_sum: no inputs");
    if (weights.numel() != xs.size()) throw Error("weighted_sum: weight count mismatch");
    for (const auto& x : xs) detail::require_same_shape(x, xs[0], "weighted_sum");
    const std::size_t len = xs[0].numel();
    std::vector<real> out(len, real(0));
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const real wv = weights[i];
        const real* xd = xs[i].data().data();
        for (std::size_t t = 0; t < len; ++t) out[t] += wv * xd[t];
    }
    Tensor y(xs[0].shape(), std::move(out));
    bool any = weights.requires_grad();
    for (const auto& x : xs) any = any || x.requires_grad();
    if (tape && any) {
        tape->record(y, [xs, weights, len](std::span<const real> gout) {
            const bool gw = weights.requires_grad();
            for (std::size_t i = 0; i < xs.size(); ++i) {
                if (xs[i].requires_grad()) {
                    auto& g = detail::grad_of(xs[i]);
                    const real wv = weights[i];
                    for (std::size_t t = 0; t < len; ++t) g[t] += wv * gout[t];
                }
                if (gw) {
                    real dot = 0;
                    const real* xd = xs[i].data().data();
                    for (std::size_t t = 0; t < len; ++t) dot += gout[t] * xd[t];
                    detail::grad_of(weights)[i] += dot;
                }
            }
        });
    }
    return y;
}

}  // namespace fnas
