// The closed differentiable operator set. Every operator validates its input
// shapes, checks its output for non-finite values, and registers a backward
// rule on the active tape. Matrix products route through BLAS dgemm.
#pragma once

#include <algorithm>
#include <cstring>

#include "rcsl/tensor.hpp"

#if defined(__has_include)
#if __has_include(<cblas-openblas.h>)
#include <cblas-openblas.h>
#elif __has_include(<cblas.h>)
#include <cblas.h>
#else
#error "cblas header not found"
#endif
#else
#include <cblas.h>
#endif

namespace rcsl {
namespace ops {

namespace detail {

inline bool recording(std::initializer_list<const Tensor*> ins) {
    if (!active_tape()) return false;
    for (const Tensor* t : ins)
        if ((*t).requires_grad()) return true;
    return false;
}

inline Tensor make_output(Shape shape, bool track) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data.resize(static_cast<size_t>(numel_of(shape)));
    impl->shape = std::move(shape);
    impl->requires_grad = track;
    return Tensor(std::move(impl));
}

inline void check_finite(const char* op, const Tensor& t) {
    for (double v : t.data())
        if (!std::isfinite(v))
            fail("op '", op, "': non-finite value in output of shape ", shape_str(t.shape()));
}

inline void record(const char* op, std::function<void()> bw) {
    active_tape()->record(op, std::move(bw));
}

inline void dgemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, double alpha,
                  const double* a, int64_t lda, const double* b, int64_t ldb, double beta,
                  double* c, int64_t ldc) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb),
                beta, c, static_cast<int>(ldc));
}

// y = f(x) elementwise; df(x, y) is the exact derivative dy/dx.
template <typename F, typename DF>
Tensor unary(const char* op, const Tensor& x, F f, DF df) {
    bool track = recording({&x});
    Tensor y = make_output(x.shape(), track);
    const double* xv = x.ptr();
    double* yv = y.ptr();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) yv[i] = f(xv[i]);
    check_finite(op, y);
    if (track) {
        record(op, [xi = x.impl(), yi = y.impl(), df]() {
            if (yi->grad.empty()) return;
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            const int64_t n = xi->numel();
            for (int64_t i = 0; i < n; ++i)
                xi->grad[i] += yi->grad[i] * df(xi->data[i], yi->data[i]);
        });
    }
    return y;
}

// Broadcast layout for binary ops: rhs shape must equal lhs shape, be a strict
// suffix of it, or be a scalar.
struct Broadcast {
    int64_t repeat; // number of lhs blocks
    int64_t block;  // rhs length
};

inline Broadcast broadcast_of(const char* op, const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sb.size() > sa.size())
        fail("op '", op, "': rhs rank exceeds lhs (", shape_str(sa), " vs ", shape_str(sb), ")");
    size_t off = sa.size() - sb.size();
    for (size_t i = 0; i < sb.size(); ++i)
        if (sa[off + i] != sb[i])
            fail("op '", op, "': shape mismatch ", shape_str(sa), " vs ", shape_str(sb),
                 " (rhs must be equal, a suffix, or scalar)");
    int64_t block = b.numel();
    return Broadcast{block == 0 ? 0 : a.numel() / block, block};
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& x) {
    return detail::unary(
        "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

// Exact (erf) form. The forward pass caches the Gaussian cdf for backward,
// which otherwise dominates on another erf per element.
inline Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    bool track = detail::recording({&x});
    Tensor y = detail::make_output(x.shape(), track);
    const int64_t n = x.numel();
    const double* xv = x.ptr();
    double* yv = y.ptr();
    std::shared_ptr<std::vector<double>> cdf;
    if (track) cdf = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const double c = 0.5 * (1.0 + std::erf(xv[i] * inv_sqrt2));
        if (track) (*cdf)[static_cast<size_t>(i)] = c;
        yv[i] = xv[i] * c;
    }
    detail::check_finite("gelu", y);
    if (track) {
        detail::record("gelu", [xi = x.impl(), yi = y.impl(), cdf]() {
            if (yi->grad.empty()) return;
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            const int64_t n = xi->numel();
            for (int64_t i = 0; i < n; ++i) {
                const double v = xi->data[i];
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                xi->grad[i] += yi->grad[i] * ((*cdf)[static_cast<size_t>(i)] + v * pdf);
            }
        });
    }
    return y;
}

inline Tensor exp(const Tensor& x) {
    return detail::unary(
        "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
    return detail::unary(
        "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

// |x| with subgradient 0 at zero
inline Tensor abs(const Tensor& x) {
    return detail::unary(
        "abs", x, [](double v) { return std::fabs(v); },
        [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Tensor scale(const Tensor& x, double c) {
    return detail::unary(
        "scale", x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor add_scalar(const Tensor& x, double c) {
    return detail::unary(
        "add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

// ---------------------------------------------------------------------------
// Binary (rhs equal-shape, suffix-broadcast, or scalar)
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    auto bc = detail::broadcast_of("add", a, b);
    bool track = detail::recording({&a, &b});
    Tensor y = detail::make_output(a.shape(), track);
    const double* av = a.ptr();
    const double* bv = b.ptr();
    double* yv = y.ptr();
    for (int64_t r = 0; r < bc.repeat; ++r)
        for (int64_t i = 0; i < bc.block; ++i) yv[r * bc.block + i] = av[r * bc.block + i] + bv[i];
    detail::check_finite("add", y);
    if (track) {
        detail::record("add", [ai = a.impl(), bi = b.impl(), yi = y.impl(), bc]() {
            if (yi->grad.empty()) return;
            if (ai->requires_grad) {
                ai->ensure_grad();
                const int64_t n = ai->numel();
                for (int64_t i = 0; i < n; ++i) ai->grad[i] += yi->grad[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (int64_t r = 0; r < bc.repeat; ++r)
                    for (int64_t i = 0; i < bc.block; ++i) bi->grad[i] += yi->grad[r * bc.block + i];
            }
        });
    }
    return y;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    auto bc = detail::broadcast_of("sub", a, b);
    bool track = detail::recording({&a, &b});
    Tensor y = detail::make_output(a.shape(), track);
    const double* av = a.ptr();
    const double* bv = b.ptr();
    double* yv = y.ptr();
    for (int64_t r = 0; r < bc.repeat; ++r)
        for (int64_t i = 0; i < bc.block; ++i) yv[r * bc.block + i] = av[r * bc.block + i] - bv[i];
    detail::check_finite("sub", y);
    if (track) {
        detail::record("sub", [ai = a.impl(), bi = b.impl(), yi = y.impl(), bc]() {
            if (yi->grad.empty()) return;
            if (ai->requires_grad) {
                ai->ensure_grad();
                const int64_t n = ai->numel();
                for (int64_t i = 0; i < n; ++i) ai->grad[i] += yi->grad[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (int64_t r = 0; r < bc.repeat; ++r)
                    for (int64_t i = 0; i < bc.block; ++i) bi->grad[i] -= yi->grad[r * bc.block + i];
            }
        });
    }
    return y;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    auto bc = detail::broadcast_of("mul", a, b);
    bool track = detail::recording({&a, &b});
    Tensor y = detail::make_output(a.shape(), track);
    const double* av = a.ptr();
    const double* bv = b.ptr();
    double* yv = y.ptr();
    for (int64_t r = 0; r < bc.repeat; ++r)
        for (int64_t i = 0; i < bc.block; ++i) yv[r * bc.block + i] = av[r * bc.block + i] * bv[i];
    detail::check_finite("mul", y);
    if (track) {
        detail::record("mul", [ai = a.impl(), bi = b.impl(), yi = y.impl(), bc]() {
            if (yi->grad.empty()) return;
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (int64_t r = 0; r < bc.repeat; ++r)
                    for (int64_t i = 0; i < bc.block; ++i)
                        ai->grad[r * bc.block + i] += yi->grad[r * bc.block + i] * bi->data[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (int64_t r = 0; r < bc.repeat; ++r)
                    for (int64_t i = 0; i < bc.block; ++i)
                        bi->grad[i] += yi->grad[r * bc.block + i] * ai->data[r * bc.block + i];
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
    check(numel_of(shape) == x.numel(), "op 'reshape': cannot view ", shape_str(x.shape()),
          " as ", shape_str(shape));
    bool track = detail::recording({&x});
    Tensor y = detail::make_output(std::move(shape), track);
    std::memcpy(y.ptr(), x.ptr(), sizeof(double) * static_cast<size_t>(x.numel()));
    if (track) {
        detail::record("reshape", [xi = x.impl(), yi = y.impl()]() {
            if (yi->grad.empty()) return;
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            const int64_t n = xi->numel();
            for (int64_t i = 0; i < n; ++i) xi->grad[i] += yi->grad[i];
        });
    }
    return y;
}

namespace detail {

// Walk the output linearly; the source offset advances by the input stride of
// whichever axis each loop level maps to. Ranks 2-4 get explicit nests (the
// attention path permutes large rank-3/4 tensors every block).
inline void permute_copy(const Shape& in_shape, const std::vector<int>& perm, const double* src,
                         double* dst, bool accumulate_into_src_order) {
    const size_t r = in_shape.size();
    auto in_strides = strides_of(in_shape);
    std::vector<int64_t> stride(r), extent(r);
    for (size_t i = 0; i < r; ++i) {
        stride[i] = in_strides[static_cast<size_t>(perm[i])];
        extent[i] = in_shape[static_cast<size_t>(perm[i])];
    }
    const bool acc = accumulate_into_src_order;
    if (r == 2) {
        int64_t o = 0;
        for (int64_t i0 = 0; i0 < extent[0]; ++i0)
            for (int64_t i1 = 0; i1 < extent[1]; ++i1, ++o) {
                const int64_t s = i0 * stride[0] + i1 * stride[1];
                if (acc) dst[s] += src[o];
                else dst[o] = src[s];
            }
        return;
    }
    if (r == 3) {
        int64_t o = 0;
        for (int64_t i0 = 0; i0 < extent[0]; ++i0)
            for (int64_t i1 = 0; i1 < extent[1]; ++i1) {
                int64_t s = i0 * stride[0] + i1 * stride[1];
                for (int64_t i2 = 0; i2 < extent[2]; ++i2, ++o, s += stride[2]) {
                    if (acc) dst[s] += src[o];
                    else dst[o] = src[s];
                }
            }
        return;
    }
    if (r == 4) {
        int64_t o = 0;
        for (int64_t i0 = 0; i0 < extent[0]; ++i0)
            for (int64_t i1 = 0; i1 < extent[1]; ++i1)
                for (int64_t i2 = 0; i2 < extent[2]; ++i2) {
                    int64_t s = i0 * stride[0] + i1 * stride[1] + i2 * stride[2];
                    for (int64_t i3 = 0; i3 < extent[3]; ++i3, ++o, s += stride[3]) {
                        if (acc) dst[s] += src[o];
                        else dst[o] = src[s];
                    }
                }
        return;
    }
    // general rank: odometer walk
    std::vector<int64_t> idx(r, 0);
    const int64_t n = numel_of(in_shape);
    for (int64_t o = 0; o < n; ++o) {
        int64_t src_off = 0;
        for (size_t i = 0; i < r; ++i) src_off += idx[i] * stride[i];
        if (acc) dst[src_off] += src[o];
        else dst[o] = src[src_off];
        for (int i = static_cast<int>(r) - 1; i >= 0; --i) {
            if (++idx[static_cast<size_t>(i)] < extent[static_cast<size_t>(i)]) break;
            idx[static_cast<size_t>(i)] = 0;
        }
    }
}

} // namespace detail

// General axis permutation ("transpose"). perm[i] names the input axis that
// becomes output axis i.
inline Tensor transpose(const Tensor& x, std::vector<int> perm) {
    const size_t r = static_cast<size_t>(x.rank());
    check(perm.size() == r, "op 'transpose': perm rank ", perm.size(), " vs tensor rank ", r);
    std::vector<bool> seen(r, false);
    for (int p : perm) {
        check(p >= 0 && static_cast<size_t>(p) < r && !seen[static_cast<size_t>(p)],
              "op 'transpose': invalid permutation");
        seen[static_cast<size_t>(p)] = true;
    }
    Shape out_shape(r);
    for (size_t i = 0; i < r; ++i) out_shape[i] = x.shape()[static_cast<size_t>(perm[i])];
    bool track = detail::recording({&x});
    Tensor y = detail::make_output(out_shape, track);
    detail::permute_copy(x.shape(), perm, x.ptr(), y.ptr(), false);
    if (track) {
        detail::record("transpose", [xi = x.impl(), yi = y.impl(), perm]() {
            if (yi->grad.empty()) return;
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            detail::permute_copy(xi->shape, perm, yi->grad.data(), xi->grad.data(), true);
        });
    }
    return y;
}

// 2-D matrix transpose shorthand.
inline Tensor transpose2d(const Tensor& x) {
    check(x.rank() == 2, "op 'transpose': expected rank-2 tensor, got ", shape_str(x.shape()));
    return transpose(x, {1, 0});
}

// Concatenate along the last axis. All inputs must agree on the leading dims.
inline Tensor concat_last(const std::vector<Tensor>& xs) {
    check(!xs.empty(), "op 'concat': no inputs");
    const Shape& s0 = xs[0].shape();
    check(!s0.empty(), "op 'concat': inputs must have rank >= 1");
    int64_t total_last = 0;
    for (const Tensor& t : xs) {
        check(t.rank() == xs[0].rank(), "op 'concat': rank mismatch");
        for (size_t i = 0; i + 1 < s0.size(); ++i)
            check(t.shape()[i] == s0[i], "op 'concat': leading dim mismatch at axis ", i, ": ",
                  shape_str(t.shape()), " vs ", shape_str(s0));
        total_last += t.shape().back();
    }
    Shape out_shape = s0;
    out_shape.back() = total_last;
    bool track = false;
    for (const Tensor& t : xs)
        if (t.requires_grad()) track = true;
    track = track && active_tape() != nullptr;
    Tensor y = detail::make_output(out_shape, track);
    const int64_t rows = numel_of(out_shape) / total_last;
    int64_t off = 0;
    for (const Tensor& t : xs) {
        const int64_t w = t.shape().back();
        for (int64_t r = 0; r < rows; ++r)
            std::memcpy(y.ptr() + r * total_last + off, t.ptr() + r * w,
                        sizeof(double) * static_cast<size_t>(w));
        off += w;
    }
    if (track) {
        std::vector<std::shared_ptr<TensorImpl>> ins;
        for (const Tensor& t : xs) ins.push_back(t.impl());
        detail::record("concat", [ins, yi = y.impl(), rows, total_last]() {
            if (yi->grad.empty()) return;
            int64_t off = 0;
            for (const auto& xi : ins) {
                const int64_t w = xi->shape.back();
                if (xi->requires_grad) {
                    xi->ensure_grad();
                    for (int64_t r = 0; r < rows; ++r)
                        for (int64_t c = 0; c < w; ++c)
                            xi->grad[r * w + c] += yi->grad[r * total_last + off + c];
                }
                off += w;
            }
        });
    }
    return y;
}

// Narrow the last axis to [start, start+len).
inline Tensor slice_last(const Tensor& x, int64_t start, int64_t len) {
    const int64_t w = x.shape().back();
    check(start >= 0 && len >= 1 && start + len <= w, "op 'slice': range [", start, ", ",
          start + len, ") out of last axis of ", shape_str(x.shape()));
    Shape out_shape = x.shape();
    out_shape.back() = len;
    bool track = detail::recording({&x});
    Tensor y = detail::make_output(out_shape, track);
    const int64_t rows = x.numel() / w;
    for (int64_t r = 0; r < rows; ++r)
        std::memcpy(y.ptr() + r * len, x.ptr() + r * w + start,
                    sizeof(double) * static_cast<size_t>(len));
    if (track) {
        detail::record("slice", [xi = x.impl(), yi = y.impl(), start, len, rows, w]() {
            if (yi->grad.empty()) return;
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t c = 0; c < len; ++c)
                    xi->grad[r * w + start + c] += yi->grad[r * len + c];
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Matrix product
// ---------------------------------------------------------------------------
//
// Supported forms:
//   (m,k) x (k,n)                    -> (m,n)
//   (..., m, k) x (k, n)             -> (..., m, n)    rhs shared across batch
//   (..., m, k) x (..., k, n)        -> (..., m, n)    equal batch dims
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.rank() >= 2 && b.rank() >= 2, "op 'matmul': ranks must be >= 2, got ",
          shape_str(a.shape()), " x ", shape_str(b.shape()));
    const int64_t k = a.shape()[static_cast<size_t>(a.rank() - 1)];
    const int64_t m = a.shape()[static_cast<size_t>(a.rank() - 2)];
    check(b.shape()[static_cast<size_t>(b.rank() - 2)] == k, "op 'matmul': inner dims differ: ",
          shape_str(a.shape()), " x ", shape_str(b.shape()));
    const int64_t n = b.shape().back();
    bool track = detail::recording({&a, &b});

    if (b.rank() == 2) {
        // flatten every leading axis of a into rows
        const int64_t rows = a.numel() / k;
        Shape out_shape(a.shape().begin(), a.shape().end() - 1);
        out_shape.push_back(n);
        Tensor y = detail::make_output(std::move(out_shape), track);
        detail::dgemm(false, false, rows, n, k, 1.0, a.ptr(), k, b.ptr(), n, 0.0, y.ptr(), n);
        detail::check_finite("matmul", y);
        if (track) {
            detail::record("matmul", [ai = a.impl(), bi = b.impl(), yi = y.impl(), rows, n, k]() {
            if (yi->grad.empty()) return;
                if (ai->requires_grad) {
                    ai->ensure_grad();
                    detail::dgemm(false, true, rows, k, n, 1.0, yi->grad.data(), n,
                                  bi->data.data(), n, 1.0, ai->grad.data(), k);
                }
                if (bi->requires_grad) {
                    bi->ensure_grad();
                    detail::dgemm(true, false, k, n, rows, 1.0, ai->data.data(), k,
                                  yi->grad.data(), n, 1.0, bi->grad.data(), n);
                }
            });
        }
        return y;
    }

    check(a.rank() == b.rank(), "op 'matmul': batched form needs equal ranks: ",
          shape_str(a.shape()), " x ", shape_str(b.shape()));
    for (size_t i = 0; i + 2 < static_cast<size_t>(a.rank()); ++i)
        check(a.shape()[i] == b.shape()[i], "op 'matmul': batch dim ", i, " differs: ",
              shape_str(a.shape()), " x ", shape_str(b.shape()));
    const int64_t batch = a.numel() / (m * k);
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.back() = m;
    out_shape.push_back(n);
    Tensor y = detail::make_output(std::move(out_shape), track);
    for (int64_t q = 0; q < batch; ++q)
        detail::dgemm(false, false, m, n, k, 1.0, a.ptr() + q * m * k, k, b.ptr() + q * k * n, n,
                      0.0, y.ptr() + q * m * n, n);
    detail::check_finite("matmul", y);
    if (track) {
        detail::record("matmul", [ai = a.impl(), bi = b.impl(), yi = y.impl(), batch, m, n, k]() {
            if (yi->grad.empty()) return;
            for (int64_t q = 0; q < batch; ++q) {
                const double* ga = ai->data.data() + q * m * k;
                const double* gb = bi->data.data() + q * k * n;
                const double* gy = yi->grad.data() + q * m * n;
                if (ai->requires_grad) {
                    ai->ensure_grad();
                    detail::dgemm(false, true, m, k, n, 1.0, gy, n, gb, n, 1.0,
                                  ai->grad.data() + q * m * k, k);
                }
                if (bi->requires_grad) {
                    bi->ensure_grad();
                    detail::dgemm(true, false, k, n, m, 1.0, ga, k, gy, n, 1.0,
                                  bi->grad.data() + q * k * n, n);
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& x) {
    bool track = detail::recording({&x});
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor y = detail::make_output({}, track);
    y.ptr()[0] = s;
    detail::check_finite("sum", y);
    if (track) {
        detail::record("sum", [xi = x.impl(), yi = y.impl()]() {
            if (yi->grad.empty()) return;
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            const double g = yi->grad[0];
            for (double& gv : xi->grad) gv += g;
        });
    }
    return y;
}

inline Tensor mean_all(const Tensor& x) {
    check(x.numel() > 0, "op 'mean': empty tensor");
    return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

inline Tensor sum_last(const Tensor& x) {
    check(x.rank() >= 1, "op 'sum_last': needs rank >= 1");
    const int64_t w = x.shape().back();
    const int64_t rows = x.numel() / w;
    Shape out_shape(x.shape().begin(), x.shape().end() - 1);
    bool track = detail::recording({&x});
    Tensor y = detail::make_output(std::move(out_shape), track);
    for (int64_t r = 0; r < rows; ++r) {
        double s = 0.0;
        const double* xv = x.ptr() + r * w;
        for (int64_t i = 0; i < w; ++i) s += xv[i];
        y.ptr()[r] = s;
    }
    detail::check_finite("sum_last", y);
    if (track) {
        detail::record("sum_last", [xi = x.impl(), yi = y.impl(), rows, w]() {
            if (yi->grad.empty()) return;
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const double g = yi->grad[r];
                for (int64_t i = 0; i < w; ++i) xi->grad[r * w + i] += g;
            }
        });
    }
    return y;
}

inline Tensor mean_last(const Tensor& x) {
    check(x.rank() >= 1 && x.shape().back() > 0, "op 'mean_last': empty last axis");
    return scale(sum_last(x), 1.0 / static_cast<double>(x.shape().back()));
}

// ---------------------------------------------------------------------------
// Row-wise nonlinearities (last axis)
// ---------------------------------------------------------------------------

inline Tensor softmax_last(const Tensor& x) {
    check(x.rank() >= 1, "op 'softmax': needs rank >= 1");
    const int64_t w = x.shape().back();
    const int64_t rows = x.numel() / w;
    bool track = detail::recording({&x});
    Tensor y = detail::make_output(x.shape(), track);
    for (int64_t r = 0; r < rows; ++r) {
        const double* xv = x.ptr() + r * w;
        double* yv = y.ptr() + r * w;
        double mx = xv[0];
        for (int64_t i = 1; i < w; ++i) mx = std::max(mx, xv[i]);
        double s = 0.0;
        for (int64_t i = 0; i < w; ++i) {
            yv[i] = std::exp(xv[i] - mx);
            s += yv[i];
        }
        const double inv = 1.0 / s;
        for (int64_t i = 0; i < w; ++i) yv[i] *= inv;
    }
    detail::check_finite("softmax", y);
    if (track) {
        detail::record("softmax", [xi = x.impl(), yi = y.impl(), rows, w]() {
            if (yi->grad.empty()) return;
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const double* yv = yi->data.data() + r * w;
                const double* gy = yi->grad.data() + r * w;
                double dot = 0.0;
                for (int64_t i = 0; i < w; ++i) dot += gy[i] * yv[i];
                double* gx = xi->grad.data() + r * w;
                for (int64_t i = 0; i < w; ++i) gx[i] += yv[i] * (gy[i] - dot);
            }
        });
    }
    return y;
}

// Normalize rows (last axis), with gamma/beta of shape (last_dim).
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
    const int64_t w = x.shape().back();
    check(gamma.rank() == 1 && gamma.dim(0) == w && beta.rank() == 1 && beta.dim(0) == w,
          "op 'layer_norm': gamma/beta must be vectors of length ", w, ", got ",
          shape_str(gamma.shape()), " and ", shape_str(beta.shape()));
    const int64_t rows = x.numel() / w;
    bool track = detail::recording({&x, &gamma, &beta});
    Tensor y = detail::make_output(x.shape(), track);
    auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(x.numel()));
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const double* xv = x.ptr() + r * w;
        double mean = 0.0;
        for (int64_t i = 0; i < w; ++i) mean += xv[i];
        mean /= static_cast<double>(w);
        double var = 0.0;
        for (int64_t i = 0; i < w; ++i) {
            const double d = xv[i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(w);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(r)] = inv;
        double* hv = xhat->data() + r * w;
        double* yv = y.ptr() + r * w;
        for (int64_t i = 0; i < w; ++i) {
            hv[i] = (xv[i] - mean) * inv;
            yv[i] = hv[i] * gamma.ptr()[i] + beta.ptr()[i];
        }
    }
    detail::check_finite("layer_norm", y);
    if (track) {
        detail::record("layer_norm", [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(),
                                      yi = y.impl(), xhat, inv_std, rows, w]() {
            if (yi->grad.empty()) return;
            for (int64_t r = 0; r < rows; ++r) {
                const double* gy = yi->grad.data() + r * w;
                const double* hv = xhat->data() + r * w;
                if (gi->requires_grad) {
                    gi->ensure_grad();
                    for (int64_t i = 0; i < w; ++i) gi->grad[i] += gy[i] * hv[i];
                }
                if (bi->requires_grad) {
                    bi->ensure_grad();
                    for (int64_t i = 0; i < w; ++i) bi->grad[i] += gy[i];
                }
                if (xi->requires_grad) {
                    xi->ensure_grad();
                    const double inv = (*inv_std)[static_cast<size_t>(r)];
                    double sum_dh = 0.0, sum_dh_h = 0.0;
                    for (int64_t i = 0; i < w; ++i) {
                        const double dh = gy[i] * gi->data[i];
                        sum_dh += dh;
                        sum_dh_h += dh * hv[i];
                    }
                    const double inv_w = 1.0 / static_cast<double>(w);
                    double* gx = xi->grad.data() + r * w;
                    for (int64_t i = 0; i < w; ++i) {
                        const double dh = gy[i] * gi->data[i];
                        gx[i] += inv * (dh - inv_w * sum_dh - hv[i] * inv_w * sum_dh_h);
                    }
                }
            }
        });
    }
    return y;
}

// Rows scaled to unit L2 norm; the norm is floored at 1e-12 so degenerate rows
// do not divide by zero.
inline Tensor l2_normalize_last(const Tensor& x) {
    constexpr double kFloor = 1e-12;
    const int64_t w = x.shape().back();
    const int64_t rows = x.numel() / w;
    bool track = detail::recording({&x});
    Tensor y = detail::make_output(x.shape(), track);
    auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const double* xv = x.ptr() + r * w;
        double s = 0.0;
        for (int64_t i = 0; i < w; ++i) s += xv[i] * xv[i];
        const double nrm = std::max(std::sqrt(s), kFloor);
        (*norms)[static_cast<size_t>(r)] = nrm;
        double* yv = y.ptr() + r * w;
        for (int64_t i = 0; i < w; ++i) yv[i] = xv[i] / nrm;
    }
    detail::check_finite("l2_normalize", y);
    if (track) {
        detail::record("l2_normalize", [xi = x.impl(), yi = y.impl(), norms, rows, w]() {
            if (yi->grad.empty()) return;
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const double* yv = yi->data.data() + r * w;
                const double* gy = yi->grad.data() + r * w;
                const double nrm = (*norms)[static_cast<size_t>(r)];
                double dot = 0.0;
                for (int64_t i = 0; i < w; ++i) dot += gy[i] * yv[i];
                const bool floored = nrm <= kFloor;
                double* gx = xi->grad.data() + r * w;
                for (int64_t i = 0; i < w; ++i)
                    gx[i] += floored ? gy[i] / nrm : (gy[i] - yv[i] * dot) / nrm;
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Spatial ops (tensors laid out B x H x W x C)
// ---------------------------------------------------------------------------

// conv2d, stride 1, kernel 1x1 (pad 0) or 3x3 (pad 1): spatial size preserved.
// weight: (kh, kw, c_in, c_out), bias: (c_out). Runs as im2col + dgemm.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    check(x.rank() == 4, "op 'conv2d': input must be BxHxWxC, got ", shape_str(x.shape()));
    check(weight.rank() == 4, "op 'conv2d': weight must be (kh,kw,c_in,c_out), got ",
          shape_str(weight.shape()));
    const int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), cin = x.dim(3);
    const int64_t kh = weight.dim(0), kw = weight.dim(1);
    check(kh == kw && (kh == 1 || kh == 3), "op 'conv2d': kernel must be 1x1 or 3x3, got ", kh,
          "x", kw);
    check(weight.dim(2) == cin, "op 'conv2d': weight c_in ", weight.dim(2),
          " does not match input channels ", cin);
    const int64_t cout = weight.dim(3);
    check(bias.rank() == 1 && bias.dim(0) == cout, "op 'conv2d': bias must be (", cout, "), got ",
          shape_str(bias.shape()));
    const int64_t pad = kh / 2;
    const int64_t positions = b * h * w;
    const int64_t patch = kh * kw * cin;
    bool track = detail::recording({&x, &weight, &bias});

    // im2col: rows = output positions, cols = receptive field
    auto cols = std::make_shared<std::vector<double>>(
        static_cast<size_t>(positions * patch), 0.0);
    {
        double* cv = cols->data();
        const double* xv = x.ptr();
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t i = 0; i < h; ++i)
                for (int64_t j = 0; j < w; ++j) {
                    double* row = cv + ((bi * h + i) * w + j) * patch;
                    for (int64_t di = 0; di < kh; ++di) {
                        const int64_t si = i + di - pad;
                        if (si < 0 || si >= h) continue;
                        for (int64_t dj = 0; dj < kw; ++dj) {
                            const int64_t sj = j + dj - pad;
                            if (sj < 0 || sj >= w) continue;
                            std::memcpy(row + (di * kw + dj) * cin,
                                        xv + ((bi * h + si) * w + sj) * cin,
                                        sizeof(double) * static_cast<size_t>(cin));
                        }
                    }
                }
    }
    Tensor y = detail::make_output({b, h, w, cout}, track);
    detail::dgemm(false, false, positions, cout, patch, 1.0, cols->data(), patch, weight.ptr(),
                  cout, 0.0, y.ptr(), cout);
    {
        double* yv = y.ptr();
        const double* bv = bias.ptr();
        for (int64_t p = 0; p < positions; ++p)
            for (int64_t c = 0; c < cout; ++c) yv[p * cout + c] += bv[c];
    }
    detail::check_finite("conv2d", y);
    if (track) {
        detail::record("conv2d", [xi = x.impl(), wi = weight.impl(), bi2 = bias.impl(),
                                  yi = y.impl(), cols, b, h, w, cin, cout, kh, kw, pad, positions,
                                  patch]() {
            if (yi->grad.empty()) return;
            const double* gy = yi->grad.data();
            if (bi2->requires_grad) {
                bi2->ensure_grad();
                for (int64_t p = 0; p < positions; ++p)
                    for (int64_t c = 0; c < cout; ++c) bi2->grad[c] += gy[p * cout + c];
            }
            if (wi->requires_grad) {
                wi->ensure_grad();
                detail::dgemm(true, false, patch, cout, positions, 1.0, cols->data(), patch, gy,
                              cout, 1.0, wi->grad.data(), cout);
            }
            if (xi->requires_grad) {
                xi->ensure_grad();
                std::vector<double> dcols(static_cast<size_t>(positions * patch));
                detail::dgemm(false, true, positions, patch, cout, 1.0, gy, cout,
                              wi->data.data(), cout, 0.0, dcols.data(), patch);
                double* gx = xi->grad.data();
                for (int64_t bi = 0; bi < b; ++bi)
                    for (int64_t i = 0; i < h; ++i)
                        for (int64_t j = 0; j < w; ++j) {
                            const double* row = dcols.data() + ((bi * h + i) * w + j) * patch;
                            for (int64_t di = 0; di < kh; ++di) {
                                const int64_t si = i + di - pad;
                                if (si < 0 || si >= h) continue;
                                for (int64_t dj = 0; dj < kw; ++dj) {
                                    const int64_t sj = j + dj - pad;
                                    if (sj < 0 || sj >= w) continue;
                                    double* dst = gx + ((bi * h + si) * w + sj) * cin;
                                    const double* src = row + (di * kw + dj) * cin;
                                    for (int64_t c = 0; c < cin; ++c) dst[c] += src[c];
                                }
                            }
                        }
            }
        });
    }
    return y;
}

// Bilinear 2x upsampling, align-corners-false: output pixel o samples input
// coordinate (o + 0.5)/2 - 0.5, clamped to the valid range.
inline Tensor bilinear_upsample_2x(const Tensor& x) {
    check(x.rank() == 4, "op 'bilinear_upsample_2x': input must be BxHxWxC, got ",
          shape_str(x.shape()));
    const int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    check(h >= 1 && w >= 1, "op 'bilinear_upsample_2x': empty spatial dims in ",
          shape_str(x.shape()));
    const int64_t oh = 2 * h, ow = 2 * w;
    struct Lerp {
        int64_t lo, hi;
        double wlo, whi;
    };
    auto table = [](int64_t out_n, int64_t in_n) {
        std::vector<Lerp> t(static_cast<size_t>(out_n));
        for (int64_t o = 0; o < out_n; ++o) {
            double s = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
            s = std::min(std::max(s, 0.0), static_cast<double>(in_n - 1));
            const int64_t lo = static_cast<int64_t>(std::floor(s));
            const int64_t hi = std::min(lo + 1, in_n - 1);
            const double frac = s - static_cast<double>(lo);
            t[static_cast<size_t>(o)] = Lerp{lo, hi, 1.0 - frac, frac};
        }
        return t;
    };
    auto rows = std::make_shared<std::vector<Lerp>>(table(oh, h));
    auto colt = std::make_shared<std::vector<Lerp>>(table(ow, w));
    bool track = detail::recording({&x});
    Tensor y = detail::make_output({b, oh, ow, c}, track);
    const double* xv = x.ptr();
    double* yv = y.ptr();
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t i = 0; i < oh; ++i) {
            const Lerp& ri = (*rows)[static_cast<size_t>(i)];
            for (int64_t j = 0; j < ow; ++j) {
                const Lerp& cj = (*colt)[static_cast<size_t>(j)];
                const double* p00 = xv + ((bi * h + ri.lo) * w + cj.lo) * c;
                const double* p01 = xv + ((bi * h + ri.lo) * w + cj.hi) * c;
                const double* p10 = xv + ((bi * h + ri.hi) * w + cj.lo) * c;
                const double* p11 = xv + ((bi * h + ri.hi) * w + cj.hi) * c;
                double* out = yv + ((bi * oh + i) * ow + j) * c;
                for (int64_t ch = 0; ch < c; ++ch)
                    out[ch] = ri.wlo * (cj.wlo * p00[ch] + cj.whi * p01[ch]) +
                              ri.whi * (cj.wlo * p10[ch] + cj.whi * p11[ch]);
            }
        }
    detail::check_finite("bilinear_upsample_2x", y);
    if (track) {
        detail::record("bilinear_upsample_2x",
                       [xi = x.impl(), yi = y.impl(), rows, colt, b, h, w, c, oh, ow]() {
            if (yi->grad.empty()) return;
                           if (!xi->requires_grad) return;
                           xi->ensure_grad();
                           double* gx = xi->grad.data();
                           const double* gy = yi->grad.data();
                           for (int64_t bi = 0; bi < b; ++bi)
                               for (int64_t i = 0; i < oh; ++i) {
                                   const Lerp& ri = (*rows)[static_cast<size_t>(i)];
                                   for (int64_t j = 0; j < ow; ++j) {
                                       const Lerp& cj = (*colt)[static_cast<size_t>(j)];
                                       const double* g = gy + ((bi * oh + i) * ow + j) * c;
                                       double* g00 = gx + ((bi * h + ri.lo) * w + cj.lo) * c;
                                       double* g01 = gx + ((bi * h + ri.lo) * w + cj.hi) * c;
                                       double* g10 = gx + ((bi * h + ri.hi) * w + cj.lo) * c;
                                       double* g11 = gx + ((bi * h + ri.hi) * w + cj.hi) * c;
                                       for (int64_t ch = 0; ch < c; ++ch) {
                                           g00[ch] += ri.wlo * cj.wlo * g[ch];
                                           g01[ch] += ri.wlo * cj.whi * g[ch];
                                           g10[ch] += ri.whi * cj.wlo * g[ch];
                                           g11[ch] += ri.whi * cj.whi * g[ch];
                                       }
                                   }
                               }
                       });
    }
    return y;
}

// 2x2 space-to-channel: (B,H,W,C) -> (B,H/2,W/2,4C). Quadrant order is
// (0,0),(0,1),(1,0),(1,1) row-major within the 2x2 cell.
inline Tensor patch_merge_2x2(const Tensor& x) {
    check(x.rank() == 4, "op 'patch_merge': input must be BxHxWxC, got ", shape_str(x.shape()));
    const int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    check(h % 2 == 0 && w % 2 == 0, "op 'patch_merge': spatial dims must be even, got ", h, "x",
          w);
    const int64_t oh = h / 2, ow = w / 2;
    bool track = detail::recording({&x});
    Tensor y = detail::make_output({b, oh, ow, 4 * c}, track);
    const double* xv = x.ptr();
    double* yv = y.ptr();
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t i = 0; i < oh; ++i)
            for (int64_t j = 0; j < ow; ++j) {
                double* out = yv + ((bi * oh + i) * ow + j) * 4 * c;
                for (int64_t q = 0; q < 4; ++q) {
                    const int64_t si = 2 * i + q / 2, sj = 2 * j + q % 2;
                    std::memcpy(out + q * c, xv + ((bi * h + si) * w + sj) * c,
                                sizeof(double) * static_cast<size_t>(c));
                }
            }
    if (track) {
        detail::record("patch_merge", [xi = x.impl(), yi = y.impl(), b, h, w, c, oh, ow]() {
            if (yi->grad.empty()) return;
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            double* gx = xi->grad.data();
            const double* gy = yi->grad.data();
            for (int64_t bi = 0; bi < b; ++bi)
                for (int64_t i = 0; i < oh; ++i)
                    for (int64_t j = 0; j < ow; ++j) {
                        const double* g = gy + ((bi * oh + i) * ow + j) * 4 * c;
                        for (int64_t q = 0; q < 4; ++q) {
                            const int64_t si = 2 * i + q / 2, sj = 2 * j + q % 2;
                            double* dst = gx + ((bi * h + si) * w + sj) * c;
                            for (int64_t ch = 0; ch < c; ++ch) dst[ch] += g[q * c + ch];
                        }
                    }
        });
    }
    return y;
}

} // namespace ops
} // namespace rcsl
