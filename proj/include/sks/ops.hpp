#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "sks/tape.hpp"
#include "sks/tensor.hpp"

// Differentiable primitives. Every op computes its forward value eagerly and,
// when an active tape is tracking any input, records an adjoint closure that
// accumulates into the inputs' gradient buffers. Adjoints are exact; each one
// is checked against central finite differences in the test suite.

namespace sks {

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

template <typename T>
bool grad_ready(const std::shared_ptr<Storage<T>>& s) {
    return !s->grad.empty();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    check_finite(out, "add");
    if (auto* tp = detail::tape_for<T>({&a, &b})) {
        const bool ga = detail::wants_grad(a, tp), gb = detail::wants_grad(b, tp);
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        detail::mark_output(out, tp);
        tp->record([as, bs, os, ga, gb] {
            if (!detail::grad_ready(os)) return;
            if (ga) {
                as->ensure_grad();
                for (std::size_t i = 0; i < os->grad.size(); ++i) as->grad[i] += os->grad[i];
            }
            if (gb) {
                bs->ensure_grad();
                for (std::size_t i = 0; i < os->grad.size(); ++i) bs->grad[i] += os->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    check_finite(out, "sub");
    if (auto* tp = detail::tape_for<T>({&a, &b})) {
        const bool ga = detail::wants_grad(a, tp), gb = detail::wants_grad(b, tp);
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        detail::mark_output(out, tp);
        tp->record([as, bs, os, ga, gb] {
            if (!detail::grad_ready(os)) return;
            if (ga) {
                as->ensure_grad();
                for (std::size_t i = 0; i < os->grad.size(); ++i) as->grad[i] += os->grad[i];
            }
            if (gb) {
                bs->ensure_grad();
                for (std::size_t i = 0; i < os->grad.size(); ++i) bs->grad[i] -= os->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    check_finite(out, "mul");
    if (auto* tp = detail::tape_for<T>({&a, &b})) {
        const bool ga = detail::wants_grad(a, tp), gb = detail::wants_grad(b, tp);
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        detail::mark_output(out, tp);
        tp->record([as, bs, os, ga, gb] {
            if (!detail::grad_ready(os)) return;
            if (ga) {
                as->ensure_grad();
                for (std::size_t i = 0; i < os->grad.size(); ++i)
                    as->grad[i] += os->grad[i] * bs->data[i];
            }
            if (gb) {
                bs->ensure_grad();
                for (std::size_t i = 0; i < os->grad.size(); ++i)
                    bs->grad[i] += os->grad[i] * as->data[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "div");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] / bv[i];
    check_finite(out, "div");
    if (auto* tp = detail::tape_for<T>({&a, &b})) {
        const bool ga = detail::wants_grad(a, tp), gb = detail::wants_grad(b, tp);
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        detail::mark_output(out, tp);
        tp->record([as, bs, os, ga, gb] {
            if (!detail::grad_ready(os)) return;
            if (ga) {
                as->ensure_grad();
                for (std::size_t i = 0; i < os->grad.size(); ++i)
                    as->grad[i] += os->grad[i] / bs->data[i];
            }
            if (gb) {
                bs->ensure_grad();
                for (std::size_t i = 0; i < os->grad.size(); ++i)
                    bs->grad[i] -= os->grad[i] * os->data[i] / bs->data[i];
            }
        });
    }
    return out;
}

/// m*x + c, elementwise with scalar coefficients.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, T m, T c) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = m * xv[i] + c;
    check_finite(out, "affine");
    if (auto* tp = detail::tape_for<T>({&x})) {
        auto xs = x.storage(), os = out.storage();
        detail::mark_output(out, tp);
        tp->record([xs, os, m] {
            if (!detail::grad_ready(os)) return;
            xs->ensure_grad();
            for (std::size_t i = 0; i < os->grad.size(); ++i) xs->grad[i] += m * os->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T m) {
    return affine(x, m, T(0));
}

namespace detail {
// tanh form of gelu, fixed project-wide so oracles are unambiguous:
//   0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
inline constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;
}  // namespace detail

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) {
        const T v = xv[i];
        const T u = static_cast<T>(detail::kGeluK) * (v + static_cast<T>(detail::kGeluA) * v * v * v);
        ov[i] = T(0.5) * v * (T(1) + std::tanh(u));
    }
    check_finite(out, "gelu");
    if (auto* tp = detail::tape_for<T>({&x})) {
        auto xs = x.storage(), os = out.storage();
        detail::mark_output(out, tp);
        tp->record([xs, os] {
            if (!detail::grad_ready(os)) return;
            xs->ensure_grad();
            for (std::size_t i = 0; i < os->grad.size(); ++i) {
                const T v = xs->data[i];
                const T u = static_cast<T>(detail::kGeluK) *
                            (v + static_cast<T>(detail::kGeluA) * v * v * v);
                const T th = std::tanh(u);
                const T du = static_cast<T>(detail::kGeluK) *
                             (T(1) + T(3) * static_cast<T>(detail::kGeluA) * v * v);
                const T d = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * du;
                xs->grad[i] += os->grad[i] * d;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) {
        const T v = xv[i];
        if (v >= T(0)) {
            ov[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            ov[i] = e / (T(1) + e);
        }
    }
    check_finite(out, "sigmoid");
    if (auto* tp = detail::tape_for<T>({&x})) {
        auto xs = x.storage(), os = out.storage();
        detail::mark_output(out, tp);
        tp->record([xs, os] {
            if (!detail::grad_ready(os)) return;
            xs->ensure_grad();
            for (std::size_t i = 0; i < os->grad.size(); ++i) {
                const T y = os->data[i];
                xs->grad[i] += os->grad[i] * y * (T(1) - y);
            }
        });
    }
    return out;
}

/// x[..., C] + b[C], broadcast over leading axes.
template <typename T>
Tensor<T> add_rowwise(const Tensor<T>& x, const Tensor<T>& b) {
    if (b.rank() != 1 || x.rank() < 1 || x.shape().back() != b.dim(0))
        throw ShapeError("add_rowwise: incompatible shapes " + shape_str(x.shape()) + " vs " +
                         shape_str(b.shape()));
    const std::int64_t c = b.dim(0);
    const std::int64_t rows = x.numel() / c;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const auto& xv = x.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < c; ++j) ov[r * c + j] = xv[r * c + j] + bv[j];
    check_finite(out, "add_rowwise");
    if (auto* tp = detail::tape_for<T>({&x, &b})) {
        const bool gx = detail::wants_grad(x, tp), gb = detail::wants_grad(b, tp);
        auto xs = x.storage(), bs = b.storage(), os = out.storage();
        detail::mark_output(out, tp);
        tp->record([xs, bs, os, gx, gb, rows, c] {
            if (!detail::grad_ready(os)) return;
            if (gx) {
                xs->ensure_grad();
                for (std::size_t i = 0; i < os->grad.size(); ++i) xs->grad[i] += os->grad[i];
            }
            if (gb) {
                bs->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t j = 0; j < c; ++j) bs->grad[j] += os->grad[r * c + j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matrix products

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out = Tensor<T>::zeros({m, n});
    const T* av = a.data().data();
    const T* bv = b.data().data();
    T* ov = out.data().data();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t p = 0; p < k; ++p) {
            const T aip = av[i * k + p];
            const T* brow = bv + p * n;
            T* orow = ov + i * n;
            for (std::int64_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    check_finite(out, "matmul");
    if (auto* tp = detail::tape_for<T>({&a, &b})) {
        const bool ga = detail::wants_grad(a, tp), gb = detail::wants_grad(b, tp);
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        detail::mark_output(out, tp);
        tp->record([as, bs, os, ga, gb, m, k, n] {
            if (!detail::grad_ready(os)) return;
            const T* g = os->grad.data();
            if (ga) {
                as->ensure_grad();
                T* da = as->grad.data();
                const T* bv = bs->data.data();
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t p = 0; p < k; ++p) {
                        T acc = T(0);
                        const T* grow = g + i * n;
                        const T* brow = bv + p * n;
                        for (std::int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        da[i * k + p] += acc;
                    }
            }
            if (gb) {
                bs->ensure_grad();
                T* db = bs->grad.data();
                const T* av = as->data.data();
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t p = 0; p < k; ++p) {
                        const T aip = av[i * k + p];
                        const T* grow = g + i * n;
                        T* drow = db + p * n;
                        for (std::int64_t j = 0; j < n; ++j) drow[j] += aip * grow[j];
                    }
            }
        });
    }
    return out;
}

namespace detail {

template <typename T>
void require_bmm(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
        throw ShapeError(std::string(op) + ": incompatible batches " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

}  // namespace detail

/// Batched product over matching leading batch: [B,m,k] x [B,k,n] -> [B,m,n].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_bmm(a, b, "bmm");
    if (a.dim(2) != b.dim(1))
        throw ShapeError("bmm: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
    const std::int64_t nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    Tensor<T> out = Tensor<T>::zeros({nb, m, n});
    for (std::int64_t q = 0; q < nb; ++q) {
        const T* av = a.data().data() + q * m * k;
        const T* bv = b.data().data() + q * k * n;
        T* ov = out.data().data() + q * m * n;
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t p = 0; p < k; ++p) {
                const T aip = av[i * k + p];
                for (std::int64_t j = 0; j < n; ++j) ov[i * n + j] += aip * bv[p * n + j];
            }
    }
    check_finite(out, "bmm");
    if (auto* tp = detail::tape_for<T>({&a, &b})) {
        const bool ga = detail::wants_grad(a, tp), gb = detail::wants_grad(b, tp);
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        detail::mark_output(out, tp);
        tp->record([as, bs, os, ga, gb, nb, m, k, n] {
            if (!detail::grad_ready(os)) return;
            for (std::int64_t q = 0; q < nb; ++q) {
                const T* g = os->grad.data() + q * m * n;
                if (ga) {
                    as->ensure_grad();
                    T* da = as->grad.data() + q * m * k;
                    const T* bv = bs->data.data() + q * k * n;
                    for (std::int64_t i = 0; i < m; ++i)
                        for (std::int64_t p = 0; p < k; ++p) {
                            T acc = T(0);
                            for (std::int64_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
                            da[i * k + p] += acc;
                        }
                }
                if (gb) {
                    bs->ensure_grad();
                    T* db = bs->grad.data() + q * k * n;
                    const T* av = as->data.data() + q * m * k;
                    for (std::int64_t i = 0; i < m; ++i)
                        for (std::int64_t p = 0; p < k; ++p) {
                            const T aip = av[i * k + p];
                            for (std::int64_t j = 0; j < n; ++j) db[p * n + j] += aip * g[i * n + j];
                        }
                }
            }
        });
    }
    return out;
}

/// Batched product with the right operand transposed: [B,m,k] x [B,n,k] -> [B,m,n].
template <typename T>
Tensor<T> bmm_nt(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_bmm(a, b, "bmm_nt");
    if (a.dim(2) != b.dim(2))
        throw ShapeError("bmm_nt: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()) + " transposed");
    const std::int64_t nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    Tensor<T> out = Tensor<T>::zeros({nb, m, n});
    for (std::int64_t q = 0; q < nb; ++q) {
        const T* av = a.data().data() + q * m * k;
        const T* bv = b.data().data() + q * n * k;
        T* ov = out.data().data() + q * m * n;
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) {
                T acc = T(0);
                for (std::int64_t p = 0; p < k; ++p) acc += av[i * k + p] * bv[j * k + p];
                ov[i * n + j] = acc;
            }
    }
    check_finite(out, "bmm_nt");
    if (auto* tp = detail::tape_for<T>({&a, &b})) {
        const bool ga = detail::wants_grad(a, tp), gb = detail::wants_grad(b, tp);
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        detail::mark_output(out, tp);
        tp->record([as, bs, os, ga, gb, nb, m, k, n] {
            if (!detail::grad_ready(os)) return;
            for (std::int64_t q = 0; q < nb; ++q) {
                const T* g = os->grad.data() + q * m * n;
                if (ga) {
                    as->ensure_grad();
                    T* da = as->grad.data() + q * m * k;
                    const T* bv = bs->data.data() + q * n * k;
                    for (std::int64_t i = 0; i < m; ++i)
                        for (std::int64_t j = 0; j < n; ++j) {
                            const T gij = g[i * n + j];
                            for (std::int64_t p = 0; p < k; ++p) da[i * k + p] += gij * bv[j * k + p];
                        }
                }
                if (gb) {
                    bs->ensure_grad();
                    T* db = bs->grad.data() + q * n * k;
                    const T* av = as->data.data() + q * m * k;
                    for (std::int64_t i = 0; i < m; ++i)
                        for (std::int64_t j = 0; j < n; ++j) {
                            const T gij = g[i * n + j];
                            for (std::int64_t p = 0; p < k; ++p) db[j * k + p] += gij * av[i * k + p];
                        }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions and shape

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T acc = T(0);
    for (const T& v : x.data()) acc += v;
    Tensor<T> out = Tensor<T>::scalar(acc);
    check_finite(out, "sum_all");
    if (auto* tp = detail::tape_for<T>({&x})) {
        auto xs = x.storage(), os = out.storage();
        detail::mark_output(out, tp);
        tp->record([xs, os] {
            if (!detail::grad_ready(os)) return;
            xs->ensure_grad();
            const T g = os->grad[0];
            for (auto& v : xs->grad) v += g;
        });
    }
    return out;
}

/// Column means of a [N, C] matrix.
template <typename T>
Tensor<T> mean_axis0(const Tensor<T>& x) {
    if (x.rank() != 2) throw ShapeError("mean_axis0: expected rank-2, got " + shape_str(x.shape()));
    const std::int64_t n = x.dim(0), c = x.dim(1);
    Tensor<T> out = Tensor<T>::zeros({c});
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < c; ++j) ov[j] += xv[i * c + j];
    for (std::int64_t j = 0; j < c; ++j) ov[j] /= static_cast<T>(n);
    check_finite(out, "mean_axis0");
    if (auto* tp = detail::tape_for<T>({&x})) {
        auto xs = x.storage(), os = out.storage();
        detail::mark_output(out, tp);
        tp->record([xs, os, n, c] {
            if (!detail::grad_ready(os)) return;
            xs->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t j = 0; j < c; ++j)
                    xs->grad[i * c + j] += os->grad[j] / static_cast<T>(n);
        });
    }
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel_of(shape) != x.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
    Tensor<T> out = Tensor<T>::from(std::move(shape), x.data());
    if (auto* tp = detail::tape_for<T>({&x})) {
        auto xs = x.storage(), os = out.storage();
        detail::mark_output(out, tp);
        tp->record([xs, os] {
            if (!detail::grad_ready(os)) return;
            xs->ensure_grad();
            for (std::size_t i = 0; i < os->grad.size(); ++i) xs->grad[i] += os->grad[i];
        });
    }
    return out;
}

/// Concatenation along the last axis; leading extents must agree.
template <typename T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != b.rank() || a.rank() < 1)
        throw ShapeError("concat_last: rank mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    for (int i = 0; i + 1 < a.rank(); ++i)
        if (a.dim(i) != b.dim(i))
            throw ShapeError("concat_last: leading extents differ " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    const std::int64_t c1 = a.shape().back(), c2 = b.shape().back();
    Shape oshape = a.shape();
    oshape.back() = c1 + c2;
    const std::int64_t rows = numel_of(oshape) / (c1 + c2);
    Tensor<T> out = Tensor<T>::zeros(oshape);
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        std::copy_n(av.begin() + r * c1, c1, ov.begin() + r * (c1 + c2));
        std::copy_n(bv.begin() + r * c2, c2, ov.begin() + r * (c1 + c2) + c1);
    }
    if (auto* tp = detail::tape_for<T>({&a, &b})) {
        const bool ga = detail::wants_grad(a, tp), gb = detail::wants_grad(b, tp);
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        detail::mark_output(out, tp);
        tp->record([as, bs, os, ga, gb, rows, c1, c2] {
            if (!detail::grad_ready(os)) return;
            for (std::int64_t r = 0; r < rows; ++r) {
                if (ga) {
                    as->ensure_grad();
                    for (std::int64_t j = 0; j < c1; ++j)
                        as->grad[r * c1 + j] += os->grad[r * (c1 + c2) + j];
                }
                if (gb) {
                    bs->ensure_grad();
                    for (std::int64_t j = 0; j < c2; ++j)
                        bs->grad[r * c2 + j] += os->grad[r * (c1 + c2) + c1 + j];
                }
            }
        });
    }
    return out;
}

/// out[..., 0:len] = x[..., start:start+len].
template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::int64_t start, std::int64_t len) {
    const std::int64_t c = x.shape().back();
    if (start < 0 || len < 0 || start + len > c)
        throw ShapeError("slice_last: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of " + shape_str(x.shape()));
    Shape oshape = x.shape();
    oshape.back() = len;
    const std::int64_t rows = x.numel() / c;
    Tensor<T> out = Tensor<T>::zeros(oshape);
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::int64_t r = 0; r < rows; ++r)
        std::copy_n(xv.begin() + r * c + start, len, ov.begin() + r * len);
    if (auto* tp = detail::tape_for<T>({&x})) {
        auto xs = x.storage(), os = out.storage();
        detail::mark_output(out, tp);
        tp->record([xs, os, rows, c, start, len] {
            if (!detail::grad_ready(os)) return;
            xs->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < len; ++j)
                    xs->grad[r * c + start + j] += os->grad[r * len + j];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// row softmax and layer norm

/// Softmax over the last axis, stabilized by per-row max subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    if (x.rank() < 1) throw ShapeError("softmax_rows: scalar input");
    const std::int64_t c = x.shape().back();
    const std::int64_t rows = x.numel() / c;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * c;
        T* orow = ov.data() + r * c;
        T mx = row[0];
        for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (std::int64_t j = 0; j < c; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (std::int64_t j = 0; j < c; ++j) orow[j] /= sum;
    }
    check_finite(out, "softmax_rows");
    if (auto* tp = detail::tape_for<T>({&x})) {
        auto xs = x.storage(), os = out.storage();
        detail::mark_output(out, tp);
        tp->record([xs, os, rows, c] {
            if (!detail::grad_ready(os)) return;
            xs->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* y = os->data.data() + r * c;
                const T* g = os->grad.data() + r * c;
                T* dx = xs->grad.data() + r * c;
                T dot = T(0);
                for (std::int64_t j = 0; j < c; ++j) dot += g[j] * y[j];
                for (std::int64_t j = 0; j < c; ++j) dx[j] += y[j] * (g[j] - dot);
            }
        });
    }
    return out;
}

/// Per-position normalization over the last axis (population variance), then
/// gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
    const std::int64_t c = x.shape().back();
    if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != c || bias.dim(0) != c)
        throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match last axis of " +
                         shape_str(x.shape()));
    const std::int64_t rows = x.numel() / c;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    // cached per-row inverse stddev and normalized values for the adjoint
    auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.numel()));
    auto istd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
    const auto& xv = x.data();
    const auto& gv = gain.data();
    const auto& bv = bias.data();
    auto& ov = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * c;
        T mean = T(0);
        for (std::int64_t j = 0; j < c; ++j) mean += row[j];
        mean /= static_cast<T>(c);
        T var = T(0);
        for (std::int64_t j = 0; j < c; ++j) {
            const T d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<T>(c);
        const T inv = T(1) / std::sqrt(var + eps);
        (*istd)[static_cast<std::size_t>(r)] = inv;
        for (std::int64_t j = 0; j < c; ++j) {
            const T h = (row[j] - mean) * inv;
            (*xhat)[static_cast<std::size_t>(r * c + j)] = h;
            ov[r * c + j] = gv[j] * h + bv[j];
        }
    }
    check_finite(out, "layer_norm");
    if (auto* tp = detail::tape_for<T>({&x, &gain, &bias})) {
        const bool gx = detail::wants_grad(x, tp);
        const bool gg = detail::wants_grad(gain, tp);
        const bool gb = detail::wants_grad(bias, tp);
        auto xs = x.storage(), gs = gain.storage(), bs = bias.storage(), os = out.storage();
        detail::mark_output(out, tp);
        tp->record([xs, gs, bs, os, xhat, istd, gx, gg, gb, rows, c] {
            if (!detail::grad_ready(os)) return;
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* g = os->grad.data() + r * c;
                const T* h = xhat->data() + r * c;
                if (gg) {
                    gs->ensure_grad();
                    for (std::int64_t j = 0; j < c; ++j) gs->grad[j] += g[j] * h[j];
                }
                if (gb) {
                    bs->ensure_grad();
                    for (std::int64_t j = 0; j < c; ++j) bs->grad[j] += g[j];
                }
                if (gx) {
                    xs->ensure_grad();
                    T* dx = xs->grad.data() + r * c;
                    const T inv = (*istd)[static_cast<std::size_t>(r)];
                    T m1 = T(0), m2 = T(0);
                    for (std::int64_t j = 0; j < c; ++j) {
                        const T hg = g[j] * gs->data[j];
                        m1 += hg;
                        m2 += hg * h[j];
                    }
                    m1 /= static_cast<T>(c);
                    m2 /= static_cast<T>(c);
                    for (std::int64_t j = 0; j < c; ++j) {
                        const T hg = g[j] * gs->data[j];
                        dx[j] += (hg - m1 - h[j] * m2) * inv;
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// element gather (shared machinery for all data-movement ops)

/// out.data[i] = x.data[src[i]]. The adjoint scatter-adds through the same
/// map, which is exact for arbitrary gathers including duplicated sources.
template <typename T>
Tensor<T> take(const Tensor<T>& x, std::vector<std::int64_t> src, Shape out_shape,
               const char* op) {
    if (numel_of(out_shape) != static_cast<std::int64_t>(src.size()))
        throw ShapeError(std::string(op) + ": index map does not fill " + shape_str(out_shape));
    Tensor<T> out = Tensor<T>::zeros(std::move(out_shape));
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < src.size(); ++i) ov[i] = xv[static_cast<std::size_t>(src[i])];
    if (auto* tp = detail::tape_for<T>({&x})) {
        auto xs = x.storage(), os = out.storage();
        detail::mark_output(out, tp);
        auto map = std::make_shared<std::vector<std::int64_t>>(std::move(src));
        tp->record([xs, os, map] {
            if (!detail::grad_ready(os)) return;
            xs->ensure_grad();
            for (std::size_t i = 0; i < map->size(); ++i)
                xs->grad[static_cast<std::size_t>((*map)[i])] += os->grad[i];
        });
    }
    return out;
}

/// [H, W, C] image to [(H/p)*(W/p), p*p*C] rows of flattened patches.
template <typename T>
Tensor<T> extract_patches(const Tensor<T>& x, std::int64_t p) {
    if (x.rank() != 3) throw ShapeError("extract_patches: expected [H,W,C], got " + shape_str(x.shape()));
    const std::int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    if (p <= 0 || h % p != 0 || w % p != 0)
        throw ShapeError("extract_patches: " + shape_str(x.shape()) + " not divisible by patch " +
                         std::to_string(p));
    const std::int64_t gh = h / p, gw = w / p;
    std::vector<std::int64_t> src(static_cast<std::size_t>(h * w * c));
    std::size_t i = 0;
    for (std::int64_t py = 0; py < gh; ++py)
        for (std::int64_t px = 0; px < gw; ++px)
            for (std::int64_t dy = 0; dy < p; ++dy)
                for (std::int64_t dx = 0; dx < p; ++dx)
                    for (std::int64_t ch = 0; ch < c; ++ch)
                        src[i++] = ((py * p + dy) * w + (px * p + dx)) * c + ch;
    return take(x, std::move(src), {gh * gw, p * p * c}, "extract_patches");
}

/// [H, W, C] to [(H/2)*(W/2), 4C]; each output row is the 2x2 token block in
/// row-major order.
template <typename T>
Tensor<T> group_2x2(const Tensor<T>& x) {
    if (x.rank() != 3) throw ShapeError("group_2x2: expected [H,W,C], got " + shape_str(x.shape()));
    const std::int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    if (h % 2 != 0 || w % 2 != 0)
        throw ShapeError("group_2x2: odd extents in " + shape_str(x.shape()));
    std::vector<std::int64_t> src(static_cast<std::size_t>(h * w * c));
    std::size_t i = 0;
    for (std::int64_t gy = 0; gy < h / 2; ++gy)
        for (std::int64_t gx = 0; gx < w / 2; ++gx)
            for (std::int64_t d = 0; d < 4; ++d)
                for (std::int64_t ch = 0; ch < c; ++ch)
                    src[i++] = ((gy * 2 + d / 2) * w + (gx * 2 + d % 2)) * c + ch;
    return take(x, std::move(src), {(h / 2) * (w / 2), 4 * c}, "group_2x2");
}

/// Inverse arrangement of group_2x2: [h*w, 4*C] to [2h, 2w, C], channel block
/// d landing at spatial offset (d/2, d%2).
template <typename T>
Tensor<T> ungroup_2x2(const Tensor<T>& x, std::int64_t h, std::int64_t w) {
    if (x.rank() != 2 || x.dim(0) != h * w || x.dim(1) % 4 != 0)
        throw ShapeError("ungroup_2x2: cannot arrange " + shape_str(x.shape()) + " onto " +
                         std::to_string(h) + "x" + std::to_string(w) + " grid");
    const std::int64_t c = x.dim(1) / 4;
    std::vector<std::int64_t> src(static_cast<std::size_t>(x.numel()));
    std::size_t i = 0;
    for (std::int64_t y = 0; y < 2 * h; ++y)
        for (std::int64_t x2 = 0; x2 < 2 * w; ++x2) {
            const std::int64_t d = (y % 2) * 2 + (x2 % 2);
            const std::int64_t tok = (y / 2) * w + (x2 / 2);
            for (std::int64_t ch = 0; ch < c; ++ch) src[i++] = tok * 4 * c + d * c + ch;
        }
    return take(x, std::move(src), {2 * h, 2 * w, c}, "ungroup_2x2");
}

// ---------------------------------------------------------------------------
// classification loss

/// Mean of -log softmax(logits)[label] over the batch, log-sum-exp stabilized.
template <typename T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2 || logits.dim(0) != static_cast<std::int64_t>(labels.size()))
        throw ShapeError("cross_entropy_logits: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
    const std::int64_t n = logits.dim(0), k = logits.dim(1);
    auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n * k));
    T loss = T(0);
    const auto& lv = logits.data();
    for (std::int64_t i = 0; i < n; ++i) {
        const T* row = lv.data() + i * k;
        const int lab = labels[static_cast<std::size_t>(i)];
        if (lab < 0 || lab >= k)
            throw ShapeError("cross_entropy_logits: label " + std::to_string(lab) +
                             " out of range for " + std::to_string(k) + " classes");
        T mx = row[0];
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (std::int64_t j = 0; j < k; ++j) {
            const T e = std::exp(row[j] - mx);
            (*probs)[static_cast<std::size_t>(i * k + j)] = e;
            sum += e;
        }
        for (std::int64_t j = 0; j < k; ++j) (*probs)[static_cast<std::size_t>(i * k + j)] /= sum;
        loss += mx + std::log(sum) - row[lab];
    }
    Tensor<T> out = Tensor<T>::scalar(loss / static_cast<T>(n));
    check_finite(out, "cross_entropy_logits");
    if (auto* tp = detail::tape_for<T>({&logits})) {
        auto ls = logits.storage(), os = out.storage();
        detail::mark_output(out, tp);
        auto labs = std::make_shared<std::vector<int>>(labels);
        tp->record([ls, os, probs, labs, n, k] {
            if (!detail::grad_ready(os)) return;
            ls->ensure_grad();
            const T g = os->grad[0] / static_cast<T>(n);
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t j = 0; j < k; ++j) {
                    T d = (*probs)[static_cast<std::size_t>(i * k + j)];
                    if (j == (*labs)[static_cast<std::size_t>(i)]) d -= T(1);
                    ls->grad[i * k + j] += g * d;
                }
        });
    }
    return out;
}

}  // namespace sks
