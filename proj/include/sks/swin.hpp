#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "sks/ops.hpp"
#include "sks/params.hpp"
#include "sks/tensor.hpp"

// Window-based multi-head self attention with relative position bias, plus
// the shifted-window variant and the pre-norm transformer block built on it.
// Feature maps are [H, W, C]; windows are M x M token groups.

namespace sks {

inline constexpr double kMaskNegative = -1e9;

// ---------------------------------------------------------------------------
// window geometry (all gathers, so adjoints come for free via take())

/// [H, W, C] -> [nW, M*M, C], windows in row-major window order, tokens in
/// row-major order within each window.
template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, std::int64_t m) {
    if (x.rank() != 3)
        throw ShapeError("window_partition: expected [H,W,C], got " + shape_str(x.shape()));
    const std::int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    if (m <= 0 || h % m != 0 || w % m != 0)
        throw ShapeError("window_partition: grid " + shape_str(x.shape()) +
                         " not divisible by window " + std::to_string(m));
    const std::int64_t gh = h / m, gw = w / m;
    std::vector<std::int64_t> src(static_cast<std::size_t>(h * w * c));
    std::size_t i = 0;
    for (std::int64_t wy = 0; wy < gh; ++wy)
        for (std::int64_t wx = 0; wx < gw; ++wx)
            for (std::int64_t ty = 0; ty < m; ++ty)
                for (std::int64_t tx = 0; tx < m; ++tx)
                    for (std::int64_t ch = 0; ch < c; ++ch)
                        src[i++] = ((wy * m + ty) * w + (wx * m + tx)) * c + ch;
    return take(x, std::move(src), {gh * gw, m * m, c}, "window_partition");
}

/// Inverse of window_partition: [nW, M*M, C] -> [H, W, C].
template <typename T>
Tensor<T> window_reverse(const Tensor<T>& x, std::int64_t h, std::int64_t w, std::int64_t m) {
    if (x.rank() != 3 || x.dim(1) != m * m || x.dim(0) != (h / m) * (w / m) || h % m != 0 ||
        w % m != 0)
        throw ShapeError("window_reverse: cannot place " + shape_str(x.shape()) + " onto " +
                         std::to_string(h) + "x" + std::to_string(w) + " grid with window " +
                         std::to_string(m));
    const std::int64_t c = x.dim(2);
    const std::int64_t gw = w / m;
    std::vector<std::int64_t> src(static_cast<std::size_t>(h * w * c));
    std::size_t i = 0;
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t xx = 0; xx < w; ++xx) {
            const std::int64_t win = (y / m) * gw + (xx / m);
            const std::int64_t tok = (y % m) * m + (xx % m);
            for (std::int64_t ch = 0; ch < c; ++ch) src[i++] = (win * m * m + tok) * c + ch;
        }
    return take(x, std::move(src), {h, w, c}, "window_reverse");
}

/// Toroidal roll: out[y, x] = in[(y + dy) mod H, (x + dx) mod W].
template <typename T>
Tensor<T> cyclic_shift(const Tensor<T>& x, std::int64_t dy, std::int64_t dx) {
    if (x.rank() != 3)
        throw ShapeError("cyclic_shift: expected [H,W,C], got " + shape_str(x.shape()));
    const std::int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    std::vector<std::int64_t> src(static_cast<std::size_t>(h * w * c));
    std::size_t i = 0;
    for (std::int64_t y = 0; y < h; ++y) {
        const std::int64_t sy = ((y + dy) % h + h) % h;
        for (std::int64_t xx = 0; xx < w; ++xx) {
            const std::int64_t sx = ((xx + dx) % w + w) % w;
            for (std::int64_t ch = 0; ch < c; ++ch) src[i++] = (sy * w + sx) * c + ch;
        }
    }
    return take(x, std::move(src), x.shape(), "cyclic_shift");
}

/// [nW, M*M, C] -> [nW*heads, M*M, C/heads]; batch index is w*heads + head.
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::int64_t heads) {
    if (x.rank() != 3 || x.dim(2) % heads != 0)
        throw ShapeError("split_heads: " + shape_str(x.shape()) + " not divisible into " +
                         std::to_string(heads) + " heads");
    const std::int64_t nw = x.dim(0), t = x.dim(1), c = x.dim(2), d = c / heads;
    std::vector<std::int64_t> src(static_cast<std::size_t>(x.numel()));
    std::size_t i = 0;
    for (std::int64_t w = 0; w < nw; ++w)
        for (std::int64_t hd = 0; hd < heads; ++hd)
            for (std::int64_t tk = 0; tk < t; ++tk)
                for (std::int64_t j = 0; j < d; ++j)
                    src[i++] = (w * t + tk) * c + hd * d + j;
    return take(x, std::move(src), {nw * heads, t, d}, "split_heads");
}

/// Inverse of split_heads: [nW*heads, M*M, d] -> [nW, M*M, heads*d].
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::int64_t heads) {
    if (x.rank() != 3 || x.dim(0) % heads != 0)
        throw ShapeError("merge_heads: " + shape_str(x.shape()) + " batch not divisible by " +
                         std::to_string(heads) + " heads");
    const std::int64_t nw = x.dim(0) / heads, t = x.dim(1), d = x.dim(2), c = heads * d;
    std::vector<std::int64_t> src(static_cast<std::size_t>(x.numel()));
    std::size_t i = 0;
    for (std::int64_t w = 0; w < nw; ++w)
        for (std::int64_t tk = 0; tk < t; ++tk)
            for (std::int64_t hd = 0; hd < heads; ++hd)
                for (std::int64_t j = 0; j < d; ++j)
                    src[i++] = ((w * heads + hd) * t + tk) * d + j;
    return take(x, std::move(src), {nw, t, c}, "merge_heads");
}

// ---------------------------------------------------------------------------
// relative position bias

/// idx[i*M*M + j] into the (2M-1)^2 offset table for query token i and key
/// token j of an M x M window.
inline std::vector<std::int64_t> relative_position_index(std::int64_t m) {
    const std::int64_t t = m * m, span = 2 * m - 1;
    std::vector<std::int64_t> idx(static_cast<std::size_t>(t * t));
    for (std::int64_t i = 0; i < t; ++i)
        for (std::int64_t j = 0; j < t; ++j) {
            const std::int64_t dy = i / m - j / m + (m - 1);
            const std::int64_t dx = i % m - j % m + (m - 1);
            idx[static_cast<std::size_t>(i * t + j)] = dy * span + dx;
        }
    return idx;
}

/// Expands the learned table [(2M-1)^2, heads] to per-head score offsets
/// [heads, M*M, M*M]. Gradients scatter back onto shared table entries.
template <typename T>
Tensor<T> relative_bias(const Tensor<T>& table, std::int64_t m, std::int64_t heads) {
    const std::int64_t span = 2 * m - 1, t = m * m;
    if (table.rank() != 2 || table.dim(0) != span * span || table.dim(1) != heads)
        throw ShapeError("relative_bias: table " + shape_str(table.shape()) +
                         " does not match window " + std::to_string(m) + ", heads " +
                         std::to_string(heads));
    const auto idx = relative_position_index(m);
    std::vector<std::int64_t> src(static_cast<std::size_t>(heads * t * t));
    std::size_t i = 0;
    for (std::int64_t h = 0; h < heads; ++h)
        for (std::int64_t q = 0; q < t * t; ++q)
            src[i++] = idx[static_cast<std::size_t>(q)] * heads + h;
    return take(table, std::move(src), {heads, t, t}, "relative_bias");
}

// ---------------------------------------------------------------------------
// score adjustments

/// scores [nW*heads, T, T] + bias [heads, T, T], bias shared across windows.
template <typename T>
Tensor<T> add_head_bias(const Tensor<T>& scores, const Tensor<T>& bias) {
    if (scores.rank() != 3 || bias.rank() != 3 || scores.dim(0) % bias.dim(0) != 0 ||
        scores.dim(1) != bias.dim(1) || scores.dim(2) != bias.dim(2))
        throw ShapeError("add_head_bias: scores " + shape_str(scores.shape()) +
                         " vs bias " + shape_str(bias.shape()));
    const std::int64_t heads = bias.dim(0), bsz = scores.dim(0), tt = scores.dim(1) * scores.dim(2);
    Tensor<T> out = Tensor<T>::zeros(scores.shape());
    const auto& sv = scores.data();
    const auto& bv = bias.data();
    auto& ov = out.data();
    for (std::int64_t b = 0; b < bsz; ++b) {
        const std::int64_t h = b % heads;
        for (std::int64_t j = 0; j < tt; ++j) ov[b * tt + j] = sv[b * tt + j] + bv[h * tt + j];
    }
    check_finite(out, "add_head_bias");
    if (auto* tp = detail::tape_for<T>({&scores, &bias})) {
        const bool gs = detail::wants_grad(scores, tp), gb = detail::wants_grad(bias, tp);
        auto ss = scores.storage(), bs = bias.storage(), os = out.storage();
        detail::mark_output(out, tp);
        tp->record([ss, bs, os, gs, gb, heads, bsz, tt] {
            if (!detail::grad_ready(os)) return;
            if (gs) {
                ss->ensure_grad();
                for (std::size_t i = 0; i < os->grad.size(); ++i) ss->grad[i] += os->grad[i];
            }
            if (gb) {
                bs->ensure_grad();
                for (std::int64_t b = 0; b < bsz; ++b) {
                    const std::int64_t h = b % heads;
                    for (std::int64_t j = 0; j < tt; ++j)
                        bs->grad[h * tt + j] += os->grad[b * tt + j];
                }
            }
        });
    }
    return out;
}

/// scores [nW*heads, T, T] + mask [nW, T, T]; the mask is a constant.
template <typename T>
Tensor<T> add_window_mask(const Tensor<T>& scores, const Tensor<T>& mask) {
    if (scores.rank() != 3 || mask.rank() != 3 || scores.dim(0) % mask.dim(0) != 0 ||
        scores.dim(1) != mask.dim(1) || scores.dim(2) != mask.dim(2))
        throw ShapeError("add_window_mask: scores " + shape_str(scores.shape()) + " vs mask " +
                         shape_str(mask.shape()));
    const std::int64_t nw = mask.dim(0), bsz = scores.dim(0), tt = scores.dim(1) * scores.dim(2);
    const std::int64_t heads = bsz / nw;
    Tensor<T> out = Tensor<T>::zeros(scores.shape());
    const auto& sv = scores.data();
    const auto& mv = mask.data();
    auto& ov = out.data();
    for (std::int64_t b = 0; b < bsz; ++b) {
        const std::int64_t w = b / heads;
        for (std::int64_t j = 0; j < tt; ++j) ov[b * tt + j] = sv[b * tt + j] + mv[w * tt + j];
    }
    if (auto* tp = detail::tape_for<T>({&scores})) {
        auto ss = scores.storage(), os = out.storage();
        detail::mark_output(out, tp);
        tp->record([ss, os] {
            if (!detail::grad_ready(os)) return;
            ss->ensure_grad();
            for (std::size_t i = 0; i < os->grad.size(); ++i) ss->grad[i] += os->grad[i];
        });
    }
    return out;
}

/// Additive mask [nW, M*M, M*M] for shifted windows on an H x W grid:
/// 0 where query and key tokens come from the same pre-shift region, a large
/// negative value where the roll stitched together distant content.
template <typename T>
Tensor<T> shifted_window_mask(std::int64_t h, std::int64_t w, std::int64_t m, std::int64_t s) {
    if (h % m != 0 || w % m != 0 || s <= 0 || s >= m)
        throw ShapeError("shifted_window_mask: invalid grid " + std::to_string(h) + "x" +
                         std::to_string(w) + " window " + std::to_string(m) + " shift " +
                         std::to_string(s));
    // region ids in post-roll coordinates: boundaries at side-m and side-s
    auto region = [&](std::int64_t y, std::int64_t side) {
        if (y < side - m) return std::int64_t{0};
        if (y < side - s) return std::int64_t{1};
        return std::int64_t{2};
    };
    std::vector<std::int64_t> id(static_cast<std::size_t>(h * w));
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
            id[static_cast<std::size_t>(y * w + x)] = region(y, h) * 3 + region(x, w);
    const std::int64_t gh = h / m, gw = w / m, t = m * m;
    Tensor<T> mask = Tensor<T>::zeros({gh * gw, t, t});
    for (std::int64_t wy = 0; wy < gh; ++wy)
        for (std::int64_t wx = 0; wx < gw; ++wx) {
            const std::int64_t win = wy * gw + wx;
            for (std::int64_t i = 0; i < t; ++i)
                for (std::int64_t j = 0; j < t; ++j) {
                    const std::int64_t yi = wy * m + i / m, xi = wx * m + i % m;
                    const std::int64_t yj = wy * m + j / m, xj = wx * m + j % m;
                    if (id[static_cast<std::size_t>(yi * w + xi)] !=
                        id[static_cast<std::size_t>(yj * w + xj)])
                        mask.data()[(win * t + i) * t + j] = static_cast<T>(kMaskNegative);
                }
        }
    return mask;
}

// ---------------------------------------------------------------------------
// attention and transformer block

template <typename T>
struct AttentionParams {
    Tensor<T> wq, wk, wv, wo;  // [C, C] projections, no projection biases
    Tensor<T> bias_table;      // [(2M-1)^2, heads]
};

template <typename T>
struct AttentionResult {
    Tensor<T> out;    // [H, W, C]
    Tensor<T> probs;  // [nW*heads, M*M, M*M], rows are probability vectors
};

/// SoftMax(Q K^T / sqrt(d) + B [+ mask]) V over M x M windows. When shifted
/// is set the grid is rolled by floor(M/2) first and cross-region attention
/// is masked out; a grid of exactly one window never shifts.
template <typename T>
AttentionResult<T> window_attention(const Tensor<T>& x, const AttentionParams<T>& p,
                                    std::int64_t m, std::int64_t heads, bool shifted) {
    if (x.rank() != 3)
        throw ShapeError("window_attention: expected [H,W,C], got " + shape_str(x.shape()));
    const std::int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    if (c % heads != 0)
        throw ShapeError("window_attention: channels " + std::to_string(c) +
                         " not divisible by heads " + std::to_string(heads));
    const std::int64_t d = c / heads;
    const std::int64_t s = (shifted && h > m && w > m) ? m / 2 : 0;

    Tensor<T> cur = s > 0 ? cyclic_shift(x, s, s) : x;
    Tensor<T> win = window_partition(cur, m);  // [nW, M*M, C]
    const std::int64_t nw = win.dim(0), t = win.dim(1);

    auto flat = reshape(win, {nw * t, c});
    auto q = split_heads(reshape(matmul(flat, p.wq), {nw, t, c}), heads);
    auto k = split_heads(reshape(matmul(flat, p.wk), {nw, t, c}), heads);
    auto v = split_heads(reshape(matmul(flat, p.wv), {nw, t, c}), heads);

    auto scores = scale(bmm_nt(q, k), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
    scores = add_head_bias(scores, relative_bias(p.bias_table, m, heads));
    if (s > 0) scores = add_window_mask(scores, shifted_window_mask<T>(h, w, m, s));
    auto probs = softmax_rows(scores);

    auto ctx = merge_heads(bmm(probs, v), heads);           // [nW, M*M, C]
    auto proj = reshape(matmul(reshape(ctx, {nw * t, c}), p.wo), {nw, t, c});
    Tensor<T> out = window_reverse(proj, h, w, m);
    if (s > 0) out = cyclic_shift(out, -s, -s);
    return {out, probs};
}

template <typename T>
struct BlockParams {
    Tensor<T> norm1_gain, norm1_bias;
    AttentionParams<T> attn;
    Tensor<T> norm2_gain, norm2_bias;
    Tensor<T> fc1_w, fc1_b;  // [C, 4C], [4C]
    Tensor<T> fc2_w, fc2_b;  // [4C, C], [C]
};

/// Registers one transformer block's parameters under the given name prefix
/// and returns handles. Initialization: truncated normal (sigma 0.02) for
/// projections and the bias table, unit gains, zero biases.
template <typename T>
BlockParams<T> create_block_params(ParameterStore<T>& store, const std::string& prefix,
                                   std::int64_t c, std::int64_t m, std::int64_t heads,
                                   Rng& rng) {
    BlockParams<T> p;
    p.norm1_gain = store.create(prefix + ".norm1.gain", {c});
    init::ones(p.norm1_gain);
    p.norm1_bias = store.create(prefix + ".norm1.bias", {c});
    p.attn.wq = store.create(prefix + ".attn.wq", {c, c});
    init::trunc_normal(p.attn.wq, rng, 0.02);
    p.attn.wk = store.create(prefix + ".attn.wk", {c, c});
    init::trunc_normal(p.attn.wk, rng, 0.02);
    p.attn.wv = store.create(prefix + ".attn.wv", {c, c});
    init::trunc_normal(p.attn.wv, rng, 0.02);
    p.attn.wo = store.create(prefix + ".attn.wo", {c, c});
    init::trunc_normal(p.attn.wo, rng, 0.02);
    p.attn.bias_table = store.create(prefix + ".attn.bias_table", {(2 * m - 1) * (2 * m - 1), heads});
    init::trunc_normal(p.attn.bias_table, rng, 0.02);
    p.norm2_gain = store.create(prefix + ".norm2.gain", {c});
    init::ones(p.norm2_gain);
    p.norm2_bias = store.create(prefix + ".norm2.bias", {c});
    p.fc1_w = store.create(prefix + ".mlp.fc1.weight", {c, 4 * c});
    init::trunc_normal(p.fc1_w, rng, 0.02);
    p.fc1_b = store.create(prefix + ".mlp.fc1.bias", {4 * c});
    p.fc2_w = store.create(prefix + ".mlp.fc2.weight", {4 * c, c});
    init::trunc_normal(p.fc2_w, rng, 0.02);
    p.fc2_b = store.create(prefix + ".mlp.fc2.bias", {c});
    return p;
}

/// Pre-norm residual block: x + Attn(LN(x)), then y + MLP(LN(y)) with a
/// 4x hidden expansion.
template <typename T>
Tensor<T> swin_block(const Tensor<T>& x, const BlockParams<T>& p, std::int64_t m,
                     std::int64_t heads, bool shifted) {
    const std::int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    auto attn_out = window_attention(layer_norm(x, p.norm1_gain, p.norm1_bias), p.attn, m, heads,
                                     shifted)
                        .out;
    auto y = add(x, attn_out);
    auto flat = reshape(layer_norm(y, p.norm2_gain, p.norm2_bias), {h * w, c});
    auto hdn = gelu(add_rowwise(matmul(flat, p.fc1_w), p.fc1_b));
    auto mlp = reshape(add_rowwise(matmul(hdn, p.fc2_w), p.fc2_b), {h, w, c});
    return add(y, mlp);
}

}  // namespace sks
