#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sks/swin.hpp"

// Hierarchical encoder: non-overlapping patch embedding, then per level a
// pair of window-attention blocks (second one shifted) followed by a 2x2
// token merge that halves the grid and doubles the channels. Produces one
// feature map per level, finest first.

namespace sks {

struct EncoderSpec {
    std::int64_t image_size = 224;
    std::int64_t patch = 4;
    std::int64_t embed_dim = 96;
    std::int64_t levels = 4;
    std::int64_t blocks_per_level = 2;
    std::int64_t window = 7;
    std::int64_t in_channels = 3;

    std::int64_t side(std::int64_t level) const {
        return image_size / patch / (std::int64_t{1} << (level - 1));
    }
    std::int64_t channels(std::int64_t level) const {
        return embed_dim * (std::int64_t{1} << (level - 1));
    }
    /// One head per 32 channels, at least one.
    std::int64_t heads(std::int64_t level) const {
        const std::int64_t h = channels(level) / 32;
        return h > 0 ? h : 1;
    }
    /// Effective window: clamped to the grid side so coarse levels of small
    /// inputs degenerate gracefully to global (single-window) attention.
    std::int64_t window_at(std::int64_t level) const {
        const std::int64_t s = side(level);
        return window < s ? window : s;
    }

    void validate() const {
        if (image_size <= 0 || patch <= 0 || embed_dim <= 0 || levels <= 0 || window <= 0 ||
            blocks_per_level <= 0 || in_channels <= 0)
            throw ConfigError("encoder: all extents must be positive");
        if ((patch & (patch - 1)) != 0)
            throw ConfigError("encoder: patch size must be a power of two, got " +
                              std::to_string(patch));
        if (image_size % patch != 0)
            throw ConfigError("encoder: image size " + std::to_string(image_size) +
                              " not divisible by patch " + std::to_string(patch));
        if (side(1) % (std::int64_t{1} << (levels - 1)) != 0)
            throw ConfigError("encoder: grid " + std::to_string(side(1)) +
                              " cannot be halved " + std::to_string(levels - 1) + " times");
        for (std::int64_t l = 1; l <= levels; ++l) {
            if (side(l) % window_at(l) != 0)
                throw ConfigError("encoder: level " + std::to_string(l) + " side " +
                                  std::to_string(side(l)) + " not divisible by window " +
                                  std::to_string(window_at(l)));
            if (channels(l) % heads(l) != 0)
                throw ConfigError("encoder: level " + std::to_string(l) + " channels " +
                                  std::to_string(channels(l)) + " not divisible into " +
                                  std::to_string(heads(l)) + " heads");
        }
    }
};

template <typename T>
struct MergeParams {
    Tensor<T> norm_gain, norm_bias;  // [4C]
    Tensor<T> weight;                // [4C, 2C]
    Tensor<T> bias;                  // [2C]
};

template <typename T>
struct EncoderParams {
    // Input standardization buffers, shape [1] each. They hold training-set
    // pixel statistics (fitted by the trainer, identity 0/1 until then), are
    // never gradient-trained, and persist through checkpoints like any other
    // named tensor so evaluation and inference reuse the fitted values.
    Tensor<T> input_shift;
    Tensor<T> input_scale;
    Tensor<T> embed_w;  // [patch*patch*in_channels, embed_dim]
    Tensor<T> embed_b;  // [embed_dim]
    std::vector<std::vector<BlockParams<T>>> blocks;  // [level-1][block]
    std::vector<MergeParams<T>> merges;               // between consecutive levels
};

template <typename T>
EncoderParams<T> create_encoder_params(ParameterStore<T>& store, const std::string& prefix,
                                       const EncoderSpec& spec, Rng& rng) {
    spec.validate();
    EncoderParams<T> p;
    p.input_shift = store.create(prefix + ".input.shift", {1});
    p.input_shift.set_requires_grad(false);
    p.input_scale = store.create(prefix + ".input.scale", {1});
    init::ones(p.input_scale);
    p.input_scale.set_requires_grad(false);
    p.embed_w = store.create(prefix + ".embed.weight",
                             {spec.patch * spec.patch * spec.in_channels, spec.embed_dim});
    init::trunc_normal(p.embed_w, rng, 0.02);
    p.embed_b = store.create(prefix + ".embed.bias", {spec.embed_dim});
    for (std::int64_t l = 1; l <= spec.levels; ++l) {
        std::vector<BlockParams<T>> level_blocks;
        for (std::int64_t b = 0; b < spec.blocks_per_level; ++b)
            level_blocks.push_back(create_block_params(
                store, prefix + ".level" + std::to_string(l) + ".block" + std::to_string(b),
                spec.channels(l), spec.window_at(l), spec.heads(l), rng));
        p.blocks.push_back(std::move(level_blocks));
        if (l < spec.levels) {
            MergeParams<T> m;
            const std::int64_t c = spec.channels(l);
            const std::string mp = prefix + ".level" + std::to_string(l) + ".merge";
            m.norm_gain = store.create(mp + ".norm.gain", {4 * c});
            init::ones(m.norm_gain);
            m.norm_bias = store.create(mp + ".norm.bias", {4 * c});
            m.weight = store.create(mp + ".weight", {4 * c, 2 * c});
            init::trunc_normal(m.weight, rng, 0.02);
            m.bias = store.create(mp + ".bias", {2 * c});
            p.merges.push_back(std::move(m));
        }
    }
    return p;
}

/// [image, image, in_channels] -> [side1, side1, embed_dim]: flatten each
/// patch to a row and project it.
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& img, const EncoderSpec& spec,
                      const EncoderParams<T>& p) {
    if (img.rank() != 3 || img.dim(0) != spec.image_size || img.dim(1) != spec.image_size ||
        img.dim(2) != spec.in_channels)
        throw ShapeError("patch_embed: expected [" + std::to_string(spec.image_size) + "x" +
                         std::to_string(spec.image_size) + "x" +
                         std::to_string(spec.in_channels) + "], got " + shape_str(img.shape()));
    const std::int64_t s = spec.side(1);
    // Standardize with the stored statistics: (img - shift) / scale. The
    // buffers are frozen constants, so their values can be read directly; the
    // affine op still backpropagates to upstream activations when needed.
    const T shift = p.input_shift.data()[0];
    const T sc = p.input_scale.data()[0];
    auto x = affine(img, T(1) / sc, -shift / sc);
    auto rows = extract_patches(x, spec.patch);
    auto proj = add_rowwise(matmul(rows, p.embed_w), p.embed_b);
    return reshape(proj, {s, s, spec.embed_dim});
}

/// [H, W, C] -> [H/2, W/2, 2C]: gather 2x2 neighborhoods, normalize the 4C
/// concatenation, project down to 2C.
template <typename T>
Tensor<T> patch_merge(const Tensor<T>& x, const MergeParams<T>& m) {
    const std::int64_t h = x.dim(0), w = x.dim(1);
    auto grouped = group_2x2(x);  // [(H/2)(W/2), 4C]
    auto normed = layer_norm(grouped, m.norm_gain, m.norm_bias);
    auto proj = add_rowwise(matmul(normed, m.weight), m.bias);
    return reshape(proj, {h / 2, w / 2, m.weight.dim(1)});
}

template <typename T>
using PostLevelHook = std::function<Tensor<T>(std::int64_t, Tensor<T>)>;

/// Runs the full pyramid and returns one feature map per level, finest
/// first. post_level, when given, replaces each level's output before it is
/// stored and merged onward; this is how in-path feature fusion hooks in.
template <typename T>
std::vector<Tensor<T>> encoder_forward(
    const Tensor<T>& img, const EncoderSpec& spec, const EncoderParams<T>& p,
    const std::type_identity_t<PostLevelHook<T>>& post_level = nullptr) {
    std::vector<Tensor<T>> features;
    Tensor<T> x = patch_embed(img, spec, p);
    for (std::int64_t l = 1; l <= spec.levels; ++l) {
        for (std::int64_t b = 0; b < spec.blocks_per_level; ++b)
            x = swin_block(x, p.blocks[static_cast<std::size_t>(l - 1)][static_cast<std::size_t>(b)],
                           spec.window_at(l), spec.heads(l), b % 2 == 1);
        if (post_level) x = post_level(l, x);
        features.push_back(x);
        if (l < spec.levels) x = patch_merge(x, p.merges[static_cast<std::size_t>(l - 1)]);
    }
    return features;
}

// ---------------------------------------------------------------------------
// image-level classification head

template <typename T>
struct ClassifierParams {
    Tensor<T> weight;  // [C_top, num_classes]
    Tensor<T> bias;    // [num_classes]
};

template <typename T>
ClassifierParams<T> create_classifier_params(ParameterStore<T>& store, const std::string& prefix,
                                             std::int64_t c_top, std::int64_t classes, Rng& rng) {
    ClassifierParams<T> p;
    p.weight = store.create(prefix + ".head.weight", {c_top, classes});
    init::trunc_normal(p.weight, rng, 0.02);
    p.bias = store.create(prefix + ".head.bias", {classes});
    return p;
}

/// Mean-pools the coarsest feature map over its grid and projects to class
/// logits [1, num_classes].
template <typename T>
Tensor<T> classifier_head(const Tensor<T>& f_top, const ClassifierParams<T>& p) {
    const std::int64_t c = f_top.dim(2);
    auto pooled = mean_axis0(reshape(f_top, {f_top.dim(0) * f_top.dim(1), c}));
    return add_rowwise(matmul(reshape(pooled, {1, c}), p.weight), p.bias);
}

}  // namespace sks
