#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sks/fusion.hpp"

// Mask decoder: walks the pyramid coarse-to-fine. Each step doubles the grid
// with a patch-expanding projection, then folds in the routed skip features
// at that level. A final expanding head restores full image resolution and
// projects to one logit per pixel.

namespace sks {

template <typename T>
struct ExpandParams {
    Tensor<T> weight;  // [C_in, 4*C_out]
    Tensor<T> bias;    // [4*C_out]
};

/// [H, W, C_in] -> [2H, 2W, C_out]: project each position to four C_out
/// groups and scatter them onto the doubled grid (group d at offset
/// (d/2, d%2), the inverse arrangement of the 2x2 merge).
template <typename T>
Tensor<T> patch_expand(const Tensor<T>& x, const ExpandParams<T>& p) {
    if (x.rank() != 3 || p.weight.rank() != 2 || p.weight.dim(0) != x.dim(2) ||
        p.weight.dim(1) % 4 != 0)
        throw ShapeError("patch_expand: cannot expand " + shape_str(x.shape()) + " with " +
                         shape_str(p.weight.shape()));
    const std::int64_t h = x.dim(0), w = x.dim(1), cin = x.dim(2);
    auto rows = reshape(x, {h * w, cin});
    auto proj = add_rowwise(matmul(rows, p.weight), p.bias);  // [H*W, 4*C_out]
    return ungroup_2x2(proj, h, w);
}

template <typename T>
ExpandParams<T> create_expand_params(ParameterStore<T>& store, const std::string& prefix,
                                     std::int64_t c_in, std::int64_t c_out, Rng& rng) {
    ExpandParams<T> p;
    p.weight = store.create(prefix + ".weight", {c_in, 4 * c_out});
    // Fan-in-scaled init: the decoder is a plain (non-residual) chain of
    // projections, so a fixed small sigma would attenuate activations and
    // gradients geometrically with depth; 1/sqrt(fan_in) keeps the variance
    // of each stage's output near its input's.
    init::trunc_normal(p.weight, rng, 1.0 / std::sqrt(static_cast<double>(c_in)));
    p.bias = store.create(prefix + ".bias", {4 * c_out});
    return p;
}

/// Mask head channel width after each expansion never drops below 4.
inline std::int64_t head_channels_after(std::int64_t c) { return c / 2 > 4 ? c / 2 : 4; }

template <typename T>
struct DecoderParams {
    std::vector<ExpandParams<T>> expand;       // decoder.level{L-1..1}.expand, stored fine-first
    std::vector<ExpandParams<T>> head_expand;  // decoder.head.expand{0..log2(patch)-1}
    Tensor<T> head_proj_w;                     // [C_final, 1]
    Tensor<T> head_proj_b;                     // [1]
};

template <typename T>
DecoderParams<T> create_decoder_params(ParameterStore<T>& store, const EncoderSpec& spec,
                                       Rng& rng) {
    DecoderParams<T> p;
    p.expand.resize(static_cast<std::size_t>(spec.levels - 1));
    for (std::int64_t l = spec.levels - 1; l >= 1; --l)
        p.expand[static_cast<std::size_t>(l - 1)] =
            create_expand_params(store, "decoder.level" + std::to_string(l) + ".expand",
                                 spec.channels(l + 1), spec.channels(l), rng);
    std::int64_t c = spec.channels(1);
    std::int64_t stages = 0;
    for (std::int64_t pp = spec.patch; pp > 1; pp /= 2) ++stages;
    for (std::int64_t i = 0; i < stages; ++i) {
        const std::int64_t c_out = head_channels_after(c);
        p.head_expand.push_back(create_expand_params(
            store, "decoder.head.expand" + std::to_string(i), c, c_out, rng));
        c = c_out;
    }
    p.head_proj_w = store.create("decoder.head.proj.weight", {c, 1});
    init::trunc_normal(p.head_proj_w, rng, 1.0 / std::sqrt(static_cast<double>(c)));
    p.head_proj_b = store.create("decoder.head.proj.bias", {1});
    return p;
}

/// fused: per-level features from the trainable branch's pyramid (after
/// in-path fusion), finest first, length L. coarse: the classification
/// branch's features for the prompts (may be empty when that skip is off).
/// Returns per-pixel logits [image, image, 1].
template <typename T>
Tensor<T> decoder_forward(const std::vector<Tensor<T>>& fused,
                          const std::vector<Tensor<T>>& coarse, const EncoderSpec& spec,
                          const DecoderParams<T>& p, const SkipFusionSet<T>& skips,
                          bool use_routed, bool use_prompt) {
    if (static_cast<std::int64_t>(fused.size()) != spec.levels)
        throw ShapeError("decoder: expected " + std::to_string(spec.levels) +
                         " pyramid features, got " + std::to_string(fused.size()));
    if (use_prompt && static_cast<std::int64_t>(coarse.size()) != spec.levels)
        throw ShapeError("decoder: prompt skip needs all classification-branch features");

    Tensor<T> d = fused.back();  // bottleneck level carries only in-path fusion
    for (std::int64_t l = spec.levels - 1; l >= 1; --l) {
        d = patch_expand(d, p.expand[static_cast<std::size_t>(l - 1)]);
        if (use_routed)
            d = fuse(d, fused[static_cast<std::size_t>(l - 1)],
                     skips.routed[static_cast<std::size_t>(l - 1)]);
        if (use_prompt)
            d = fuse(d, coarse[static_cast<std::size_t>(l - 1)],
                     skips.prompt[static_cast<std::size_t>(l - 1)]);
    }
    for (const auto& e : p.head_expand) d = patch_expand(d, e);
    const std::int64_t hh = d.dim(0), ww = d.dim(1), c = d.dim(2);
    auto logits = add_rowwise(matmul(reshape(d, {hh * ww, c}), p.head_proj_w), p.head_proj_b);
    return reshape(logits, {hh, ww, 1});
}

/// Thresholds sigmoid probabilities strictly above one half.
template <typename T>
std::vector<std::uint8_t> predict_mask(const Tensor<T>& logits) {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(logits.numel()));
    for (std::int64_t i = 0; i < logits.numel(); ++i)
        mask[static_cast<std::size_t>(i)] = logits.data()[i] > T(0) ? 1 : 0;
    return mask;
}

}  // namespace sks
