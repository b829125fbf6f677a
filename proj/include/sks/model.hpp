#pragma once

#include <cstdint>
#include <vector>

#include "sks/config.hpp"
#include "sks/decoder.hpp"
#include "sks/encoder.hpp"
#include "sks/fusion.hpp"

// Model assembly. Stage 1 is the classification branch alone; stage 2 pairs
// a frozen copy of that branch with the trainable segmentation branch and
// couples them through the three skip families.

namespace sks {

/// Classification branch: pyramid encoder plus image-level head. Every
/// parameter name starts with "coarse.", which is exactly the subset the
/// stage-2 model freezes.
template <typename T>
struct CoarseModel {
    EncoderSpec spec;
    ParameterStore<T> params;
    EncoderParams<T> encoder;
    ClassifierParams<T> head;
};

template <typename T>
CoarseModel<T> build_coarse_model(const ModelConfig& cfg, std::uint64_t seed) {
    CoarseModel<T> m;
    m.spec = cfg.to_spec();
    m.spec.validate();
    Rng rng(seed);
    m.encoder = create_encoder_params(m.params, "coarse", m.spec, rng);
    m.head = create_classifier_params(m.params, "coarse", m.spec.channels(m.spec.levels),
                                      /*classes=*/2, rng);
    return m;
}

/// Image [S, S, 3] -> class logits [1, 2] (no lesion / lesion).
template <typename T>
Tensor<T> forward_coarse(const CoarseModel<T>& m, const Tensor<T>& img) {
    const auto features = encoder_forward(img, m.spec, m.encoder);
    return classifier_head(features.back(), m.head);
}

/// Both branches plus skips and decoder. The classification branch (and its
/// head, unused here but kept so stage-1 checkpoints map onto the "coarse."
/// subset exactly) is present unless ablated away.
template <typename T>
struct SegModel {
    EncoderSpec spec;
    AblationFlags flags;
    ParameterStore<T> params;
    EncoderParams<T> coarse_encoder;  // valid only when flags.use_coarse()
    ClassifierParams<T> coarse_head;  // likewise
    EncoderParams<T> fine_encoder;
    SkipFusionSet<T> skips;
    DecoderParams<T> decoder;
};

template <typename T>
SegModel<T> build_seg_model(const ModelConfig& cfg, const AblationFlags& flags,
                            std::uint64_t seed) {
    SegModel<T> m;
    m.spec = cfg.to_spec();
    m.spec.validate();
    m.flags = flags;
    Rng rng(seed);
    if (flags.use_coarse()) {
        m.coarse_encoder = create_encoder_params(m.params, "coarse", m.spec, rng);
        m.coarse_head = create_classifier_params(m.params, "coarse",
                                                 m.spec.channels(m.spec.levels), 2, rng);
    }
    m.fine_encoder = create_encoder_params(m.params, "fine", m.spec, rng);
    m.skips = create_skip_fusion_set(m.params, m.spec, rng, flags.use_in_path_fusion(),
                                     flags.use_routed(), flags.use_prompt());
    m.decoder = create_decoder_params(m.params, m.spec, rng);
    return m;
}

template <typename T>
struct SegOutput {
    Tensor<T> logits;  // [S, S, 1] per-pixel foreground logits
    std::vector<Tensor<T>> coarse_features;  // finest first; empty when ablated
};

/// Runs the classification branch (when present), then the segmentation
/// branch with in-path fusion folded into its pyramid, then the decoder with
/// whichever skip families the flags enable.
template <typename T>
SegOutput<T> forward_seg(const SegModel<T>& m, const Tensor<T>& img) {
    SegOutput<T> out;
    if (m.flags.use_coarse())
        out.coarse_features = encoder_forward(img, m.spec, m.coarse_encoder);

    PostLevelHook<T> hook = nullptr;
    if (m.flags.use_in_path_fusion())
        hook = [&m, &out](std::int64_t level, Tensor<T> x) {
            return fuse(x, out.coarse_features[static_cast<std::size_t>(level - 1)],
                        m.skips.in_path[static_cast<std::size_t>(level - 1)]);
        };
    const auto fused = encoder_forward(img, m.spec, m.fine_encoder, hook);

    out.logits = decoder_forward(fused, out.coarse_features, m.spec, m.decoder, m.skips,
                                 m.flags.use_routed(), m.flags.use_prompt());
    return out;
}

}  // namespace sks
