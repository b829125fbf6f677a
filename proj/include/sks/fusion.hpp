#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sks/encoder.hpp"

// Feature fusion between branches. The primitive is a per-position linear
// map on the channel concatenation of two same-shape feature maps:
// out = (primary (+) context) . W + b, with W [2C, C] and b [C].
//
// Three skip families are built from it:
//  - in-path fusion at every level, merging the trainable branch's feature
//    with the frozen classification branch's feature before the next merge;
//  - routing of those fused maps to the decoder's matching levels;
//  - routing of the raw classification-branch features to the decoder as
//    prompts.

namespace sks {

template <typename T>
struct FusionParams {
    Tensor<T> weight;  // [2C, C]
    Tensor<T> bias;    // [C]
};

/// Weight starts as [I; 0] plus small noise so an untrained layer passes
/// the primary input through nearly unchanged; bias starts at zero.
template <typename T>
FusionParams<T> create_fusion_params(ParameterStore<T>& store, const std::string& prefix,
                                     std::int64_t c, Rng& rng, double noise_sigma = 0.01) {
    FusionParams<T> p;
    p.weight = store.create(prefix + ".weight", {2 * c, c});
    init::fusion_identity(p.weight, rng, noise_sigma);
    p.bias = store.create(prefix + ".bias", {c});
    return p;
}

template <typename T>
Tensor<T> fuse(const Tensor<T>& primary, const Tensor<T>& context, const FusionParams<T>& p) {
    if (primary.shape() != context.shape())
        throw ShapeError("fuse: inputs differ " + shape_str(primary.shape()) + " vs " +
                         shape_str(context.shape()));
    const std::int64_t c = primary.shape().back();
    if (p.weight.rank() != 2 || p.weight.dim(0) != 2 * c || p.weight.dim(1) != c)
        throw ShapeError("fuse: weight " + shape_str(p.weight.shape()) + " does not fuse " +
                         std::to_string(c) + " channels");
    const std::int64_t rows = primary.numel() / c;
    auto cat = reshape(concat_last(primary, context), {rows, 2 * c});
    auto out = add_rowwise(matmul(cat, p.weight), p.bias);
    return reshape(out, primary.shape());
}

/// Per-level fusion parameters for the three skip families. Levels are
/// 1-based; in-path fusion covers every level, the two decoder-bound
/// families stop short of the bottleneck level.
template <typename T>
struct SkipFusionSet {
    std::vector<FusionParams<T>> in_path;    // fss.level{1..L}
    std::vector<FusionParams<T>> routed;     // rcs.level{1..L-1}
    std::vector<FusionParams<T>> prompt;     // prompt.level{1..L-1}
};

template <typename T>
SkipFusionSet<T> create_skip_fusion_set(ParameterStore<T>& store, const EncoderSpec& spec,
                                        Rng& rng, bool with_in_path, bool with_routed,
                                        bool with_prompt) {
    SkipFusionSet<T> s;
    if (with_in_path)
        for (std::int64_t l = 1; l <= spec.levels; ++l)
            s.in_path.push_back(create_fusion_params(store, "fss.level" + std::to_string(l),
                                                     spec.channels(l), rng));
    if (with_routed)
        for (std::int64_t l = 1; l < spec.levels; ++l)
            s.routed.push_back(create_fusion_params(store, "rcs.level" + std::to_string(l),
                                                    spec.channels(l), rng));
    if (with_prompt)
        for (std::int64_t l = 1; l < spec.levels; ++l)
            s.prompt.push_back(create_fusion_params(store, "prompt.level" + std::to_string(l),
                                                    spec.channels(l), rng));
    return s;
}

}  // namespace sks
