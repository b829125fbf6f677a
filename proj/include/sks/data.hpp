#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sks/config.hpp"
#include "sks/tensor.hpp"

// Data pipeline: CT-style preprocessing (intensity windowing, neighbor-slice
// stacking), the synthetic lesion generator, and the on-disk dataset layout
// (manifest.json plus one image and one mask tensor record per sample).

namespace sks {

inline constexpr double kWindowLow = -200.0;
inline constexpr double kWindowHigh = 200.0;

/// Clamps raw intensities to [-200, 200] and maps the range linearly onto
/// [0, 1].
template <typename T>
Tensor<T> hu_window(const Tensor<T>& raw) {
    Tensor<T> out = Tensor<T>::zeros(raw.shape());
    const T lo = static_cast<T>(kWindowLow), hi = static_cast<T>(kWindowHigh);
    for (std::int64_t i = 0; i < raw.numel(); ++i) {
        T v = raw.data()[i];
        if (v < lo) v = lo;
        if (v > hi) v = hi;
        out.data()[i] = (v - lo) / (hi - lo);
    }
    return out;
}

/// volume [N, H, W] -> image [H, W, 3] stacking slices (i-1, i, i+1) as
/// channels; boundary slices replicate. Channel 1 is always the center
/// slice, bit for bit.
template <typename T>
Tensor<T> stack_adjacent(const Tensor<T>& volume, std::int64_t index) {
    if (volume.rank() != 3)
        throw ShapeError("stack_adjacent: expected [slices,H,W], got " +
                         shape_str(volume.shape()));
    const std::int64_t n = volume.dim(0), h = volume.dim(1), w = volume.dim(2);
    if (index < 0 || index >= n)
        throw ShapeError("stack_adjacent: slice " + std::to_string(index) + " out of " +
                         std::to_string(n));
    const std::int64_t below = index > 0 ? index - 1 : 0;
    const std::int64_t above = index < n - 1 ? index + 1 : n - 1;
    Tensor<T> out = Tensor<T>::zeros({h, w, 3});
    const std::int64_t src[3] = {below, index, above};
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
            for (int ch = 0; ch < 3; ++ch)
                out.data()[(y * w + x) * 3 + ch] = volume.data()[(src[ch] * h + y) * w + x];
    return out;
}

/// Image-level label: 1 iff the mask has any foreground pixel.
inline int coarse_label(const std::vector<std::uint8_t>& mask) {
    for (auto v : mask)
        if (v != 0) return 1;
    return 0;
}

struct Sample {
    std::string id;
    std::string split;  // "coarse_train", "fine_train" or "val"
    int label = 0;
    Tensor<float> image;              // [S, S, 3] in [0, 1]
    std::vector<std::uint8_t> mask;   // S*S binary foreground
};

struct Dataset {
    std::int64_t image_size = 0;
    std::vector<Sample> samples;

    std::vector<const Sample*> split(const std::string& name) const {
        std::vector<const Sample*> out;
        for (const auto& s : samples)
            if (s.split == name) out.push_back(&s);
        return out;
    }
};

/// Deterministic synthetic sample: id, split and content depend only on
/// (config, global index).
Sample generate_sample(const SynthConfig& cfg, std::int64_t index);

/// All samples for every split, ordered by global index.
Dataset generate_dataset(const SynthConfig& cfg);

/// Generates and writes manifest.json plus per-sample tensor records into
/// cfg.output (created if needed).
void write_dataset(const SynthConfig& cfg);

/// Loads a dataset directory, validating the manifest schema and the
/// label-mask consistency of every sample.
Dataset load_dataset(const std::string& dir);

/// Converts a raw intensity volume plus per-slice masks into samples:
/// windowing, neighbor stacking and label derivation. Rejects non-binary
/// masks.
std::vector<Sample> ingest_raw_volume(const Tensor<float>& volume_raw,
                                      const Tensor<float>& masks, const std::string& id_prefix,
                                      const std::string& split);

}  // namespace sks
