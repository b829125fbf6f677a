#pragma once

#include <cstdint>
#include <vector>

#include "sks/ops.hpp"

// Training losses (differentiable, built from taped primitives) and mask
// evaluation metrics (plain counts over binary masks).

namespace sks {

inline constexpr double kDiceEps = 1e-5;

/// 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps) over soft foreground
/// probabilities p and a binary target t of the same shape.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& target) {
    if (probs.shape() != target.shape())
        throw ShapeError("dice_loss: shapes differ " + shape_str(probs.shape()) + " vs " +
                         shape_str(target.shape()));
    auto inter = sum_all(mul(probs, target));
    auto sums = add(sum_all(probs), sum_all(target));
    auto ratio = div(affine(inter, T(2), static_cast<T>(kDiceEps)),
                     affine(sums, T(1), static_cast<T>(kDiceEps)));
    return affine(ratio, T(-1), T(1));
}

// ---------------------------------------------------------------------------
// mask metrics

struct ConfusionCounts {
    std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;

    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
};

inline ConfusionCounts confusion(const std::vector<std::uint8_t>& pred,
                                 const std::vector<std::uint8_t>& target) {
    if (pred.size() != target.size())
        throw ShapeError("confusion: mask sizes differ: " + std::to_string(pred.size()) +
                         " vs " + std::to_string(target.size()));
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0, t = target[i] != 0;
        if (p && t)
            ++c.tp;
        else if (p && !t)
            ++c.fp;
        else if (!p && t)
            ++c.fn;
        else
            ++c.tn;
    }
    return c;
}

struct SegScores {
    double dsc = 0.0;
    double jaccard = 0.0;
    double precision = 0.0;
    double recall = 0.0;
};

namespace detail {
/// Ratio with the empty-set convention: when the denominator is zero the
/// score is 1 if the counterpart region is also empty, otherwise 0.
inline double safe_ratio(std::int64_t num, std::int64_t den, bool counterpart_empty) {
    if (den == 0) return counterpart_empty ? 1.0 : 0.0;
    return static_cast<double>(num) / static_cast<double>(den);
}
}  // namespace detail

inline SegScores scores_from(const ConfusionCounts& c) {
    SegScores s;
    const bool pred_empty = c.tp + c.fp == 0;
    const bool target_empty = c.tp + c.fn == 0;
    s.dsc = detail::safe_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, true);
    s.jaccard = detail::safe_ratio(c.tp, c.tp + c.fp + c.fn, true);
    s.precision = detail::safe_ratio(c.tp, c.tp + c.fp, target_empty);
    s.recall = detail::safe_ratio(c.tp, c.tp + c.fn, pred_empty);
    return s;
}

inline SegScores segmentation_metrics(const std::vector<std::uint8_t>& pred,
                                      const std::vector<std::uint8_t>& target) {
    return scores_from(confusion(pred, target));
}

inline double classification_accuracy(const std::vector<int>& predicted,
                                      const std::vector<int>& labels) {
    if (predicted.size() != labels.size() || predicted.empty())
        throw ShapeError("accuracy: prediction/label count mismatch");
    std::int64_t hit = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i)
        if (predicted[i] == labels[i]) ++hit;
    return static_cast<double>(hit) / static_cast<double>(predicted.size());
}

}  // namespace sks
