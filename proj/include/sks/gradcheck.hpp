#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "sks/params.hpp"
#include "sks/rng.hpp"
#include "sks/tape.hpp"
#include "sks/tensor.hpp"

// Central-finite-difference verification of reverse-mode gradients, run at
// 64-bit precision. The loss function must be a pure, deterministic function
// of the leaf tensors and must not install its own tape.

namespace sks {

struct GradCheckEntry {
    std::string param;
    std::int64_t index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::int64_t entries_checked = 0;
    double loss = 0.0;
    GradCheckEntry worst;
};

inline double gradcheck_rel_err(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(1e-8, std::abs(numeric));
}

/// Checks d(loss)/d(leaf[i]) for sampled entries of the given leaves against
/// (f(x+h) - f(x-h)) / 2h. At most max_entries entries are drawn (without
/// replacement) across all leaves; max_entries <= 0 means every entry.
inline GradCheckReport check_gradients_of(
    std::vector<std::pair<std::string, Tensor<double>>> leaves,
    const std::function<Tensor<double>()>& loss_fn, std::int64_t max_entries, double step,
    Rng& rng) {
    NumericChecksGuard guard(true);
    for (auto& [name, t] : leaves) t.zero_grad();

    GradCheckReport report;
    std::vector<std::vector<double>> analytic(leaves.size());
    {
        Tape<double> tape;
        Tensor<double> loss = loss_fn();
        report.loss = loss.item();
        tape.backward(loss);
    }
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        const auto& g = leaves[li].second.grad_view();
        analytic[li] = g.empty() ? std::vector<double>(
                                       static_cast<std::size_t>(leaves[li].second.numel()), 0.0)
                                 : g;
    }

    std::vector<std::pair<std::size_t, std::int64_t>> entries;
    for (std::size_t li = 0; li < leaves.size(); ++li)
        for (std::int64_t i = 0; i < leaves[li].second.numel(); ++i) entries.emplace_back(li, i);
    if (max_entries > 0 && static_cast<std::int64_t>(entries.size()) > max_entries) {
        // partial Fisher-Yates: the first max_entries slots become the sample
        for (std::int64_t i = 0; i < max_entries; ++i) {
            const std::int64_t j =
                rng.uniform_int(i, static_cast<std::int64_t>(entries.size()) - 1);
            std::swap(entries[static_cast<std::size_t>(i)], entries[static_cast<std::size_t>(j)]);
        }
        entries.resize(static_cast<std::size_t>(max_entries));
    }

    for (const auto& [li, idx] : entries) {
        auto& vec = leaves[li].second.data();
        const double saved = vec[static_cast<std::size_t>(idx)];
        vec[static_cast<std::size_t>(idx)] = saved + step;
        const double fp = loss_fn().item();
        vec[static_cast<std::size_t>(idx)] = saved - step;
        const double fm = loss_fn().item();
        vec[static_cast<std::size_t>(idx)] = saved;

        const double numeric = (fp - fm) / (2.0 * step);
        const double a = analytic[li][static_cast<std::size_t>(idx)];
        const double rel = gradcheck_rel_err(a, numeric);
        ++report.entries_checked;
        if (rel >= report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst = {leaves[li].first, idx, a, numeric, rel};
        }
    }
    return report;
}

/// Same check over every trainable parameter in a store.
inline GradCheckReport check_gradients(ParameterStore<double>& params,
                                       const std::function<Tensor<double>()>& loss_fn,
                                       std::int64_t max_entries, double step, Rng& rng) {
    std::vector<std::pair<std::string, Tensor<double>>> leaves;
    for (auto& [name, t] : params)
        if (t.requires_grad()) leaves.emplace_back(name, t);
    return check_gradients_of(std::move(leaves), loss_fn, max_entries, step, rng);
}

}  // namespace sks
