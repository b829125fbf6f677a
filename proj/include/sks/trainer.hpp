#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sks/checkpoint.hpp"
#include "sks/config.hpp"
#include "sks/data.hpp"
#include "sks/losses.hpp"
#include "sks/model.hpp"

// Two-stage training, evaluation, the ablation harness and single-image
// inference. Everything here is deterministic given (config, dataset):
// rerunning a job reproduces its loss curve, logs and checkpoint bitwise.

namespace sks {

/// Gradient descent with momentum: v <- momentum*v + g, p <- p - lr*v,
/// applied to the trainable parameters in name order. Frozen parameters are
/// never touched.
class SgdOptimizer {
public:
    SgdOptimizer(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

    void step(ParameterStore<float>& params);

private:
    double lr_;
    double momentum_;
    std::map<std::string, std::vector<float>> velocity_;
};

/// Sample order for training: one seeded shuffle of the split, then batches
/// walk it cyclically. The order never reshuffles, so any two steps a whole
/// number of epochs apart see identical batches.
std::vector<std::size_t> batch_order(std::size_t count, std::uint64_t seed);

struct EvalPoint {
    std::int64_t step = 0;  // optimizer steps completed
    double value = 0.0;     // accuracy (stage 1) or pooled overlap score (stage 2)
};

struct TrainResult {
    std::vector<double> losses;    // batch-mean loss per step
    std::vector<EvalPoint> evals;  // recorded every eval_interval and at the end
    std::string checkpoint_path;   // empty when cfg.checkpoint_out was empty
};

/// Fits an encoder's "<prefix>.input.shift" / "<prefix>.input.scale"
/// standardization buffers from the pixel mean and standard deviation of the
/// given samples. Both trainers call this on their training split before the
/// first step; the fitted values ride along in checkpoints.
void fit_input_stats(ParameterStore<float>& params, const std::string& prefix,
                     const std::vector<const Sample*>& samples);

/// Stage 1: the classification branch on image-level labels.
TrainResult train_coarse(const TrainConfig& cfg, const Dataset& data);

/// Stage 2: the segmentation branch, decoder and skips on pixel masks, with
/// the classification branch loaded from `coarse_ckpt` and frozen. With
/// no_coarse_branch set, `coarse_ckpt` must be empty.
TrainResult train_seg(const TrainConfig& cfg, const Dataset& data,
                      const std::string& coarse_ckpt);

/// Fraction of split samples whose predicted image-level label is correct.
double evaluate_coarse(const CoarseModel<float>& m, const Dataset& data,
                       const std::string& split);

/// Confusion counts pooled over every pixel of the split, then scored once.
SegScores evaluate_seg(const SegModel<float>& m, const Dataset& data, const std::string& split);

/// Rebuilds the exact model a checkpoint was saved from and restores it.
SegModel<float> seg_model_from_checkpoint(const Checkpoint& ckpt);
CoarseModel<float> coarse_model_from_checkpoint(const Checkpoint& ckpt);

struct AblationRow {
    std::string variant;
    bool ok = false;
    std::string error;          // failure reason when !ok
    std::int64_t param_count = 0;
    SegScores scores;           // validation-split scores when ok
    double reference_dsc = 0.0; // published score this variant echoes
};

struct AblationResult {
    std::vector<AblationRow> rows;
    std::string csv;  // deterministic text, one line per variant
};

/// Trains the full two-stage pipeline plus the three single-component
/// removals, evaluates each on the validation split, and reports per-variant
/// scores next to the published reference numbers. A variant that fails
/// carries its error in the row instead of aborting the others.
AblationResult run_ablation(const TrainConfig& coarse_cfg, const TrainConfig& seg_cfg,
                            const Dataset& data, const std::string& workdir);

struct InferOutput {
    std::string logits_path;  // per-pixel logits, tensor record
    std::string mask_path;    // thresholded mask, PGM image
    std::vector<std::uint8_t> mask;
};

/// Runs a segmentation checkpoint on one stored image [S, S, 3] and writes
/// {out_prefix}.logits.skst and {out_prefix}.mask.pgm.
InferOutput infer(const std::string& ckpt_path, const std::string& input_path,
                  const std::string& out_prefix);

}  // namespace sks
