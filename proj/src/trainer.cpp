#include "sks/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "sks/pgm.hpp"
#include "sks/tape.hpp"

namespace sks {

namespace {

/// Stream id reserved for the training shuffle, away from the per-sample
/// streams the generator burns.
constexpr std::uint64_t kShuffleStream = 0x5AFF1EULL;

Tensor<float> mask_to_target(const std::vector<std::uint8_t>& mask, std::int64_t side) {
    Tensor<float> t = Tensor<float>::zeros({side, side, 1});
    for (std::int64_t i = 0; i < side * side; ++i)
        t.data()[static_cast<std::size_t>(i)] = mask[static_cast<std::size_t>(i)] ? 1.0f : 0.0f;
    return t;
}

int predicted_label(const Tensor<float>& class_logits) {
    return class_logits.data()[1] > class_logits.data()[0] ? 1 : 0;
}

std::vector<const Sample*> training_split(const Dataset& data, const TrainConfig& cfg,
                                          const char* name) {
    if (data.image_size != cfg.model.image_size)
        throw ConfigError("dataset images are " + std::to_string(data.image_size) +
                          " pixels but the model expects " +
                          std::to_string(cfg.model.image_size));
    auto split = data.split(name);
    if (split.empty())
        throw ConfigError(std::string("training split '") + name + "' is empty");
    return split;
}

void abort_if_not_finite(double loss, std::int64_t step, const std::string& sample_id) {
    if (std::isfinite(loss)) return;
    throw NumericError("training diverged: non-finite loss at step " + std::to_string(step + 1) +
                       " (last sample " + sample_id + "); lower the learning rate or check the "
                       "data for non-finite values");
}

std::string fmt6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

}  // namespace

void SgdOptimizer::step(ParameterStore<float>& params) {
    for (auto& [name, p] : params) {
        if (!p.requires_grad()) continue;
        auto& v = velocity_[name];
        if (v.empty()) v.assign(static_cast<std::size_t>(p.numel()), 0.0f);
        const auto& g = p.grad_view();
        auto& x = p.data();
        const auto mu = static_cast<float>(momentum_);
        const auto lr = static_cast<float>(lr_);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const float gi = g.empty() ? 0.0f : g[i];
            v[i] = mu * v[i] + gi;
            x[i] -= lr * v[i];
        }
    }
}

std::vector<std::size_t> batch_order(std::size_t count, std::uint64_t seed) {
    std::vector<std::size_t> order(count);
    for (std::size_t i = 0; i < count; ++i) order[i] = i;
    Rng rng = Rng::fork(seed, kShuffleStream);
    rng.shuffle(order);
    return order;
}

void fit_input_stats(ParameterStore<float>& params, const std::string& prefix,
                     const std::vector<const Sample*>& samples) {
    double sum = 0.0, sum_sq = 0.0;
    std::int64_t n = 0;
    for (const Sample* s : samples) {
        const auto& v = s->image.data();
        for (float x : v) {
            sum += x;
            sum_sq += static_cast<double>(x) * x;
        }
        n += static_cast<std::int64_t>(v.size());
    }
    if (n == 0) throw ConfigError("fit_input_stats: no pixels to fit on");
    const double mean = sum / static_cast<double>(n);
    const double var = std::max(0.0, sum_sq / static_cast<double>(n) - mean * mean);
    const double sd = std::sqrt(var);
    params.at(prefix + ".input.shift").data()[0] = static_cast<float>(mean);
    // Degenerate (constant) inputs keep unit scale instead of dividing by ~0.
    params.at(prefix + ".input.scale").data()[0] = sd > 1e-6 ? static_cast<float>(sd) : 1.0f;
}

TrainResult train_coarse(const TrainConfig& cfg, const Dataset& data) {
    cfg.validate();
    if (cfg.stage != "coarse")
        throw ConfigError("train_coarse called with stage '" + cfg.stage + "'");
    const auto split = training_split(data, cfg, "coarse_train");

    auto model = build_coarse_model<float>(cfg.model, cfg.seed);
    fit_input_stats(model.params, "coarse", split);
    const auto order = batch_order(split.size(), cfg.seed);
    SgdOptimizer opt(cfg.optimizer.lr, cfg.optimizer.momentum);
    const auto batch = static_cast<std::size_t>(cfg.optimizer.batch);

    TrainResult res;
    std::size_t cursor = 0;
    for (std::int64_t step = 0; step < cfg.optimizer.steps; ++step) {
        model.params.zero_grad_all();
        double batch_loss = 0.0;
        std::string last_id;
        for (std::size_t j = 0; j < batch; ++j) {
            const Sample& s = *split[order[cursor]];
            cursor = (cursor + 1) % order.size();
            last_id = s.id;
            Tape<float> tape;
            auto logits = forward_coarse(model, s.image);
            auto loss = scale(cross_entropy_logits(logits, std::vector<int>{s.label}),
                              1.0f / static_cast<float>(batch));
            tape.backward(loss);
            batch_loss += static_cast<double>(loss.item());
        }
        abort_if_not_finite(batch_loss, step, last_id);
        res.losses.push_back(batch_loss);
        opt.step(model.params);
        if ((step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.optimizer.steps)
            res.evals.push_back({step + 1, evaluate_coarse(model, data, "coarse_train")});
    }

    if (!cfg.checkpoint_out.empty()) {
        save_checkpoint(cfg.checkpoint_out, "coarse", cfg.optimizer.steps,
                        topology_echo(cfg.model, AblationFlags{}), model.params);
        res.checkpoint_path = cfg.checkpoint_out;
    }
    return res;
}

TrainResult train_seg(const TrainConfig& cfg, const Dataset& data,
                      const std::string& coarse_ckpt) {
    cfg.validate();
    if (cfg.stage != "seg") throw ConfigError("train_seg called with stage '" + cfg.stage + "'");
    const auto split = training_split(data, cfg, "fine_train");
    const AblationFlags flags = cfg.ablation;

    Checkpoint ckpt;
    if (flags.use_coarse()) {
        if (coarse_ckpt.empty())
            throw ConfigError(
                "stage 'seg' needs a stage-1 checkpoint unless no_coarse_branch is set");
        ckpt = load_checkpoint(coarse_ckpt);
        if (ckpt.stage != "coarse")
            throw ConfigError("'" + coarse_ckpt + "' is a stage-" + ckpt.stage +
                              " checkpoint, not a stage-1 (coarse) one");
        ModelConfig ckpt_model;
        AblationFlags ckpt_flags;
        parse_topology_echo(ckpt.topology, ckpt_model, ckpt_flags);
        if (topology_echo(ckpt_model, AblationFlags{}) !=
            topology_echo(cfg.model, AblationFlags{}))
            throw ConfigError("coarse checkpoint '" + coarse_ckpt +
                              "' was trained with a different model config");
    } else if (!coarse_ckpt.empty()) {
        throw ConfigError("no_coarse_branch runs take no coarse checkpoint; got '" +
                          coarse_ckpt + "'");
    }

    auto model = build_seg_model<float>(cfg.model, flags, cfg.seed);
    if (flags.use_coarse()) {
        load_prefix_into(model.params, ckpt, "coarse.");
        model.params.freeze_prefix("coarse.");
    }
    fit_input_stats(model.params, "fine", split);

    const auto order = batch_order(split.size(), cfg.seed);
    SgdOptimizer opt(cfg.optimizer.lr, cfg.optimizer.momentum);
    const auto batch = static_cast<std::size_t>(cfg.optimizer.batch);
    const std::int64_t side = cfg.model.image_size;

    TrainResult res;
    std::size_t cursor = 0;
    for (std::int64_t step = 0; step < cfg.optimizer.steps; ++step) {
        model.params.zero_grad_all();
        double batch_loss = 0.0;
        std::string last_id;
        for (std::size_t j = 0; j < batch; ++j) {
            const Sample& s = *split[order[cursor]];
            cursor = (cursor + 1) % order.size();
            last_id = s.id;
            const auto target = mask_to_target(s.mask, side);
            Tape<float> tape;
            auto out = forward_seg(model, s.image);
            auto loss = scale(dice_loss(sigmoid(out.logits), target),
                              1.0f / static_cast<float>(batch));
            tape.backward(loss);
            batch_loss += static_cast<double>(loss.item());
        }
        abort_if_not_finite(batch_loss, step, last_id);
        res.losses.push_back(batch_loss);
        opt.step(model.params);
        if ((step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.optimizer.steps)
            res.evals.push_back(
                {step + 1, evaluate_seg(model, data, "fine_train").dsc});
    }

    if (!cfg.checkpoint_out.empty()) {
        save_checkpoint(cfg.checkpoint_out, "seg", cfg.optimizer.steps,
                        topology_echo(cfg.model, flags), model.params);
        res.checkpoint_path = cfg.checkpoint_out;
    }
    return res;
}

double evaluate_coarse(const CoarseModel<float>& m, const Dataset& data,
                       const std::string& split) {
    const auto samples = data.split(split);
    if (samples.empty()) throw ConfigError("evaluation split '" + split + "' is empty");
    std::vector<int> pred, truth;
    for (const Sample* s : samples) {
        pred.push_back(predicted_label(forward_coarse(m, s->image)));
        truth.push_back(s->label);
    }
    return classification_accuracy(pred, truth);
}

SegScores evaluate_seg(const SegModel<float>& m, const Dataset& data, const std::string& split) {
    const auto samples = data.split(split);
    if (samples.empty()) throw ConfigError("evaluation split '" + split + "' is empty");
    ConfusionCounts pooled;
    for (const Sample* s : samples) {
        const auto out = forward_seg(m, s->image);
        pooled += confusion(predict_mask(out.logits), s->mask);
    }
    return scores_from(pooled);
}

SegModel<float> seg_model_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.stage != "seg")
        throw ConfigError("expected a stage-2 (seg) checkpoint, got stage '" + ckpt.stage + "'");
    ModelConfig model;
    AblationFlags flags;
    parse_topology_echo(ckpt.topology, model, flags);
    auto m = build_seg_model<float>(model, flags, /*seed=*/0);
    load_into(m.params, ckpt);
    return m;
}

CoarseModel<float> coarse_model_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.stage != "coarse")
        throw ConfigError("expected a stage-1 (coarse) checkpoint, got stage '" + ckpt.stage +
                          "'");
    ModelConfig model;
    AblationFlags flags;
    parse_topology_echo(ckpt.topology, model, flags);
    auto m = build_coarse_model<float>(model, /*seed=*/0);
    load_into(m.params, ckpt);
    return m;
}

AblationResult run_ablation(const TrainConfig& coarse_cfg, const TrainConfig& seg_cfg,
                            const Dataset& data, const std::string& workdir) {
    coarse_cfg.validate();
    seg_cfg.validate();
    if (coarse_cfg.stage != "coarse" || seg_cfg.stage != "seg")
        throw ConfigError("ablation needs one stage-1 config and one stage-2 config");
    if (seg_cfg.ablation.no_coarse_branch || seg_cfg.ablation.no_prompt_skip ||
        seg_cfg.ablation.no_rcs)
        throw ConfigError("the stage-2 ablation config must describe the full variant; the "
                          "harness derives the removals itself");
    if (topology_echo(coarse_cfg.model, AblationFlags{}) !=
        topology_echo(seg_cfg.model, AblationFlags{}))
        throw ConfigError("ablation stage configs disagree on the model");
    std::filesystem::create_directories(workdir);

    // Stage 1 runs once; every variant that keeps the branch reuses it.
    std::string coarse_path, coarse_error;
    try {
        TrainConfig c = coarse_cfg;
        c.checkpoint_out = (std::filesystem::path(workdir) / "coarse.skpt").string();
        coarse_path = train_coarse(c, data).checkpoint_path;
    } catch (const std::exception& e) {
        coarse_error = e.what();
    }

    struct Variant {
        const char* name;
        AblationFlags flags;
        double reference_dsc;
    };
    const Variant variants[] = {
        {"full", {false, false, false}, 0.549},
        {"no_coarse_branch", {true, false, false}, 0.420},
        {"no_prompt_skip", {false, true, false}, 0.505},
        {"no_rcs", {false, false, true}, 0.467},
    };

    AblationResult result;
    for (const Variant& v : variants) {
        AblationRow row;
        row.variant = v.name;
        row.reference_dsc = v.reference_dsc;
        try {
            row.param_count =
                build_seg_model<float>(seg_cfg.model, v.flags, seg_cfg.seed).params.total_scalars();
            if (v.flags.use_coarse() && !coarse_error.empty())
                throw ConfigError("stage-1 training failed: " + coarse_error);
            TrainConfig s = seg_cfg;
            s.ablation = v.flags;
            s.checkpoint_out =
                (std::filesystem::path(workdir) / (std::string(v.name) + ".skpt")).string();
            const auto trained = train_seg(s, data, v.flags.use_coarse() ? coarse_path : "");
            const auto restored = seg_model_from_checkpoint(load_checkpoint(trained.checkpoint_path));
            row.scores = evaluate_seg(restored, data, "val");
            row.ok = true;
        } catch (const std::exception& e) {
            row.error = e.what();
        }
        result.rows.push_back(row);
    }

    std::string csv = "variant,status,parameters,dsc,jaccard,precision,recall,reference_dsc\n";
    for (const auto& row : result.rows) {
        csv += row.variant;
        if (row.ok) {
            csv += ",ok," + std::to_string(row.param_count);
            csv += "," + fmt6(row.scores.dsc) + "," + fmt6(row.scores.jaccard);
            csv += "," + fmt6(row.scores.precision) + "," + fmt6(row.scores.recall);
        } else {
            std::string note = row.error;
            for (auto& ch : note)
                if (ch == ',' || ch == '\n') ch = ';';
            csv += ",failed: " + note + "," + std::to_string(row.param_count) + ",,,,";
        }
        csv += "," + fmt6(row.reference_dsc) + "\n";
    }
    result.csv = csv;
    return result;
}

InferOutput infer(const std::string& ckpt_path, const std::string& input_path,
                  const std::string& out_prefix) {
    const auto model = seg_model_from_checkpoint(load_checkpoint(ckpt_path));
    const auto rec = load_skst(input_path);
    const auto img = rec.as<float>();
    const std::int64_t side = model.spec.image_size;
    if (img.shape() != Shape{side, side, 3})
        throw ShapeError("inference input " + shape_str(img.shape()) +
                         " does not match the model's expected [" + std::to_string(side) + "," +
                         std::to_string(side) + ",3]");

    const auto out = forward_seg(model, img);
    InferOutput res;
    res.logits_path = out_prefix + ".logits.skst";
    res.mask_path = out_prefix + ".mask.pgm";
    save_skst(res.logits_path, "logits", out.logits);
    res.mask = predict_mask(out.logits);
    std::vector<float> shade(res.mask.size());
    for (std::size_t i = 0; i < res.mask.size(); ++i) shade[i] = res.mask[i] ? 1.0f : 0.0f;
    write_pgm(res.mask_path, shade, side, side);
    return res;
}

}  // namespace sks
