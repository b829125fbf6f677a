// Command-line surface for the two-stage segmentation pipeline: data
// generation, both training stages, evaluation, the ablation harness,
// inference and a finite-difference gradient audit.

#include <cstdio>
#include <exception>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sks/gradcheck.hpp"
#include "sks/trainer.hpp"

namespace {

using namespace sks;

void print_eval_points(const TrainResult& r, const char* metric_name) {
    for (const auto& e : r.evals)
        std::printf("step %6lld  %s %.6f\n", static_cast<long long>(e.step), metric_name,
                    e.value);
}

void maybe_write_loss_log(const TrainResult& r, const std::string& path) {
    if (path.empty()) return;
    std::ofstream out(path);
    if (!out) throw IoError("cannot write loss log '" + path + "'");
    out << "step,loss\n";
    char buf[64];
    for (std::size_t i = 0; i < r.losses.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.9f\n", i + 1, r.losses[i]);
        out << buf;
    }
}

int cmd_train_coarse(const std::string& config_path, const std::string& log_path) {
    const TrainConfig cfg = parse_train_config_file(config_path);
    const Dataset data = load_dataset(cfg.dataset);
    const TrainResult r = train_coarse(cfg, data);
    print_eval_points(r, "train-accuracy");
    maybe_write_loss_log(r, log_path);
    if (!r.checkpoint_path.empty())
        std::printf("checkpoint written to %s\n", r.checkpoint_path.c_str());
    return 0;
}

int cmd_train_seg(const std::string& config_path, const std::string& coarse_ckpt,
                  const std::string& log_path) {
    const TrainConfig cfg = parse_train_config_file(config_path);
    const Dataset data = load_dataset(cfg.dataset);
    const TrainResult r = train_seg(cfg, data, coarse_ckpt);
    print_eval_points(r, "train-dsc");
    maybe_write_loss_log(r, log_path);
    if (!r.checkpoint_path.empty())
        std::printf("checkpoint written to %s\n", r.checkpoint_path.c_str());
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& dataset_dir,
             const std::string& split, const std::string& out_path) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const Dataset data = load_dataset(dataset_dir);
    std::string text;
    if (ckpt.stage == "coarse") {
        const auto model = coarse_model_from_checkpoint(ckpt);
        char buf[128];
        std::snprintf(buf, sizeof(buf), "split,accuracy\n%s,%.6f\n", split.c_str(),
                      evaluate_coarse(model, data, split));
        text = buf;
    } else {
        const auto model = seg_model_from_checkpoint(ckpt);
        const SegScores s = evaluate_seg(model, data, split);
        char buf[192];
        std::snprintf(buf, sizeof(buf),
                      "split,dsc,jaccard,precision,recall\n%s,%.6f,%.6f,%.6f,%.6f\n",
                      split.c_str(), s.dsc, s.jaccard, s.precision, s.recall);
        text = buf;
    }
    std::fputs(text.c_str(), stdout);
    if (!out_path.empty()) {
        std::ofstream out(out_path);
        if (!out) throw IoError("cannot write '" + out_path + "'");
        out << text;
    }
    return 0;
}

int cmd_ablate(const std::string& coarse_config, const std::string& seg_config,
               const std::string& workdir, const std::string& out_path) {
    const TrainConfig coarse_cfg = parse_train_config_file(coarse_config);
    const TrainConfig seg_cfg = parse_train_config_file(seg_config);
    if (coarse_cfg.dataset != seg_cfg.dataset)
        throw ConfigError("ablation stage configs point at different datasets");
    const Dataset data = load_dataset(seg_cfg.dataset);
    const AblationResult r = run_ablation(coarse_cfg, seg_cfg, data, workdir);
    std::fputs(r.csv.c_str(), stdout);
    if (!out_path.empty()) {
        std::ofstream out(out_path);
        if (!out) throw IoError("cannot write '" + out_path + "'");
        out << r.csv;
    }
    int failures = 0;
    for (const auto& row : r.rows)
        if (!row.ok) ++failures;
    return failures == 0 ? 0 : 1;
}

int cmd_infer(const std::string& ckpt_path, const std::string& input_path,
              const std::string& out_prefix) {
    const InferOutput out = infer(ckpt_path, input_path, out_prefix);
    std::int64_t foreground = 0;
    for (auto v : out.mask) foreground += v;
    std::printf("logits: %s\nmask:   %s (%lld foreground pixels)\n", out.logits_path.c_str(),
                out.mask_path.c_str(), static_cast<long long>(foreground));
    return 0;
}

int cmd_gen_data(const std::string& config_path) {
    const SynthConfig cfg = parse_synth_config_file(config_path);
    write_dataset(cfg);
    const auto total = cfg.counts.coarse_train + cfg.counts.fine_train + cfg.counts.val;
    std::printf("wrote %lld samples to %s\n", static_cast<long long>(total),
                cfg.output.c_str());
    return 0;
}

/// Generator settings for the single probe image the gradient audit uses:
/// guaranteed lesion, radii scaled to the configured resolution.
SynthConfig gradcheck_probe_config(const ModelConfig& model, std::uint64_t seed) {
    SynthConfig s;
    s.output = "unused";
    s.image_size = model.image_size;
    s.lesion_probability = 1.0;
    s.radius_min = std::max<std::int64_t>(2, model.image_size / 8);
    s.radius_max = std::max(s.radius_min, model.image_size / 4);
    if (2 * s.radius_max >= model.image_size) s.radius_max = model.image_size / 2 - 1;
    s.intensity_offset = 0.5;
    s.noise_sigma = 0.05;
    s.seed = seed;
    s.counts = {1, 0, 0};
    return s;
}

int cmd_gradcheck(const std::string& config_path) {
    const GradcheckConfig cfg = parse_gradcheck_config_file(config_path);
    auto model = build_seg_model<double>(cfg.model, AblationFlags{}, cfg.seed);
    const Sample probe = generate_sample(gradcheck_probe_config(cfg.model, cfg.seed), 0);
    const auto image = cast_tensor<double>(probe.image);
    auto target = Tensor<double>::zeros({cfg.model.image_size, cfg.model.image_size, 1});
    for (std::size_t i = 0; i < probe.mask.size(); ++i)
        target.data()[i] = probe.mask[i] ? 1.0 : 0.0;

    Rng pick(cfg.seed + 1);
    const auto report = check_gradients(
        model.params,
        [&]() { return dice_loss(sigmoid(forward_seg(model, image).logits), target); },
        cfg.entries, cfg.step, pick);

    std::printf("checked %lld parameter entries against central differences\n",
                static_cast<long long>(report.entries_checked));
    std::printf("loss %.9f, max relative error %.3e (worst: %s[%lld], analytic %.6e vs "
                "numeric %.6e)\n",
                report.loss, report.max_rel_err, report.worst.param.c_str(),
                static_cast<long long>(report.worst.index), report.worst.analytic,
                report.worst.numeric);
    const bool ok = report.max_rel_err <= 1e-3;
    std::printf("%s\n", ok ? "gradients agree" : "GRADIENT MISMATCH");
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"two-stage dual-branch segmentation pipeline"};
    app.require_subcommand(1);

    std::string config_path, coarse_ckpt, ckpt_path, dataset_dir, split = "val";
    std::string input_path, out_prefix = "prediction", out_path, log_path;
    std::string coarse_config, workdir = "ablation_runs";

    auto* tc = app.add_subcommand("train-coarse", "stage 1: classification branch");
    tc->add_option("--config", config_path, "training config (JSON)")->required();
    tc->add_option("--log", log_path, "write the per-step loss curve (CSV)");

    auto* ts = app.add_subcommand("train-seg", "stage 2: segmentation branch + decoder");
    ts->add_option("--config", config_path, "training config (JSON)")->required();
    ts->add_option("--coarse", coarse_ckpt, "stage-1 checkpoint (omit with no_coarse_branch)");
    ts->add_option("--log", log_path, "write the per-step loss curve (CSV)");

    auto* ev = app.add_subcommand("eval", "score a checkpoint on a dataset split");
    ev->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    ev->add_option("--dataset", dataset_dir, "dataset directory")->required();
    ev->add_option("--split", split, "split name (default val)");
    ev->add_option("--out", out_path, "also write the CSV here");

    auto* ab = app.add_subcommand("ablate", "train and score the four ablation variants");
    ab->add_option("--coarse-config", coarse_config, "stage-1 training config")->required();
    ab->add_option("--config", config_path, "stage-2 training config (full variant)")
        ->required();
    ab->add_option("--workdir", workdir, "where per-variant checkpoints go");
    ab->add_option("--out", out_path, "also write the CSV here");

    auto* in = app.add_subcommand("infer", "segment one stored image");
    in->add_option("--ckpt", ckpt_path, "stage-2 checkpoint")->required();
    in->add_option("--input", input_path, "input image tensor record")->required();
    in->add_option("--out", out_prefix, "output prefix (default 'prediction')");

    auto* gd = app.add_subcommand("gen-data", "write a synthetic dataset");
    gd->add_option("--config", config_path, "generator config (JSON)")->required();

    auto* gc = app.add_subcommand("gradcheck", "audit gradients with finite differences");
    gc->add_option("--config", config_path, "audit config (JSON)")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (tc->parsed()) return cmd_train_coarse(config_path, log_path);
        if (ts->parsed()) return cmd_train_seg(config_path, coarse_ckpt, log_path);
        if (ev->parsed()) return cmd_eval(ckpt_path, dataset_dir, split, out_path);
        if (ab->parsed()) return cmd_ablate(coarse_config, config_path, workdir, out_path);
        if (in->parsed()) return cmd_infer(ckpt_path, input_path, out_prefix);
        if (gd->parsed()) return cmd_gen_data(config_path);
        if (gc->parsed()) return cmd_gradcheck(config_path);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
