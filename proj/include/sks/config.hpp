#pragma once

#include <cstdint>
#include <string>

#include "sks/encoder.hpp"

// Run configuration. All config files are JSON with every field explicit:
// missing fields and unknown fields are both rejected, so a config says
// exactly what ran.

namespace sks {

struct ModelConfig {
    std::int64_t image_size = 224;
    std::int64_t patch = 4;
    std::int64_t embed_dim = 96;
    std::int64_t levels = 4;
    std::int64_t blocks_per_level = 2;
    std::int64_t window = 7;

    EncoderSpec to_spec() const {
        EncoderSpec s;
        s.image_size = image_size;
        s.patch = patch;
        s.embed_dim = embed_dim;
        s.levels = levels;
        s.blocks_per_level = blocks_per_level;
        s.window = window;
        s.in_channels = 3;  // a slice plus its two neighbors
        return s;
    }
};

struct OptimizerConfig {
    double lr = 1e-3;
    double momentum = 0.9;
    std::int64_t steps = 1000;
    std::int64_t batch = 4;
};

struct AblationFlags {
    bool no_coarse_branch = false;
    bool no_prompt_skip = false;
    bool no_rcs = false;

    /// Removing the classification branch removes everything fed by it.
    bool use_coarse() const { return !no_coarse_branch; }
    bool use_in_path_fusion() const { return use_coarse(); }
    bool use_prompt() const { return use_coarse() && !no_prompt_skip; }
    bool use_routed() const { return !no_rcs; }
};

struct TrainConfig {
    ModelConfig model;
    std::string stage;  // "coarse" or "seg"
    OptimizerConfig optimizer;
    std::uint64_t seed = 0;
    AblationFlags ablation;
    std::string dataset;
    std::string checkpoint_out;
    std::int64_t eval_interval = 100;

    void validate() const;
};

struct SynthCounts {
    std::int64_t coarse_train = 64;
    std::int64_t fine_train = 16;
    std::int64_t val = 8;
};

struct SynthConfig {
    std::string output;
    std::int64_t image_size = 64;
    double lesion_probability = 0.7;
    std::int64_t radius_min = 4;
    std::int64_t radius_max = 10;
    double intensity_offset = 0.5;
    double noise_sigma = 0.05;
    std::uint64_t seed = 0;
    SynthCounts counts;

    void validate() const;
};

struct GradcheckConfig {
    ModelConfig model;
    std::uint64_t seed = 0;
    std::int64_t entries = 200;
    double step = 1e-5;
};

TrainConfig parse_train_config(const std::string& json_text);
TrainConfig parse_train_config_file(const std::string& path);
SynthConfig parse_synth_config(const std::string& json_text);
SynthConfig parse_synth_config_file(const std::string& path);
GradcheckConfig parse_gradcheck_config(const std::string& json_text);
GradcheckConfig parse_gradcheck_config_file(const std::string& path);

/// Canonical JSON echo of the topology-determining parts (model + ablation),
/// embedded in checkpoints and compared on load.
std::string topology_echo(const ModelConfig& model, const AblationFlags& ablation);

/// Inverse of topology_echo, used to rebuild a model from a checkpoint.
void parse_topology_echo(const std::string& echo, ModelConfig& model, AblationFlags& ablation);

/// Canonical JSON echo of a generator config, embedded in dataset manifests.
std::string synth_config_echo(const SynthConfig& cfg);

}  // namespace sks
