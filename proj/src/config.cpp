#include "sks/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace sks {

namespace {

using nlohmann::json;

json parse_object(const std::string& text, const std::string& ctx) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(ctx + ": invalid JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError(ctx + ": expected an object");
    return j;
}

json read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_object(ss.str(), path);
}

/// Every listed key must be present and no other key may appear.
void require_exact_keys(const json& j, const std::set<std::string>& keys,
                        const std::string& ctx) {
    for (const auto& k : keys)
        if (!j.contains(k)) throw ConfigError(ctx + ": missing field '" + k + "'");
    for (const auto& [k, v] : j.items())
        if (!keys.count(k)) throw ConfigError(ctx + ": unknown field '" + k + "'");
}

std::int64_t get_int(const json& j, const char* key, const std::string& ctx) {
    if (!j.at(key).is_number_integer())
        throw ConfigError(ctx + ": field '" + key + "' must be an integer");
    return j.at(key).get<std::int64_t>();
}

double get_num(const json& j, const char* key, const std::string& ctx) {
    if (!j.at(key).is_number())
        throw ConfigError(ctx + ": field '" + key + "' must be a number");
    return j.at(key).get<double>();
}

bool get_bool(const json& j, const char* key, const std::string& ctx) {
    if (!j.at(key).is_boolean())
        throw ConfigError(ctx + ": field '" + key + "' must be a boolean");
    return j.at(key).get<bool>();
}

std::string get_str(const json& j, const char* key, const std::string& ctx) {
    if (!j.at(key).is_string())
        throw ConfigError(ctx + ": field '" + key + "' must be a string");
    return j.at(key).get<std::string>();
}

ModelConfig parse_model(const json& j, const std::string& ctx) {
    require_exact_keys(
        j, {"image_size", "patch", "embed_dim", "levels", "blocks_per_level", "window"}, ctx);
    ModelConfig m;
    m.image_size = get_int(j, "image_size", ctx);
    m.patch = get_int(j, "patch", ctx);
    m.embed_dim = get_int(j, "embed_dim", ctx);
    m.levels = get_int(j, "levels", ctx);
    m.blocks_per_level = get_int(j, "blocks_per_level", ctx);
    m.window = get_int(j, "window", ctx);
    m.to_spec().validate();
    return m;
}

AblationFlags parse_ablation(const json& j, const std::string& ctx) {
    require_exact_keys(j, {"no_coarse_branch", "no_prompt_skip", "no_rcs"}, ctx);
    AblationFlags a;
    a.no_coarse_branch = get_bool(j, "no_coarse_branch", ctx);
    a.no_prompt_skip = get_bool(j, "no_prompt_skip", ctx);
    a.no_rcs = get_bool(j, "no_rcs", ctx);
    return a;
}

TrainConfig parse_train(const json& j, const std::string& ctx) {
    require_exact_keys(j,
                       {"model", "stage", "optimizer", "seed", "ablation", "dataset",
                        "checkpoint_out", "eval_interval"},
                       ctx);
    TrainConfig c;
    c.model = parse_model(j.at("model"), ctx + ".model");
    c.stage = get_str(j, "stage", ctx);
    const auto& opt = j.at("optimizer");
    require_exact_keys(opt, {"lr", "momentum", "steps", "batch"}, ctx + ".optimizer");
    c.optimizer.lr = get_num(opt, "lr", ctx + ".optimizer");
    c.optimizer.momentum = get_num(opt, "momentum", ctx + ".optimizer");
    c.optimizer.steps = get_int(opt, "steps", ctx + ".optimizer");
    c.optimizer.batch = get_int(opt, "batch", ctx + ".optimizer");
    c.seed = static_cast<std::uint64_t>(get_int(j, "seed", ctx));
    c.ablation = parse_ablation(j.at("ablation"), ctx + ".ablation");
    c.dataset = get_str(j, "dataset", ctx);
    c.checkpoint_out = get_str(j, "checkpoint_out", ctx);
    c.eval_interval = get_int(j, "eval_interval", ctx);
    c.validate();
    return c;
}

SynthConfig parse_synth(const json& j, const std::string& ctx) {
    require_exact_keys(j,
                       {"output", "image_size", "lesion_probability", "radius_min", "radius_max",
                        "intensity_offset", "noise_sigma", "seed", "counts"},
                       ctx);
    SynthConfig c;
    c.output = get_str(j, "output", ctx);
    c.image_size = get_int(j, "image_size", ctx);
    c.lesion_probability = get_num(j, "lesion_probability", ctx);
    c.radius_min = get_int(j, "radius_min", ctx);
    c.radius_max = get_int(j, "radius_max", ctx);
    c.intensity_offset = get_num(j, "intensity_offset", ctx);
    c.noise_sigma = get_num(j, "noise_sigma", ctx);
    c.seed = static_cast<std::uint64_t>(get_int(j, "seed", ctx));
    const auto& counts = j.at("counts");
    require_exact_keys(counts, {"coarse_train", "fine_train", "val"}, ctx + ".counts");
    c.counts.coarse_train = get_int(counts, "coarse_train", ctx + ".counts");
    c.counts.fine_train = get_int(counts, "fine_train", ctx + ".counts");
    c.counts.val = get_int(counts, "val", ctx + ".counts");
    c.validate();
    return c;
}

GradcheckConfig parse_gradcheck(const json& j, const std::string& ctx) {
    require_exact_keys(j, {"model", "seed", "entries", "step"}, ctx);
    GradcheckConfig c;
    c.model = parse_model(j.at("model"), ctx + ".model");
    c.seed = static_cast<std::uint64_t>(get_int(j, "seed", ctx));
    c.entries = get_int(j, "entries", ctx);
    c.step = get_num(j, "step", ctx);
    if (c.entries <= 0) throw ConfigError(ctx + ": entries must be positive");
    if (c.step <= 0) throw ConfigError(ctx + ": step must be positive");
    return c;
}

json model_to_json(const ModelConfig& m) {
    return json{{"image_size", m.image_size},
                {"patch", m.patch},
                {"embed_dim", m.embed_dim},
                {"levels", m.levels},
                {"blocks_per_level", m.blocks_per_level},
                {"window", m.window}};
}

json ablation_to_json(const AblationFlags& a) {
    return json{{"no_coarse_branch", a.no_coarse_branch},
                {"no_prompt_skip", a.no_prompt_skip},
                {"no_rcs", a.no_rcs}};
}

}  // namespace

void TrainConfig::validate() const {
    if (stage != "coarse" && stage != "seg")
        throw ConfigError("config: stage must be 'coarse' or 'seg', got '" + stage + "'");
    if (optimizer.lr < 0 || optimizer.momentum < 0 || optimizer.momentum >= 1)
        throw ConfigError("config: optimizer needs lr >= 0 and momentum in [0, 1)");
    if (optimizer.steps < 0 || optimizer.batch <= 0)
        throw ConfigError("config: optimizer needs steps >= 0 and batch > 0");
    if (eval_interval <= 0) throw ConfigError("config: eval_interval must be positive");
    if (dataset.empty()) throw ConfigError("config: dataset path is empty");
    model.to_spec().validate();
}

void SynthConfig::validate() const {
    if (image_size <= 0) throw ConfigError("generator: image_size must be positive");
    if (radius_min <= 0 || radius_max < radius_min || 2 * radius_max >= image_size)
        throw ConfigError("generator: need 0 < radius_min <= radius_max < image_size/2");
    if (lesion_probability < 0.0 || lesion_probability > 1.0)
        throw ConfigError("generator: lesion_probability must be in [0, 1]");
    if (noise_sigma < 0.0) throw ConfigError("generator: noise_sigma must be non-negative");
    if (counts.coarse_train < 0 || counts.fine_train < 0 || counts.val < 0)
        throw ConfigError("generator: sample counts must be non-negative");
    if (output.empty()) throw ConfigError("generator: output path is empty");
}

TrainConfig parse_train_config(const std::string& text) {
    return parse_train(parse_object(text, "config"), "config");
}
TrainConfig parse_train_config_file(const std::string& path) {
    return parse_train(read_file(path), path);
}
SynthConfig parse_synth_config(const std::string& text) {
    return parse_synth(parse_object(text, "config"), "config");
}
SynthConfig parse_synth_config_file(const std::string& path) {
    return parse_synth(read_file(path), path);
}
GradcheckConfig parse_gradcheck_config(const std::string& text) {
    return parse_gradcheck(parse_object(text, "config"), "config");
}
GradcheckConfig parse_gradcheck_config_file(const std::string& path) {
    return parse_gradcheck(read_file(path), path);
}

std::string topology_echo(const ModelConfig& model, const AblationFlags& ablation) {
    return json{{"model", model_to_json(model)}, {"ablation", ablation_to_json(ablation)}}
        .dump();
}

void parse_topology_echo(const std::string& echo, ModelConfig& model, AblationFlags& ablation) {
    const json j = parse_object(echo, "topology echo");
    require_exact_keys(j, {"model", "ablation"}, "topology echo");
    model = parse_model(j.at("model"), "topology echo.model");
    ablation = parse_ablation(j.at("ablation"), "topology echo.ablation");
}

std::string synth_config_echo(const SynthConfig& c) {
    return json{{"output", c.output},
                {"image_size", c.image_size},
                {"lesion_probability", c.lesion_probability},
                {"radius_min", c.radius_min},
                {"radius_max", c.radius_max},
                {"intensity_offset", c.intensity_offset},
                {"noise_sigma", c.noise_sigma},
                {"seed", c.seed},
                {"counts",
                 {{"coarse_train", c.counts.coarse_train},
                  {"fine_train", c.counts.fine_train},
                  {"val", c.counts.val}}}}
        .dump();
}

}  // namespace sks
