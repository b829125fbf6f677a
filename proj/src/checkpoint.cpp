#include "sks/checkpoint.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace sks {

namespace {

constexpr char kMagic[4] = {'S', 'K', 'P', 'T'};
using nlohmann::json;

std::string join(const std::set<std::string>& names) {
    std::string out;
    for (const auto& n : names) {
        if (!out.empty()) out += ", ";
        out += n;
    }
    return out;
}

/// Name-set equality with an error message that lists what differs.
void require_same_names(const std::set<std::string>& expected, const std::set<std::string>& got,
                        const std::string& ctx) {
    std::set<std::string> missing, extra;
    for (const auto& n : expected)
        if (!got.count(n)) missing.insert(n);
    for (const auto& n : got)
        if (!expected.count(n)) extra.insert(n);
    if (missing.empty() && extra.empty()) return;
    std::string msg = ctx + ": parameter names do not match the model topology";
    if (!missing.empty()) msg += "; missing: " + join(missing);
    if (!extra.empty()) msg += "; unexpected: " + join(extra);
    throw ConfigError(msg);
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    json index;
    index["schema_version"] = 1;
    index["stage"] = ckpt.stage;
    index["step"] = ckpt.step;
    try {
        index["topology"] = json::parse(ckpt.topology);
    } catch (const json::exception& e) {
        throw ConfigError("checkpoint topology echo is not valid JSON: " + std::string(e.what()));
    }
    json names = json::array();
    for (const auto& t : ckpt.tensors) names.push_back(t.name);
    index["tensors"] = names;
    const std::string is = index.dump();

    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint '" + path + "'");
    out.write(kMagic, 4);
    const auto len = static_cast<std::uint32_t>(is.size());
    out.write(reinterpret_cast<const char*>(&len), 4);
    out.write(is.data(), static_cast<std::streamsize>(is.size()));
    for (const auto& t : ckpt.tensors) {
        if (t.dtype == "f32")
            write_skst(out, t.name, t.as<float>());
        else
            write_skst(out, t.name, t.as<double>());
    }
    if (!out) throw IoError("failed while writing checkpoint '" + path + "'");
}

void save_checkpoint(const std::string& path, const std::string& stage, std::int64_t step,
                     const std::string& topology, const ParameterStore<float>& params) {
    Checkpoint ckpt;
    ckpt.stage = stage;
    ckpt.step = step;
    ckpt.topology = topology;
    for (const auto& [name, tensor] : params) {
        SkstData rec;
        rec.name = name;
        rec.dtype = "f32";
        rec.shape = tensor.shape();
        rec.f32 = tensor.data();
        ckpt.tensors.push_back(std::move(rec));
    }
    save_checkpoint(path, ckpt);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    char magic[4] = {};
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != std::string(kMagic, 4))
        throw IoError("'" + path + "' is not a checkpoint: bad magic");
    std::uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 4);
    if (!in || len > (16u << 20)) throw IoError("checkpoint '" + path + "' has a corrupt index");
    std::string is(len, '\0');
    in.read(is.data(), len);
    if (!in) throw IoError("checkpoint '" + path + "' truncated while reading index");

    json index;
    try {
        index = json::parse(is);
    } catch (const json::exception& e) {
        throw IoError("checkpoint index is not valid JSON: " + std::string(e.what()));
    }
    for (const char* key : {"schema_version", "stage", "step", "topology", "tensors"})
        if (!index.contains(key))
            throw IoError("checkpoint index is missing field '" + std::string(key) + "'");
    if (index["schema_version"].get<std::int64_t>() != 1)
        throw IoError("unsupported checkpoint schema_version");

    Checkpoint ckpt;
    ckpt.stage = index["stage"].get<std::string>();
    ckpt.step = index["step"].get<std::int64_t>();
    ckpt.topology = index["topology"].dump();
    for (const auto& name : index["tensors"]) {
        SkstData rec = read_skst(in);
        if (rec.name != name.get<std::string>())
            throw IoError("checkpoint record order disagrees with its index: expected '" +
                          name.get<std::string>() + "', found '" + rec.name + "'");
        ckpt.tensors.push_back(std::move(rec));
    }
    return ckpt;
}

void load_into(ParameterStore<float>& params, const Checkpoint& ckpt) {
    std::set<std::string> expected, got;
    for (const auto& [name, tensor] : params) expected.insert(name);
    for (const auto& t : ckpt.tensors) got.insert(t.name);
    require_same_names(expected, got, "checkpoint load");
    for (const auto& t : ckpt.tensors) {
        Tensor<float>& dst = params.at(t.name);
        if (t.shape != dst.shape())
            throw ConfigError("checkpoint load: parameter '" + t.name + "' has shape " +
                              shape_str(t.shape) + " but the model expects " +
                              shape_str(dst.shape()));
        dst.data() = t.as<float>().data();
    }
}

void load_prefix_into(ParameterStore<float>& params, const Checkpoint& ckpt,
                      const std::string& prefix) {
    std::set<std::string> expected, got;
    for (const auto& [name, tensor] : params)
        if (name.rfind(prefix, 0) == 0) expected.insert(name);
    if (expected.empty())
        throw ConfigError("checkpoint load: model has no parameters under '" + prefix + "'");
    for (const auto& t : ckpt.tensors) got.insert(t.name);
    require_same_names(expected, got, "checkpoint load ('" + prefix + "' subset)");
    for (const auto& t : ckpt.tensors) {
        Tensor<float>& dst = params.at(t.name);
        if (t.shape != dst.shape())
            throw ConfigError("checkpoint load: parameter '" + t.name + "' has shape " +
                              shape_str(t.shape) + " but the model expects " +
                              shape_str(dst.shape()));
        dst.data() = t.as<float>().data();
    }
}

}  // namespace sks
