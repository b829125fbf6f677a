#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sks/params.hpp"
#include "sks/skst.hpp"

// Checkpoints: 4-byte magic "SKPT", a 4-byte little-endian index length, a
// JSON index {schema_version, stage, step, topology, tensors: [names]}, then
// one tensor record per name in index order. Names are written in sorted
// order, the index dump is canonical, and loads validate the name set
// exactly, so save -> load -> save is bitwise identical and a checkpoint
// can never silently drop or invent parameters.

namespace sks {

struct Checkpoint {
    std::string stage;       // "coarse" or "seg"
    std::int64_t step = 0;   // optimizer steps taken when saved
    std::string topology;    // canonical JSON echo of model config + flags
    std::vector<SkstData> tensors;  // ordered as in the index

    const SkstData* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);

/// Convenience: snapshots every parameter in the store (sorted by name).
void save_checkpoint(const std::string& path, const std::string& stage, std::int64_t step,
                     const std::string& topology, const ParameterStore<float>& params);

Checkpoint load_checkpoint(const std::string& path);

/// Copies every tensor into the store. The checkpoint's name set and shapes
/// must match the store's exactly; any difference is an error that names the
/// offending parameters.
void load_into(ParameterStore<float>& params, const Checkpoint& ckpt);

/// Copies the checkpoint into the subset of the store whose names start with
/// `prefix`. The checkpoint must hold exactly that subset.
void load_prefix_into(ParameterStore<float>& params, const Checkpoint& ckpt,
                      const std::string& prefix);

}  // namespace sks
