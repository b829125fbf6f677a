#include "sks/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "sks/rng.hpp"
#include "sks/skst.hpp"

namespace sks {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string sample_id(std::int64_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "s%04lld", static_cast<long long>(index));
    return buf;
}

struct Ellipse {
    double cx, cy, rx, ry, angle;
};

/// Normalized quadratic distance: 0 at the center, 1 on the boundary.
double ellipse_distance(const Ellipse& e, double x, double y, double radius_scale) {
    const double dx = x - e.cx, dy = y - e.cy;
    const double c = std::cos(e.angle), s = std::sin(e.angle);
    const double xr = c * dx + s * dy;
    const double yr = -s * dx + c * dy;
    const double rx = e.rx * radius_scale, ry = e.ry * radius_scale;
    return (xr / rx) * (xr / rx) + (yr / ry) * (yr / ry);
}

/// Soft rim: full intensity inside the boundary, fading to zero a little
/// outside it so lesion edges are blurred rather than hard steps. The ramp
/// is centered on the mask boundary (normalized distance 1), where the
/// intensity bump is half the configured offset.
double edge_factor(double dist) {
    return std::clamp((1.15 - dist) / 0.3, 0.0, 1.0);
}

json manifest_sample(const Sample& s) {
    return json{{"id", s.id}, {"split", s.split}, {"label", s.label}};
}

void require_exact_keys(const json& j, const std::set<std::string>& keys,
                        const std::string& ctx) {
    for (const auto& k : keys)
        if (!j.contains(k)) throw ConfigError(ctx + ": missing field '" + k + "'");
    for (const auto& [k, v] : j.items())
        if (!keys.count(k)) throw ConfigError(ctx + ": unknown field '" + k + "'");
}

void check_sample_consistency(const Sample& s, std::int64_t image_size,
                              const std::string& ctx) {
    const Shape expect_img{image_size, image_size, 3};
    if (s.image.shape() != expect_img)
        throw ConfigError(ctx + ": image shape " + shape_str(s.image.shape()) +
                          " does not match " + shape_str(expect_img));
    if (static_cast<std::int64_t>(s.mask.size()) != image_size * image_size)
        throw ConfigError(ctx + ": mask size does not match image size");
    if (s.label != coarse_label(s.mask))
        throw ConfigError(ctx + ": label " + std::to_string(s.label) +
                          " inconsistent with mask (foreground " +
                          std::to_string(coarse_label(s.mask)) + ")");
    if (s.split != "coarse_train" && s.split != "fine_train" && s.split != "val")
        throw ConfigError(ctx + ": unknown split '" + s.split + "'");
}

}  // namespace

Sample generate_sample(const SynthConfig& cfg, std::int64_t index) {
    cfg.validate();
    const std::int64_t total = cfg.counts.coarse_train + cfg.counts.fine_train + cfg.counts.val;
    if (index < 0 || index >= total)
        throw ConfigError("generator: sample index " + std::to_string(index) +
                          " out of range [0, " + std::to_string(total) + ")");

    Sample s;
    s.id = sample_id(index);
    s.split = index < cfg.counts.coarse_train ? "coarse_train"
              : index < cfg.counts.coarse_train + cfg.counts.fine_train ? "fine_train"
                                                                        : "val";

    Rng rng = Rng::fork(cfg.seed, static_cast<std::uint64_t>(index));
    const std::int64_t size = cfg.image_size;
    const auto sized = static_cast<double>(size);

    // Shared smooth background: a flat base plus a few broad intensity blobs,
    // identical across the three slices.
    struct Blob {
        double cx, cy, sigma, amp;
    };
    // Blob amplitude and spread are kept small enough that the lesion's
    // contribution to the image mean stays clearly separable from
    // background variation (an intensity-threshold classifier must work).
    std::vector<Blob> blobs(3);
    for (auto& b : blobs) {
        b.cx = rng.uniform(0.0, sized);
        b.cy = rng.uniform(0.0, sized);
        b.sigma = rng.uniform(sized / 10.0, sized / 7.0);
        b.amp = rng.uniform(-0.02, 0.02);
    }
    std::vector<double> background(static_cast<std::size_t>(size * size), 0.35);
    for (std::int64_t y = 0; y < size; ++y)
        for (std::int64_t x = 0; x < size; ++x) {
            double v = 0.0;
            for (const auto& b : blobs) {
                const double dx = static_cast<double>(x) - b.cx;
                const double dy = static_cast<double>(y) - b.cy;
                v += b.amp * std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
            }
            background[static_cast<std::size_t>(y * size + x)] += v;
        }

    // Per-voxel noise, drawn slice by slice in a fixed order.
    std::vector<double> slices(static_cast<std::size_t>(3 * size * size));
    for (int sl = 0; sl < 3; ++sl)
        for (std::int64_t i = 0; i < size * size; ++i)
            slices[static_cast<std::size_t>(sl * size * size + i)] =
                background[static_cast<std::size_t>(i)] + rng.normal() * cfg.noise_sigma;

    // Lesions: with the configured probability, one to three soft-edged
    // ellipses; their union on the center slice is the ground-truth mask.
    // Neighbor slices get shrunk cross-sections of the same lesions.
    s.mask.assign(static_cast<std::size_t>(size * size), 0);
    const bool has_lesion = rng.uniform() < cfg.lesion_probability;
    if (has_lesion) {
        const std::int64_t count = rng.uniform_int(1, 3);
        std::vector<Ellipse> lesions(static_cast<std::size_t>(count));
        const auto rlo = static_cast<double>(cfg.radius_min);
        const auto rhi = static_cast<double>(cfg.radius_max);
        for (auto& e : lesions) {
            e.cx = rng.uniform(rlo, sized - rlo);
            e.cy = rng.uniform(rlo, sized - rlo);
            e.rx = rng.uniform(rlo, rhi);
            e.ry = rng.uniform(rlo, rhi);
            e.angle = rng.uniform(0.0, 3.14159265358979323846);
        }
        for (int sl = 0; sl < 3; ++sl) {
            const double radius_scale = sl == 1 ? 1.0 : 0.8;
            for (std::int64_t y = 0; y < size; ++y)
                for (std::int64_t x = 0; x < size; ++x) {
                    double factor = 0.0;
                    double nearest = 1e18;
                    for (const auto& e : lesions) {
                        const double d = ellipse_distance(e, static_cast<double>(x),
                                                          static_cast<double>(y), radius_scale);
                        factor = std::max(factor, edge_factor(d));
                        nearest = std::min(nearest, d);
                    }
                    slices[static_cast<std::size_t>((sl * size + y) * size + x)] +=
                        cfg.intensity_offset * factor;
                    if (sl == 1 && nearest <= 1.0)
                        s.mask[static_cast<std::size_t>(y * size + x)] = 1;
                }
        }
    }

    Tensor<float> volume = Tensor<float>::zeros({3, size, size});
    for (std::int64_t i = 0; i < volume.numel(); ++i)
        volume.data()[i] =
            static_cast<float>(std::clamp(slices[static_cast<std::size_t>(i)], 0.0, 1.0));
    s.image = stack_adjacent(volume, 1);
    s.label = coarse_label(s.mask);
    return s;
}

Dataset generate_dataset(const SynthConfig& cfg) {
    cfg.validate();
    Dataset d;
    d.image_size = cfg.image_size;
    const std::int64_t total = cfg.counts.coarse_train + cfg.counts.fine_train + cfg.counts.val;
    d.samples.reserve(static_cast<std::size_t>(total));
    for (std::int64_t i = 0; i < total; ++i) d.samples.push_back(generate_sample(cfg, i));
    return d;
}

void write_dataset(const SynthConfig& cfg) {
    const Dataset d = generate_dataset(cfg);
    fs::create_directories(cfg.output);

    json manifest;
    manifest["schema_version"] = 1;
    manifest["image_size"] = d.image_size;
    manifest["generator"] = json::parse(synth_config_echo(cfg));
    manifest["samples"] = json::array();
    for (const auto& s : d.samples) manifest["samples"].push_back(manifest_sample(s));

    const fs::path root(cfg.output);
    {
        std::ofstream out(root / "manifest.json");
        if (!out) throw IoError("cannot write " + (root / "manifest.json").string());
        out << manifest.dump(2) << "\n";
    }
    for (const auto& s : d.samples) {
        save_skst((root / (s.id + ".img.skst")).string(), "image", s.image);
        Tensor<float> mask = Tensor<float>::zeros({d.image_size, d.image_size});
        for (std::size_t i = 0; i < s.mask.size(); ++i)
            mask.data()[static_cast<std::int64_t>(i)] = s.mask[i] ? 1.0f : 0.0f;
        save_skst((root / (s.id + ".mask.skst")).string(), "mask", mask);
    }
}

Dataset load_dataset(const std::string& dir) {
    const fs::path root(dir);
    const std::string manifest_path = (root / "manifest.json").string();
    std::ifstream in(manifest_path);
    if (!in) throw IoError("cannot open " + manifest_path);
    json manifest;
    try {
        in >> manifest;
    } catch (const json::exception& e) {
        throw ConfigError(manifest_path + ": invalid JSON: " + std::string(e.what()));
    }
    require_exact_keys(manifest, {"schema_version", "image_size", "generator", "samples"},
                       manifest_path);
    if (!manifest["schema_version"].is_number_integer() ||
        manifest["schema_version"].get<std::int64_t>() != 1)
        throw ConfigError(manifest_path + ": unsupported schema_version");

    Dataset d;
    d.image_size = manifest["image_size"].get<std::int64_t>();
    if (d.image_size <= 0) throw ConfigError(manifest_path + ": image_size must be positive");
    if (!manifest["samples"].is_array())
        throw ConfigError(manifest_path + ": samples must be an array");

    for (const auto& entry : manifest["samples"]) {
        require_exact_keys(entry, {"id", "split", "label"}, manifest_path + " sample entry");
        Sample s;
        s.id = entry["id"].get<std::string>();
        s.split = entry["split"].get<std::string>();
        s.label = entry["label"].get<int>();

        const SkstData img = load_skst((root / (s.id + ".img.skst")).string());
        s.image = img.as<float>();
        const SkstData msk = load_skst((root / (s.id + ".mask.skst")).string());
        const Tensor<float> mask_t = msk.as<float>();
        if (mask_t.shape() != Shape{d.image_size, d.image_size})
            throw ConfigError(s.id + ": mask shape " + shape_str(mask_t.shape()) +
                              " does not match image_size");
        s.mask.resize(static_cast<std::size_t>(mask_t.numel()));
        for (std::int64_t i = 0; i < mask_t.numel(); ++i) {
            const float v = mask_t.data()[i];
            if (v != 0.0f && v != 1.0f)
                throw ConfigError(s.id + ": mask values must be exactly 0 or 1");
            s.mask[static_cast<std::size_t>(i)] = v == 1.0f ? 1 : 0;
        }
        check_sample_consistency(s, d.image_size, s.id);
        d.samples.push_back(std::move(s));
    }
    return d;
}

std::vector<Sample> ingest_raw_volume(const Tensor<float>& volume_raw, const Tensor<float>& masks,
                                      const std::string& id_prefix, const std::string& split) {
    if (volume_raw.rank() != 3)
        throw ShapeError("ingest: expected volume [slices,H,W], got " +
                         shape_str(volume_raw.shape()));
    if (masks.shape() != volume_raw.shape())
        throw ShapeError("ingest: mask volume " + shape_str(masks.shape()) +
                         " does not match intensity volume " + shape_str(volume_raw.shape()));
    const Tensor<float> windowed = hu_window(volume_raw);
    const std::int64_t n = volume_raw.dim(0);
    const std::int64_t plane = volume_raw.dim(1) * volume_raw.dim(2);
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        Sample s;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%04lld", static_cast<long long>(i));
        s.id = id_prefix + buf;
        s.split = split;
        s.image = stack_adjacent(windowed, i);
        s.mask.resize(static_cast<std::size_t>(plane));
        for (std::int64_t j = 0; j < plane; ++j) {
            const float v = masks.data()[i * plane + j];
            if (v != 0.0f && v != 1.0f)
                throw ConfigError(s.id + ": mask values must be exactly 0 or 1");
            s.mask[static_cast<std::size_t>(j)] = v == 1.0f ? 1 : 0;
        }
        s.label = coarse_label(s.mask);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace sks
