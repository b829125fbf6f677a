#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sks {

/// Writes an 8-bit binary PGM (P5) image for quick visual inspection.
/// Values are expected in [0, 1] and are clamped before quantization.
void write_pgm(const std::string& path, const std::vector<float>& values, std::int64_t height,
               std::int64_t width);

}  // namespace sks
