#include "sks/pgm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "sks/tensor.hpp"

namespace sks {

void write_pgm(const std::string& path, const std::vector<float>& values, std::int64_t height,
               std::int64_t width) {
    if (static_cast<std::int64_t>(values.size()) != height * width)
        throw ShapeError("write_pgm: " + std::to_string(values.size()) + " values for " +
                         std::to_string(height) + "x" + std::to_string(width) + " image");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "P5\n" << width << " " << height << "\n255\n";
    std::vector<unsigned char> row(static_cast<std::size_t>(width));
    for (std::int64_t y = 0; y < height; ++y) {
        for (std::int64_t x = 0; x < width; ++x) {
            const float v = std::clamp(values[static_cast<std::size_t>(y * width + x)], 0.0f, 1.0f);
            row[static_cast<std::size_t>(x)] =
                static_cast<unsigned char>(std::lround(v * 255.0f));
        }
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw IoError("failed to write '" + path + "'");
}

}  // namespace sks
