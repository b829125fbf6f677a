#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "sks/tensor.hpp"

// Binary tensor records: 4-byte magic "SKST", a 4-byte little-endian header
// length, a JSON header {"dtype": "f32"|"f64", "name": ..., "shape": [...]},
// then the raw row-major scalars, little-endian. One record per .skst file;
// checkpoints concatenate records behind their own index.

namespace sks {

struct SkstData {
    std::string name;
    std::string dtype;  // "f32" or "f64"
    Shape shape;
    std::vector<float> f32;
    std::vector<double> f64;

    /// Materializes the record at the requested precision. Widening an f32
    /// record to double is allowed; narrowing f64 to float is an error.
    template <typename T>
    Tensor<T> as() const;
};

void write_skst(std::ostream& out, const std::string& name, const Tensor<float>& t);
void write_skst(std::ostream& out, const std::string& name, const Tensor<double>& t);
SkstData read_skst(std::istream& in);

void save_skst(const std::string& path, const std::string& name, const Tensor<float>& t);
void save_skst(const std::string& path, const std::string& name, const Tensor<double>& t);
SkstData load_skst(const std::string& path);

}  // namespace sks
