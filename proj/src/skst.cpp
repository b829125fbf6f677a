#include "sks/skst.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "tensor records are little-endian; big-endian hosts are unsupported");

namespace sks {

namespace {

constexpr char kMagic[4] = {'S', 'K', 'S', 'T'};

void write_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t read_u32(std::istream& in, const char* what) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    if (!in) throw IoError(std::string("tensor record truncated while reading ") + what);
    return v;
}

template <typename T>
void write_record(std::ostream& out, const std::string& name, const Tensor<T>& t,
                  const char* dtype) {
    nlohmann::json header;
    header["name"] = name;
    header["dtype"] = dtype;
    header["shape"] = t.shape();
    const std::string hs = header.dump();
    out.write(kMagic, 4);
    write_u32(out, static_cast<std::uint32_t>(hs.size()));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.data().size() * sizeof(T)));
    if (!out) throw IoError("failed to write tensor record '" + name + "'");
}

}  // namespace

void write_skst(std::ostream& out, const std::string& name, const Tensor<float>& t) {
    write_record(out, name, t, "f32");
}

void write_skst(std::ostream& out, const std::string& name, const Tensor<double>& t) {
    write_record(out, name, t, "f64");
}

SkstData read_skst(std::istream& in) {
    char magic[4] = {};
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("not a tensor record: bad magic");
    const std::uint32_t hlen = read_u32(in, "header length");
    if (hlen > (1u << 20)) throw IoError("tensor record header implausibly large");
    std::string hs(hlen, '\0');
    in.read(hs.data(), hlen);
    if (!in) throw IoError("tensor record truncated while reading header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("tensor record header is not valid JSON: ") + e.what());
    }
    SkstData rec;
    try {
        rec.name = header.at("name").get<std::string>();
        rec.dtype = header.at("dtype").get<std::string>();
        rec.shape = header.at("shape").get<Shape>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("tensor record header missing fields: ") + e.what());
    }
    for (std::int64_t d : rec.shape)
        if (d < 0) throw IoError("tensor record '" + rec.name + "' has negative extent");
    const std::int64_t n = numel_of(rec.shape);

    if (rec.dtype == "f32") {
        rec.f32.resize(static_cast<std::size_t>(n));
        in.read(reinterpret_cast<char*>(rec.f32.data()),
                static_cast<std::streamsize>(rec.f32.size() * sizeof(float)));
    } else if (rec.dtype == "f64") {
        rec.f64.resize(static_cast<std::size_t>(n));
        in.read(reinterpret_cast<char*>(rec.f64.data()),
                static_cast<std::streamsize>(rec.f64.size() * sizeof(double)));
    } else {
        throw IoError("tensor record '" + rec.name + "' has unsupported dtype '" + rec.dtype +
                      "'");
    }
    if (!in) throw IoError("tensor record '" + rec.name + "' truncated while reading data");
    return rec;
}

template <>
Tensor<float> SkstData::as<float>() const {
    if (dtype != "f32")
        throw IoError("tensor record '" + name + "' is " + dtype +
                      "; refusing to narrow to 32-bit");
    return Tensor<float>::from(shape, f32);
}

template <>
Tensor<double> SkstData::as<double>() const {
    if (dtype == "f64") return Tensor<double>::from(shape, f64);
    std::vector<double> widened(f32.begin(), f32.end());
    return Tensor<double>::from(shape, widened);
}

void save_skst(const std::string& path, const std::string& name, const Tensor<float>& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    write_skst(out, name, t);
}

void save_skst(const std::string& path, const std::string& name, const Tensor<double>& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    write_skst(out, name, t);
}

SkstData load_skst(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    return read_skst(in);
}

}  // namespace sks
