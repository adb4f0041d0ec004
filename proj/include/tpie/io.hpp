#pragma once

// File formats: `.rawf32` float images (8-byte little-endian header fields:
// dimension count, then each extent; then float32 values), 8-bit PGM (P5)
// renders, and small helpers for byte-exact file writes.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "tpie/tensor.hpp"

namespace tpie::io {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

class IoError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

inline void append_u64(std::string& out, std::uint64_t v) {
    char b[8];
    std::memcpy(b, &v, 8);
    out.append(b, 8);
}

inline void append_u32(std::string& out, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
}

inline std::uint64_t read_u64(const std::string& in, std::size_t& pos) {
    if (pos + 8 > in.size()) throw IoError("unexpected end of data");
    std::uint64_t v;
    std::memcpy(&v, in.data() + pos, 8);
    pos += 8;
    return v;
}

inline std::uint32_t read_u32(const std::string& in, std::size_t& pos) {
    if (pos + 4 > in.size()) throw IoError("unexpected end of data");
    std::uint32_t v;
    std::memcpy(&v, in.data() + pos, 4);
    pos += 4;
    return v;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

inline std::string encode_rawf32(const Tensor<float>& t) {
    std::string out;
    append_u64(out, t.rank());
    for (auto e : t.shape()) append_u64(out, e);
    out.append(reinterpret_cast<const char*>(t.ptr()), t.size() * sizeof(float));
    return out;
}

inline Tensor<float> decode_rawf32(const std::string& bytes) {
    std::size_t pos = 0;
    const auto rank = read_u64(bytes, pos);
    if (rank == 0 || rank > 8) throw IoError("rawf32: implausible rank " + std::to_string(rank));
    Shape shape;
    for (std::uint64_t i = 0; i < rank; ++i) shape.push_back(read_u64(bytes, pos));
    const std::size_t n = numel(shape);
    if (bytes.size() != pos + n * sizeof(float)) throw IoError("rawf32: payload size does not match header");
    std::vector<float> data(n);
    std::memcpy(data.data(), bytes.data() + pos, n * sizeof(float));
    return Tensor<float>(std::move(shape), std::move(data));
}

inline void save_rawf32(const std::filesystem::path& path, const Tensor<float>& t) {
    write_file(path, encode_rawf32(t));
}

inline Tensor<float> load_rawf32(const std::filesystem::path& path) {
    try {
        return decode_rawf32(read_file(path));
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

/// 8-bit grayscale PGM of a 2-D image (or [1,H,W]); values clamped to [0,1].
inline std::string encode_pgm(const Tensor<float>& img) {
    require(img.rank() == 2 || (img.rank() == 3 && img.dim(0) == 1), "PGM: expected [H,W] or [1,H,W] image");
    const std::size_t h = img.dim(img.rank() - 2), w = img.dim(img.rank() - 1);
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    for (std::size_t i = 0; i < h * w; ++i) {
        const float v = std::clamp(img[i], 0.0f, 1.0f);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
    }
    return out;
}

inline void save_pgm(const std::filesystem::path& path, const Tensor<float>& img) { write_file(path, encode_pgm(img)); }

}  // namespace tpie::io
