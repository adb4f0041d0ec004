#pragma once

// Checkpoint container: "TPIE" magic, u32 format version, u64 header length,
// a JSON header (tensor table plus free-form metadata), then the tensors as
// little-endian float32 blobs in name order. Offsets are relative to the
// start of the blob section.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "json.hpp"
#include "tpie/io.hpp"
#include "tpie/tensor.hpp"

namespace tpie {

constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointFile {
    nlohmann::json meta = nlohmann::json::object();
    std::map<std::string, Tensor<float>> tensors;
};

inline std::string encode_checkpoint(const CheckpointFile& ck) {
    nlohmann::json table = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ck.tensors) {
        const std::uint64_t nbytes = t.size() * sizeof(float);
        table[name] = {{"dtype", "float32"}, {"shape", t.shape()}, {"offset", offset}, {"nbytes", nbytes}};
        offset += nbytes;
    }
    const nlohmann::json header = {{"tensors", table}, {"meta", ck.meta}};
    const std::string text = header.dump();
    std::string out = "TPIE";
    io::append_u32(out, kCheckpointVersion);
    io::append_u64(out, text.size());
    out += text;
    for (const auto& [name, t] : ck.tensors) out.append(reinterpret_cast<const char*>(t.ptr()), t.size() * sizeof(float));
    return out;
}

inline CheckpointFile decode_checkpoint(const std::string& bytes) {
    if (bytes.size() < 16 || bytes.compare(0, 4, "TPIE") != 0) throw io::IoError("not a TPIE checkpoint");
    std::size_t pos = 4;
    const auto version = io::read_u32(bytes, pos);
    if (version != kCheckpointVersion) {
        throw io::IoError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto hlen = io::read_u64(bytes, pos);
    if (hlen > bytes.size() - pos) throw io::IoError("checkpoint header runs past end of file");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(pos, hlen));
    } catch (const nlohmann::json::exception& e) {
        throw io::IoError(std::string("checkpoint header: ") + e.what());
    }
    pos += hlen;
    const std::size_t blob_size = bytes.size() - pos;
    CheckpointFile ck;
    ck.meta = header.value("meta", nlohmann::json::object());
    std::uint64_t expected = 0;
    for (const auto& [name, entry] : header.at("tensors").items()) {
        if (entry.at("dtype") != "float32") throw io::IoError("tensor '" + name + "' has unsupported dtype");
        const Shape shape = entry.at("shape").get<Shape>();
        const auto offset = entry.at("offset").get<std::uint64_t>();
        const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
        if (nbytes != numel(shape) * sizeof(float)) throw io::IoError("tensor '" + name + "' size does not match shape");
        // Entries are laid out back to back in name order, which is also the
        // JSON object order, so overlap or gaps show up as a wrong offset.
        if (offset != expected || offset + nbytes > blob_size) {
            throw io::IoError("tensor '" + name + "' has an invalid offset");
        }
        expected += nbytes;
        std::vector<float> data(numel(shape));
        std::memcpy(data.data(), bytes.data() + pos + offset, nbytes);
        ck.tensors.emplace(name, Tensor<float>(shape, std::move(data)));
    }
    if (expected != blob_size) throw io::IoError("checkpoint has trailing bytes after the last tensor");
    return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const CheckpointFile& ck) {
    io::write_file(path, encode_checkpoint(ck));
}

inline CheckpointFile load_checkpoint(const std::filesystem::path& path) {
    try {
        return decode_checkpoint(io::read_file(path));
    } catch (const io::IoError& e) {
        throw io::IoError(path.string() + ": " + e.what());
    } catch (const nlohmann::json::exception& e) {
        throw io::IoError(path.string() + ": malformed checkpoint header: " + e.what());
    }
}

}  // namespace tpie
