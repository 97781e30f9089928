#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ssdt/error.hpp"

namespace ssdt::checkpoint {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian 64-bit floats");

constexpr char kMagic[8] = {'S', 'S', 'D', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kFormatVersion = 1;

/// Versioned binary container: JSON header (kind, metadata, tensor table)
/// followed by the concatenated float64 payload.
struct Blob {
    std::string kind;
    nlohmann::json meta;
    std::vector<std::pair<std::string, std::vector<double>>> tensors;

    const std::vector<double>& tensor(const std::string& name) const {
        for (const auto& [n, data] : tensors)
            if (n == name)
                return data;
        throw SchemaError("checkpoint tensor not found: " + name);
    }
};

inline void save_blob(const Blob& blob, const std::filesystem::path& path) {
    nlohmann::json header;
    header["kind"] = blob.kind;
    header["meta"] = blob.meta;
    header["tensors"] = nlohmann::json::array();
    for (const auto& [name, data] : blob.tensors)
        header["tensors"].push_back({{"name", name}, {"count", data.size()}});
    const std::string header_bytes = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f)
        throw IoError("cannot open checkpoint for writing: " + path.string());
    f.write(kMagic, sizeof(kMagic));
    const std::uint32_t version = kFormatVersion;
    const std::uint32_t header_len = std::uint32_t(header_bytes.size());
    f.write(reinterpret_cast<const char*>(&version), sizeof(version));
    f.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    f.write(header_bytes.data(), std::streamsize(header_bytes.size()));
    for (const auto& [name, data] : blob.tensors)
        f.write(reinterpret_cast<const char*>(data.data()),
                std::streamsize(data.size() * sizeof(double)));
    if (!f)
        throw IoError("checkpoint write failed: " + path.string());
}

inline Blob load_blob(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw IoError("cannot open checkpoint: " + path.string());
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw SchemaError("not a checkpoint file: " + path.string());
    std::uint32_t version = 0, header_len = 0;
    f.read(reinterpret_cast<char*>(&version), sizeof(version));
    f.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    if (!f)
        throw SchemaError("truncated checkpoint header: " + path.string());
    if (version != kFormatVersion)
        throw SchemaError("unsupported checkpoint version " + std::to_string(version) + ": " +
                          path.string());
    std::string header_bytes(header_len, '\0');
    f.read(header_bytes.data(), header_len);
    if (!f)
        throw SchemaError("truncated checkpoint header: " + path.string());

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_bytes);
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("malformed checkpoint header: " + std::string(e.what()));
    }

    Blob blob;
    blob.kind = header.at("kind").get<std::string>();
    blob.meta = header.value("meta", nlohmann::json::object());
    for (const auto& jt : header.at("tensors")) {
        const auto name = jt.at("name").get<std::string>();
        const auto count = jt.at("count").get<std::size_t>();
        std::vector<double> data(count);
        f.read(reinterpret_cast<char*>(data.data()), std::streamsize(count * sizeof(double)));
        if (std::size_t(f.gcount()) != count * sizeof(double))
            throw SchemaError("truncated checkpoint payload: " + path.string());
        blob.tensors.emplace_back(name, std::move(data));
    }
    return blob;
}

} // namespace ssdt::checkpoint
