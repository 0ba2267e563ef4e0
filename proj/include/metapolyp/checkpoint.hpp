#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "metapolyp/tensor.hpp"

namespace metapolyp {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Named tensors plus string metadata, both kept in insertion order.
///
/// Layout (little-endian): "MPLY", u32 version, u64 tensor count, then per
/// tensor: u32 name length, name, u32 rank, rank x u64 extents, raw float32
/// data; then u64 metadata count and per entry u32 key length, key, u64 value
/// length, value bytes.
struct Checkpoint {
    std::vector<std::pair<std::string, Tensor>> tensors;
    std::vector<std::pair<std::string, std::string>> metadata;

    void put(std::string name, Tensor t) { tensors.emplace_back(std::move(name), std::move(t)); }
    void put_meta(std::string key, std::string value) { metadata.emplace_back(std::move(key), std::move(value)); }

    /// Throw CheckpointError(Malformed) if the entry is missing.
    const Tensor& tensor(const std::string& name) const;
    const std::string& meta(const std::string& key) const;
    bool has_meta(const std::string& key) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
/// Throws CheckpointError with kind BadMagic, VersionMismatch, Truncated or Malformed.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Writes to a temporary sibling and renames it into place, so an existing
/// file is never left half-written.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace metapolyp
