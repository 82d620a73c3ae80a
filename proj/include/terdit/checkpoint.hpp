#pragma once

#include "terdit/bitpack.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace terdit::pack {

// On-disk layout (all integers little-endian):
//   "TERD" | u32 version (=1) | u32 len + config text (UTF-8) | u32 tensor count
//   per tensor: u32 len + name | u8 kind (0 dense f32, 1 packed ternary) | u8 rank | rank x u64 dims
//     kind 0: u64 byte length | row-major f32 values
//     kind 1: f32 alpha | u8 pad_count | u64 byte length | payload
inline constexpr char kMagic[4] = {'T', 'E', 'R', 'D'};
inline constexpr uint32_t kFormatVersion = 1;

struct DenseTensor {
    std::vector<float> values;
    bool operator==(const DenseTensor&) const = default;
};

struct TensorEntry {
    std::string name;
    std::vector<uint64_t> shape;
    std::variant<DenseTensor, PackedTernary> data;

    uint64_t numel() const;
    bool is_packed() const { return std::holds_alternative<PackedTernary>(data); }
    const DenseTensor& dense() const { return std::get<DenseTensor>(data); }
    const PackedTernary& packed() const { return std::get<PackedTernary>(data); }
    bool operator==(const TensorEntry&) const = default;
};

struct Checkpoint {
    std::string config_text;
    std::vector<TensorEntry> tensors;

    const TensorEntry* find(const std::string& name) const;
    bool has_packed() const;
    bool operator==(const Checkpoint&) const = default;
};

TensorEntry make_dense(std::string name, std::vector<uint64_t> shape, std::vector<float> values);
TensorEntry make_packed(std::string name, PackedTernary p);

/// Bytes of numeric data a tensor contributes: 4 per dense value; alpha + pad_count + payload for packed.
uint64_t payload_bytes(const TensorEntry& t);
uint64_t payload_bytes(const Checkpoint& c);

std::vector<uint8_t> serialize(const Checkpoint& c);
Checkpoint deserialize(std::span<const uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace terdit::pack
