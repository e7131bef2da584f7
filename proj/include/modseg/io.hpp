#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "modseg/types.hpp"

namespace modseg::io {

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t seed = 0xcbf29ce484222325ull);
std::uint64_t fnv1a(const std::string& text);
std::string hex64(std::uint64_t value);

std::uint64_t hash_image(const Image& image);
std::uint64_t hash_mask(const BinaryMask& mask);

/// Dense float32 tensor file: "MSGT", u32 version, u32 rank, u64 dims[rank],
/// then little-endian float32 data in row-major order.
struct Tensor {
    std::vector<std::uint64_t> shape;
    std::vector<float> data;
};

void write_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor read_tensor(const std::filesystem::path& path);

/// Packs a mask row-major, most significant bit first within each byte.
std::vector<std::uint8_t> pack_bits(const BinaryMask& mask);
BinaryMask unpack_bits(std::span<const std::uint8_t> bytes, Eigen::Index height, Eigen::Index width);

/// 8-bit RGB PNG, channels clamped to [0, 1].
void write_png(const std::filesystem::path& path, const Image& image);
/// Palette PNG where pixel value = label; labels must be in [0, palette size).
void write_indexed_png(const std::filesystem::path& path, const LabelGrid& labels,
                       const std::vector<std::array<std::uint8_t, 3>>& palette);
/// Any PNG as RGB in [0, 1].
Image read_png(const std::filesystem::path& path);
/// Single-channel or palette PNG as integer labels (palette indices, not colors).
LabelGrid read_label_png(const std::filesystem::path& path);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);

}  // namespace modseg::io
