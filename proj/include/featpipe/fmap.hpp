#pragma once

// FMAP container for dense float rasters.
//
// Layout (little-endian):
//   "FMAP" | u32 version=1 | u32 h | u32 w | u32 d | u8 dtype (0=f32, 1=f16)
//   | 3 reserved zero bytes | row-major payload
//   | optional: u64 length + UTF-8 JSON provenance
//
// Attention maps are stored with d = 1.

#include <featpipe/raster.hpp>

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <vector>

namespace featpipe {

enum class FmapDtype : std::uint8_t { f32 = 0, f16 = 1 };

struct FmapRecord {
    FloatRaster data;
    std::optional<nlohmann::json> provenance;
    FmapDtype dtype = FmapDtype::f32;
};

class FmapError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kFmapVersion = 1;
inline constexpr std::size_t kFmapHeaderSize = 24;

std::vector<std::uint8_t> encode_fmap(const FloatRaster& data, const nlohmann::json* provenance = nullptr,
                                      FmapDtype dtype = FmapDtype::f32);
FmapRecord decode_fmap(std::span<const std::uint8_t> bytes);

/// Writes via a temporary sibling file and rename, so readers never see a partial file.
void write_fmap(const std::filesystem::path& path, const FloatRaster& data,
                const nlohmann::json* provenance = nullptr, FmapDtype dtype = FmapDtype::f32);
FmapRecord read_fmap(const std::filesystem::path& path);

std::uint16_t float_to_half(float value);
float half_to_float(std::uint16_t bits);

}  // namespace featpipe
