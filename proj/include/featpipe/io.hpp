#pragma once

// File helpers shared across modules: atomic writes and PNG/JPEG codecs.

#include <featpipe/raster.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace featpipe {

class ImageDecodeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
/// Writes to "<path>.tmp-<unique>" then renames over path.
void write_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_atomic(const std::filesystem::path& path, const std::string& text);

/// Decodes PNG (gray, gray+alpha, RGB, RGBA, palette) or JPEG into an 8-bit
/// raster with 1 or 3 channels. Alpha is dropped; palette images expand to RGB.
Image decode_image(std::span<const std::uint8_t> bytes);
Image read_image(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_png(const Image& image);
void write_png(const std::filesystem::path& path, const Image& image);

/// Indexed PNG whose palette indices are the raster values (0..255).
std::vector<std::uint8_t> encode_indexed_png(const LabelRaster& labels);
/// Reads palette indices of an indexed PNG; 8-bit grayscale is accepted with
/// the gray value as the index.
LabelRaster decode_indexed_png(std::span<const std::uint8_t> bytes);
LabelRaster read_indexed_png(const std::filesystem::path& path);
void write_indexed_png(const std::filesystem::path& path, const LabelRaster& labels);

/// Distinct display colour for a class index.
std::array<std::uint8_t, 3> palette_color(int index);

}  // namespace featpipe
