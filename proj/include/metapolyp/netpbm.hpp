#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace metapolyp {

/// 8-bit raster, row-major, interleaved channels (1 = gray, 3 = RGB).
struct Raster {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 0;
    std::vector<std::uint8_t> pixels;

    friend bool operator==(const Raster&, const Raster&) = default;
};

/// Decodes binary P5 (gray) or P6 (RGB) data. Samples with maxval < 255 are
/// rescaled to 0..255. Throws ParseError with the offending byte offset.
Raster decode_pnm(std::span<const std::uint8_t> bytes);
/// Encodes as P5 (1 channel) or P6 (3 channels) with maxval 255.
std::vector<std::uint8_t> encode_pnm(const Raster& raster);

/// File wrappers; I/O failures throw Error.
Raster read_pnm(const std::filesystem::path& path);
void write_pnm(const std::filesystem::path& path, const Raster& raster);

}  // namespace metapolyp
