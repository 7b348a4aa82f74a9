#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "geodiff/geometry.hpp"
#include "geodiff/raster.hpp"

namespace geodiff::io {

/// RGB image in [0,1] (3 channels). Grayscale and alpha inputs are converted.
Raster read_png(const std::filesystem::path& path);
Raster decode_png(std::span<const std::uint8_t> bytes);
/// Mask: any pixel with nonzero luminance is set.
Raster read_mask_png(const std::filesystem::path& path);
Raster decode_mask_png(std::span<const std::uint8_t> bytes);

/// Writes 1-channel rasters as grayscale and 3/4-channel rasters as RGB(A).
void write_png(const std::filesystem::path& path, const Raster& image);
std::vector<std::uint8_t> encode_png(const Raster& image);

/// Portable float map, little-endian, single channel ("Pf"). Rows are stored
/// bottom-to-top as the format requires.
Raster read_pfm(const std::filesystem::path& path);
Raster decode_pfm(std::span<const std::uint8_t> bytes);
void write_pfm(const std::filesystem::path& path, const Raster& depth);
std::vector<std::uint8_t> encode_pfm(const Raster& depth);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

/// {kind, params, depth_source}
nlohmann::json transform_to_json(const geometry::EditTransform& t);
geometry::EditTransform transform_from_json(const nlohmann::json& j);

/// {fx, fy, cx, cy}
nlohmann::json intrinsics_to_json(const geometry::CameraIntrinsics& k);
geometry::CameraIntrinsics intrinsics_from_json(const nlohmann::json& j);

}  // namespace geodiff::io
