#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace geodiff {

/// Dense H x W x C float grid, row-major and channel-last.
///
/// Carries images (values in [0,1]), masks ({0,1} or soft [0,1]), depth maps
/// (meters, > 0) and latents. Copyable value type.
class Raster {
 public:
  Raster() = default;
  Raster(int height, int width, int channels, float fill = 0.0f);
  Raster(int height, int width, int channels, std::vector<float> data);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  std::size_t pixel_count() const { return static_cast<std::size_t>(height_) * width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float& at(int y, int x, int c = 0) { return data_[index(y, x, c)]; }
  float at(int y, int x, int c = 0) const { return data_[index(y, x, c)]; }

  std::span<float> pixel(int y, int x) { return {data_.data() + index(y, x, 0), static_cast<std::size_t>(channels_)}; }
  std::span<const float> pixel(int y, int x) const {
    return {data_.data() + index(y, x, 0), static_cast<std::size_t>(channels_)};
  }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  const std::vector<float>& values() const { return data_; }

  bool same_grid(const Raster& other) const { return height_ == other.height_ && width_ == other.width_; }
  bool same_shape(const Raster& other) const { return same_grid(other) && channels_ == other.channels_; }

  bool operator==(const Raster& other) const = default;

 private:
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<float> data_;
};

// Mask helpers. A mask is a single-channel raster; "set" means value >= 0.5.
namespace mask {

Raster threshold(const Raster& m, float level = 0.5f);
Raster logical_not(const Raster& m);
Raster logical_and(const Raster& a, const Raster& b);
Raster logical_or(const Raster& a, const Raster& b);
Raster dilate3x3(const Raster& m);
Raster erode3x3(const Raster& m);
/// Dilation then erosion on the grid padded by one unset pixel; beyond the
/// padding the erosion treats pixels as set so border-touching masks survive.
Raster close3x3(const Raster& m);
std::size_t count(const Raster& m);
bool any(const Raster& m);

}  // namespace mask

}  // namespace geodiff
