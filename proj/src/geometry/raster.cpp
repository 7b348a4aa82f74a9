#include "geodiff/raster.hpp"

#include <algorithm>

#include "geodiff/error.hpp"

namespace geodiff {

Raster::Raster(int height, int width, int channels, float fill) : height_(height), width_(width), channels_(channels) {
  if (height < 1 || width < 1 || channels < 1) {
    throw ValidationError("raster dimensions must be >= 1");
  }
  data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

Raster::Raster(int height, int width, int channels, std::vector<float> data)
    : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
  if (height < 1 || width < 1 || channels < 1) {
    throw ValidationError("raster dimensions must be >= 1");
  }
  if (data_.size() != static_cast<std::size_t>(height) * width * channels) {
    throw ValidationError("raster data length does not match H*W*C");
  }
}

namespace mask {

namespace {

void require_single_channel(const Raster& m) {
  if (m.channels() != 1) throw ValidationError("mask must have one channel");
}

template <typename Op>
Raster combine(const Raster& a, const Raster& b, Op op) {
  require_single_channel(a);
  require_single_channel(b);
  if (!a.same_grid(b)) throw ValidationError("mask grids differ");
  Raster out(a.height(), a.width(), 1);
  for (std::size_t i = 0; i < a.size(); ++i) {
    out.data()[i] = op(a.data()[i] >= 0.5f, b.data()[i] >= 0.5f) ? 1.0f : 0.0f;
  }
  return out;
}

// 3x3 min/max filter; `outside` is the value assumed beyond the border.
Raster morph(const Raster& m, bool take_max, float outside) {
  require_single_channel(m);
  Raster out(m.height(), m.width(), 1);
  for (int y = 0; y < m.height(); ++y) {
    for (int x = 0; x < m.width(); ++x) {
      float acc = take_max ? 0.0f : 1.0f;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy;
          const int xx = x + dx;
          const bool inside = yy >= 0 && yy < m.height() && xx >= 0 && xx < m.width();
          const float v = inside ? (m.at(yy, xx) >= 0.5f ? 1.0f : 0.0f) : outside;
          acc = take_max ? std::max(acc, v) : std::min(acc, v);
        }
      }
      out.at(y, x) = acc;
    }
  }
  return out;
}

}  // namespace

Raster threshold(const Raster& m, float level) {
  require_single_channel(m);
  Raster out(m.height(), m.width(), 1);
  for (std::size_t i = 0; i < m.size(); ++i) out.data()[i] = m.data()[i] >= level ? 1.0f : 0.0f;
  return out;
}

Raster logical_not(const Raster& m) {
  require_single_channel(m);
  Raster out(m.height(), m.width(), 1);
  for (std::size_t i = 0; i < m.size(); ++i) out.data()[i] = m.data()[i] >= 0.5f ? 0.0f : 1.0f;
  return out;
}

Raster logical_and(const Raster& a, const Raster& b) {
  return combine(a, b, [](bool p, bool q) { return p && q; });
}

Raster logical_or(const Raster& a, const Raster& b) {
  return combine(a, b, [](bool p, bool q) { return p || q; });
}

Raster dilate3x3(const Raster& m) { return morph(m, true, 0.0f); }
Raster erode3x3(const Raster& m) { return morph(m, false, 1.0f); }
Raster close3x3(const Raster& m) {
  require_single_channel(m);
  // Close on a grid padded by one pixel so the dilation is not clipped.
  Raster padded(m.height() + 2, m.width() + 2, 1);
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) padded.at(y + 1, x + 1) = m.at(y, x);
  const Raster closed = erode3x3(dilate3x3(padded));
  Raster out(m.height(), m.width(), 1);
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) out.at(y, x) = closed.at(y + 1, x + 1);
  return out;
}

std::size_t count(const Raster& m) {
  require_single_channel(m);
  return static_cast<std::size_t>(std::count_if(m.data().begin(), m.data().end(), [](float v) { return v >= 0.5f; }));
}

bool any(const Raster& m) { return count(m) > 0; }

}  // namespace mask
}  // namespace geodiff
