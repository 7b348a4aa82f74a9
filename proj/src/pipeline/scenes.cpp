#include "geodiff/scenes.hpp"

#include <algorithm>

#include "geodiff/error.hpp"

namespace geodiff::scenes {

namespace {

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return lo + static_cast<int>(unit(rng) * (hi - lo + 1));
}

std::array<float, 3> color(std::mt19937_64& rng, float lo, float hi) {
  std::array<float, 3> c{};
  for (float& v : c) v = lo + static_cast<float>(unit(rng)) * (hi - lo);
  return c;
}

bool covers(const Object& o, int x, int y) {
  if (o.shape == Shape::square) return x >= o.x && x < o.x + o.size && y >= o.y && y < o.y + o.size;
  const double r = o.size / 2.0;
  const double cx = o.x + r - 0.5;
  const double cy = o.y + r - 0.5;
  return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r;
}

}  // namespace

double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

Scene render(const SceneSpec& s) {
  if (s.size < 2) throw ValidationError("scene size must be >= 2");
  Scene out{Raster(s.size, s.size, 3), Raster(s.size, s.size, 1)};
  for (int y = 0; y < s.size; ++y) {
    const float shade = s.shading * (static_cast<float>(y) / (s.size - 1) - 0.5f);
    for (int x = 0; x < s.size; ++x) {
      std::array<float, 3> v{s.background[0] + shade, s.background[1] + shade, s.background[2] + shade};
      for (const Object& o : s.objects) {
        if (covers(o, x, y)) v = o.color;
      }
      for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = std::clamp(v[c], 0.0f, 1.0f);
      out.mask.at(y, x) = !s.objects.empty() && covers(s.objects.front(), x, y) ? 1.0f : 0.0f;
    }
  }
  return out;
}

SceneSpec random_spec(std::mt19937_64& rng, int size) {
  SceneSpec s;
  s.size = size;
  s.background = color(rng, 0.0f, 0.3f);
  s.shading = static_cast<float>(unit(rng)) * 0.2f;
  const int count = uniform_int(rng, 1, 3);
  const bool shared = unit(rng) < 0.5;
  const auto first = color(rng, 0.6f, 1.0f);
  for (int i = 0; i < count; ++i) {
    Object o;
    o.shape = unit(rng) < 0.5 ? Shape::square : Shape::disc;
    o.size = uniform_int(rng, 3, 10);
    o.x = uniform_int(rng, 0, size - o.size);
    o.y = uniform_int(rng, 0, size - o.size);
    o.color = shared || i == 0 ? first : color(rng, 0.6f, 1.0f);
    s.objects.push_back(o);
  }
  return s;
}

SceneSpec translation_spec(std::uint64_t seed, int dx, int size) {
  std::mt19937_64 rng(seed);
  SceneSpec s;
  s.size = size;
  Object o;
  o.size = 6;
  o.x = uniform_int(rng, 2, size - o.size - dx - 2);
  o.y = uniform_int(rng, 4, size - o.size - 4);
  s.background = color(rng, 0.0f, 0.25f);
  o.color = color(rng, 0.7f, 1.0f);
  s.shading = static_cast<float>(unit(rng)) * 0.15f;
  s.objects.push_back(o);
  return s;
}

}  // namespace geodiff::scenes
