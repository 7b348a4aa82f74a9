#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "geodiff/raster.hpp"

namespace geodiff::scenes {

enum class Shape { square, disc };

struct Object {
  Shape shape = Shape::square;
  int size = 6;
  int x = 0;  // top-left corner of the bounding box
  int y = 0;
  std::array<float, 3> color{0.9f, 0.9f, 0.9f};
};

/// Bright objects on a dark, gently shaded background. Later objects paint
/// over earlier ones; the mask covers the first object.
struct SceneSpec {
  int size = 32;
  std::array<float, 3> background{0.1f, 0.1f, 0.1f};
  float shading = 0.0f;  // vertical background gradient amplitude
  std::vector<Object> objects;
};

struct Scene {
  Raster image;
  Raster mask;
};

Scene render(const SceneSpec& spec);

/// Uniform double in [0, 1) from the top 53 bits.
double unit(std::mt19937_64& rng);

/// Training scene: one to three squares or discs of side 3..10, often
/// sharing one color.
SceneSpec random_spec(std::mt19937_64& rng, int size = 32);

/// Single 6 px square with room for a +dx translation inside the frame.
SceneSpec translation_spec(std::uint64_t seed, int dx, int size = 32);

}  // namespace geodiff::scenes
