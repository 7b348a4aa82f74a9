#include <doctest.h>

#include <Eigen/Geometry>
#include <cmath>

#include "geodiff/error.hpp"
#include "geodiff/io.hpp"

using namespace geodiff;
using namespace geodiff::io;

TEST_CASE("PNG round trip at 8-bit precision") {
  Raster img(3, 5, 3);
  for (std::size_t i = 0; i < img.size(); ++i) img.data()[i] = float(i % 7) / 6.0f;
  const Raster back = decode_png(encode_png(img));
  REQUIRE(back.same_shape(img));
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(std::abs(back.data()[i] - img.data()[i]) <= 0.5f / 255.0f + 1e-6f);
  Raster m(2, 2, 1);
  m.at(1, 0) = 1.0f;
  const Raster mb = decode_mask_png(encode_png(m));
  CHECK(mb == m);
  const std::vector<std::uint8_t> junk{1, 2, 3};
  CHECK_THROWS_AS(decode_png(junk), ValidationError);
}

TEST_CASE("PFM round trip is exact") {
  Raster d(4, 3, 1);
  for (std::size_t i = 0; i < d.size(); ++i) d.data()[i] = 0.25f + float(i);
  CHECK(decode_pfm(encode_pfm(d)) == d);
  const std::string bad = "P7\n1 1\n-1\n";
  CHECK_THROWS_AS(decode_pfm(std::vector<std::uint8_t>(bad.begin(), bad.end())), ValidationError);
}

TEST_CASE("base64") {
  const std::string s = "geodiff!";
  const std::vector<std::uint8_t> bytes(s.begin(), s.end());
  CHECK(base64_encode(bytes) == "Z2VvZGlmZiE=");
  CHECK(base64_decode("Z2VvZGlmZiE=") == bytes);
  CHECK_THROWS_AS(base64_decode("Z2V*"), ValidationError);
}

TEST_CASE("transform JSON") {
  SUBCASE("identity") {
    const auto t = transform_from_json(transform_to_json(geometry::EditTransform::identity()));
    CHECK(t.kind == geometry::TransformKind::identity);
  }
  SUBCASE("rotation about the camera axis round trips") {
    const Eigen::Matrix3d r = Eigen::AngleAxisd(M_PI / 6, Eigen::Vector3d::UnitZ()).toRotationMatrix();
    const auto t = geometry::EditTransform::rigid(r, {0.1, 0, 0});
    const auto back = transform_from_json(transform_to_json(t));
    CHECK(back.kind == geometry::TransformKind::rigid3d);
    CHECK((back.rotation - r).cwiseAbs().maxCoeff() < 1e-12);
    const auto axis = transform_from_json(
        {{"kind", "rigid3d"}, {"params", {{"axis", {0, 0, 1}}, {"angle_deg", 30}}}});
    CHECK((axis.rotation - r).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("removal") {
    CHECK(transform_from_json({{"kind", "remove"}}).kind == geometry::TransformKind::remove);
  }
  SUBCASE("bad input") {
    CHECK_THROWS_AS(transform_from_json({{"kind", "warp"}}), ValidationError);
    CHECK_THROWS_AS(transform_from_json({{"kind", "translate2d"}, {"params", {{"offset", "x"}}}}), ValidationError);
    CHECK_THROWS_AS(transform_from_json(nlohmann::json::array()), ValidationError);
  }
  SUBCASE("intrinsics") {
    const geometry::CameraIntrinsics k{64, 64, 31.5, 31.5};
    const auto back = intrinsics_from_json(intrinsics_to_json(k));
    CHECK(back.fx == 64);
    CHECK(back.cy == 31.5);
    CHECK_THROWS_AS(intrinsics_from_json({{"fx", -1}, {"fy", 1}, {"cx", 0}, {"cy", 0}}), ValidationError);
  }
}
