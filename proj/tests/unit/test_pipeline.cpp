#include <doctest.h>

#include <cmath>
#include <set>

#include "fixtures.hpp"
#include "geodiff/error.hpp"
#include "geodiff/pipeline.hpp"
#include "geodiff/scenes.hpp"

using namespace geodiff;
using namespace geodiff::pipeline;
using geometry::EditTransform;

namespace {

EditInputs square_scene(int size = 8) {
  EditInputs in{Raster(size, size, 3, 0.1f), Raster(size, size, 1), std::nullopt};
  for (int y = 2; y < 4; ++y) {
    for (int x = 2; x < 4; ++x) {
      in.mask.at(y, x) = 1.0f;
      for (int c = 0; c < 3; ++c) in.image.at(y, x, c) = 0.9f;
    }
  }
  return in;
}

EditConfig short_config(EditTransform t) {
  EditConfig c;
  c.transform = t;
  c.steps = 6;
  c.share_until_step = 5;
  c.optimize_first_n = 4;
  return c;
}

}  // namespace

TEST_CASE("edit config JSON") {
  SUBCASE("defaults") {
    const EditConfig c = EditConfig::from_json(nlohmann::json::object());
    CHECK(c.steps == 50);
    CHECK(c.share_until_step == 45);
    CHECK(c.optimize_first_n == 32);
    CHECK(c.lr_initial == 1.5);
    CHECK(c.lr_final == 0.0);
  }
  SUBCASE("schedule bounds follow a smaller step budget") {
    const EditConfig c = EditConfig::from_json({{"steps", 10}});
    CHECK(c.share_until_step == 10);
    CHECK(c.optimize_first_n == 10);
  }
  SUBCASE("round trip") {
    EditConfig c = short_config(EditTransform::translate(2, -1));
    c.shared_blocks = {0, 6};
    c.intrinsics = geometry::CameraIntrinsics{10, 12, 3, 4};
    const EditConfig back = EditConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
  }
  SUBCASE("invalid configs") {
    CHECK_THROWS_AS(EditConfig::from_json({{"stpes", 10}}), ValidationError);
    CHECK_THROWS_AS(EditConfig::from_json({{"steps", "ten"}}), ValidationError);
    CHECK_THROWS_AS(EditConfig::from_json({{"steps", 0}}), ValidationError);
    CHECK_THROWS_AS(EditConfig::from_json({{"steps", 10}, {"share_until_step", 11}}), ValidationError);
    CHECK_THROWS_AS(EditConfig::from_json({{"sharing", false}}), ValidationError);
    CHECK_THROWS_AS(EditConfig::from_json({{"shared_blocks", {9}}}), ValidationError);
    CHECK_THROWS_AS(EditConfig::from_json({{"lr", {{"initial", -1.0}}}}), ValidationError);
  }
}

TEST_CASE("naive warp baseline") {
  const EditInputs in = square_scene();
  SUBCASE("identity leaves the input unchanged") {
    const auto f = object_field(EditTransform::identity(), in.mask, std::nullopt, std::nullopt);
    CHECK(naive_warp_baseline(in.image, in.mask, f) == in.image);
  }
  SUBCASE("translation moves the block and fills the hole with background") {
    const auto f = object_field(EditTransform::translate(3, 0), in.mask, std::nullopt, std::nullopt);
    const Raster out = naive_warp_baseline(in.image, in.mask, f);
    for (int y = 0; y < 8; ++y) {
      for (int x = 0; x < 8; ++x) {
        const bool moved = y >= 2 && y < 4 && x >= 5 && x < 7;
        CHECK(out.at(y, x, 0) == doctest::Approx(moved ? 0.9f : 0.1f));
      }
    }
  }
  SUBCASE("removal leaves only the filled hole") {
    const auto f = object_field(EditTransform::remove(), in.mask, std::nullopt, std::nullopt);
    const Raster out = naive_warp_baseline(in.image, in.mask, f);
    for (float v : out.data()) CHECK(v == doctest::Approx(0.1f));
  }
}

TEST_CASE("warp error") {
  const EditInputs in = square_scene();
  const auto f = object_field(EditTransform::translate(3, 0), in.mask, std::nullopt, std::nullopt);
  CHECK(*warp_error(in.image, naive_warp_baseline(in.image, in.mask, f), in.mask, f) == 0.0);
  const auto id = object_field(EditTransform::identity(), in.mask, std::nullopt, std::nullopt);
  CHECK(*warp_error(in.image, in.image, in.mask, id) == 0.0);
  CHECK(*warp_error(in.image, in.image, in.mask, f) == doctest::Approx(0.8));
  const auto rm = object_field(EditTransform::remove(), in.mask, std::nullopt, std::nullopt);
  CHECK_FALSE(warp_error(in.image, in.image, in.mask, rm).has_value());

  SUBCASE("inverted-intensity foreground on a ramp") {
    Raster ramp(6, 6, 3);
    Raster mask(6, 6, 1);
    double expect = 0.0;
    int n = 0;
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x) {
        const float v = float(x + 6 * y) / 35.0f;
        for (int c = 0; c < 3; ++c) ramp.at(y, x, c) = v;
        if (x >= 1 && x < 4 && y >= 2 && y < 5) {
          mask.at(y, x) = 1.0f;
          expect += 3 * std::abs(double(v) - (1.0 - double(v)));
          n += 3;
        }
      }
    Raster inverted = ramp;
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x)
        if (mask.at(y, x) >= 0.5f)
          for (int c = 0; c < 3; ++c) inverted.at(y, x, c) = 1.0f - ramp.at(y, x, c);
    const auto fid = object_field(EditTransform::identity(), mask, std::nullopt, std::nullopt);
    CHECK(std::abs(*warp_error(ramp, inverted, mask, fid) - expect / n) < 1e-6);
  }
}

TEST_CASE("automatic pivot resolves to the mask centroid") {
  const EditInputs in = square_scene();
  EditTransform t = EditTransform::scale(2, 2);
  t.auto_pivot = true;
  const EditTransform r = resolve_transform(t, in.mask, std::nullopt, std::nullopt);
  CHECK(r.pivot2.x() == doctest::Approx(2.5));
  CHECK(r.pivot2.y() == doctest::Approx(2.5));
  CHECK_FALSE(r.auto_pivot);
}

TEST_CASE("preview with identity shows the input and no disocclusion") {
  const EditInputs in = square_scene();
  const Preview p = preview(in, EditTransform::identity());
  CHECK(p.overlay == in.image);
  CHECK_FALSE(mask::any(p.m_disocc));
  CHECK(p.m_obj_t == in.mask);
}

TEST_CASE("run_edit invariants on a tiny model") {
  const diffnet::Denoiser model = fixture::tiny_model();
  const EditInputs in = square_scene();

  SUBCASE("identity without optimization reproduces the reconstruction and the input") {
    EditConfig c = short_config(EditTransform::identity());
    c.optimize = false;
    const EditResult r = run_edit(model, in, c);
    const Inversion inv = invert_image(model, in.image, c.steps);
    CHECK((r.latent - inv.latent).cwiseAbs().maxCoeff() < 1e-12);
    EditConfig raw = c;
    raw.detail_transfer = false;
    const EditResult d = run_edit(model, in, raw, &inv);
    double diff = 0.0;
    for (std::size_t i = 0; i < d.edited.size(); ++i)
      diff = std::max(diff, double(std::abs(d.edited.data()[i] - d.reconstruction.data()[i])));
    CHECK(diff < 1e-5);
    for (std::size_t i = 0; i < r.edited.size(); ++i) CHECK(std::abs(r.edited.data()[i] - in.image.data()[i]) < 1e-4);
    CHECK(*r.warp_error < 1e-4);
  }

  SUBCASE("without sharing and optimization the edit branch is plain sampling") {
    EditConfig c = short_config(EditTransform::translate(2, 0));
    c.sharing = false;
    c.optimize = false;
    c.detail_transfer = false;
    const Inversion inv = invert_image(model, in.image, c.steps);
    const EditResult r = run_edit(model, in, c, &inv);
    const Mat plain = sampler::denoise(model, inv.trajectory.latents.back(), 4, 4, model.null_text(), c.steps);
    CHECK((r.latent - plain).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("deterministic outputs and schedule records") {
    const EditConfig c = short_config(EditTransform::translate(2, 0));
    int calls = 0;
    const EditResult a = run_edit(model, in, c, nullptr, [&](int done, int total, auto) {
      ++calls;
      CHECK(done == calls);
      CHECK(total == 6);
    });
    CHECK(calls == 6);
    const EditResult b = run_edit(model, in, c);
    CHECK(a.edited == b.edited);
    REQUIRE(a.loss_curves.size() == b.loss_curves.size());
    for (std::size_t i = 0; i < a.loss_curves.size(); ++i) CHECK(a.loss_curves[i].to_json() == b.loss_curves[i].to_json());
    std::set<int> optimized;
    for (const auto& rec : a.loss_curves) {
      if (rec.term == "total") optimized.insert(rec.step);
      if (rec.term == "shared_blocks") CHECK(rec.value == (rec.step <= 5 ? 8.0 : 0.0));
    }
    CHECK(optimized == std::set<int>{1, 3});
    CHECK(a.warp_error.has_value());
    CHECK(std::isfinite(*a.warp_error));
  }

  SUBCASE("diagnostics keep one map per step and block") {
    EditConfig c = short_config(EditTransform::translate(2, 0));
    c.diagnostics = true;
    const EditResult r = run_edit(model, in, c);
    CHECK(r.attention.size() == 6u * 8u);
    const AttentionDump& d = r.attention.at({1, 0});
    CHECK(d.rows == 16);
    CHECK(d.heatmap().height() == 16);
  }

  SUBCASE("literal removal product runs across self and cross blocks") {
    EditConfig c = short_config(EditTransform::translate(2, 0));
    c.removal.literal_product = true;
    const EditResult r = run_edit(model, in, c);
    CHECK(r.warp_error.has_value());
  }

  SUBCASE("removal has no warp error and no object term") {
    const EditResult r = run_edit(model, in, short_config(EditTransform::remove()));
    CHECK_FALSE(r.warp_error.has_value());
    for (const auto& rec : r.loss_curves) CHECK(rec.term != "obj");
  }

  SUBCASE("input errors") {
    EditInputs empty = in;
    empty.mask = Raster(8, 8, 1);
    CHECK_THROWS_AS(run_edit(model, empty, short_config(EditTransform::translate(1, 0))), ValidationError);
    EditInputs odd{Raster(6, 6, 3), Raster(6, 6, 1), std::nullopt};
    CHECK_THROWS_AS(run_edit(model, odd, short_config(EditTransform::identity())), ValidationError);
    const Inversion inv = invert_image(model, in.image, 4);
    CHECK_THROWS_AS(run_edit(model, in, short_config(EditTransform::identity()), &inv), ValidationError);
  }
}

TEST_CASE("procedural scenes") {
  const scenes::Scene s = scenes::render(scenes::translation_spec(3, 8));
  CHECK(mask::count(s.mask) == 36);
  const auto c = geometry::centroid(s.mask);
  REQUIRE(c);
  CHECK(c->x() + 2.5 + 8 <= 31);
  std::mt19937_64 rng(1);
  const scenes::SceneSpec r = scenes::random_spec(rng);
  CHECK(!r.objects.empty());
  CHECK(scenes::render(r).image.height() == 32);
}
