#include <doctest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "geodiff/error.hpp"
#include "oracles.hpp"

using namespace geodiff;
using namespace geodiff::losses;

namespace {

Mat random_rows_stochastic(std::mt19937_64& rng, int rows, int cols) {
  std::uniform_real_distribution<double> u(0.01, 1.0);
  Mat a(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) a(i, j) = u(rng);
    a.row(i) /= a.row(i).sum();
  }
  return a;
}

}  // namespace

TEST_CASE("background term on the two-token hand case") {
  Mat y(2, 1);
  y << 0.4, 7.0;
  Eigen::VectorXd m(2);
  m << 1, 0;
  CHECK(loss_bg(ad::constant(y), Mat::Zero(2, 1), m).item() == doctest::Approx(0.2));
  CHECK(loss_obj(ad::constant(y), Mat::Zero(2, 1), m).item() == doctest::Approx(0.2));
  CHECK(loss_obj(ad::constant(y), y, m).item() == 0.0);
}

TEST_CASE("smoothness term") {
  Mat y(2, 1);
  y << 0, 1;
  CHECK(loss_smooth(ad::constant(y), 1, 2).item() == doctest::Approx(1.0));
  CHECK(loss_smooth(ad::constant(Mat::Constant(6, 2, 3.0)), 2, 3).item() == 0.0);
  CHECK(loss_smooth(ad::constant(Mat::Ones(1, 4)), 1, 1).item() == 0.0);
  Mat checker(16, 1);
  for (int i = 0; i < 16; ++i) checker(i, 0) = ((i / 4 + i % 4) % 2) ? 1.0 : -1.0;
  const double a = loss_smooth(ad::constant(checker), 4, 4).item();
  CHECK(loss_smooth(ad::constant(2 * checker), 4, 4).item() == doctest::Approx(2 * a));
  CHECK_THROWS_AS(loss_smooth(ad::constant(checker), 3, 4), ValidationError);
}

TEST_CASE("removal loss on hand-built three-token maps") {
  // Grid 1x3: token 0 foreground, tokens 1 and 2 background.
  Mat ae(3, 3);
  ae << 0.1, 0.6, 0.3, 0.2, 0.5, 0.3, 0.3, 0.3, 0.4;
  Mat ar(3, 3);
  ar << 0.7, 0.2, 0.1, 0.1, 0.8, 0.1, 0.2, 0.2, 0.6;
  const std::vector<unsigned char> rows{1, 0, 0}, obj{1, 0, 0}, bg{0, 1, 1};
  // C[0] = ae[0] . ar[j]: j=0 0.22, j=1 0.52, j=2 0.32 -> rho_oo 0.22, rho_ob 0.52 at token 1.
  const double expect = std::exp(-1.0 / 2.0) * (std::log(0.22) - std::log(0.52));
  const double got = loss_remove_maps(ad::constant(ae), ar, rows, obj, bg, 1, 3).item();
  CHECK(got == doctest::Approx(expect).epsilon(1e-12));
  CHECK(got == doctest::Approx(oracle::removal_loss(ae, ar, rows, obj, bg, 1, 3)).epsilon(1e-12));
}

TEST_CASE("removal loss is zero when object and background correlations tie") {
  Mat ae = Mat::Zero(2, 2);
  ae(0, 0) = 0.5;
  ae(0, 1) = 0.5;
  const Mat ar = Mat::Identity(2, 2);
  const std::vector<unsigned char> rows{1, 0}, obj{1, 0}, bg{0, 1};
  CHECK(loss_remove_maps(ad::constant(ae), ar, rows, obj, bg, 1, 2).item() == doctest::Approx(0.0));
}

TEST_CASE("raising the background correlation lowers the removal loss") {
  Mat ae(2, 2);
  ae << 0.2, 0.8, 0.0, 1.0;
  const std::vector<unsigned char> rows{1, 0}, obj{1, 0}, bg{0, 1};
  double prev = 1e300;
  for (double b = 0.1; b < 0.9; b += 0.1) {
    Mat ar(2, 2);
    ar << 0.5, 0.5, 1.0 - b, b;
    const double v = loss_remove_maps(ad::constant(ae), ar, rows, obj, bg, 1, 2).item();
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("removal loss matches the transliterated oracle on random small grids") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const int h = 1 + int(rng() % 3);
    const int w = 1 + int(rng() % 3);
    const int n = h * w;
    if (n < 2) continue;
    std::vector<unsigned char> obj(n), bg(n), rows(n);
    for (int i = 0; i < n; ++i) obj[i] = rng() % 2;
    obj[0] = 1;
    obj[n - 1] = 0;
    for (int i = 0; i < n; ++i) {
      bg[i] = !obj[i];
      rows[i] = obj[i] && rng() % 3 != 0;
    }
    const Mat ae = random_rows_stochastic(rng, n, n);
    const Mat ar = random_rows_stochastic(rng, n, n);
    const double got = loss_remove_maps(ad::constant(ae), ar, rows, obj, bg, h, w).item();
    CHECK(std::abs(got - oracle::removal_loss(ae, ar, rows, obj, bg, h, w)) < 1e-9);
  }
}

TEST_CASE("removal loss options and errors") {
  const std::vector<unsigned char> rows{1, 0}, obj{1, 0}, none{0, 0};
  CHECK_THROWS_AS(loss_remove_maps(ad::constant(Mat::Identity(2, 2)), Mat::Identity(2, 2), rows, obj, none, 1, 2),
                  ValidationError);
  CHECK(loss_remove_maps(ad::constant(Mat::Identity(2, 2)), Mat::Identity(2, 2), none, obj, {0, 1}, 1, 2).item() == 0.0);
  // Literal product needs token-to-token maps.
  CHECK_THROWS_AS(loss_remove_maps(ad::constant(Mat::Ones(2, 3) / 3), Mat::Ones(2, 3) / 3, rows, obj, {0, 1}, 1, 2,
                                   {.literal_product = true}),
                  ValidationError);
  Mat ae(2, 2);
  ae << 0.3, 0.7, 0.6, 0.4;
  Mat ar(2, 2);
  ar << 0.9, 0.1, 0.2, 0.8;
  // Literal product: C = ae * ar.
  const Mat c = ae * ar;
  const double lit = std::exp(-1.0) * (std::log(c(0, 0)) - std::log(c(0, 1)));
  CHECK(loss_remove_maps(ad::constant(ae), ar, rows, obj, {0, 1}, 1, 2, {.literal_product = true}).item() ==
        doctest::Approx(lit));
}

TEST_CASE("adaptive removal weight") {
  CHECK(adapt_remove_weight(-1.0, 1.0) == 2.0);
  CHECK(adapt_remove_weight(-7.0, 2.0) == 1.0);
  CHECK(adapt_remove_weight(-3.0, 1.5) == 1.5);
  CHECK(adapt_remove_weight(-1.8, 1.0) == 1.0);
  CHECK(adapt_remove_weight(-6.0, 1.0) == 1.0);
  CHECK(adapt_remove_weight(0.0, 16.0) == 20.0);
  CHECK(adapt_remove_weight(-10.0, 0.15) == 0.1);
}

TEST_CASE("optimization schedule") {
  const OptimSchedule s;
  CHECK(s.count() == 16);
  int n = 0;
  for (int step = 1; step <= 50; ++step) n += s.optimizes(step);
  CHECK(n == 16);
  CHECK(s.optimizes(1));
  CHECK_FALSE(s.optimizes(2));
  CHECK(s.optimizes(31));
  CHECK_FALSE(s.optimizes(33));
  CHECK(s.lr(1) == 1.5);
  CHECK(s.lr(31) == 0.0);
  CHECK(s.lr(3) == doctest::Approx(1.4));
  CHECK_THROWS_AS(s.lr(2), ValidationError);
}

TEST_CASE("loss weights round trip through JSON") {
  LossWeights w;
  w.w_bg = 3;
  w.upper_thresh = -2;
  const LossWeights back = LossWeights::from_json(w.to_json());
  CHECK(back.w_bg == 3);
  CHECK(back.upper_thresh == -2);
  CHECK_THROWS_AS(LossWeights::from_json({{"w_min", 0.0}}), ValidationError);
  CHECK_THROWS_AS(LossWeights::from_json({{"upper_thresh", -7.0}}), ValidationError);
}

TEST_CASE("total loss composes the per-term values") {
  fixture::TinyEdit e(1);
  const Var z = ad::constant(e.state.latent);
  const Var t = ad::constant(e.state.text);
  const LossBreakdown all = e.loss(z, t, LossWeights{}, false);
  REQUIRE(all.remove.has_value());
  CHECK(all.blocks == 1);
  const double expect = all.bg + all.obj + 0.1 * all.smooth + *all.remove;
  CHECK(all.total.item() == doctest::Approx(expect).epsilon(1e-12));
  LossWeights zero = fixture::only("none");
  CHECK(e.loss(z, t, zero, false).total.item() == 0.0);
  const LossBreakdown rm = e.loss(z, t, LossWeights{}, true);
  CHECK(rm.obj == 0.0);
  CHECK(rm.total.item() == doctest::Approx(rm.bg + 0.1 * rm.smooth + *rm.remove).epsilon(1e-12));
  // No shared block at all.
  CHECK_THROWS_AS(total_loss({}, e.sharing, LossWeights{}, false), ValidationError);
}

TEST_CASE("identical branches give zero non-removal terms") {
  fixture::TinyEdit e(2, geometry::EditTransform::identity());
  const LossBreakdown l =
      e.loss(ad::constant(e.trajectory.latent_before_step(1)), ad::constant(e.model.null_text()), LossWeights{}, false);
  CHECK(l.bg == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(l.obj == doctest::Approx(0.0).epsilon(1e-15));
  CHECK_FALSE(l.remove.has_value());
}

TEST_CASE("each loss term has exact gradients for latents and embeddings") {
  for (const std::vector<int>& blocks : {std::vector<int>{0}, std::vector<int>{1}, std::vector<int>{2}}) {
    fixture::TinyEdit e(3, geometry::EditTransform::translate(1, 0), blocks);
    for (const char* term : {"bg", "obj", "smooth", "remove"}) {
      CAPTURE(term);
      CAPTURE(blocks[0]);
      const LossWeights w = fixture::only(term);
      const Var z = ad::parameter(e.state.latent);
      const Var t = ad::parameter(e.state.text);
      const LossBreakdown l = e.loss(z, t, w, false);
      const ad::Gradients g = ad::gradient(l.total, std::vector<Var>{z, t});
      const Mat fz = oracle::finite_difference(
          [&](const Mat& v) { return e.loss(ad::constant(v), ad::constant(e.state.text), w, false).total.item(); },
          e.state.latent);
      const Mat ft = oracle::finite_difference(
          [&](const Mat& v) { return e.loss(ad::constant(e.state.latent), ad::constant(v), w, false).total.item(); },
          e.state.text);
      CHECK(oracle::relative_error(g.grads[0], fz) < 1e-3);
      CHECK(oracle::relative_error(g.grads[1], ft) < 1e-3);
    }
  }
}

TEST_CASE("optimize step: zero rate, exact descent update and small-rate descent") {
  fixture::TinyEdit e(4);
  SUBCASE("zero learning rate leaves the state and matches the plain step") {
    EditState s = e.state;
    LossWeights w;
    const OptimizeResult r = optimize_step(e.setup, s, w, 0.0, 1, false);
    CHECK(s.latent == e.state.latent);
    CHECK(s.text == e.state.text);
    std::vector<guidance::BlockGuidance> rec;
    CHECK(r.next_latent == edit_step(e.setup, e.state, &rec));
  }
  SUBCASE("parameters move by -lr * grad") {
    EditState s = e.state;
    LossWeights w;
    const Var z = ad::parameter(e.state.latent);
    const Var t = ad::parameter(e.state.text);
    const ad::Gradients g = ad::gradient(e.loss(z, t, w, false).total, std::vector<Var>{z, t});
    optimize_step(e.setup, s, w, 0.25, 1, false);
    CHECK((s.latent - (e.state.latent - 0.25 * g.grads[0])).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((s.text - (e.state.text - 0.25 * g.grads[1])).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("removal weight adapts from the step's removal loss") {
    EditState s = e.state;
    LossWeights w;
    const OptimizeResult r = optimize_step(e.setup, s, w, 0.0, 1, false);
    REQUIRE(r.loss.remove.has_value());
    CHECK(w.w_remove == adapt_remove_weight(*r.loss.remove, 1.0));
  }
}

TEST_CASE("small gradient steps do not increase the removal-job loss") {
  int ok = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    fixture::TinyEdit e(seed + 10, geometry::EditTransform::remove());
    EditState s = e.state;
    LossWeights w;
    const double before = e.loss(ad::constant(s.latent), ad::constant(s.text), w, true).total.item();
    LossWeights w2 = w;
    optimize_step(e.setup, s, w2, 1e-2, 1, true);
    const double after = e.loss(ad::constant(s.latent), ad::constant(s.text), w, true).total.item();
    ok += after <= before;
  }
  CHECK(ok == 20);
}
