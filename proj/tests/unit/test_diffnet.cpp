#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "geodiff/diffnet.hpp"
#include "geodiff/error.hpp"
#include "oracles.hpp"

using namespace geodiff;
using namespace geodiff::diffnet;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.latent_size = 4;
  c.base_channels = 8;
  c.deep_channels = 8;
  c.attn_dim = 4;
  c.text_tokens = 2;
  c.text_dim = 4;
  c.time_dim = 8;
  return c;
}

using Op = std::function<ad::Var(const ad::Var&)>;

double fd_check(const Op& op, const Mat& x) {
  const ad::Var p = ad::parameter(x);
  const ad::Var loss = ad::sum(op(p));
  const Mat g = ad::gradient(loss, std::vector<ad::Var>{p}).grads[0];
  const Mat fd = oracle::finite_difference([&](const Mat& v) { return ad::sum(op(ad::constant(v))).item(); }, x);
  return oracle::relative_error(g, fd);
}

}  // namespace

TEST_CASE("attention map of the two-key hand case") {
  Mat q(1, 2);
  q << 1, 0;
  Mat k(2, 2);
  k << 1, 0, 0, 1;
  const Mat a = attention_map(q, k);
  const double e = std::exp(1 / std::sqrt(2.0));
  CHECK(a(0, 0) == doctest::Approx(e / (e + 1)).epsilon(1e-12));
  CHECK(a(0, 0) == doctest::Approx(0.6698).epsilon(1e-4));
  CHECK(a(0, 1) == doctest::Approx(0.3302).epsilon(1e-4));
}

TEST_CASE("attention rows sum to one and outputs stay inside the value hull") {
  const Mat q = gaussian(9, 4, 1) * 3;
  const Mat k = gaussian(7, 4, 2) * 3;
  const Mat v = gaussian(7, 3, 3);
  const Mat a = attention_map(q, k);
  for (int i = 0; i < a.rows(); ++i) CHECK(std::abs(a.row(i).sum() - 1.0) < 1e-12);
  const Mat y = attention(q, k, v);
  for (int c = 0; c < 3; ++c) {
    CHECK(y.col(c).maxCoeff() <= v.col(c).maxCoeff() + 1e-12);
    CHECK(y.col(c).minCoeff() >= v.col(c).minCoeff() - 1e-12);
  }
  for (int i = 0; i < 9; ++i)
    for (int j = 0; j < 7; ++j) CHECK(a(i, j) == doctest::Approx(oracle::softmax_attention_entry(q, k, i, j)));
}

TEST_CASE("sharp attention returns the matching value row") {
  Mat k = Mat::Identity(3, 3) * 60;
  const Mat v = gaussian(3, 2, 5);
  const Mat y = attention(k, k, v);
  CHECK((y - v).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("reverse-mode gradients of every primitive match finite differences") {
  const Mat x = gaussian(4, 3, 7);
  const Mat b = gaussian(4, 3, 8);
  const Mat wt = gaussian(3, 5, 9);
  const Mat row = gaussian(1, 3, 10);
  const Mat col = gaussian(4, 1, 11);
  const ad::Var B = ad::constant(b);
  const std::vector<std::pair<const char*, Op>> ops = {
      {"add", [&](const ad::Var& v) { return ad::add(v, B); }},
      {"sub", [&](const ad::Var& v) { return ad::sub(B, v); }},
      {"mul", [&](const ad::Var& v) { return ad::mul(v, ad::mul(v, B)); }},
      {"scale", [&](const ad::Var& v) { return ad::add_scalar(ad::scale(v, -2.5), 1.0); }},
      {"add_row", [&](const ad::Var& v) { return ad::mul(ad::add_row(v, ad::constant(row)), v); }},
      {"mul_row", [&](const ad::Var& v) { return ad::mul(ad::mul_row(v, ad::constant(row)), v); }},
      {"mul_col", [&](const ad::Var& v) { return ad::mul(ad::mul_col(v, ad::constant(col)), v); }},
      {"matmul", [&](const ad::Var& v) { return ad::mul(ad::matmul(v, ad::constant(wt)), ad::matmul(v, ad::constant(wt))); }},
      {"matmul_nt", [&](const ad::Var& v) { return ad::mul(ad::matmul_nt(v, B), ad::matmul_nt(v, v)); }},
      {"softmax", [&](const ad::Var& v) { return ad::mul(ad::softmax_rows(v), B); }},
      {"silu", [&](const ad::Var& v) { return ad::silu(ad::scale(v, 2)); }},
      {"normalize", [&](const ad::Var& v) { return ad::mul(ad::normalize_rows(v), B); }},
      {"abs", [&](const ad::Var& v) { return ad::abs(ad::add_scalar(v, 0.013)); }},
      {"exp", [&](const ad::Var& v) { return ad::exp(v); }},
      {"log", [&](const ad::Var& v) { return ad::log(ad::add_scalar(ad::mul(v, v), 0.5)); }},
      {"clamp", [&](const ad::Var& v) { return ad::mul(ad::clamp_min(v, 0.05), B); }},
      {"mean", [&](const ad::Var& v) { return ad::mul(ad::mean(ad::mul(v, v)), ad::mean(v)); }},
      {"concat_cols", [&](const ad::Var& v) { return ad::mul(ad::concat_cols(v, B), ad::concat_cols(B, v)); }},
      {"concat_rows", [&](const ad::Var& v) { return ad::mul(ad::concat_rows({v, B}), ad::concat_rows({B, v})); }},
      {"gather", [&](const ad::Var& v) {
         const std::vector<int> idx{3, 0, 3, 1};
         return ad::mul(ad::gather_rows(v, idx), B);
       }},
      {"row_max", [&](const ad::Var& v) {
         const std::vector<unsigned char> allowed{1, 0, 1};
         return ad::mul(ad::row_max(v, allowed).value, ad::constant(col));
       }},
  };
  for (const auto& [name, op] : ops) {
    CAPTURE(name);
    CHECK(fd_check(op, x) < 1e-6);
  }
}

TEST_CASE("spatial primitives have exact gradients") {
  const Mat x = gaussian(16, 2, 12);
  const Mat w9 = gaussian(18, 3, 13);
  CHECK(fd_check([&](const ad::Var& v) { return ad::mul(ad::matmul(ad::im2col3x3(v, 4, 4), ad::constant(w9)),
                                                        ad::matmul(ad::im2col3x3(v, 4, 4), ad::constant(w9))); },
                 x) < 1e-6);
  CHECK(fd_check([&](const ad::Var& v) { return ad::mul(ad::avgpool2(v, 4, 4), ad::avgpool2(v, 4, 4)); }, x) < 1e-6);
  const Mat s = gaussian(4, 2, 14);
  CHECK(fd_check([&](const ad::Var& v) { return ad::mul(ad::upsample2(v, 2, 2), ad::constant(x)); }, s) < 1e-6);
}

TEST_CASE("gradient flags parameters off the loss path") {
  const ad::Var a = ad::parameter(Mat::Ones(1, 1));
  const ad::Var b = ad::parameter(Mat::Ones(1, 1));
  const ad::Gradients g = ad::gradient(ad::sum(ad::scale(a, 3)), std::vector<ad::Var>{a, b});
  CHECK(g.on_path[0]);
  CHECK_FALSE(g.on_path[1]);
  CHECK(g.grads[0](0, 0) == 3.0);
  CHECK(g.grads[1](0, 0) == 0.0);
}

TEST_CASE("forward noising matches the closed form") {
  const Mat x0 = Mat::Constant(1, 1, 1.0);
  const Mat e = Mat::Constant(1, 1, 0.5);
  CHECK(forward_noise(x0, 0.64, e)(0, 0) == doctest::Approx(1.1).epsilon(1e-12));
}

TEST_CASE("noise schedule") {
  const NoiseSchedule s = NoiseSchedule::linear(1000, 0.00085, 0.012);
  CHECK(s.at(0) == 1.0);
  for (int t = 1; t <= 1000; ++t) CHECK(s.at(t) < s.at(t - 1));
  const auto ts = s.ddim_timesteps(50);
  REQUIRE(ts.size() == 50);
  CHECK(ts.front() == 1000);
  CHECK(ts.back() == 20);
}

TEST_CASE("denoiser hooks, guidance scale and persistence") {
  const Denoiser model = Denoiser::random(tiny_config(), 42);
  const Mat z = gaussian(16, 4, 1);
  const Mat text = gaussian(2, 4, 2);
  const Mat base = model.eps(z, 4, 4, 500, text);
  CHECK(base.rows() == 16);
  CHECK(base.cols() == 4);
  CHECK(base == model.eps(z, 4, 4, 500, text));

  SUBCASE("zeroing every attention output changes the prediction") {
    AttentionHook zero = [](const AttentionSite&, const ad::Var& q, const ad::Var&, const ad::Var& v) {
      return std::optional<ad::Var>(ad::constant(Mat::Zero(q.rows(), v.cols())));
    };
    CHECK((model.eps(z, 4, 4, 500, text, &zero) - base).cwiseAbs().maxCoeff() > 1e-6);
  }

  SUBCASE("a capturing hook records every block without changing the output") {
    std::vector<AttentionRecord> records;
    const AttentionHook cap = capture_into(records);
    CHECK(model.eps(z, 4, 4, 500, text, &cap) == base);
    REQUIRE(records.size() == std::size_t(Denoiser::kAttentionBlocks));
    const auto sites = model.attention_sites(4, 4);
    for (std::size_t i = 0; i < records.size(); ++i) {
      CHECK(records[i].site.block == sites[i].block);
      CHECK(records[i].map.rows() == sites[i].height * sites[i].width);
      CHECK((records[i].map - attention_map(records[i].q, records[i].k)).cwiseAbs().maxCoeff() < 1e-12);
    }
  }

  SUBCASE("classifier-free guidance extrapolates linearly") {
    const Mat other = gaussian(2, 4, 3);
    const Mat e_c = model.eps(z, 4, 4, 500, text);
    const Mat e_n = model.eps(z, 4, 4, 500, other);
    const Mat g = model.cfg_eps(ad::constant(z), 4, 4, 500, ad::constant(text), ad::constant(other), 2.0).value();
    CHECK((g - (e_n + 2.0 * (e_c - e_n))).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(model.cfg_eps(ad::constant(z), 4, 4, 500, ad::constant(text), ad::constant(other), 1.0).value() == e_c);
  }

  SUBCASE("save and load reproduce the predictions") {
    const auto path = std::filesystem::temp_directory_path() / "geodiff_tiny_model.bin";
    model.save(path);
    const Denoiser loaded = Denoiser::load(path);
    // Checkpoints store single precision.
    CHECK((loaded.eps(z, 4, 4, 500, text) - base).cwiseAbs().maxCoeff() < 1e-5);
    CHECK((loaded.null_text() - model.null_text()).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(loaded.parameter_names() == model.parameter_names());
    std::filesystem::remove(path);
    std::filesystem::remove(path.string() + ".json");
  }

  SUBCASE("bad inputs are rejected") {
    CHECK_THROWS_AS(model.eps(gaussian(15, 4, 1), 4, 4, 500, text), ValidationError);
    CHECK_THROWS_AS(model.eps(z, 4, 4, 5000, text), ValidationError);
    Mat nan = z;
    nan(0, 0) = std::nan("");
    CHECK_THROWS_AS(model.eps(nan, 4, 4, 500, text), ValidationError);
  }
}

TEST_CASE("image codec round trip at latent resolution") {
  Raster img(8, 8, 3);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = float((x + y + c) % 5) / 4.0f;
  const Mat z = encode_image(img, 8);
  CHECK(z.rows() == 64);
  CHECK(z.cols() == 4);
  const Raster back = decode_latent(z, 8, 8, 8);
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(back.data()[i] == doctest::Approx(img.data()[i]).epsilon(1e-6));
}

TEST_CASE("gaussian draws are reproducible") {
  CHECK(gaussian(3, 3, 9) == gaussian(3, 3, 9));
  CHECK(gaussian(3, 3, 9) != gaussian(3, 3, 10));
}
