#include "geodiff/diffnet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "geodiff/error.hpp"
#include "geodiff/geometry.hpp"

namespace geodiff::diffnet {

Var attention_map(const Var& q, const Var& k) {
  if (q.cols() != k.cols() || q.cols() == 0) throw ValidationError("attention_map: Q and K widths differ");
  return ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), 1.0 / std::sqrt(double(q.cols()))));
}

Var attention(const Var& q, const Var& k, const Var& v) {
  if (k.rows() != v.rows()) throw ValidationError("attention: K and V token counts differ");
  return ad::matmul(attention_map(q, k), v);
}

Mat attention_map(const Mat& q, const Mat& k) { return attention_map(ad::constant(q), ad::constant(k)).value(); }

Mat attention(const Mat& q, const Mat& k, const Mat& v) {
  return attention(ad::constant(q), ad::constant(k), ad::constant(v)).value();
}

const char* to_string(AttentionKind kind) { return kind == AttentionKind::self ? "self" : "cross"; }

AttentionHook capture_into(std::vector<AttentionRecord>& sink) {
  return [&sink](const AttentionSite& site, const Var& q, const Var& k, const Var& v) -> std::optional<Var> {
    const Mat map = attention_map(q.value(), k.value());
    sink.push_back({site, q.value(), k.value(), v.value(), map, map * v.value()});
    return std::nullopt;
  };
}

NoiseSchedule NoiseSchedule::linear(int train_steps, double beta_start, double beta_end) {
  if (train_steps < 1) throw ValidationError("schedule needs at least one step");
  if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end)) {
    throw ValidationError("schedule betas must satisfy 0 < start <= end < 1");
  }
  NoiseSchedule s;
  s.train_steps = train_steps;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.alpha_bar.resize(static_cast<std::size_t>(train_steps) + 1);
  s.alpha_bar[0] = 1.0;
  for (int t = 1; t <= train_steps; ++t) {
    const double frac = train_steps == 1 ? 0.0 : double(t - 1) / double(train_steps - 1);
    const double beta = beta_start + (beta_end - beta_start) * frac;
    s.alpha_bar[static_cast<std::size_t>(t)] = s.alpha_bar[static_cast<std::size_t>(t - 1)] * (1.0 - beta);
  }
  return s;
}

std::vector<int> NoiseSchedule::ddim_timesteps(int steps) const {
  if (steps < 1 || steps > train_steps) throw ValidationError("DDIM step count out of range");
  std::vector<int> out;
  for (int i = steps; i >= 1; --i) {
    out.push_back(static_cast<int>(std::lround(double(i) * train_steps / steps)));
  }
  return out;
}

double NoiseSchedule::at(int t) const {
  if (t < 0 || t > train_steps) throw ValidationError("timestep out of range");
  return alpha_bar[static_cast<std::size_t>(t)];
}

Mat forward_noise(const Mat& x0, double alpha_bar, const Mat& eps) {
  if (x0.rows() != eps.rows() || x0.cols() != eps.cols()) throw ValidationError("forward_noise: shape mismatch");
  if (!(alpha_bar >= 0.0 && alpha_bar <= 1.0)) throw ValidationError("forward_noise: alpha_bar outside [0,1]");
  return std::sqrt(alpha_bar) * x0 + std::sqrt(1.0 - alpha_bar) * eps;
}

Mat forward_noise(const NoiseSchedule& schedule, const Mat& x0, int t, const Mat& eps) {
  return forward_noise(x0, schedule.at(t), eps);
}

nlohmann::json ModelConfig::to_json() const {
  return {{"latent_channels", latent_channels}, {"latent_size", latent_size}, {"base_channels", base_channels},
          {"deep_channels", deep_channels},     {"attn_dim", attn_dim},       {"text_tokens", text_tokens},
          {"text_dim", text_dim},               {"time_dim", time_dim}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.latent_channels = j.value("latent_channels", c.latent_channels);
  c.latent_size = j.value("latent_size", c.latent_size);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.deep_channels = j.value("deep_channels", c.deep_channels);
  c.attn_dim = j.value("attn_dim", c.attn_dim);
  c.text_tokens = j.value("text_tokens", c.text_tokens);
  c.text_dim = j.value("text_dim", c.text_dim);
  c.time_dim = j.value("time_dim", c.time_dim);
  return c;
}

Mat gaussian(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  // mt19937_64 output is fully specified by the standard; the normal
  // transform is done here so values match across standard libraries.
  std::mt19937_64 gen(seed);
  auto uniform = [&gen]() { return (double(gen() >> 11) + 0.5) * (1.0 / 9007199254740992.0); };
  Mat out(rows, cols);
  for (Eigen::Index i = 0; i < out.size(); i += 2) {
    const double r = std::sqrt(-2.0 * std::log(uniform()));
    const double theta = 2.0 * M_PI * uniform();
    out.data()[i] = r * std::cos(theta);
    if (i + 1 < out.size()) out.data()[i + 1] = r * std::sin(theta);
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

Mat timestep_embedding(int t, int dim) {
  Mat e(1, dim);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    e(0, i) = std::sin(t * freq);
    e(0, half + i) = std::cos(t * freq);
  }
  return e;
}

}  // namespace

int Denoiser::add(const std::string& name, Mat value) {
  names_.push_back(name);
  weights_.push_back(ad::constant(std::move(value)));
  return static_cast<int>(weights_.size() - 1);
}

Denoiser::Linear Denoiser::linear(const std::string& name, int in, int out, bool bias, std::uint64_t& state,
                                  double gain) {
  Linear l;
  l.w = add(name + ".w", gaussian(in, out, state++) * (gain / std::sqrt(double(in))));
  if (bias) l.b = add(name + ".b", Mat::Zero(1, out));
  return l;
}

Denoiser::Norm Denoiser::norm(const std::string& name, int channels) {
  return {add(name + ".gain", Mat::Ones(1, channels)), add(name + ".bias", Mat::Zero(1, channels))};
}

Denoiser::ResBlock Denoiser::res_block(const std::string& name, int in, int out, std::uint64_t& state) {
  ResBlock r;
  r.n1 = norm(name + ".norm1", in);
  r.c1 = linear(name + ".conv1", 9 * in, out, true, state);
  r.temb = linear(name + ".temb", config_.time_dim, out, true, state);
  r.n2 = norm(name + ".norm2", out);
  r.c2 = linear(name + ".conv2", 9 * out, out, true, state, 0.5);
  if (in != out) r.skip = linear(name + ".skip", in, out, true, state);
  return r;
}

Denoiser::AttnBlock Denoiser::attn_block(const std::string& name, int id, AttentionKind kind, int channels,
                                         std::uint64_t& state) {
  AttnBlock a;
  a.id = id;
  a.kind = kind;
  a.norm = norm(name + ".norm", channels);
  const int kv_in = kind == AttentionKind::self ? channels : config_.text_dim;
  a.q = linear(name + ".q", channels, config_.attn_dim, false, state);
  a.k = linear(name + ".k", kv_in, config_.attn_dim, false, state);
  a.v = linear(name + ".v", kv_in, config_.attn_dim, false, state);
  a.o = linear(name + ".o", config_.attn_dim, channels, true, state);
  return a;
}

void Denoiser::build(std::uint64_t seed) {
  std::uint64_t state = seed * 1000003ull + 17ull;
  const int c0 = config_.base_channels;
  const int c1 = config_.deep_channels;
  in_conv_ = linear("in_conv", 9 * config_.latent_channels, c0, true, state);
  time1_ = linear("time1", config_.time_dim / 2, config_.time_dim, true, state);
  time2_ = linear("time2", config_.time_dim, config_.time_dim, true, state);
  down0_ = res_block("down0", c0, c0, state);
  down0_self_ = attn_block("down0.self", 0, AttentionKind::self, c0, state);
  down0_cross_ = attn_block("down0.cross", 1, AttentionKind::cross, c0, state);
  down1_ = res_block("down1", c0, c1, state);
  down1_self_ = attn_block("down1.self", 2, AttentionKind::self, c1, state);
  down1_cross_ = attn_block("down1.cross", 3, AttentionKind::cross, c1, state);
  mid_ = res_block("mid", c1, c1, state);
  up1_ = res_block("up1", 2 * c1, c1, state);
  up1_self_ = attn_block("up1.self", 4, AttentionKind::self, c1, state);
  up1_cross_ = attn_block("up1.cross", 5, AttentionKind::cross, c1, state);
  up0_ = res_block("up0", c1 + c0, c0, state);
  up0_self_ = attn_block("up0.self", 6, AttentionKind::self, c0, state);
  up0_cross_ = attn_block("up0.cross", 7, AttentionKind::cross, c0, state);
  out_norm_ = norm("out_norm", c0);
  out_conv_ = linear("out_conv", 9 * c0, config_.latent_channels, true, state, 0.5);
  null_text_ = add("null_text", gaussian(config_.text_tokens, config_.text_dim, state++));
}

Denoiser Denoiser::random(const ModelConfig& config, std::uint64_t seed, const NoiseSchedule& schedule) {
  if (config.latent_size % 2 != 0 || config.time_dim % 2 != 0) {
    throw ValidationError("latent_size and time_dim must be even");
  }
  Denoiser d;
  d.config_ = config;
  d.schedule_ = schedule;
  d.build(seed);
  return d;
}

Var Denoiser::apply(const Linear& l, const Var& x) const {
  Var y = ad::matmul(x, w(l.w));
  return l.b >= 0 ? ad::add_row(y, w(l.b)) : y;
}

Var Denoiser::conv(const Linear& l, const Var& x, int h, int wd) const { return apply(l, ad::im2col3x3(x, h, wd)); }

Var Denoiser::apply(const Norm& n, const Var& x) const {
  return ad::add_row(ad::mul_row(ad::normalize_rows(x), w(n.gain)), w(n.bias));
}

Var Denoiser::apply(const ResBlock& r, const Var& x, const Var& temb, int h, int wd) const {
  Var hdn = conv(r.c1, ad::silu(apply(r.n1, x)), h, wd);
  hdn = ad::add_row(hdn, apply(r.temb, temb));
  hdn = conv(r.c2, ad::silu(apply(r.n2, hdn)), h, wd);
  const Var skip = r.skip.w >= 0 ? apply(r.skip, x) : x;
  return ad::add(skip, hdn);
}

Var Denoiser::apply(const AttnBlock& a, const Var& x, const Var& text, int h, int wd, const AttentionHook* hook,
                    int step) const {
  const Var hn = apply(a.norm, x);
  const Var q = apply(a.q, hn);
  const Var& kv_src = a.kind == AttentionKind::self ? hn : text;
  const Var k = apply(a.k, kv_src);
  const Var v = apply(a.v, kv_src);
  Var y;
  if (hook != nullptr && *hook) {
    const AttentionSite site{step, a.id, a.kind, h, wd};
    if (auto replaced = (*hook)(site, q, k, v)) {
      if (replaced->rows() != q.rows() || replaced->cols() != v.cols()) {
        throw ValidationError("attention hook returned a tensor of the wrong shape");
      }
      y = *replaced;
    }
  }
  if (!y.defined()) y = attention(q, k, v);
  return ad::add(x, apply(a.o, y));
}

Var Denoiser::eps(const Var& z, int height, int width, int t, const Var& text, const AttentionHook* hook,
                  int step) const {
  if (height < 2 || width < 2 || height % 2 || width % 2) throw ValidationError("latent grid must be even-sized");
  if (z.rows() != Eigen::Index(height) * width || z.cols() != config_.latent_channels) {
    throw ValidationError("latent shape does not match the model");
  }
  if (text.rows() < 1 || text.cols() != config_.text_dim) throw ValidationError("text embedding has wrong width");
  if (!z.value().allFinite() || !text.value().allFinite()) throw ValidationError("non-finite model input");
  if (t < 0 || t > schedule_.train_steps) throw ValidationError("timestep out of range");

  const Var temb =
      ad::silu(apply(time2_, ad::silu(apply(time1_, ad::constant(timestep_embedding(t, config_.time_dim / 2))))));
  const int h2 = height / 2;
  const int w2 = width / 2;

  Var a = conv(in_conv_, z, height, width);
  a = apply(down0_, a, temb, height, width);
  a = apply(down0_self_, a, text, height, width, hook, step);
  a = apply(down0_cross_, a, text, height, width, hook, step);
  const Var skip0 = a;

  Var b = ad::avgpool2(a, height, width);
  b = apply(down1_, b, temb, h2, w2);
  b = apply(down1_self_, b, text, h2, w2, hook, step);
  b = apply(down1_cross_, b, text, h2, w2, hook, step);
  const Var skip1 = b;

  Var u = apply(mid_, b, temb, h2, w2);
  u = apply(up1_, ad::concat_cols(u, skip1), temb, h2, w2);
  u = apply(up1_self_, u, text, h2, w2, hook, step);
  u = apply(up1_cross_, u, text, h2, w2, hook, step);

  u = ad::upsample2(u, h2, w2);
  u = apply(up0_, ad::concat_cols(u, skip0), temb, height, width);
  u = apply(up0_self_, u, text, height, width, hook, step);
  u = apply(up0_cross_, u, text, height, width, hook, step);

  return conv(out_conv_, ad::silu(apply(out_norm_, u)), height, width);
}

Mat Denoiser::eps(const Mat& z, int height, int width, int t, const Mat& text, const AttentionHook* hook,
                  int step) const {
  return eps(ad::constant(z), height, width, t, ad::constant(text), hook, step).value();
}

Var Denoiser::cfg_eps(const Var& z, int height, int width, int t, const Var& text_cond, const Var& text_null,
                      double scale, const AttentionHook* hook, int step) const {
  if (!(scale >= 0.0)) throw ValidationError("CFG scale must be >= 0");
  if (scale == 1.0) return eps(z, height, width, t, text_cond, hook, step);
  const Var e_null = eps(z, height, width, t, text_null, hook, step);
  if (scale == 0.0) return e_null;
  const Var e_cond = eps(z, height, width, t, text_cond, hook, step);
  return ad::add(e_null, ad::scale(ad::sub(e_cond, e_null), scale));
}

const Mat& Denoiser::null_text() const { return w(null_text_).value(); }

std::vector<AttentionSite> Denoiser::attention_sites(int height, int width) const {
  const int h2 = height / 2;
  const int w2 = width / 2;
  return {
      {-1, 0, AttentionKind::self, height, width}, {-1, 1, AttentionKind::cross, height, width},
      {-1, 2, AttentionKind::self, h2, w2},        {-1, 3, AttentionKind::cross, h2, w2},
      {-1, 4, AttentionKind::self, h2, w2},        {-1, 5, AttentionKind::cross, h2, w2},
      {-1, 6, AttentionKind::self, height, width}, {-1, 7, AttentionKind::cross, height, width},
  };
}

void Denoiser::set_trainable(bool trainable) {
  for (Var& v : weights_) v = trainable ? ad::parameter(v.value()) : ad::constant(v.value());
}

void Denoiser::set_parameter(std::size_t index, Mat value) {
  if (index >= weights_.size()) throw ValidationError("parameter index out of range");
  const Var& old = weights_[index];
  if (value.rows() != old.rows() || value.cols() != old.cols()) throw ValidationError("parameter shape mismatch");
  weights_[index] = old.requires_grad() ? ad::parameter(std::move(value)) : ad::constant(std::move(value));
}

std::size_t Denoiser::parameter_count() const {
  std::size_t n = 0;
  for (const Var& v : weights_) n += static_cast<std::size_t>(v.value().size());
  return n;
}

void Denoiser::save(const std::filesystem::path& path) const {
  TensorArchive archive;
  archive.meta = {{"format", "geodiff-denoiser"},
                  {"config", config_.to_json()},
                  {"schedule",
                   {{"train_steps", schedule_.train_steps},
                    {"beta_start", schedule_.beta_start},
                    {"beta_end", schedule_.beta_end},
                    {"kind", "linear"}}}};
  for (std::size_t i = 0; i < weights_.size(); ++i) archive.tensors.emplace_back(names_[i], weights_[i].value());
  archive.save(path);
}

Denoiser Denoiser::load(const std::filesystem::path& path) {
  const TensorArchive archive = TensorArchive::load(path);
  if (archive.meta.value("format", std::string()) != "geodiff-denoiser") {
    throw ValidationError("checkpoint manifest is not a geodiff-denoiser");
  }
  const auto& sched = archive.meta.at("schedule");
  Denoiser d = random(ModelConfig::from_json(archive.meta.at("config")), 0,
                      NoiseSchedule::linear(sched.at("train_steps").get<int>(), sched.at("beta_start").get<double>(),
                                            sched.at("beta_end").get<double>()));
  for (std::size_t i = 0; i < d.names_.size(); ++i) d.set_parameter(i, archive.get(d.names_[i]));
  return d;
}

// ---------------------------------------------------------------------------

Mat to_mat(const Raster& r) {
  Mat m(static_cast<Eigen::Index>(r.pixel_count()), r.channels());
  for (std::size_t i = 0; i < r.size(); ++i) m.data()[i] = r.data()[i];
  return m;
}

Raster to_raster(const Mat& m, int height, int width) {
  if (m.rows() != Eigen::Index(height) * width) throw ValidationError("to_raster: row count is not h*w");
  Raster r(height, width, static_cast<int>(m.cols()));
  for (std::size_t i = 0; i < r.size(); ++i) r.data()[i] = static_cast<float>(m.data()[i]);
  return r;
}

Mat encode_image(const Raster& image, int size, int channels) {
  if (image.channels() != 3) throw ValidationError("encode_image expects an RGB raster");
  if (channels < 3) throw ValidationError("latent needs at least three channels");
  Raster small;
  if (image.height() % size == 0 && image.width() % size == 0 && image.height() / size == image.width() / size) {
    small = geometry::resample_signal(image, size, size);
  } else {
    small = geometry::resize_bilinear(image, size, size);
  }
  Mat z = Mat::Zero(Eigen::Index(size) * size, channels);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double r = small.data()[i * 3];
    const double g = small.data()[i * 3 + 1];
    const double b = small.data()[i * 3 + 2];
    z(i, 0) = 2.0 * r - 1.0;
    z(i, 1) = 2.0 * g - 1.0;
    z(i, 2) = 2.0 * b - 1.0;
    if (channels > 3) z(i, 3) = 2.0 * (0.299 * r + 0.587 * g + 0.114 * b) - 1.0;
  }
  return z;
}

Raster decode_latent(const Mat& latent, int size, int height, int width) {
  if (latent.rows() != Eigen::Index(size) * size || latent.cols() < 3) {
    throw ValidationError("decode_latent: latent shape mismatch");
  }
  Raster small(size, size, 3);
  for (Eigen::Index i = 0; i < latent.rows(); ++i) {
    for (int c = 0; c < 3; ++c) {
      small.data()[static_cast<std::size_t>(i) * 3 + c] =
          static_cast<float>(std::clamp((latent(i, c) + 1.0) * 0.5, 0.0, 1.0));
    }
  }
  return geometry::resize_bilinear(small, height, width);
}

// ---------------------------------------------------------------------------

void TensorArchive::save(const std::filesystem::path& path, bool float64) const {
  nlohmann::json manifest = meta;
  manifest["dtype"] = float64 ? "f64" : "f32";
  nlohmann::json entries = nlohmann::json::array();
  std::ofstream bin(path, std::ios::binary);
  if (!bin) throw RuntimeFailure("cannot write " + path.string());
  std::size_t offset = 0;
  for (const auto& [name, m] : tensors) {
    entries.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", offset}});
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      if (float64) {
        const double v = m.data()[i];
        bin.write(reinterpret_cast<const char*>(&v), sizeof v);
      } else {
        const float v = static_cast<float>(m.data()[i]);
        bin.write(reinterpret_cast<const char*>(&v), sizeof v);
      }
    }
    offset += static_cast<std::size_t>(m.size()) * (float64 ? 8 : 4);
  }
  manifest["tensors"] = entries;
  std::ofstream js(path.string() + ".json");
  if (!js) throw RuntimeFailure("cannot write manifest for " + path.string());
  js << manifest.dump(1) << "\n";
}

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
  std::ifstream js(path.string() + ".json");
  if (!js) throw ValidationError("missing manifest " + path.string() + ".json");
  nlohmann::json manifest;
  try {
    js >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed manifest: ") + e.what());
  }
  std::ifstream bin(path, std::ios::binary);
  if (!bin) throw ValidationError("missing tensor file " + path.string());
  const std::vector<char> bytes{std::istreambuf_iterator<char>(bin), std::istreambuf_iterator<char>()};
  const bool f64 = manifest.value("dtype", std::string("f32")) == "f64";
  const std::size_t width = f64 ? 8 : 4;
  TensorArchive archive;
  for (const auto& e : manifest.at("tensors")) {
    const auto rows = e.at("shape")[0].get<Eigen::Index>();
    const auto cols = e.at("shape")[1].get<Eigen::Index>();
    const auto offset = e.at("offset").get<std::size_t>();
    if (offset + static_cast<std::size_t>(rows * cols) * width > bytes.size()) {
      throw ValidationError("tensor '" + e.at("name").get<std::string>() + "' exceeds the binary file");
    }
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const char* p = bytes.data() + offset + static_cast<std::size_t>(i) * width;
      if (f64) {
        double v;
        std::memcpy(&v, p, sizeof v);
        m.data()[i] = v;
      } else {
        float v;
        std::memcpy(&v, p, sizeof v);
        m.data()[i] = v;
      }
    }
    archive.tensors.emplace_back(e.at("name").get<std::string>(), std::move(m));
  }
  manifest.erase("tensors");
  manifest.erase("dtype");
  archive.meta = std::move(manifest);
  return archive;
}

const Mat& TensorArchive::get(const std::string& name) const {
  for (const auto& [n, m] : tensors) {
    if (n == name) return m;
  }
  throw ValidationError("archive has no tensor '" + name + "'");
}

}  // namespace geodiff::diffnet
