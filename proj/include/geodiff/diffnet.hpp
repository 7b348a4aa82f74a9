#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "geodiff/autodiff.hpp"
#include "geodiff/raster.hpp"

namespace geodiff::diffnet {

using ad::Mat;
using ad::Var;

// ---------------------------------------------------------------------------
// Attention primitives

/// Softmax(Q K^T / sqrt(d)) with d = Q.cols().
Var attention_map(const Var& q, const Var& k);
/// attention_map(q, k) * v
Var attention(const Var& q, const Var& k, const Var& v);

Mat attention_map(const Mat& q, const Mat& k);
Mat attention(const Mat& q, const Mat& k, const Mat& v);

enum class AttentionKind { self, cross };

const char* to_string(AttentionKind kind);

/// Where an attention block sits in the UNet.
struct AttentionSite {
  int step = -1;  // denoising step index, -1 outside a rollout
  int block = 0;
  AttentionKind kind = AttentionKind::self;
  int height = 0;  // token grid
  int width = 0;
};

/// Called for every attention block with the projected operands. Returning a
/// value replaces Attention(q, k, v); the replacement must keep its shape.
using AttentionHook =
    std::function<std::optional<Var>(const AttentionSite& site, const Var& q, const Var& k, const Var& v)>;

/// Plain-value copy of one block evaluation.
struct AttentionRecord {
  AttentionSite site;
  Mat q;
  Mat k;
  Mat v;
  Mat map;     // N x M attention map
  Mat output;  // N x d attention output
};

/// Hook that records every block into `sink` and leaves outputs untouched.
AttentionHook capture_into(std::vector<AttentionRecord>& sink);

// ---------------------------------------------------------------------------
// Noise schedule

/// Linear-beta DDPM schedule. Index 0 is the clean signal (alpha_bar = 1).
struct NoiseSchedule {
  int train_steps = 1000;
  double beta_start = 0.00085;
  double beta_end = 0.012;
  std::vector<double> alpha_bar;  // size train_steps + 1

  static NoiseSchedule linear(int train_steps, double beta_start, double beta_end);

  /// Evenly spaced timesteps in decreasing order, e.g. 1000, 980, ..., 20 for
  /// 50 steps over 1000. The implied final target is timestep 0.
  std::vector<int> ddim_timesteps(int steps) const;
  double at(int t) const;
};

/// sqrt(ab) x0 + sqrt(1 - ab) eps
Mat forward_noise(const Mat& x0, double alpha_bar, const Mat& eps);
Mat forward_noise(const NoiseSchedule& schedule, const Mat& x0, int t, const Mat& eps);

// ---------------------------------------------------------------------------
// Model

struct ModelConfig {
  int latent_channels = 4;
  int latent_size = 16;
  int base_channels = 32;
  int deep_channels = 64;
  int attn_dim = 32;
  int text_tokens = 4;
  int text_dim = 32;
  int time_dim = 64;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Small latent UNet: two resolution levels down and up, each carrying one
/// self-attention and one text cross-attention block (eight attention blocks
/// in total, ids 0..7), with a learned null-text embedding.
class Denoiser {
 public:
  static constexpr int kAttentionBlocks = 8;

  /// Deterministic seeded initialization.
  static Denoiser random(const ModelConfig& config, std::uint64_t seed,
                         const NoiseSchedule& schedule = NoiseSchedule::linear(1000, 0.00085, 0.012));
  static Denoiser load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  const ModelConfig& config() const { return config_; }
  const NoiseSchedule& schedule() const { return schedule_; }

  /// Predicted noise for latent z ((h*w) x latent_channels) at timestep t.
  /// Every attention block is routed through `hook` when given.
  Var eps(const Var& z, int height, int width, int t, const Var& text, const AttentionHook* hook = nullptr,
          int step = -1) const;
  Mat eps(const Mat& z, int height, int width, int t, const Mat& text, const AttentionHook* hook = nullptr,
          int step = -1) const;

  /// eps_null + scale (eps_cond - eps_null)
  Var cfg_eps(const Var& z, int height, int width, int t, const Var& text_cond, const Var& text_null,
              double scale, const AttentionHook* hook = nullptr, int step = -1) const;

  /// Learned embedding of the empty prompt (text_tokens x text_dim).
  const Mat& null_text() const;

  /// Token grid of each attention block for a latent of the given size.
  std::vector<AttentionSite> attention_sites(int height, int width) const;

  /// Switches weights between tracked parameters and constants.
  void set_trainable(bool trainable);
  const std::vector<std::string>& parameter_names() const { return names_; }
  const std::vector<Var>& parameters() const { return weights_; }
  void set_parameter(std::size_t index, Mat value);
  std::size_t parameter_count() const;

 private:
  struct Linear {
    int w = -1;
    int b = -1;
  };
  struct Norm {
    int gain = -1;
    int bias = -1;
  };
  struct ResBlock {
    Norm n1;
    Linear c1;
    Linear temb;
    Norm n2;
    Linear c2;
    Linear skip;
  };
  struct AttnBlock {
    int id = 0;
    AttentionKind kind = AttentionKind::self;
    Norm norm;
    Linear q;
    Linear k;
    Linear v;
    Linear o;
  };

  int add(const std::string& name, Mat value);
  Linear linear(const std::string& name, int in, int out, bool bias, std::uint64_t& state, double gain = 1.0);
  Norm norm(const std::string& name, int channels);
  ResBlock res_block(const std::string& name, int in, int out, std::uint64_t& state);
  AttnBlock attn_block(const std::string& name, int id, AttentionKind kind, int channels, std::uint64_t& state);
  void build(std::uint64_t seed);

  const Var& w(int index) const { return weights_[static_cast<std::size_t>(index)]; }
  Var apply(const Linear& l, const Var& x) const;
  Var conv(const Linear& l, const Var& x, int h, int wd) const;
  Var apply(const Norm& n, const Var& x) const;
  Var apply(const ResBlock& r, const Var& x, const Var& temb, int h, int wd) const;
  Var apply(const AttnBlock& a, const Var& x, const Var& text, int h, int wd, const AttentionHook* hook,
            int step) const;

  ModelConfig config_;
  NoiseSchedule schedule_;
  std::vector<std::string> names_;
  std::vector<Var> weights_;

  Linear in_conv_;
  Linear time1_;
  Linear time2_;
  ResBlock down0_;
  AttnBlock down0_self_;
  AttnBlock down0_cross_;
  ResBlock down1_;
  AttnBlock down1_self_;
  AttnBlock down1_cross_;
  ResBlock mid_;
  ResBlock up1_;
  AttnBlock up1_self_;
  AttnBlock up1_cross_;
  ResBlock up0_;
  AttnBlock up0_self_;
  AttnBlock up0_cross_;
  Norm out_norm_;
  Linear out_conv_;
  int null_text_ = -1;
};

// ---------------------------------------------------------------------------
// Latent codec: identity encoder/decoder at desk scale.

/// Image (H x W x 3 in [0,1]) to a latent grid of `size` x `size` x 4:
/// channels are 2*rgb - 1 and 2*luma - 1 after area/bilinear resampling.
Mat encode_image(const Raster& image, int size, int channels = 4);
/// First three latent channels back to RGB at the requested size.
Raster decode_latent(const Mat& latent, int size, int height, int width);

Mat to_mat(const Raster& r);
Raster to_raster(const Mat& m, int height, int width);

// ---------------------------------------------------------------------------
// Tensor archive: flat binary + JSON manifest {name, shape, offset, dtype}.

struct TensorArchive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Mat>> tensors;

  /// Writes `<path>` (binary) and `<path>.json` (manifest).
  void save(const std::filesystem::path& path, bool float64 = false) const;
  static TensorArchive load(const std::filesystem::path& path);
  const Mat& get(const std::string& name) const;
};

/// Fixed-seed Gaussian matrix (mt19937_64 + Box-Muller), portable across platforms.
Mat gaussian(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed);

}  // namespace geodiff::diffnet
