#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <json.hpp>

#include "geodiff/geometry.hpp"
#include "geodiff/losses.hpp"
#include "geodiff/sampler.hpp"

namespace geodiff::pipeline {

using diffnet::Mat;

struct EditConfig {
  geometry::EditTransform transform;
  int steps = 50;
  int share_until_step = 45;
  int optimize_first_n = 32;
  double lr_initial = 1.5;
  double lr_final = 0.0;
  losses::LossWeights weights;
  int inner_iterations = 1;
  /// Seeds the model weights when no checkpoint is loaded.
  std::uint64_t seed = 0;
  double cfg_scale = 1.0;
  bool sharing = true;
  bool optimize = true;
  /// Empty means every attention block shares.
  std::vector<int> shared_blocks;
  /// Adds the reference branch's per-step reconstruction offset to the edit
  /// branch while sharing is on.
  bool edit_reinjection = true;
  /// Restores decoder detail lost by the latent codec.
  bool detail_transfer = true;
  bool splat_bilinear = false;
  losses::RemovalOptions removal;
  std::optional<geometry::CameraIntrinsics> intrinsics;
  bool diagnostics = false;

  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown or ill-typed values throw ValidationError.
  static EditConfig from_json(const nlohmann::json& j);
};

struct EditInputs {
  Raster image;  // H x W x 3 in [0,1]
  Raster mask;   // H x W x 1, binary
  std::optional<Raster> depth;
};

/// Image latent plus its inverted trajectory; computed once per session.
struct Inversion {
  Mat latent;
  sampler::Trajectory trajectory;
};

Inversion invert_image(const diffnet::Denoiser& model, const Raster& image, int steps, double cfg_scale = 1.0);

/// Depth raster for the transform: the given map for file sources, a
/// constant billboard otherwise.
Raster depth_for(const geometry::EditTransform& transform, int height, int width, const std::optional<Raster>& depth);

/// Fills an automatic pivot with the mask centroid (2D) or its back-projection (3D).
geometry::EditTransform resolve_transform(const geometry::EditTransform& transform, const Raster& m_obj,
                                          const std::optional<Raster>& depth,
                                          const std::optional<geometry::CameraIntrinsics>& intrinsics);

/// Edit field at image resolution with the object pixels as the only sources.
geometry::EditField object_field(const geometry::EditTransform& resolved, const Raster& m_obj,
                                 const std::optional<Raster>& depth,
                                 const std::optional<geometry::CameraIntrinsics>& intrinsics);

/// Foreground splatted by the field over a background whose vacated pixels
/// take the nearest remaining background color.
Raster naive_warp_baseline(const Raster& image, const Raster& m_obj, const geometry::EditField& field);

/// Mean |splat(input * m_obj) - edited| over destination pixels reached by an
/// object source (all channels). nullopt when no pixel is reached.
std::optional<double> warp_error(const Raster& input, const Raster& edited, const Raster& m_obj,
                                 const geometry::EditField& field);

struct Preview {
  Raster overlay;
  Raster m_obj_t;
  Raster m_disocc;
};

Preview preview(const EditInputs& inputs, const geometry::EditTransform& transform,
                const std::optional<geometry::CameraIntrinsics>& intrinsics = std::nullopt);

using AttentionKey = std::pair<int, int>;  // (step, block)

/// Attention map quantized to 8 bits, scaled by its maximum.
struct AttentionDump {
  int rows = 0;
  int cols = 0;
  double max = 0.0;
  std::vector<std::uint8_t> values;

  Raster heatmap() const;
};

struct EditResult {
  Raster edited;
  Raster reconstruction;
  Raster baseline;
  Mat latent;
  std::vector<losses::LossRecord> loss_curves;
  std::map<AttentionKey, AttentionDump> attention;
  std::optional<double> warp_error;
  geometry::EditTransform transform;  // with the pivot resolved
  double seconds = 0.0;
};

/// Called after every denoising step with (completed steps, total steps,
/// loss records emitted by that step).
using Progress = std::function<void(int, int, std::span<const losses::LossRecord>)>;

/// Dual reference/edit rollout with shared attention and latent
/// optimization. `inversion` is reused when given, otherwise computed here.
EditResult run_edit(const diffnet::Denoiser& model, const EditInputs& inputs, const EditConfig& config,
                    const Inversion* inversion = nullptr, const Progress& progress = nullptr);

}  // namespace geodiff::pipeline
