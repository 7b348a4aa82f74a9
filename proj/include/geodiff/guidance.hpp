#pragma once

#include <map>
#include <utility>
#include <vector>

#include "geodiff/diffnet.hpp"
#include "geodiff/geometry.hpp"

namespace geodiff::guidance {

using diffnet::AttentionKind;
using diffnet::Mat;
using diffnet::Var;

/// Edit field and mask algebra at one attention resolution.
struct Level {
  int height = 0;
  int width = 0;
  geometry::EditField field;
  geometry::MaskSet masks;
};

/// Builds one Level per distinct attention grid of the model from the
/// image-resolution mask and field.
std::map<std::pair<int, int>, Level> build_pyramid(const Raster& m_obj, const geometry::EditField& field,
                                                   const std::vector<diffnet::AttentionSite>& sites,
                                                   const geometry::SplatOptions& options = {});

struct SharedAttentionConfig {
  int share_until_step = 45;
  /// Blocks that share attention; empty means all.
  std::vector<int> blocks;
  /// Keyed by (height, width) of the token grid.
  std::map<std::pair<int, int>, Level> pyramid;

  bool shares(int block) const;
  const Level& level(int height, int width) const;
};

/// Guidance tensors of one block evaluation, kept for the losses.
struct BlockGuidance {
  diffnet::AttentionSite site;
  Var q_e;       // edit queries
  Var k_e;       // edit keys
  Var y_edit_g;  // edit attention guidance
  Mat y_ref_g;   // reference attention guidance (warped queries)
  Mat y_ref;     // plain reference attention output
  Mat q_r;
  Mat k_r;
  bool shared = false;
};

/// Splats query rows through the field on the token grid. Tokens that no
/// source reaches keep their own row.
Mat warp_queries(const Mat& q, const geometry::EditField& field);
/// Differentiable variant (row gather with the same source assignment).
Var warp_queries(const Var& q, const geometry::EditField& field);

/// Attention(F(Q_r), K_r, V_r)
Mat ref_guidance(const Mat& q_r, const Mat& k_r, const Mat& v_r, const geometry::EditField& field);

/// self:  Attention(Q_e, K_r, V_r)
/// cross: Attention(Q_e, K_e, V_r)
Var edit_guidance(const Var& q_e, const Var& k_e, const Var& v_e, const Mat& k_r, const Mat& v_r, AttentionKind kind);

/// m * Y_ref_G + (1 - m) * Y_edit_G with one mask value per token row.
Var blend(const Mat& y_ref_g, const Var& y_edit_g, const Eigen::VectorXd& mask);

/// Token-ordered column vector of a single-channel raster.
Eigen::VectorXd mask_column(const Raster& mask);

/// Hook for the edit process at one step. `captures` holds the reference
/// records of the same step; every invocation appends to `records`.
diffnet::AttentionHook shared_attention_hook(int step, const std::vector<diffnet::AttentionRecord>& captures,
                                             const SharedAttentionConfig& config, std::vector<BlockGuidance>& records);

}  // namespace geodiff::guidance
