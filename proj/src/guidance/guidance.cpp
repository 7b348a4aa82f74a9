#include "geodiff/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "geodiff/error.hpp"

namespace geodiff::guidance {

namespace {

void require_grid(Eigen::Index rows, const geometry::EditField& field) {
  if (rows != Eigen::Index(field.height) * field.width) {
    throw ValidationError("query rows do not match the field resolution");
  }
}

// Source row for each destination token (itself when nothing lands there).
std::vector<int> source_rows(const geometry::EditField& field) {
  std::vector<int> src(field.target.size());
  for (std::size_t i = 0; i < src.size(); ++i) src[i] = static_cast<int>(i);
  for (std::size_t i = 0; i < field.target.size(); ++i) {
    if (!field.valid[i]) continue;
    const int x = static_cast<int>(std::floor(field.target[i].x() + 0.5));
    const int y = static_cast<int>(std::floor(field.target[i].y() + 0.5));
    src[field.index(y, x)] = static_cast<int>(i);
  }
  return src;
}

}  // namespace

std::map<std::pair<int, int>, Level> build_pyramid(const Raster& m_obj, const geometry::EditField& field,
                                                   const std::vector<diffnet::AttentionSite>& sites,
                                                   const geometry::SplatOptions& options) {
  std::map<std::pair<int, int>, Level> out;
  for (const auto& site : sites) {
    const auto key = std::make_pair(site.height, site.width);
    if (out.contains(key)) continue;
    Level level;
    level.height = site.height;
    level.width = site.width;
    const bool same = site.height == field.height && site.width == field.width;
    level.field = same ? field : geometry::resample_field(field, site.height, site.width);
    const Raster m = same ? mask::threshold(m_obj) : geometry::resample_mask(m_obj, site.height, site.width);
    level.masks = geometry::mask_algebra(m, level.field, options);
    out.emplace(key, std::move(level));
  }
  return out;
}

bool SharedAttentionConfig::shares(int block) const {
  return blocks.empty() || std::find(blocks.begin(), blocks.end(), block) != blocks.end();
}

const Level& SharedAttentionConfig::level(int height, int width) const {
  const auto it = pyramid.find({height, width});
  if (it == pyramid.end()) {
    throw ValidationError("no edit field for attention grid " + std::to_string(height) + "x" + std::to_string(width));
  }
  return it->second;
}

Mat warp_queries(const Mat& q, const geometry::EditField& field) {
  require_grid(q.rows(), field);
  // Splat the queries as an h x w x d signal, then fall back to the original
  // row wherever nothing landed.
  const Raster signal = diffnet::to_raster(q, field.height, field.width);
  const Raster moved = geometry::splat(signal, field);
  const Raster covered = geometry::coverage(field);
  Mat out = q;
  for (Eigen::Index r = 0; r < q.rows(); ++r) {
    if (covered.data()[static_cast<std::size_t>(r)] < 0.5f) continue;
    for (Eigen::Index c = 0; c < q.cols(); ++c) out(r, c) = moved.data()[static_cast<std::size_t>(r * q.cols() + c)];
  }
  return out;
}

Var warp_queries(const Var& q, const geometry::EditField& field) {
  require_grid(q.rows(), field);
  const std::vector<int> src = source_rows(field);
  return ad::gather_rows(q, src);
}

Mat ref_guidance(const Mat& q_r, const Mat& k_r, const Mat& v_r, const geometry::EditField& field) {
  const Var warped = warp_queries(ad::constant(q_r), field);
  return diffnet::attention(warped, ad::constant(k_r), ad::constant(v_r)).value();
}

Var edit_guidance(const Var& q_e, const Var& k_e, const Var& v_e, const Mat& k_r, const Mat& v_r, AttentionKind kind) {
  if (v_e.cols() != v_r.cols()) throw ValidationError("edit_guidance: value widths differ");
  const Var vr = ad::constant(v_r);
  if (kind == AttentionKind::self) return diffnet::attention(q_e, ad::constant(k_r), vr);
  if (k_e.rows() != v_r.rows()) throw ValidationError("edit_guidance: edit keys and reference values differ in length");
  return diffnet::attention(q_e, k_e, vr);
}

Var blend(const Mat& y_ref_g, const Var& y_edit_g, const Eigen::VectorXd& mask) {
  if (mask.size() != y_edit_g.rows()) throw ValidationError("blend: mask length differs from token count");
  if (y_ref_g.rows() != y_edit_g.rows() || y_ref_g.cols() != y_edit_g.cols()) {
    throw ValidationError("blend: guidance shapes differ");
  }
  Mat ref_part = y_ref_g;
  ref_part.array().colwise() *= mask.array();
  Mat keep = (1.0 - mask.array()).matrix();
  return ad::add(ad::constant(std::move(ref_part)), ad::mul_col(y_edit_g, ad::constant(std::move(keep))));
}

Eigen::VectorXd mask_column(const Raster& mask) {
  if (mask.channels() != 1) throw ValidationError("mask must have one channel");
  Eigen::VectorXd v(static_cast<Eigen::Index>(mask.size()));
  for (std::size_t i = 0; i < mask.size(); ++i) v(static_cast<Eigen::Index>(i)) = mask.data()[i];
  return v;
}

diffnet::AttentionHook shared_attention_hook(int step, const std::vector<diffnet::AttentionRecord>& captures,
                                             const SharedAttentionConfig& config,
                                             std::vector<BlockGuidance>& records) {
  return [step, &captures, &config, &records](const diffnet::AttentionSite& site, const Var& q, const Var& k,
                                              const Var& v) -> std::optional<Var> {
    const auto cap = std::find_if(captures.begin(), captures.end(),
                                  [&](const diffnet::AttentionRecord& r) { return r.site.block == site.block; });
    if (cap == captures.end()) {
      throw RuntimeFailure("no reference capture for step " + std::to_string(step) + " block " +
                           std::to_string(site.block));
    }
    if (cap->q.rows() != q.rows() || cap->v.cols() != v.cols()) {
      throw ValidationError("reference capture shape differs from the edit block");
    }
    const Level& level = config.level(site.height, site.width);
    BlockGuidance g;
    g.site = site;
    g.site.step = step;
    g.q_e = q;
    g.k_e = k;
    g.q_r = cap->q;
    g.k_r = cap->k;
    g.y_ref = cap->output;
    g.y_ref_g = ref_guidance(cap->q, cap->k, cap->v, level.field);
    g.y_edit_g = edit_guidance(q, k, v, cap->k, cap->v, site.kind);
    g.shared = step <= config.share_until_step && config.shares(site.block);
    const bool shared = g.shared;
    Var out = shared ? blend(g.y_ref_g, g.y_edit_g, mask_column(level.masks.obj_t_soft)) : Var();
    records.push_back(std::move(g));
    if (!shared) return std::nullopt;
    return out;
  };
}

}  // namespace geodiff::guidance
