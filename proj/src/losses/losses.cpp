#include "geodiff/losses.hpp"

#include <algorithm>
#include <cmath>

#include "geodiff/error.hpp"
#include "geodiff/sampler.hpp"

namespace geodiff::losses {

namespace {

constexpr double kRhoFloor = 1e-12;

void require_same(const Var& a, const Mat& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ValidationError(std::string(what) + ": shape mismatch");
}

Var masked_l1(const Var& y, const Mat& target, const Eigen::VectorXd& mask, const char* what) {
  require_same(y, target, what);
  if (mask.size() != y.rows()) throw ValidationError(std::string(what) + ": mask length differs from token count");
  const Var diff = ad::abs(ad::sub(y, ad::constant(target)));
  return ad::mean(ad::mul_col(diff, ad::constant(Mat(mask))));
}

std::vector<unsigned char> token_mask(const Raster& r) {
  std::vector<unsigned char> out(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) out[i] = r.data()[i] >= 0.5f ? 1 : 0;
  return out;
}

Var l2_rows(const Var& a) {
  const Var sq = ad::matmul(ad::mul(a, a), ad::constant(Mat::Ones(a.cols(), 1)));
  const Var inv = ad::exp(ad::scale(ad::log(ad::clamp_min(sq, 1e-24)), -0.5));
  return ad::mul_col(a, inv);
}

Mat l2_rows(const Mat& a) {
  Mat out = a;
  for (Eigen::Index r = 0; r < a.rows(); ++r) out.row(r) /= std::sqrt(std::max(a.row(r).squaredNorm(), 1e-24));
  return out;
}

void require_finite(double v, int step, const char* what) {
  if (!std::isfinite(v)) {
    throw RuntimeFailure(std::string("non-finite ") + what + " at step " + std::to_string(step));
  }
}

}  // namespace

void LossWeights::validate() const {
  if (w_bg < 0 || w_obj < 0 || w_smooth < 0 || w_remove < 0) throw ValidationError("loss weights must be >= 0");
  if (!(upper_thresh > lower_thresh)) throw ValidationError("upper threshold must exceed the lower one");
  if (!(factor >= 1.0)) throw ValidationError("adaptive factor must be >= 1");
  if (!(w_min > 0 && w_min <= w_max)) throw ValidationError("need 0 < w_min <= w_max");
}

nlohmann::json LossWeights::to_json() const {
  return {{"w_bg", w_bg},       {"w_obj", w_obj},   {"w_smooth", w_smooth}, {"w_remove", w_remove},
          {"upper_thresh", upper_thresh}, {"lower_thresh", lower_thresh}, {"factor", factor},
          {"w_min", w_min},     {"w_max", w_max}};
}

LossWeights LossWeights::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("weights must be an object");
  LossWeights w;
  w.w_bg = j.value("w_bg", w.w_bg);
  w.w_obj = j.value("w_obj", w.w_obj);
  w.w_smooth = j.value("w_smooth", w.w_smooth);
  w.w_remove = j.value("w_remove", w.w_remove);
  w.upper_thresh = j.value("upper_thresh", w.upper_thresh);
  w.lower_thresh = j.value("lower_thresh", w.lower_thresh);
  w.factor = j.value("factor", w.factor);
  w.w_min = j.value("w_min", w.w_min);
  w.w_max = j.value("w_max", w.w_max);
  w.validate();
  return w;
}

Var loss_bg(const Var& y_edit_g, const Mat& y_ref, const Eigen::VectorXd& m_ne) {
  return masked_l1(y_edit_g, y_ref, m_ne, "loss_bg");
}

Var loss_obj(const Var& y_edit_g, const Mat& y_ref_g, const Eigen::VectorXd& m_obj_t) {
  return masked_l1(y_edit_g, y_ref_g, m_obj_t, "loss_obj");
}

Var loss_smooth(const Var& y, int height, int width) {
  if (y.rows() != Eigen::Index(height) * width) throw ValidationError("loss_smooth: grid does not match token count");
  std::vector<int> a, b;
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      if (c + 1 < width) a.push_back(r * width + c + 1), b.push_back(r * width + c);
      if (r + 1 < height) a.push_back((r + 1) * width + c), b.push_back(r * width + c);
    }
  }
  if (a.empty()) return ad::constant(Mat::Zero(1, 1));
  return ad::mean(ad::abs(ad::sub(ad::gather_rows(y, a), ad::gather_rows(y, b))));
}

Var loss_remove_maps(const Var& a_edit, const Mat& a_ref, const std::vector<unsigned char>& rows,
                     const std::vector<unsigned char>& obj, const std::vector<unsigned char>& bg, int height,
                     int width, const RemovalOptions& options) {
  const auto n = static_cast<std::size_t>(height) * width;
  if (a_edit.rows() != static_cast<Eigen::Index>(n) || rows.size() != n || obj.size() != n || bg.size() != n) {
    throw ValidationError("loss_remove: masks and maps must cover the token grid");
  }
  if (std::none_of(bg.begin(), bg.end(), [](unsigned char v) { return v != 0; })) {
    throw ValidationError("loss_remove: empty background mask");
  }
  std::vector<int> fg;
  for (std::size_t i = 0; i < n; ++i) {
    if (rows[i]) fg.push_back(static_cast<int>(i));
  }
  if (fg.empty()) return ad::constant(Mat::Zero(1, 1));

  Var ae = ad::gather_rows(a_edit, fg);
  Mat ar = a_ref;
  if (options.cosine) {
    ae = l2_rows(ae);
    ar = l2_rows(ar);
  }
  Var corr;
  if (options.literal_product) {
    if (a_edit.cols() != a_ref.rows() || a_ref.cols() != static_cast<Eigen::Index>(n)) {
      throw ValidationError("loss_remove: the literal product needs square token-to-token maps");
    }
    corr = ad::matmul(ae, ad::constant(ar));
  } else {
    if (a_edit.cols() != a_ref.cols() || a_ref.rows() != static_cast<Eigen::Index>(n)) {
      throw ValidationError("loss_remove: attention maps differ in shape");
    }
    corr = ad::matmul_nt(ae, ad::constant(ar));
  }

  const ad::RowMax to_bg = ad::row_max(corr, bg);
  const ad::RowMax to_obj = ad::row_max(corr, obj);
  const double diag = std::max(std::hypot(height - 1.0, width - 1.0), 1.0);
  Mat decay(static_cast<Eigen::Index>(fg.size()), 1);
  for (std::size_t i = 0; i < fg.size(); ++i) {
    const int u = to_bg.index[i];
    const double dy = fg[i] / width - u / width;
    const double dx = fg[i] % width - u % width;
    decay(static_cast<Eigen::Index>(i), 0) = std::exp(-std::hypot(dx, dy) / diag);
  }
  const Var log_ratio = ad::sub(ad::log(ad::clamp_min(to_obj.value, kRhoFloor)),
                                ad::log(ad::clamp_min(to_bg.value, kRhoFloor)));
  return ad::mean(ad::mul(log_ratio, ad::constant(std::move(decay))));
}

Var loss_remove(const Mat& q_r, const Mat& k_r, const Var& q_e, const Var& k_e, diffnet::AttentionKind kind,
                const std::vector<unsigned char>& rows, const std::vector<unsigned char>& obj,
                const std::vector<unsigned char>& bg, int height, int width, const RemovalOptions& options) {
  const Var keys = kind == diffnet::AttentionKind::self ? ad::constant(k_r) : k_e;
  const Var a_edit = diffnet::attention_map(q_e, keys);
  const Mat a_ref = diffnet::attention_map(q_r, k_r);
  // Token-to-text maps have no literal product; they always correlate rows.
  RemovalOptions opts = options;
  if (kind == diffnet::AttentionKind::cross) opts.literal_product = false;
  return loss_remove_maps(a_edit, a_ref, rows, obj, bg, height, width, opts);
}

double adapt_remove_weight(double current_loss, double w, const LossWeights& weights) {
  if (current_loss > weights.upper_thresh) return std::min(w * weights.factor, weights.w_max);
  if (current_loss < weights.lower_thresh) return std::max(w / weights.factor, weights.w_min);
  return w;
}

LossBreakdown total_loss(const std::vector<guidance::BlockGuidance>& records,
                         const guidance::SharedAttentionConfig& sharing, const LossWeights& weights, bool removal,
                         const RemovalOptions& options) {
  LossBreakdown out;
  std::vector<Var> per_block;
  std::vector<Var> removal_terms;
  for (const auto& g : records) {
    if (!g.shared) continue;
    const int h = g.site.height;
    const int w = g.site.width;
    const guidance::Level& level = sharing.level(h, w);
    const Var bg = loss_bg(g.y_edit_g, g.y_ref, guidance::mask_column(level.masks.ne));
    const Var smooth = loss_smooth(g.y_edit_g, h, w);
    Var block = ad::add(ad::scale(bg, weights.w_bg), ad::scale(smooth, weights.w_smooth));
    out.bg += bg.item();
    out.smooth += smooth.item();
    if (!removal) {
      const Var obj = loss_obj(g.y_edit_g, g.y_ref_g, guidance::mask_column(level.masks.obj_t));
      block = ad::add(block, ad::scale(obj, weights.w_obj));
      out.obj += obj.item();
    }
    per_block.push_back(block);
    if (mask::any(level.masks.disocc)) {
      removal_terms.push_back(loss_remove(g.q_r, g.k_r, g.q_e, g.k_e, g.site.kind, token_mask(level.masks.disocc),
                                          token_mask(level.masks.obj), token_mask(level.masks.bg), h, w, options));
    }
  }
  if (per_block.empty()) throw ValidationError("total_loss: no shared attention block was captured");
  out.blocks = static_cast<int>(per_block.size());
  const double inv = 1.0 / out.blocks;
  out.bg *= inv;
  out.obj *= inv;
  out.smooth *= inv;
  out.total = ad::scale(ad::sum(ad::concat_rows(per_block)), inv);
  if (!removal_terms.empty()) {
    const Var rm = ad::scale(ad::sum(ad::concat_rows(removal_terms)), 1.0 / removal_terms.size());
    out.remove = rm.item();
    out.total = ad::add(out.total, ad::scale(rm, weights.w_remove));
  }
  return out;
}

bool OptimSchedule::optimizes(int step) const { return step >= 1 && step <= optimize_first_n && step % 2 == 1; }

int OptimSchedule::count() const { return optimize_first_n >= 1 ? (optimize_first_n + 1) / 2 : 0; }

double OptimSchedule::lr(int step) const {
  if (!optimizes(step)) throw ValidationError("step " + std::to_string(step) + " is not optimized");
  const int k = count();
  if (k == 1) return lr_initial;
  const double frac = static_cast<double>((step - 1) / 2) / (k - 1);
  return lr_initial + (lr_final - lr_initial) * frac;
}

nlohmann::json LossRecord::to_json() const {
  nlohmann::json j = {{"step", step}, {"term", term}, {"value", value}, {"w_remove", w_remove}};
  j["lr"] = lr ? nlohmann::json(*lr) : nlohmann::json(nullptr);
  return j;
}

namespace {

Var hooked_eps(const StepSetup& s, const Var& z, const Var& text, std::vector<guidance::BlockGuidance>* records) {
  if (!s.model) throw ValidationError("step setup has no model");
  if (!records || !s.captures || !s.sharing) return s.model->eps(z, s.height, s.width, s.t, text, nullptr, s.step);
  const diffnet::AttentionHook hook = guidance::shared_attention_hook(s.step, *s.captures, *s.sharing, *records);
  return s.model->eps(z, s.height, s.width, s.t, text, &hook, s.step);
}

Mat advance(const StepSetup& s, const Mat& z, const Mat& eps) {
  Mat next = sampler::ddim_step(s.model->schedule(), z, s.t, s.t_prev, eps);
  if (s.correction) next += *s.correction;
  if (!next.allFinite()) throw RuntimeFailure("edit step produced non-finite values at step " + std::to_string(s.step));
  return next;
}

}  // namespace

Mat edit_step(const StepSetup& setup, const EditState& state, std::vector<guidance::BlockGuidance>* records) {
  const Var eps = hooked_eps(setup, ad::constant(state.latent), ad::constant(state.text), records);
  return advance(setup, state.latent, eps.value());
}

OptimizeResult optimize_step(const StepSetup& setup, EditState& state, LossWeights& weights, double lr,
                             int inner_iterations, bool removal, const RemovalOptions& options) {
  if (!setup.captures || !setup.sharing) throw ValidationError("optimize_step needs reference captures");
  if (inner_iterations < 1) throw ValidationError("inner_iterations must be >= 1");
  OptimizeResult result;
  for (int it = 0; it < inner_iterations; ++it) {
    const Var z = ad::parameter(state.latent);
    const Var text = ad::parameter(state.text);
    std::vector<guidance::BlockGuidance> records;
    hooked_eps(setup, z, text, &records);
    LossBreakdown loss = total_loss(records, *setup.sharing, weights, removal, options);
    require_finite(loss.total.item(), setup.step, "loss");
    const std::vector<Var> params{z, text};
    const ad::Gradients g = ad::gradient(loss.total, params);
    for (const Mat& m : g.grads) {
      if (!m.allFinite()) throw RuntimeFailure("non-finite gradient at step " + std::to_string(setup.step));
    }
    if (lr != 0.0) {
      state.latent -= lr * g.grads[0];
      state.text -= lr * g.grads[1];
    }
    if (it == 0) result.loss = std::move(loss);
  }
  if (result.loss.remove) weights.w_remove = adapt_remove_weight(*result.loss.remove, weights.w_remove, weights);
  result.w_remove = weights.w_remove;
  result.next_latent = edit_step(setup, state, &result.records);
  return result;
}

}  // namespace geodiff::losses
