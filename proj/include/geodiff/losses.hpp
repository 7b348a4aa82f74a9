#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "geodiff/diffnet.hpp"
#include "geodiff/guidance.hpp"

namespace geodiff::losses {

using diffnet::Mat;
using diffnet::Var;

struct LossWeights {
  double w_bg = 1.0;
  double w_obj = 1.0;
  double w_smooth = 0.1;
  double w_remove = 1.0;
  double upper_thresh = -1.8;
  double lower_thresh = -6.0;
  double factor = 2.0;
  double w_min = 0.1;
  double w_max = 20.0;

  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults.
  static LossWeights from_json(const nlohmann::json& j);
};

struct RemovalOptions {
  /// Multiply A_edit by A_ref as written instead of A_ref^T. Needs square
  /// maps, so loss_remove applies it to self blocks only.
  bool literal_product = false;
  /// L2-normalize attention rows before correlating.
  bool cosine = false;
};

/// mean(m_ne * |Y_edit_G - Y_ref|) over all tokens and channels.
Var loss_bg(const Var& y_edit_g, const Mat& y_ref, const Eigen::VectorXd& m_ne);
/// mean(m_obj_t * |Y_edit_G - Y_ref_G|)
Var loss_obj(const Var& y_edit_g, const Mat& y_ref_g, const Eigen::VectorXd& m_obj_t);
/// Mean absolute forward difference along both axes of the h x w token grid.
Var loss_smooth(const Var& y, int height, int width);

/// Removal loss on attention maps. `rows` selects the foreground tokens,
/// `obj`/`bg` the correlated columns; all are token masks on the h x w grid.
Var loss_remove_maps(const Var& a_edit, const Mat& a_ref, const std::vector<unsigned char>& rows,
                     const std::vector<unsigned char>& obj, const std::vector<unsigned char>& bg, int height,
                     int width, const RemovalOptions& options = {});

/// Same from projected operands: self blocks use AM(Q_e, K_r), cross blocks
/// AM(Q_e, K_e); A_ref = AM(Q_r, K_r).
Var loss_remove(const Mat& q_r, const Mat& k_r, const Var& q_e, const Var& k_e, diffnet::AttentionKind kind,
                const std::vector<unsigned char>& rows, const std::vector<unsigned char>& obj,
                const std::vector<unsigned char>& bg, int height, int width, const RemovalOptions& options = {});

/// Doubles the weight above the upper threshold, halves it below the lower
/// one, within [w_min, w_max].
double adapt_remove_weight(double current_loss, double w, const LossWeights& weights = {});

struct LossBreakdown {
  Var total;
  double bg = 0.0;
  double obj = 0.0;
  double smooth = 0.0;
  std::optional<double> remove;  // absent when no block exposes disocclusions
  int blocks = 0;
};

/// Mean over shared blocks of (w_bg L_bg + w_obj L_obj + w_smooth L_s), plus
/// w_remove times the mean removal loss over blocks with disoccluded tokens.
LossBreakdown total_loss(const std::vector<guidance::BlockGuidance>& records,
                         const guidance::SharedAttentionConfig& sharing, const LossWeights& weights, bool removal,
                         const RemovalOptions& options = {});

/// Alternate-step optimization schedule with a linearly decayed rate.
struct OptimSchedule {
  int optimize_first_n = 32;
  double lr_initial = 1.5;
  double lr_final = 0.0;

  /// 1-based denoising steps 1, 3, 5, ... up to optimize_first_n.
  bool optimizes(int step) const;
  int count() const;
  /// Learning rate at an optimized step (affine in its index).
  double lr(int step) const;
};

/// One loss-curve entry.
struct LossRecord {
  int step = 0;
  std::string term;
  double value = 0.0;
  double w_remove = 0.0;
  std::optional<double> lr;

  nlohmann::json to_json() const;
};

struct EditState {
  Mat latent;  // current edit latent z_t^e
  Mat text;    // edit-branch null embedding
};

struct StepSetup {
  const diffnet::Denoiser* model = nullptr;
  int step = 0;
  int t = 0;
  int t_prev = 0;
  int height = 0;
  int width = 0;
  const std::vector<diffnet::AttentionRecord>* captures = nullptr;
  const guidance::SharedAttentionConfig* sharing = nullptr;
  /// Added to the DDIM update when given.
  const Mat* correction = nullptr;
};

struct OptimizeResult {
  Mat next_latent;     // z_{t-1}^e from the updated parameters
  LossBreakdown loss;  // before the update
  double w_remove = 0.0;  // weight after adaptation
  std::vector<guidance::BlockGuidance> records;  // from the re-run
};

/// One hooked edit step without optimization.
Mat edit_step(const StepSetup& setup, const EditState& state, std::vector<guidance::BlockGuidance>* records);

/// Gradient step on (latent, text) followed by the re-run that produces the
/// next latent. Updates `state` and `weights.w_remove` in place.
OptimizeResult optimize_step(const StepSetup& setup, EditState& state, LossWeights& weights, double lr,
                             int inner_iterations, bool removal, const RemovalOptions& options = {});

}  // namespace geodiff::losses
