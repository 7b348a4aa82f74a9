#pragma once

#include <filesystem>
#include <vector>

#include "geodiff/diffnet.hpp"

namespace geodiff::sampler {

using diffnet::Mat;

/// Deterministic DDIM update from alpha_bar_t to alpha_bar_prev:
///   x0 = (z - sqrt(1 - ab_t) eps) / sqrt(ab_t)
///   z' = sqrt(ab_prev) x0 + sqrt(1 - ab_prev) eps
Mat ddim_step(const Mat& z_t, double alpha_bar_t, double alpha_bar_prev, const Mat& eps);

/// Schedule-indexed variants. ddim_step needs t_prev < t; the inverse step
/// moves from t_prev up to t with the same algebra.
Mat ddim_step(const diffnet::NoiseSchedule& schedule, const Mat& z_t, int t, int t_prev, const Mat& eps);
Mat inverse_ddim_step(const diffnet::NoiseSchedule& schedule, const Mat& z_prev, int t_prev, int t, const Mat& eps);

/// Inverted noise trajectory. latents[i] is the latent at timesteps[i];
/// timesteps ascend from 0 (the input latent) to the last DDIM timestep.
struct Trajectory {
  std::vector<int> timesteps;
  std::vector<Mat> latents;
  Mat text;
  int height = 0;
  int width = 0;

  int steps() const { return static_cast<int>(latents.size()) - 1; }
  /// Timestep at denoising step n (1-based, n = 1 is the noisiest).
  int timestep_at_step(int n) const;
  int previous_timestep_at_step(int n) const;
  /// Latent fed to denoising step n, and the stored latent it should produce.
  const Mat& latent_before_step(int n) const;
  const Mat& latent_after_step(int n) const;

  void save(const std::filesystem::path& path) const;
  static Trajectory load(const std::filesystem::path& path);
};

/// DDIM inversion: runs the update with increasing t, eps evaluated at the
/// current latent and the next timestep. Throws RuntimeFailure naming the
/// step when an intermediate goes non-finite.
Trajectory invert(const diffnet::Denoiser& model, const Mat& latent, int height, int width, const Mat& text,
                  int steps, double cfg_scale = 1.0);

struct ReferenceStep {
  Mat latent;  // stored latent after the step (re-injected)
  Mat eps;     // model prediction at the stored input latent
  /// stored_after - ddim_step(stored_before, eps): the re-injection offset.
  Mat correction;
  std::vector<diffnet::AttentionRecord> captures;
};

/// Evaluates the model on the stored latent of step n with capturing hooks
/// and returns the stored next latent, so reconstruction is exact.
ReferenceStep reference_step(const diffnet::Denoiser& model, const Trajectory& trajectory, int n);

/// Plain DDIM sampling from `z_start` (no re-injection).
Mat denoise(const diffnet::Denoiser& model, const Mat& z_start, int height, int width, const Mat& text, int steps,
            double cfg_scale = 1.0, const diffnet::AttentionHook* hook = nullptr);

/// Full reference rollout with re-injection; returns the final latent.
Mat reference_rollout(const diffnet::Denoiser& model, const Trajectory& trajectory);

}  // namespace geodiff::sampler
