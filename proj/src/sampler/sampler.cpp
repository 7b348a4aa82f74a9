#include "geodiff/sampler.hpp"

#include <cmath>
#include <string>

#include "geodiff/error.hpp"

namespace geodiff::sampler {

Mat ddim_step(const Mat& z_t, double alpha_bar_t, double alpha_bar_prev, const Mat& eps) {
  if (z_t.rows() != eps.rows() || z_t.cols() != eps.cols()) throw ValidationError("ddim_step: shape mismatch");
  if (!(alpha_bar_t > 0.0 && alpha_bar_t <= 1.0 && alpha_bar_prev > 0.0 && alpha_bar_prev <= 1.0)) {
    throw ValidationError("ddim_step: alpha_bar must lie in (0, 1]");
  }
  const Mat x0 = (z_t - std::sqrt(1.0 - alpha_bar_t) * eps) / std::sqrt(alpha_bar_t);
  return std::sqrt(alpha_bar_prev) * x0 + std::sqrt(1.0 - alpha_bar_prev) * eps;
}

Mat ddim_step(const diffnet::NoiseSchedule& schedule, const Mat& z_t, int t, int t_prev, const Mat& eps) {
  if (!(t_prev < t)) throw ValidationError("ddim_step: t_prev must precede t");
  return ddim_step(z_t, schedule.at(t), schedule.at(t_prev), eps);
}

Mat inverse_ddim_step(const diffnet::NoiseSchedule& schedule, const Mat& z_prev, int t_prev, int t, const Mat& eps) {
  if (!(t_prev < t)) throw ValidationError("inverse_ddim_step: t must follow t_prev");
  return ddim_step(z_prev, schedule.at(t_prev), schedule.at(t), eps);
}

int Trajectory::timestep_at_step(int n) const {
  if (n < 1 || n > steps()) throw ValidationError("denoising step " + std::to_string(n) + " outside trajectory");
  return timesteps[static_cast<std::size_t>(steps() - n + 1)];
}

int Trajectory::previous_timestep_at_step(int n) const {
  if (n < 1 || n > steps()) throw ValidationError("denoising step " + std::to_string(n) + " outside trajectory");
  return timesteps[static_cast<std::size_t>(steps() - n)];
}

const Mat& Trajectory::latent_before_step(int n) const {
  if (n < 1 || n > steps()) throw ValidationError("trajectory has no entry for step " + std::to_string(n));
  return latents[static_cast<std::size_t>(steps() - n + 1)];
}

const Mat& Trajectory::latent_after_step(int n) const {
  if (n < 1 || n > steps()) throw ValidationError("trajectory has no entry for step " + std::to_string(n));
  return latents[static_cast<std::size_t>(steps() - n)];
}

void Trajectory::save(const std::filesystem::path& path) const {
  diffnet::TensorArchive archive;
  archive.meta = {{"format", "geodiff-trajectory"}, {"timesteps", timesteps}, {"height", height}, {"width", width}};
  for (std::size_t i = 0; i < latents.size(); ++i) archive.tensors.emplace_back("z_" + std::to_string(i), latents[i]);
  archive.tensors.emplace_back("text", text);
  archive.save(path, /*float64=*/true);
}

Trajectory Trajectory::load(const std::filesystem::path& path) {
  const auto archive = diffnet::TensorArchive::load(path);
  if (archive.meta.value("format", std::string()) != "geodiff-trajectory") {
    throw ValidationError("archive is not a geodiff-trajectory");
  }
  Trajectory t;
  t.timesteps = archive.meta.at("timesteps").get<std::vector<int>>();
  t.height = archive.meta.at("height").get<int>();
  t.width = archive.meta.at("width").get<int>();
  for (std::size_t i = 0; i < t.timesteps.size(); ++i) t.latents.push_back(archive.get("z_" + std::to_string(i)));
  t.text = archive.get("text");
  return t;
}

namespace {

Mat predict(const diffnet::Denoiser& model, const Mat& z, int h, int w, int t, const Mat& text, double cfg_scale,
            const diffnet::AttentionHook* hook, int step) {
  const auto tv = ad::constant(text);
  return model.cfg_eps(ad::constant(z), h, w, t, tv, tv, cfg_scale, hook, step).value();
}

}  // namespace

Trajectory invert(const diffnet::Denoiser& model, const Mat& latent, int height, int width, const Mat& text, int steps,
                  double cfg_scale) {
  if (latent.rows() != Eigen::Index(height) * width || latent.cols() != model.config().latent_channels) {
    throw ValidationError("latent shape does not match the model");
  }
  Trajectory traj;
  traj.height = height;
  traj.width = width;
  traj.text = text;
  auto desc = model.schedule().ddim_timesteps(steps);
  traj.timesteps.push_back(0);
  traj.timesteps.insert(traj.timesteps.end(), desc.rbegin(), desc.rend());
  traj.latents.push_back(latent);
  for (int i = 1; i <= steps; ++i) {
    const int t_prev = traj.timesteps[static_cast<std::size_t>(i - 1)];
    const int t = traj.timesteps[static_cast<std::size_t>(i)];
    const Mat& z = traj.latents.back();
    const Mat eps = predict(model, z, height, width, t, text, cfg_scale, nullptr, -1);
    Mat next = inverse_ddim_step(model.schedule(), z, t_prev, t, eps);
    if (!next.allFinite()) throw RuntimeFailure("inversion produced non-finite values at step " + std::to_string(i));
    traj.latents.push_back(std::move(next));
  }
  return traj;
}

ReferenceStep reference_step(const diffnet::Denoiser& model, const Trajectory& trajectory, int n) {
  const int t = trajectory.timestep_at_step(n);
  const int t_prev = trajectory.previous_timestep_at_step(n);
  const Mat& z = trajectory.latent_before_step(n);
  ReferenceStep out;
  const diffnet::AttentionHook hook = diffnet::capture_into(out.captures);
  out.eps = predict(model, z, trajectory.height, trajectory.width, t, trajectory.text, 1.0, &hook, n);
  out.latent = trajectory.latent_after_step(n);
  out.correction = out.latent - ddim_step(model.schedule(), z, t, t_prev, out.eps);
  return out;
}

Mat denoise(const diffnet::Denoiser& model, const Mat& z_start, int height, int width, const Mat& text, int steps,
            double cfg_scale, const diffnet::AttentionHook* hook) {
  const auto desc = model.schedule().ddim_timesteps(steps);
  Mat z = z_start;
  for (int n = 1; n <= steps; ++n) {
    const int t = desc[static_cast<std::size_t>(n - 1)];
    const int t_prev = n < steps ? desc[static_cast<std::size_t>(n)] : 0;
    const Mat eps = predict(model, z, height, width, t, text, cfg_scale, hook, n);
    z = ddim_step(model.schedule(), z, t, t_prev, eps);
    if (!z.allFinite()) throw RuntimeFailure("sampling produced non-finite values at step " + std::to_string(n));
  }
  return z;
}

Mat reference_rollout(const diffnet::Denoiser& model, const Trajectory& trajectory) {
  Mat z = trajectory.latents.back();
  for (int n = 1; n <= trajectory.steps(); ++n) z = reference_step(model, trajectory, n).latent;
  return z;
}

}  // namespace geodiff::sampler
