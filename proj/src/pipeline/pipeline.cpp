#include "geodiff/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <set>

#include "geodiff/error.hpp"
#include "geodiff/guidance.hpp"
#include "geodiff/io.hpp"

namespace geodiff::pipeline {

using geometry::EditField;
using geometry::EditTransform;
using geometry::TransformKind;

namespace {

constexpr float kDetailChange = 0.1f;

template <typename T>
T field_or(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(std::string("config field '") + key + "' has the wrong type");
  }
}

void require_inputs(const EditInputs& in) {
  if (in.image.empty() || in.image.channels() != 3) throw ValidationError("image must be an RGB raster");
  if (in.mask.channels() != 1 || !in.mask.same_grid(in.image)) {
    throw ValidationError("mask must be single-channel and match the image size");
  }
  if (in.depth && (in.depth->channels() != 1 || !in.depth->same_grid(in.image))) {
    throw ValidationError("depth must be single-channel and match the image size");
  }
}

Raster clamp01(Raster r) {
  for (float& v : r.data()) v = std::clamp(v, 0.0f, 1.0f);
  return r;
}

AttentionDump quantize(const Mat& map) {
  AttentionDump d;
  d.rows = static_cast<int>(map.rows());
  d.cols = static_cast<int>(map.cols());
  d.max = map.size() ? map.maxCoeff() : 0.0;
  d.values.resize(static_cast<std::size_t>(map.size()));
  const double s = d.max > 0 ? 255.0 / d.max : 0.0;
  for (Eigen::Index i = 0; i < map.size(); ++i) {
    d.values[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround(std::clamp(map(i) * s, 0.0, 255.0)));
  }
  return d;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void EditConfig::validate() const {
  transform.validate();
  weights.validate();
  if (steps < 1 || steps > 1000) throw ValidationError("steps must lie in [1, 1000]");
  if (share_until_step < 0 || share_until_step > steps) throw ValidationError("share_until_step must lie in [0, steps]");
  if (optimize_first_n < 0 || optimize_first_n > steps) throw ValidationError("optimize_first_n must lie in [0, steps]");
  if (!(std::isfinite(lr_initial) && std::isfinite(lr_final)) || lr_initial < 0 || lr_final < 0) {
    throw ValidationError("learning rates must be finite and >= 0");
  }
  if (inner_iterations < 1) throw ValidationError("inner_iterations must be >= 1");
  if (!(cfg_scale >= 0.0)) throw ValidationError("cfg_scale must be >= 0");
  if (optimize && !sharing) throw ValidationError("optimization needs attention sharing");
  for (int b : shared_blocks) {
    if (b < 0 || b >= diffnet::Denoiser::kAttentionBlocks) throw ValidationError("shared_blocks entry out of range");
  }
  if (intrinsics) intrinsics->validate();
}

nlohmann::json EditConfig::to_json() const {
  nlohmann::json j = {
      {"transform", io::transform_to_json(transform)},
      {"steps", steps},
      {"share_until_step", share_until_step},
      {"optimize_first_n", optimize_first_n},
      {"lr", {{"initial", lr_initial}, {"final", lr_final}}},
      {"weights", weights.to_json()},
      {"inner_iterations", inner_iterations},
      {"seed", seed},
      {"cfg_scale", cfg_scale},
      {"sharing", sharing},
      {"optimize", optimize},
      {"shared_blocks", shared_blocks},
      {"edit_reinjection", edit_reinjection},
      {"detail_transfer", detail_transfer},
      {"splat_bilinear", splat_bilinear},
      {"removal", {{"literal_product", removal.literal_product}, {"cosine", removal.cosine}}},
      {"diagnostics", diagnostics},
  };
  if (intrinsics) j["intrinsics"] = io::intrinsics_to_json(*intrinsics);
  return j;
}

EditConfig EditConfig::from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {
      "transform", "steps", "share_until_step", "optimize_first_n", "lr", "weights", "inner_iterations",
      "seed", "cfg_scale", "sharing", "optimize", "shared_blocks", "edit_reinjection", "detail_transfer",
      "splat_bilinear", "removal", "intrinsics", "diagnostics"};
  if (!j.is_object()) throw ValidationError("edit config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ValidationError("unknown config field '" + key + "'");
  }
  EditConfig c;
  if (j.contains("transform")) c.transform = io::transform_from_json(j["transform"]);
  c.steps = field_or(j, "steps", c.steps);
  // Schedule bounds default to the step budget when the budget is smaller.
  c.share_until_step = field_or(j, "share_until_step", std::min(c.share_until_step, c.steps));
  c.optimize_first_n = field_or(j, "optimize_first_n", std::min(c.optimize_first_n, c.steps));
  if (j.contains("lr")) {
    const auto& lr = j["lr"];
    if (!lr.is_object()) throw ValidationError("lr must be an object {initial, final}");
    c.lr_initial = field_or(lr, "initial", c.lr_initial);
    c.lr_final = field_or(lr, "final", c.lr_final);
  }
  if (j.contains("weights")) c.weights = losses::LossWeights::from_json(j["weights"]);
  c.inner_iterations = field_or(j, "inner_iterations", c.inner_iterations);
  c.seed = field_or(j, "seed", c.seed);
  c.cfg_scale = field_or(j, "cfg_scale", c.cfg_scale);
  c.sharing = field_or(j, "sharing", c.sharing);
  c.optimize = field_or(j, "optimize", c.optimize);
  c.shared_blocks = field_or(j, "shared_blocks", c.shared_blocks);
  c.edit_reinjection = field_or(j, "edit_reinjection", c.edit_reinjection);
  c.detail_transfer = field_or(j, "detail_transfer", c.detail_transfer);
  c.splat_bilinear = field_or(j, "splat_bilinear", c.splat_bilinear);
  c.diagnostics = field_or(j, "diagnostics", c.diagnostics);
  if (j.contains("removal")) {
    const auto& r = j["removal"];
    if (!r.is_object()) throw ValidationError("removal must be an object");
    c.removal.literal_product = field_or(r, "literal_product", c.removal.literal_product);
    c.removal.cosine = field_or(r, "cosine", c.removal.cosine);
  }
  if (j.contains("intrinsics")) c.intrinsics = io::intrinsics_from_json(j["intrinsics"]);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Geometry helpers

Inversion invert_image(const diffnet::Denoiser& model, const Raster& image, int steps, double cfg_scale) {
  const int size = model.config().latent_size;
  if (image.height() % size || image.width() % size) {
    throw ValidationError("image sides must be multiples of " + std::to_string(size));
  }
  Inversion inv;
  inv.latent = diffnet::encode_image(image, size, model.config().latent_channels);
  inv.trajectory = sampler::invert(model, inv.latent, size, size, model.null_text(), steps, cfg_scale);
  return inv;
}

Raster depth_for(const EditTransform& transform, int height, int width, const std::optional<Raster>& depth) {
  if (transform.depth_source.kind == geometry::DepthSourceKind::file) {
    if (!depth) throw ValidationError("the transform asks for a depth map but none was supplied");
    return *depth;
  }
  if (!(transform.depth_source.constant_m > 0)) throw ValidationError("constant depth must be > 0");
  return Raster(height, width, 1, static_cast<float>(transform.depth_source.constant_m));
}

EditTransform resolve_transform(const EditTransform& transform, const Raster& m_obj, const std::optional<Raster>& depth,
                                const std::optional<geometry::CameraIntrinsics>& intrinsics) {
  EditTransform t = transform;
  if (!t.auto_pivot) return t;
  const auto c = geometry::centroid(m_obj);
  if (!c) throw ValidationError("an automatic pivot needs a nonempty object mask");
  if (t.kind == TransformKind::scale2d) {
    t.pivot2 = *c;
  } else if (t.is_3d()) {
    const Raster d = depth_for(t, m_obj.height(), m_obj.width(), depth);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < m_obj.size(); ++i) {
      if (m_obj.data()[i] >= 0.5f) sum += d.data()[i], ++n;
    }
    const auto k = intrinsics.value_or(geometry::CameraIntrinsics::default_for(m_obj.height(), m_obj.width()));
    const double z = sum / static_cast<double>(n);
    t.pivot3 = Eigen::Vector3d((c->x() - k.cx) / k.fx * z, (c->y() - k.cy) / k.fy * z, z);
  }
  t.auto_pivot = false;
  return t;
}

EditField object_field(const EditTransform& resolved, const Raster& m_obj, const std::optional<Raster>& depth,
                       const std::optional<geometry::CameraIntrinsics>& intrinsics) {
  const Raster obj = mask::threshold(m_obj);
  if (!resolved.is_3d()) return geometry::build_field(resolved, obj.height(), obj.width(), nullptr, intrinsics, &obj);
  const Raster d = depth_for(resolved, obj.height(), obj.width(), depth);
  return geometry::build_field(resolved, obj.height(), obj.width(), &d, intrinsics, &obj);
}

Raster naive_warp_baseline(const Raster& image, const Raster& m_obj, const EditField& field) {
  if (!image.same_grid(m_obj) || image.height() != field.height || image.width() != field.width) {
    throw ValidationError("image, mask and field sizes differ");
  }
  const int h = image.height();
  const int w = image.width();
  Raster filled = image;
  // Multi-source BFS from the background assigns every hole pixel the color of
  // its nearest (4-connected) background pixel; ties resolve in scan order.
  std::vector<int> owner(static_cast<std::size_t>(h) * w, -1);
  std::deque<int> queue;
  for (int i = 0; i < h * w; ++i) {
    if (m_obj.data()[static_cast<std::size_t>(i)] < 0.5f) owner[static_cast<std::size_t>(i)] = i, queue.push_back(i);
  }
  while (!queue.empty()) {
    const int i = queue.front();
    queue.pop_front();
    const int y = i / w;
    const int x = i % w;
    const int nb[4][2] = {{y - 1, x}, {y, x - 1}, {y, x + 1}, {y + 1, x}};
    for (const auto& p : nb) {
      if (p[0] < 0 || p[0] >= h || p[1] < 0 || p[1] >= w) continue;
      const int j = p[0] * w + p[1];
      if (owner[static_cast<std::size_t>(j)] >= 0) continue;
      owner[static_cast<std::size_t>(j)] = owner[static_cast<std::size_t>(i)];
      queue.push_back(j);
    }
  }
  for (int i = 0; i < h * w; ++i) {
    const int src = owner[static_cast<std::size_t>(i)];
    if (src < 0 || src == i) continue;
    const auto from = image.pixel(src / w, src % w);
    std::copy(from.begin(), from.end(), filled.pixel(i / w, i % w).begin());
  }
  const Raster fg = geometry::splat(image, field);
  const Raster cov = geometry::coverage(field);
  for (std::size_t i = 0; i < cov.size(); ++i) {
    if (cov.data()[i] < 0.5f) continue;
    const int y = static_cast<int>(i) / w;
    const int x = static_cast<int>(i) % w;
    const auto from = fg.pixel(y, x);
    std::copy(from.begin(), from.end(), filled.pixel(y, x).begin());
  }
  return filled;
}

std::optional<double> warp_error(const Raster& input, const Raster& edited, const Raster& m_obj, const EditField& field) {
  if (!input.same_shape(edited)) throw ValidationError("warp_error: images differ in shape");
  if (!input.same_grid(m_obj) || m_obj.channels() != 1) throw ValidationError("warp_error: mask size differs");
  Raster fg = input;
  const int c = input.channels();
  for (std::size_t i = 0; i < m_obj.size(); ++i) {
    if (m_obj.data()[i] < 0.5f) {
      for (int ch = 0; ch < c; ++ch) fg.data()[i * c + ch] = 0.0f;
    }
  }
  const Raster warped = geometry::splat(fg, field);
  const Raster cov = geometry::coverage(field);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < cov.size(); ++i) {
    if (cov.data()[i] < 0.5f) continue;
    for (int ch = 0; ch < c; ++ch) {
      sum += std::abs(double(warped.data()[i * c + ch]) - double(edited.data()[i * c + ch]));
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

Preview preview(const EditInputs& inputs, const EditTransform& transform,
                const std::optional<geometry::CameraIntrinsics>& intrinsics) {
  require_inputs(inputs);
  transform.validate();
  const Raster m_obj = mask::threshold(inputs.mask);
  const EditTransform resolved = resolve_transform(transform, m_obj, inputs.depth, intrinsics);
  const EditField field = object_field(resolved, m_obj, inputs.depth, intrinsics);
  const geometry::MaskSet masks = geometry::mask_algebra(m_obj, field);
  return {naive_warp_baseline(inputs.image, m_obj, field), masks.obj_t, masks.disocc};
}

Raster AttentionDump::heatmap() const {
  std::vector<float> px(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) px[i] = values[i] / 255.0f;
  return Raster(rows, cols, 1, std::move(px));
}

// ---------------------------------------------------------------------------
// Edit rollout

EditResult run_edit(const diffnet::Denoiser& model, const EditInputs& inputs, const EditConfig& config,
                    const Inversion* inversion, const Progress& progress) {
  const auto start = std::chrono::steady_clock::now();
  config.validate();
  require_inputs(inputs);
  const int size = model.config().latent_size;
  const int h = inputs.image.height();
  const int w = inputs.image.width();
  if (h % size || w % size) throw ValidationError("image sides must be multiples of " + std::to_string(size));

  const Raster m_obj = mask::threshold(inputs.mask);
  if (config.transform.kind != TransformKind::identity && !mask::any(m_obj)) {
    throw ValidationError("object mask is empty");
  }
  const bool removal = config.transform.kind == TransformKind::remove;

  EditResult result;
  result.transform = resolve_transform(config.transform, m_obj, inputs.depth, config.intrinsics);
  const EditField field = object_field(result.transform, m_obj, inputs.depth, config.intrinsics);
  const geometry::SplatOptions splat_opts{config.splat_bilinear};

  Inversion local;
  if (!inversion) {
    local = invert_image(model, inputs.image, config.steps, config.cfg_scale);
    inversion = &local;
  }
  const sampler::Trajectory& traj = inversion->trajectory;
  if (traj.steps() != config.steps) {
    throw ValidationError("config asks for " + std::to_string(config.steps) + " steps but the inversion has " +
                          std::to_string(traj.steps()));
  }
  if (traj.height != size || traj.width != size) throw ValidationError("inversion grid does not match the model");

  guidance::SharedAttentionConfig sharing;
  sharing.share_until_step = config.share_until_step;
  sharing.blocks = config.shared_blocks;
  sharing.pyramid = guidance::build_pyramid(m_obj, field, model.attention_sites(size, size), splat_opts);

  const losses::OptimSchedule schedule{config.optimize_first_n, config.lr_initial, config.lr_final};
  losses::LossWeights weights = config.weights;
  losses::EditState state{traj.latents.back(), model.null_text()};
  Mat z_ref = traj.latents.back();

  for (int n = 1; n <= config.steps; ++n) {
    const std::size_t first_record = result.loss_curves.size();
    const sampler::ReferenceStep ref = sampler::reference_step(model, traj, n);
    z_ref = ref.latent;
    losses::StepSetup setup;
    setup.model = &model;
    setup.step = n;
    setup.t = traj.timestep_at_step(n);
    setup.t_prev = traj.previous_timestep_at_step(n);
    setup.height = size;
    setup.width = size;
    if (config.sharing) {
      setup.captures = &ref.captures;
      setup.sharing = &sharing;
      if (config.edit_reinjection) setup.correction = &ref.correction;
    }

    std::vector<guidance::BlockGuidance> records;
    std::optional<double> lr;
    if (config.optimize && schedule.optimizes(n)) {
      lr = schedule.lr(n);
      const double w_used = weights.w_remove;
      losses::OptimizeResult r = losses::optimize_step(setup, state, weights, *lr, config.inner_iterations, removal,
                                                       config.removal);
      auto emit = [&](const char* term, double v) { result.loss_curves.push_back({n, term, v, w_used, lr}); };
      emit("bg", r.loss.bg);
      if (!removal) emit("obj", r.loss.obj);
      emit("smooth", r.loss.smooth);
      if (r.loss.remove) emit("remove", *r.loss.remove);
      emit("total", r.loss.total.item());
      state.latent = std::move(r.next_latent);
      records = std::move(r.records);
    } else {
      state.latent = losses::edit_step(setup, state, config.sharing ? &records : nullptr);
    }
    const auto shared = std::count_if(records.begin(), records.end(), [](const auto& g) { return g.shared; });
    result.loss_curves.push_back({n, "shared_blocks", static_cast<double>(shared), weights.w_remove, lr});

    if (config.diagnostics) {
      for (const auto& g : records) {
        const Mat keys = g.site.kind == diffnet::AttentionKind::self ? g.k_r : g.k_e.value();
        result.attention[{n, g.site.block}] = quantize(diffnet::attention_map(g.q_e.value(), keys));
      }
      if (!config.sharing) {
        for (const auto& cap : ref.captures) result.attention[{n, cap.site.block}] = quantize(cap.map);
      }
    }
    if (progress) {
      progress(n, config.steps, std::span<const losses::LossRecord>(result.loss_curves).subspan(first_record));
    }
  }

  result.latent = state.latent;
  const Raster decoded = diffnet::decode_latent(state.latent, size, h, w);
  result.reconstruction = diffnet::decode_latent(z_ref, size, h, w);
  Raster edited = decoded;
  if (config.detail_transfer) {
    Raster residual = inputs.image;
    for (std::size_t i = 0; i < residual.size(); ++i) residual.data()[i] -= result.reconstruction.data()[i];
    Raster obj_residual = residual;
    for (std::size_t i = 0; i < m_obj.size(); ++i) {
      if (m_obj.data()[i] < 0.5f) {
        for (int c = 0; c < 3; ++c) obj_residual.data()[i * 3 + c] = 0.0f;
      }
    }
    const Raster moved = geometry::splat(obj_residual, field);
    const Raster cov = geometry::coverage(field);
    for (std::size_t i = 0; i < m_obj.size(); ++i) {
      const bool keep = m_obj.data()[i] < 0.5f && cov.data()[i] < 0.5f;
      // Background detail fades out where the edit changed the decoded content.
      float change = 0.0f;
      for (int c = 0; c < 3; ++c) {
        change = std::max(change, std::abs(decoded.data()[i * 3 + c] - result.reconstruction.data()[i * 3 + c]));
      }
      const float gate = std::clamp(1.0f - change / kDetailChange, 0.0f, 1.0f);
      for (int c = 0; c < 3; ++c) {
        const std::size_t k = i * 3 + c;
        edited.data()[k] += keep ? gate * residual.data()[k] : moved.data()[k];
      }
    }
  }
  result.edited = clamp01(std::move(edited));
  result.baseline = naive_warp_baseline(inputs.image, m_obj, field);
  if (!removal) result.warp_error = warp_error(inputs.image, result.edited, m_obj, field);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace geodiff::pipeline
