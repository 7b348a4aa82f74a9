#pragma once

// Small deterministic setups shared by the unit and acceptance tests.

#include <vector>

#include "geodiff/geometry.hpp"
#include "geodiff/guidance.hpp"
#include "geodiff/losses.hpp"
#include "geodiff/sampler.hpp"

namespace fixture {

using geodiff::ad::Mat;
using geodiff::ad::Var;
namespace diffnet = geodiff::diffnet;
namespace geo = geodiff::geometry;
namespace guidance = geodiff::guidance;
namespace losses = geodiff::losses;
namespace sampler = geodiff::sampler;

inline diffnet::ModelConfig tiny_config() {
  diffnet::ModelConfig c;
  c.latent_size = 4;
  c.base_channels = 8;
  c.deep_channels = 8;
  c.attn_dim = 4;
  c.text_tokens = 2;
  c.text_dim = 4;
  c.time_dim = 8;
  return c;
}

inline diffnet::Denoiser tiny_model(std::uint64_t seed = 5) { return diffnet::Denoiser::random(tiny_config(), seed); }

/// One shared step of a 4x4-latent edit: a 2x2 object translated by one token.
struct TinyEdit {
  diffnet::Denoiser model = tiny_model();
  sampler::Trajectory trajectory;
  sampler::ReferenceStep reference;
  guidance::SharedAttentionConfig sharing;
  losses::StepSetup setup;
  losses::EditState state;

  explicit TinyEdit(std::uint64_t seed, geo::EditTransform transform = geo::EditTransform::translate(1, 0),
                    std::vector<int> blocks = {0}) {
    const Mat z0 = diffnet::gaussian(16, 4, seed) * 0.5;
    trajectory = sampler::invert(model, z0, 4, 4, model.null_text(), 10);
    reference = sampler::reference_step(model, trajectory, 1);
    geodiff::Raster m(4, 4, 1);
    m.at(1, 1) = m.at(1, 2) = m.at(2, 1) = m.at(2, 2) = 1.0f;
    const geo::EditField f = geo::build_field_2d(transform, 4, 4, &m);
    sharing.blocks = std::move(blocks);
    sharing.pyramid = guidance::build_pyramid(m, f, model.attention_sites(4, 4));
    setup.model = &model;
    setup.step = 1;
    setup.t = trajectory.timestep_at_step(1);
    setup.t_prev = trajectory.previous_timestep_at_step(1);
    setup.height = 4;
    setup.width = 4;
    setup.captures = &reference.captures;
    setup.sharing = &sharing;
    setup.correction = &reference.correction;
    // Perturb the edit branch so no term is trivially zero.
    state.latent = trajectory.latent_before_step(1) + diffnet::gaussian(16, 4, seed + 100) * 0.3;
    state.text = model.null_text() + diffnet::gaussian(2, 4, seed + 200) * 0.3;
  }

  TinyEdit(const TinyEdit&) = delete;

  losses::LossBreakdown loss(const Var& z, const Var& text, const losses::LossWeights& w, bool removal) const {
    std::vector<guidance::BlockGuidance> records;
    const diffnet::AttentionHook hook = guidance::shared_attention_hook(1, reference.captures, sharing, records);
    model.eps(z, 4, 4, setup.t, text, &hook, 1);
    return losses::total_loss(records, sharing, w, removal);
  }
};

/// Weights that keep a single term.
inline losses::LossWeights only(const char* term) {
  losses::LossWeights w;
  w.w_bg = w.w_obj = w.w_smooth = w.w_remove = 0.0;
  const std::string t = term;
  if (t == "bg") w.w_bg = 1.0;
  if (t == "obj") w.w_obj = 1.0;
  if (t == "smooth") w.w_smooth = 1.0;
  if (t == "remove") w.w_remove = 1.0;
  return w;
}

}  // namespace fixture
