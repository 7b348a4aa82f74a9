// geodiff command line: invert, edit, preview, metric warp-error, serve.
#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "geodiff/error.hpp"
#include "geodiff/io.hpp"
#include "geodiff/pipeline.hpp"
#include "geodiff/service.hpp"

// After Eigen: <resolv.h> defines _res.
#include <httplib.h>

using namespace geodiff;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct TransformFlags {
  std::string kind;
  double dx = 0.0;
  double dy = 0.0;
  std::vector<double> scale;
  double angle = 0.0;
  std::string axis = "z";
  std::vector<double> translation;
  std::vector<double> pivot;
  std::string depth;

  void add(CLI::App& app) {
    app.add_option("--kind", kind,
                   "identity, translate2d, scale2d, rigid3d, rotate3d, translate3d, scale3d or remove");
    app.add_option("--dx", dx, "2D offset along x in pixels");
    app.add_option("--dy", dy, "2D offset along y in pixels");
    app.add_option("--scale", scale, "Scale factors (2 for scale2d, 3 for scale3d)")->delimiter(',');
    app.add_option("--angle", angle, "Rotation angle in degrees");
    app.add_option("--axis", axis, "Rotation axis: x, y, z or ax,ay,az");
    app.add_option("--translation", translation, "3D translation tx,ty,tz in meters")->delimiter(',');
    app.add_option("--pivot", pivot, "Pivot (2 or 3 values); defaults to the object centroid")->delimiter(',');
    app.add_option("--depth", depth, "const:<meters> or a PFM depth map path");
  }
};

json axis_json(const std::string& axis) {
  if (axis == "x") return {1, 0, 0};
  if (axis == "y") return {0, 1, 0};
  if (axis == "z") return {0, 0, 1};
  std::vector<double> v;
  std::stringstream ss(axis);
  for (std::string part; std::getline(ss, part, ',');) v.push_back(std::stod(part));
  if (v.size() != 3) throw ValidationError("--axis needs x, y, z or three comma-separated values");
  return v;
}

json depth_json(const std::string& depth) {
  if (depth.rfind("const:", 0) == 0) return {{"kind", "constant"}, {"value", std::stod(depth.substr(6))}};
  return {{"kind", "file"}, {"path", depth}};
}

/// Flags override the config transform when --kind is given.
geometry::EditTransform transform_from_flags(const TransformFlags& f, const geometry::EditTransform& fallback) {
  if (f.kind.empty()) {
    if (f.depth.empty()) return fallback;
    json j = io::transform_to_json(fallback);
    j["depth_source"] = depth_json(f.depth);
    return io::transform_from_json(j);
  }
  const auto kind = geometry::transform_kind_from_string(f.kind);
  json params = json::object();
  switch (kind) {
    case geometry::TransformKind::translate2d:
      params["offset"] = {f.dx, f.dy};
      break;
    case geometry::TransformKind::scale2d:
      if (f.scale.size() == 1) params["scale"] = {f.scale[0], f.scale[0]};
      else if (f.scale.size() == 2) params["scale"] = f.scale;
      else throw ValidationError("scale2d needs --scale s or --scale sx,sy");
      if (!f.pivot.empty()) params["pivot"] = f.pivot;
      break;
    case geometry::TransformKind::rigid3d:
      params["axis"] = axis_json(f.axis);
      params["angle_deg"] = f.angle;
      params["translation"] = f.translation.empty() ? std::vector<double>{0, 0, 0} : f.translation;
      if (!f.pivot.empty()) params["pivot"] = f.pivot;
      break;
    case geometry::TransformKind::scale3d:
      if (f.scale.size() == 1) params["scale"] = {f.scale[0], f.scale[0], f.scale[0]};
      else if (f.scale.size() == 3) params["scale"] = f.scale;
      else throw ValidationError("scale3d needs --scale s or --scale sx,sy,sz");
      if (!f.pivot.empty()) params["pivot"] = f.pivot;
      break;
    default:
      break;
  }
  json j = {{"kind", geometry::to_string(kind)}, {"params", params}};
  if (!f.depth.empty()) j["depth_source"] = depth_json(f.depth);
  return io::transform_from_json(j);
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

diffnet::Denoiser load_model(const std::string& flag, std::uint64_t seed) {
  std::string path = flag;
  if (path.empty()) {
    if (const char* env = std::getenv("GEODIFF_CHECKPOINT")) path = env;
  }
  if (path.empty()) {
    std::cerr << "geodiff: no checkpoint given, using seeded random weights (seed " << seed << ")\n";
    return diffnet::Denoiser::random(diffnet::ModelConfig{}, seed);
  }
  if (!fs::exists(path)) throw ValidationError("checkpoint not found: " + path);
  return diffnet::Denoiser::load(path);
}

pipeline::EditInputs load_inputs(const std::string& image, const std::string& mask,
                                 const geometry::EditTransform& transform) {
  pipeline::EditInputs in;
  in.image = io::read_png(image);
  in.mask = mask.empty() ? Raster(in.image.height(), in.image.width(), 1) : io::read_mask_png(mask);
  if (transform.depth_source.kind == geometry::DepthSourceKind::file) {
    in.depth = io::read_pfm(transform.depth_source.path);
  }
  return in;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path);
  out << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Geometry-aware diffusion image editing"};
  app.require_subcommand(1);
  std::string checkpoint;
  app.add_option("--checkpoint", checkpoint, "Denoiser checkpoint (default: $GEODIFF_CHECKPOINT)");

  // invert
  auto* invert = app.add_subcommand("invert", "Invert an image into a DDIM noise trajectory");
  std::string inv_image, inv_out;
  int inv_steps = 50;
  invert->add_option("--image", inv_image, "Input PNG")->required();
  invert->add_option("--steps", inv_steps, "DDIM steps");
  invert->add_option("-o,--out", inv_out, "Trajectory file")->required();

  // edit
  auto* edit = app.add_subcommand("edit", "Run a geometric edit");
  std::string ed_image, ed_mask, ed_config, ed_traj, ed_out, ed_report, ed_baseline, ed_attention;
  TransformFlags ed_flags;
  edit->add_option("--image", ed_image, "Input PNG")->required();
  edit->add_option("--mask", ed_mask, "Object mask PNG (nonzero = object)");
  edit->add_option("--config", ed_config, "Edit config JSON");
  edit->add_option("--trajectory", ed_traj, "Trajectory from `geodiff invert`");
  edit->add_option("-o,--out", ed_out, "Edited PNG")->required();
  edit->add_option("--report", ed_report, "JSON report (warp error, loss curves, timing)");
  edit->add_option("--baseline", ed_baseline, "Naive-warp baseline PNG");
  edit->add_option("--attention-dir", ed_attention, "Write attention heatmaps (enables diagnostics)");
  ed_flags.add(*edit);

  // preview
  auto* prev = app.add_subcommand("preview", "Geometry-only preview: warp overlay and masks");
  std::string pv_image, pv_mask, pv_config, pv_dir;
  TransformFlags pv_flags;
  prev->add_option("--image", pv_image, "Input PNG")->required();
  prev->add_option("--mask", pv_mask, "Object mask PNG")->required();
  prev->add_option("--config", pv_config, "Edit config JSON (for its transform)");
  prev->add_option("--out-dir", pv_dir, "Output directory")->required();
  pv_flags.add(*prev);

  // metric warp-error
  auto* metric = app.add_subcommand("metric", "Evaluation metrics");
  metric->require_subcommand(1);
  auto* werr = metric->add_subcommand("warp-error", "Warp Error of an edited image");
  std::string we_input, we_edited, we_mask, we_config;
  TransformFlags we_flags;
  werr->add_option("--input", we_input, "Input PNG")->required();
  werr->add_option("--edited", we_edited, "Edited PNG")->required();
  werr->add_option("--mask", we_mask, "Object mask PNG")->required();
  werr->add_option("--config", we_config, "Edit config JSON (for its transform)");
  we_flags.add(*werr);

  // serve
  auto* serve = app.add_subcommand("serve", "HTTP service for the editing UI");
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t workers = 2;
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port");
  serve->add_option("--workers", workers, "Worker threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*invert) {
      const auto model = load_model(checkpoint, 0);
      const auto inv = pipeline::invert_image(model, io::read_png(inv_image), inv_steps);
      inv.trajectory.save(inv_out);
      std::cout << json{{"trajectory", inv_out}, {"steps", inv.trajectory.steps()}}.dump() << "\n";
    } else if (*edit) {
      pipeline::EditConfig config = ed_config.empty() ? pipeline::EditConfig{} : pipeline::EditConfig::from_json(read_json(ed_config));
      config.transform = transform_from_flags(ed_flags, config.transform);
      if (!ed_attention.empty()) config.diagnostics = true;
      config.validate();
      const auto model = load_model(checkpoint, config.seed);
      const auto inputs = load_inputs(ed_image, ed_mask, config.transform);
      std::optional<pipeline::Inversion> inv;
      if (!ed_traj.empty()) {
        inv.emplace();
        inv->trajectory = sampler::Trajectory::load(ed_traj);
        inv->latent = inv->trajectory.latents.front();
      }
      const auto result = pipeline::run_edit(model, inputs, config, inv ? &*inv : nullptr);
      io::write_png(ed_out, result.edited);
      if (!ed_baseline.empty()) io::write_png(ed_baseline, result.baseline);
      if (!ed_attention.empty()) {
        fs::create_directories(ed_attention);
        for (const auto& [key, dump] : result.attention) {
          io::write_png(fs::path(ed_attention) /
                            ("step" + std::to_string(key.first) + "_block" + std::to_string(key.second) + ".png"),
                        dump.heatmap());
        }
      }
      json curves = json::array();
      for (const auto& r : result.loss_curves) curves.push_back(r.to_json());
      const json report = {{"warp_error", result.warp_error ? json(*result.warp_error) : json(nullptr)},
                           {"seconds", result.seconds},
                           {"transform", io::transform_to_json(result.transform)},
                           {"loss_curves", curves}};
      if (!ed_report.empty()) write_text(ed_report, report.dump(2));
      std::cout << json{{"edited", ed_out}, {"warp_error", report["warp_error"]}, {"seconds", result.seconds}}.dump()
                << "\n";
    } else if (*prev) {
      pipeline::EditConfig config = pv_config.empty() ? pipeline::EditConfig{} : pipeline::EditConfig::from_json(read_json(pv_config));
      const auto transform = transform_from_flags(pv_flags, config.transform);
      const auto inputs = load_inputs(pv_image, pv_mask, transform);
      const auto p = pipeline::preview(inputs, transform, config.intrinsics);
      fs::create_directories(pv_dir);
      io::write_png(fs::path(pv_dir) / "warp_overlay.png", p.overlay);
      io::write_png(fs::path(pv_dir) / "m_obj_t.png", p.m_obj_t);
      io::write_png(fs::path(pv_dir) / "m_disocc.png", p.m_disocc);
      std::cout << json{{"out_dir", pv_dir}}.dump() << "\n";
    } else if (*werr) {
      pipeline::EditConfig config = we_config.empty() ? pipeline::EditConfig{} : pipeline::EditConfig::from_json(read_json(we_config));
      const auto transform = transform_from_flags(we_flags, config.transform);
      const auto inputs = load_inputs(we_input, we_mask, transform);
      const Raster edited = io::read_png(we_edited);
      const Raster m_obj = mask::threshold(inputs.mask);
      const auto resolved = pipeline::resolve_transform(transform, m_obj, inputs.depth, config.intrinsics);
      const auto field = pipeline::object_field(resolved, m_obj, inputs.depth, config.intrinsics);
      const auto v = pipeline::warp_error(inputs.image, edited, m_obj, field);
      std::cout << json{{"warp_error", v ? json(*v) : json(nullptr)}}.dump() << "\n";
    } else if (*serve) {
      auto model = std::make_shared<const diffnet::Denoiser>(load_model(checkpoint, 0));
      service::Service svc(model, {workers, 50});
      httplib::Server server;
      service::register_routes(server, svc);
      std::cerr << "geodiff: serving on http://" << host << ":" << port << "\n";
      if (!server.listen(host, port)) throw RuntimeFailure("cannot listen on " + host + ":" + std::to_string(port));
    }
  } catch (const ValidationError& e) {
    std::cerr << "geodiff: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "geodiff: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
