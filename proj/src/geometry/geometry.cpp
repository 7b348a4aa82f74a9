#include "geodiff/geometry.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "geodiff/error.hpp"

namespace geodiff::geometry {

namespace {

constexpr double kBoundsSlack = 1e-9;

void require_mask_grid(const Raster* m, int height, int width) {
  if (m == nullptr) return;
  if (m->height() != height || m->width() != width || m->channels() != 1) {
    throw ValidationError("source mask must be a single-channel raster on the field grid");
  }
}

bool is_source(const Raster* m, int y, int x) { return m == nullptr || m->at(y, x) >= 0.5f; }

int nearest(double v) { return static_cast<int>(std::floor(v + 0.5)); }

struct Factor {
  int fy;
  int fx;
  bool down;
};

Factor integer_factor(int src_h, int src_w, int h, int w) {
  if (h < 1 || w < 1) throw ValidationError("resample target size must be >= 1");
  if (src_h % h == 0 && src_w % w == 0 && src_h / h == src_w / w) {
    return {src_h / h, src_w / w, true};
  }
  if (h % src_h == 0 && w % src_w == 0 && h / src_h == w / src_w) {
    return {h / src_h, w / src_w, false};
  }
  throw ValidationError("resample needs an integer scale factor shared by both axes");
}

}  // namespace

CameraIntrinsics CameraIntrinsics::default_for(int height, int width) {
  const double f = std::max(height, width);
  return {f, f, (width - 1) / 2.0, (height - 1) / 2.0};
}

Eigen::Matrix3d CameraIntrinsics::matrix() const {
  Eigen::Matrix3d k;
  k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
  return k;
}

void CameraIntrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0) || !std::isfinite(fx) || !std::isfinite(fy) || !std::isfinite(cx) ||
      !std::isfinite(cy)) {
    throw ValidationError("intrinsics must have finite fx, fy > 0");
  }
}

EditTransform EditTransform::identity() { return {}; }

EditTransform EditTransform::translate(double dx, double dy) {
  EditTransform t;
  t.kind = TransformKind::translate2d;
  t.offset = {dx, dy};
  return t;
}

EditTransform EditTransform::scale(double sx, double sy, double px, double py) {
  EditTransform t;
  t.kind = TransformKind::scale2d;
  t.scale2 = {sx, sy};
  t.pivot2 = {px, py};
  return t;
}

EditTransform EditTransform::rigid(const Eigen::Matrix3d& r, const Eigen::Vector3d& tr) {
  EditTransform t;
  t.kind = TransformKind::rigid3d;
  t.rotation = r;
  t.translation = tr;
  return t;
}

EditTransform EditTransform::remove() {
  EditTransform t;
  t.kind = TransformKind::remove;
  return t;
}

void EditTransform::validate() const {
  if (!rotation.allFinite() || !translation.allFinite() || !offset.allFinite() || !pivot2.allFinite() ||
      !pivot3.allFinite()) {
    throw ValidationError("transform parameters must be finite");
  }
  if ((rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-6 ||
      std::abs(rotation.determinant() - 1.0) > 1e-6) {
    throw ValidationError("rotation must be orthonormal with determinant +1");
  }
  if (!(scale2.array() > 0.0).all() || !(scale3.array() > 0.0).all()) {
    throw ValidationError("scale factors must be > 0");
  }
  if (depth_source.kind == DepthSourceKind::constant && !(depth_source.constant_m > 0.0)) {
    throw ValidationError("constant depth must be > 0");
  }
}

Eigen::Vector3d EditTransform::apply3d(const Eigen::Vector3d& p) const {
  switch (kind) {
    case TransformKind::rigid3d:
      return rotation * (p - pivot3) + pivot3 + translation;
    case TransformKind::scale3d:
      return scale3.cwiseProduct(p - pivot3) + pivot3;
    default:
      return p;
  }
}

std::string to_string(TransformKind kind) {
  switch (kind) {
    case TransformKind::identity: return "identity";
    case TransformKind::translate2d: return "translate2d";
    case TransformKind::scale2d: return "scale2d";
    case TransformKind::rigid3d: return "rigid3d";
    case TransformKind::scale3d: return "scale3d";
    case TransformKind::remove: return "remove";
  }
  return "identity";
}

TransformKind transform_kind_from_string(const std::string& s) {
  if (s == "identity") return TransformKind::identity;
  if (s == "translate2d" || s == "translate") return TransformKind::translate2d;
  if (s == "scale2d" || s == "scale") return TransformKind::scale2d;
  if (s == "rigid3d" || s == "rotate3d" || s == "translate3d") return TransformKind::rigid3d;
  if (s == "scale3d") return TransformKind::scale3d;
  if (s == "remove") return TransformKind::remove;
  throw ValidationError("unknown transform kind '" + s + "'");
}

std::size_t EditField::valid_count() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), 1));
}

EditField identity_field(int height, int width) {
  if (height < 1 || width < 1) throw ValidationError("field size must be >= 1");
  EditField f;
  f.height = height;
  f.width = width;
  f.target.resize(static_cast<std::size_t>(height) * width);
  f.valid.assign(f.target.size(), 1);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) f.target[f.index(y, x)] = {double(x), double(y)};
  }
  return f;
}

void resolve_collisions(EditField& field) {
  const std::size_t n = field.target.size();
  std::vector<std::ptrdiff_t> owner(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    if (!field.valid[i]) continue;
    const Eigen::Vector2d& t = field.target[i];
    if (!(t.x() >= -kBoundsSlack && t.x() <= field.width - 1 + kBoundsSlack && t.y() >= -kBoundsSlack &&
          t.y() <= field.height - 1 + kBoundsSlack)) {
      field.valid[i] = 0;
      continue;
    }
    const std::size_t dest = field.index(nearest(t.y()), nearest(t.x()));
    const std::ptrdiff_t prev = owner[dest];
    if (prev >= 0) {
      // Row-major scan: later sources win ties, nearer depth wins otherwise.
      if (field.has_depth() && field.depth[static_cast<std::size_t>(prev)] < field.depth[i]) {
        field.valid[i] = 0;
        continue;
      }
      field.valid[static_cast<std::size_t>(prev)] = 0;
    }
    owner[dest] = static_cast<std::ptrdiff_t>(i);
  }
}

EditField build_field_2d(const EditTransform& transform, int height, int width, const Raster* source_mask) {
  if (transform.is_3d()) throw ValidationError("build_field_2d does not accept 3D transform kinds");
  transform.validate();
  require_mask_grid(source_mask, height, width);
  EditField f = identity_field(height, width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const std::size_t i = f.index(y, x);
      const Eigen::Vector2d u(x, y);
      switch (transform.kind) {
        case TransformKind::translate2d:
          f.target[i] = u + transform.offset;
          break;
        case TransformKind::scale2d:
          f.target[i] = transform.pivot2 + transform.scale2.cwiseProduct(u - transform.pivot2);
          break;
        case TransformKind::remove:
          f.valid[i] = 0;
          break;
        default:
          break;
      }
      if (!is_source(source_mask, y, x)) f.valid[i] = 0;
    }
  }
  resolve_collisions(f);
  return f;
}

EditField build_field_3d(const EditTransform& transform, const Raster& depth, const CameraIntrinsics& intrinsics,
                         const Raster* source_mask) {
  if (transform.is_2d()) throw ValidationError("build_field_3d does not accept 2D transform kinds");
  transform.validate();
  intrinsics.validate();
  if (depth.channels() != 1) throw ValidationError("depth must have one channel");
  require_mask_grid(source_mask, depth.height(), depth.width());
  const Eigen::Matrix3d k = intrinsics.matrix();
  Eigen::FullPivLU<Eigen::Matrix3d> lu(k);
  if (!lu.isInvertible()) throw ValidationError("intrinsics matrix is singular");
  const Eigen::Matrix3d k_inv = lu.inverse();

  EditField f = identity_field(depth.height(), depth.width());
  f.depth.assign(f.target.size(), 0.0);
  for (int y = 0; y < depth.height(); ++y) {
    for (int x = 0; x < depth.width(); ++x) {
      const std::size_t i = f.index(y, x);
      const double d = depth.at(y, x);
      if (!(d > 0.0) || !std::isfinite(d)) throw ValidationError("depth must be finite and > 0");
      if (transform.kind == TransformKind::remove) {
        f.valid[i] = 0;
        continue;
      }
      const Eigen::Vector3d p = d * (k_inv * Eigen::Vector3d(x, y, 1.0));
      const Eigen::Vector3d q = transform.apply3d(p);
      f.depth[i] = q.z();
      if (q.z() <= 1e-9) {
        f.valid[i] = 0;
        continue;
      }
      const Eigen::Vector3d uv = k * q;
      f.target[i] = {uv.x() / uv.z(), uv.y() / uv.z()};
      if (!is_source(source_mask, y, x)) f.valid[i] = 0;
    }
  }
  resolve_collisions(f);
  return f;
}

EditField build_field(const EditTransform& transform, int height, int width, const Raster* depth,
                      const std::optional<CameraIntrinsics>& intrinsics, const Raster* source_mask) {
  if (!transform.is_3d()) return build_field_2d(transform, height, width, source_mask);
  if (depth == nullptr) throw ValidationError("3D transforms need a depth map");
  if (depth->height() != height || depth->width() != width) {
    throw ValidationError("depth map size differs from the image");
  }
  return build_field_3d(transform, *depth, intrinsics.value_or(CameraIntrinsics::default_for(height, width)),
                        source_mask);
}

Raster splat(const Raster& signal, const EditField& field, const SplatOptions& options) {
  if (signal.height() != field.height || signal.width() != field.width) {
    throw ValidationError("signal and field dimensions differ");
  }
  const int c = signal.channels();
  Raster out(field.height, field.width, c);
  if (!options.bilinear) {
    for (int y = 0; y < field.height; ++y) {
      for (int x = 0; x < field.width; ++x) {
        const std::size_t i = field.index(y, x);
        if (!field.valid[i]) continue;
        const auto src = signal.pixel(y, x);
        auto dst = out.pixel(nearest(field.target[i].y()), nearest(field.target[i].x()));
        std::copy(src.begin(), src.end(), dst.begin());
      }
    }
    return out;
  }
  std::vector<double> acc(out.size(), 0.0);
  std::vector<double> weight(field.target.size(), 0.0);
  for (int y = 0; y < field.height; ++y) {
    for (int x = 0; x < field.width; ++x) {
      const std::size_t i = field.index(y, x);
      if (!field.valid[i]) continue;
      const double tx = field.target[i].x();
      const double ty = field.target[i].y();
      const int x0 = static_cast<int>(std::floor(tx));
      const int y0 = static_cast<int>(std::floor(ty));
      const double ax = tx - x0;
      const double ay = ty - y0;
      for (int dy = 0; dy <= 1; ++dy) {
        for (int dx = 0; dx <= 1; ++dx) {
          const int xx = x0 + dx;
          const int yy = y0 + dy;
          if (xx < 0 || yy < 0 || xx >= field.width || yy >= field.height) continue;
          const double w = (dx ? ax : 1.0 - ax) * (dy ? ay : 1.0 - ay);
          if (w <= 0.0) continue;
          const std::size_t d = field.index(yy, xx);
          weight[d] += w;
          for (int ch = 0; ch < c; ++ch) acc[d * c + ch] += w * signal.at(y, x, ch);
        }
      }
    }
  }
  for (std::size_t d = 0; d < weight.size(); ++d) {
    const double norm = std::max(weight[d], 1.0);
    for (int ch = 0; ch < c; ++ch) out.data()[d * c + ch] = static_cast<float>(acc[d * c + ch] / norm);
  }
  return out;
}

Raster coverage(const EditField& field, const SplatOptions& options) {
  Raster ones(field.height, field.width, 1, 1.0f);
  return splat(ones, field, options);
}

TransformedMask transform_mask(const Raster& mask, const EditField& field, const SplatOptions& options) {
  if (mask.channels() != 1) throw ValidationError("mask must have one channel");
  Raster raw = splat(mask, field, options);
  for (float& v : raw.data()) v = std::clamp(v, 0.0f, 1.0f);
  const Raster hard_open = mask::threshold(raw);
  TransformedMask out{mask::close3x3(hard_open), raw};
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (out.hard.data()[i] >= 0.5f && hard_open.data()[i] < 0.5f) out.soft.data()[i] = 1.0f;
  }
  return out;
}

MaskSet mask_algebra(const Raster& m_obj, const EditField& field, const SplatOptions& options) {
  if (m_obj.height() != field.height || m_obj.width() != field.width) {
    throw ValidationError("mask and field dimensions differ");
  }
  MaskSet s;
  s.obj = mask::threshold(m_obj);
  TransformedMask t = transform_mask(s.obj, field, options);
  s.obj_t = std::move(t.hard);
  s.obj_t_soft = std::move(t.soft);
  s.disocc = mask::logical_and(s.obj, mask::logical_not(s.obj_t));
  s.ne = mask::logical_not(mask::logical_or(s.obj, s.obj_t));
  s.bg = mask::logical_not(s.obj);
  return s;
}

Raster resample_signal(const Raster& signal, int height, int width) {
  const Factor f = integer_factor(signal.height(), signal.width(), height, width);
  const int c = signal.channels();
  Raster out(height, width, c);
  if (f.down) {
    const double inv = 1.0 / (f.fy * f.fx);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        for (int ch = 0; ch < c; ++ch) {
          double acc = 0.0;
          for (int oy = 0; oy < f.fy; ++oy) {
            for (int ox = 0; ox < f.fx; ++ox) acc += signal.at(y * f.fy + oy, x * f.fx + ox, ch);
          }
          out.at(y, x, ch) = static_cast<float>(acc * inv);
        }
      }
    }
  } else {
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        for (int ch = 0; ch < c; ++ch) out.at(y, x, ch) = signal.at(y / f.fy, x / f.fx, ch);
      }
    }
  }
  return out;
}

Raster resample_mask(const Raster& m, int height, int width) {
  if (m.channels() != 1) throw ValidationError("mask must have one channel");
  return mask::threshold(resample_signal(m, height, width));
}

Raster resize_bilinear(const Raster& signal, int height, int width) {
  if (height < 1 || width < 1) throw ValidationError("resize target size must be >= 1");
  if (height == signal.height() && width == signal.width()) return signal;
  const int c = signal.channels();
  Raster out(height, width, c);
  const double sy = double(signal.height()) / height;
  const double sx = double(signal.width()) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(signal.height() - 1));
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, signal.height() - 1);
    const double ay = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(signal.width() - 1));
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, signal.width() - 1);
      const double ax = fx - x0;
      for (int ch = 0; ch < c; ++ch) {
        const double top = (1 - ax) * signal.at(y0, x0, ch) + ax * signal.at(y0, x1, ch);
        const double bot = (1 - ax) * signal.at(y1, x0, ch) + ax * signal.at(y1, x1, ch);
        out.at(y, x, ch) = static_cast<float>((1 - ay) * top + ay * bot);
      }
    }
  }
  return out;
}

EditField resample_field(const EditField& field, int height, int width) {
  const Factor f = integer_factor(field.height, field.width, height, width);
  EditField out = identity_field(height, width);
  if (field.has_depth()) out.depth.assign(out.target.size(), 0.0);
  if (f.down) {
    // Fine pixel centers of block (X, Y) sit at f*X + (f-1)/2.
    const double ox = (f.fx - 1) / 2.0;
    const double oy = (f.fy - 1) / 2.0;
    const int block = f.fx * f.fy;
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        Eigen::Vector2d sum = Eigen::Vector2d::Zero();
        double depth_sum = 0.0;
        int n = 0;
        for (int by = 0; by < f.fy; ++by) {
          for (int bx = 0; bx < f.fx; ++bx) {
            const std::size_t i = field.index(y * f.fy + by, x * f.fx + bx);
            if (!field.valid[i]) continue;
            sum += field.target[i];
            if (field.has_depth()) depth_sum += field.depth[i];
            ++n;
          }
        }
        const std::size_t o = out.index(y, x);
        if (2 * n < block || n == 0) {
          out.valid[o] = 0;
          continue;
        }
        const Eigen::Vector2d mean = sum / n;
        out.target[o] = {(mean.x() - ox) / f.fx, (mean.y() - oy) / f.fy};
        if (field.has_depth()) out.depth[o] = depth_sum / n;
      }
    }
  } else {
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const std::size_t i = field.index(y / f.fy, x / f.fx);
        const std::size_t o = out.index(y, x);
        out.valid[o] = field.valid[i];
        out.target[o] = {field.target[i].x() * f.fx + x % f.fx, field.target[i].y() * f.fy + y % f.fy};
        if (field.has_depth()) out.depth[o] = field.depth[i];
      }
    }
  }
  resolve_collisions(out);
  return out;
}

std::optional<Eigen::Vector2d> centroid(const Raster& m) {
  if (m.channels() != 1) throw ValidationError("mask must have one channel");
  Eigen::Vector2d sum = Eigen::Vector2d::Zero();
  std::size_t n = 0;
  for (int y = 0; y < m.height(); ++y) {
    for (int x = 0; x < m.width(); ++x) {
      if (m.at(y, x) >= 0.5f) {
        sum += Eigen::Vector2d(x, y);
        ++n;
      }
    }
  }
  if (n == 0) return std::nullopt;
  return sum / double(n);
}

}  // namespace geodiff::geometry
