#pragma once

#include <Eigen/Core>
#include <optional>
#include <string>
#include <vector>

#include "geodiff/raster.hpp"

namespace geodiff::geometry {

/// Pinhole intrinsics in pixel units. Pixel centers sit at integer coordinates.
struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;

  /// fx = fy = max(H, W), principal point at the grid center.
  static CameraIntrinsics default_for(int height, int width);

  Eigen::Matrix3d matrix() const;
  /// Throws ValidationError when fx or fy is not strictly positive.
  void validate() const;
};

enum class TransformKind { identity, translate2d, scale2d, rigid3d, scale3d, remove };

enum class DepthSourceKind { file, constant };

struct DepthSource {
  DepthSourceKind kind = DepthSourceKind::constant;
  double constant_m = 0.5;  // billboard depth
  std::string path;         // PFM file when kind == file
};

/// User transform applied to the segmented object.
///
/// 2D kinds act on pixel coordinates. 3D kinds act on camera-frame points:
/// rigid3d maps X to R (X - pivot) + pivot + t, scale3d maps X to
/// S (X - pivot) + pivot with S = diag(scale3).
struct EditTransform {
  TransformKind kind = TransformKind::identity;
  Eigen::Vector2d offset = Eigen::Vector2d::Zero();
  Eigen::Vector2d scale2 = Eigen::Vector2d::Ones();
  Eigen::Vector2d pivot2 = Eigen::Vector2d::Zero();
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  Eigen::Vector3d scale3 = Eigen::Vector3d::Ones();
  Eigen::Vector3d pivot3 = Eigen::Vector3d::Zero();
  /// Pivot left for the caller to fill with the object centroid.
  bool auto_pivot = false;
  DepthSource depth_source;

  static EditTransform identity();
  static EditTransform translate(double dx, double dy);
  static EditTransform scale(double sx, double sy, double px = 0.0, double py = 0.0);
  static EditTransform rigid(const Eigen::Matrix3d& r, const Eigen::Vector3d& t);
  static EditTransform remove();

  bool is_2d() const { return kind == TransformKind::translate2d || kind == TransformKind::scale2d; }
  bool is_3d() const { return kind == TransformKind::rigid3d || kind == TransformKind::scale3d; }
  /// Rotation orthonormal with det +1, scale factors > 0.
  void validate() const;
  /// Applies the 3D part to a camera-frame point.
  Eigen::Vector3d apply3d(const Eigen::Vector3d& p) const;
};

std::string to_string(TransformKind kind);
TransformKind transform_kind_from_string(const std::string& s);

/// Per-pixel target coordinates of the edit. Valid entries are in bounds and
/// are the sole surviving source for their (nearest) destination pixel.
struct EditField {
  int height = 0;
  int width = 0;
  std::vector<Eigen::Vector2d> target;
  std::vector<unsigned char> valid;
  /// Camera-frame depth after the transform (3D fields only); drives the z-buffer.
  std::vector<double> depth;

  std::size_t index(int y, int x) const { return static_cast<std::size_t>(y) * width + x; }
  bool has_depth() const { return !depth.empty(); }
  std::size_t valid_count() const;
};

struct SplatOptions {
  bool bilinear = false;
};

EditField identity_field(int height, int width);

/// Affine field for translate2d/scale2d (identity and remove are accepted too:
/// remove yields an all-invalid field). When `source_mask` is given only its
/// set pixels become sources.
EditField build_field_2d(const EditTransform& transform, int height, int width,
                         const Raster* source_mask = nullptr);

/// Back-project with D[u] P^-1 u, apply T, re-project with P.
EditField build_field_3d(const EditTransform& transform, const Raster& depth, const CameraIntrinsics& intrinsics,
                         const Raster* source_mask = nullptr);

/// Dispatches on the transform kind; 3D kinds need a depth raster.
EditField build_field(const EditTransform& transform, int height, int width, const Raster* depth,
                      const std::optional<CameraIntrinsics>& intrinsics, const Raster* source_mask = nullptr);

/// Rounds targets to destination pixels, drops out-of-bounds entries and keeps
/// one source per destination: nearest depth when depth exists, otherwise the
/// last source in row-major order.
void resolve_collisions(EditField& field);

/// Forward-warps `signal` to the field targets. Uncovered destinations are 0.
Raster splat(const Raster& signal, const EditField& field, const SplatOptions& options = {});

/// Which destination pixels receive at least one source.
Raster coverage(const EditField& field, const SplatOptions& options = {});

struct TransformedMask {
  Raster hard;  // thresholded at 0.5 then 3x3-closed
  Raster soft;  // splat values; closing fills the same holes with 1
};

TransformedMask transform_mask(const Raster& mask, const EditField& field, const SplatOptions& options = {});

struct MaskSet {
  Raster obj;         // m_obj (binary)
  Raster obj_t;       // transformed object mask (binary)
  Raster obj_t_soft;  // soft variant used for blending
  Raster disocc;      // m_obj AND NOT m_obj_t
  Raster ne;          // NOT (m_obj OR m_obj_t)
  Raster bg;          // NOT m_obj
};

MaskSet mask_algebra(const Raster& m_obj, const EditField& field, const SplatOptions& options = {});

/// Area-average (downsampling) or replication (upsampling) by an integer
/// factor, then threshold at 0.5. Use resample_signal for soft values.
Raster resample_mask(const Raster& mask, int height, int width);
Raster resample_signal(const Raster& signal, int height, int width);
/// Bilinear resampling of a signal to an arbitrary size (pixel-center aligned).
Raster resize_bilinear(const Raster& signal, int height, int width);

/// Rescales target coordinates proportionally to the new grid and re-resolves
/// collisions at the new resolution.
EditField resample_field(const EditField& field, int height, int width);

/// Mean coordinate (x, y) of set pixels; nullopt when the mask is empty.
std::optional<Eigen::Vector2d> centroid(const Raster& mask);

}  // namespace geodiff::geometry
