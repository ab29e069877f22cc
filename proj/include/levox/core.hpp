#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "levox/common.hpp"

namespace levox {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Quat = Eigen::Quaterniond;

inline constexpr double kUnitQuaternionTol = 1e-9;

/// Rotation matrix of a unit quaternion. The quaternion must already be
/// normalized; silent renormalization here would mask upstream bugs.
inline Mat3 quaternion_to_matrix(const Quat& q) {
  if (std::abs(q.norm() - 1.0) > kUnitQuaternionTol) {
    throw InvalidInputError("quaternion_to_matrix: quaternion is not unit norm (|q| = " +
                            std::to_string(q.norm()) + ")");
  }
  return q.toRotationMatrix();
}

/// Rigid camera-to-world transform.
struct Pose {
  Quat rotation{1.0, 0.0, 0.0, 0.0};  // (w, x, y, z)
  Vec3 translation{0.0, 0.0, 0.0};

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  static Pose identity() { return Pose{}; }
};

inline Pose compose_pose(const Pose& a, const Pose& b) {
  Pose out;
  out.rotation = (a.rotation * b.rotation).normalized();
  out.translation = a.rotation * b.translation + a.translation;
  return out;
}

inline Pose invert_pose(const Pose& a) {
  Pose out;
  out.rotation = a.rotation.conjugate().normalized();
  out.translation = -(out.rotation * a.translation);
  return out;
}

/// x' = s * R * x + t with s > 0.
struct SimilarityTransform {
  double scale = 1.0;
  Quat rotation{1.0, 0.0, 0.0, 0.0};
  Vec3 translation{0.0, 0.0, 0.0};

  Vec3 apply(const Vec3& p) const { return scale * (rotation * p) + translation; }

  static SimilarityTransform identity() { return SimilarityTransform{}; }

  SimilarityTransform inverse() const {
    SimilarityTransform out;
    out.scale = 1.0 / scale;
    out.rotation = rotation.conjugate().normalized();
    out.translation = -(out.rotation * translation) / scale;
    return out;
  }
};

inline Vec3 apply_similarity(const SimilarityTransform& t, const Vec3& p) { return t.apply(p); }

inline SimilarityTransform compose_similarity(const SimilarityTransform& a,
                                              const SimilarityTransform& b) {
  SimilarityTransform out;
  out.scale = a.scale * b.scale;
  out.rotation = (a.rotation * b.rotation).normalized();
  out.translation = a.scale * (a.rotation * b.translation) + a.translation;
  return out;
}

/// Pinhole camera; +z looks forward, +x right, +y down (image v grows down).
struct CameraIntrinsics {
  double fx = 0.0, fy = 0.0, cx = 0.0, cy = 0.0;
  int width = 0, height = 0;

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw InvalidInputError("CameraIntrinsics: focal lengths must be positive");
    if (!std::isfinite(cx) || !std::isfinite(cy)) throw InvalidInputError("CameraIntrinsics: principal point must be finite");
    if (width <= 0 || height <= 0) throw InvalidInputError("CameraIntrinsics: image size must be positive");
  }

  /// Camera-frame point of pixel (u, v) at depth z (z is the camera-frame
  /// z-coordinate, not the Euclidean range).
  Vec3 unproject(double u, double v, double z) const {
    return Vec3((u - cx) / fx * z, (v - cy) / fy * z, z);
  }

  /// Camera-frame ray direction with unit z-component.
  Vec3 pixel_ray(double u, double v) const { return Vec3((u - cx) / fx, (v - cy) / fy, 1.0); }

  /// Projects a camera-frame point; returns false when it lies at or behind
  /// the camera plane.
  bool project(const Vec3& pc, double& u, double& v) const {
    if (!(pc.z() > 0.0)) return false;
    u = fx * pc.x() / pc.z() + cx;
    v = fy * pc.y() / pc.z() + cy;
    return true;
  }

  bool contains_pixel(int u, int v) const { return u >= 0 && u < width && v >= 0 && v < height; }
};

/// Closed-form least-squares similarity (or rigid, when estimate_scale is
/// false) transform mapping src onto dst. SVD of the cross-covariance with a
/// sign-corrected diagonal keeps the rotation in SO(3) even for reflective
/// configurations. Requires >= 3 points spanning at least a plane.
inline SimilarityTransform umeyama_align(std::span<const Vec3> src, std::span<const Vec3> dst,
                                         bool estimate_scale) {
  if (src.size() != dst.size()) throw InvalidInputError("umeyama_align: point counts differ");
  const std::size_t n = src.size();
  if (n < 3) throw InsufficientCorrespondencesError("umeyama_align: need at least 3 correspondences, got " + std::to_string(n));

  Vec3 mu_src = Vec3::Zero(), mu_dst = Vec3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    mu_src += src[i];
    mu_dst += dst[i];
  }
  mu_src /= static_cast<double>(n);
  mu_dst /= static_cast<double>(n);

  Mat3 cov = Mat3::Zero();  // dst-side deviations times src-side deviations
  double var_src = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 ds = src[i] - mu_src;
    const Vec3 dd = dst[i] - mu_dst;
    cov += dd * ds.transpose();
    var_src += ds.squaredNorm();
  }
  cov /= static_cast<double>(n);
  var_src /= static_cast<double>(n);

  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  if (!(sv(0) > 0.0) || sv(1) <= sv(0) * 1e-9) {
    throw DegenerateConfigurationError(
        "umeyama_align: correspondences are collinear or coincident (rank-deficient covariance)");
  }

  Vec3 sign_fix = Vec3::Ones();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) sign_fix(2) = -1.0;

  const Mat3 r = svd.matrixU() * sign_fix.asDiagonal() * svd.matrixV().transpose();

  SimilarityTransform out;
  out.rotation = Quat(r).normalized();
  out.scale = 1.0;
  if (estimate_scale) {
    if (!(var_src > 0.0)) throw DegenerateConfigurationError("umeyama_align: source points are coincident");
    out.scale = sv.dot(sign_fix) / var_src;
    if (!(out.scale > 0.0)) throw DegenerateConfigurationError("umeyama_align: non-positive scale estimate");
  }
  out.translation = mu_dst - out.scale * (r * mu_src);
  return out;
}

struct TrajectoryEntry {
  double timestamp = 0.0;
  Pose pose;
};

using Trajectory = std::vector<TrajectoryEntry>;

/// Plain-text trajectory: one entry per line, `timestamp tx ty tz qx qy qz qw`,
/// '#' comment lines ignored. Quaternions are renormalized on load to absorb
/// formatting round-off.
inline Trajectory load_trajectory(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trajectory file: " + path);
  Trajectory out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::size_t start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos || line[start] == '#') continue;
    std::istringstream ls(line);
    double ts, tx, ty, tz, qx, qy, qz, qw;
    if (!(ls >> ts >> tx >> ty >> tz >> qx >> qy >> qz >> qw)) {
      throw IoError("malformed trajectory line " + std::to_string(line_no) + " in " + path);
    }
    TrajectoryEntry e;
    e.timestamp = ts;
    e.pose.translation = Vec3(tx, ty, tz);
    Quat q(qw, qx, qy, qz);
    if (q.norm() < 1e-6) throw IoError("zero quaternion at trajectory line " + std::to_string(line_no) + " in " + path);
    e.pose.rotation = q.normalized();
    out.push_back(e);
  }
  return out;
}

inline void save_trajectory(const std::string& path, const Trajectory& traj) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write trajectory file: " + path);
  char buf[256];
  for (const auto& e : traj) {
    const Quat& q = e.pose.rotation;
    std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g\n", e.timestamp,
                  e.pose.translation.x(), e.pose.translation.y(), e.pose.translation.z(), q.x(),
                  q.y(), q.z(), q.w());
    out << buf;
  }
  if (!out) throw IoError("failed while writing trajectory file: " + path);
}

/// Applies a similarity transform to every pose: centers move as points,
/// orientations are premultiplied by the rotation.
inline Trajectory transform_trajectory(const Trajectory& traj, const SimilarityTransform& t) {
  Trajectory out = traj;
  for (auto& e : out) {
    e.pose.translation = t.apply(e.pose.translation);
    e.pose.rotation = (t.rotation * e.pose.rotation).normalized();
  }
  return out;
}

}  // namespace levox
