#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "levox/common.hpp"
#include "levox/core.hpp"
#include "levox/gsmap.hpp"
#include "levox/occproj.hpp"

namespace levox {

// Rays are parametrized by camera-frame z (directions carry a unit z-component
// in the camera frame), so composited depths live in the same units as depth
// images. All formulas below are parametrization-agnostic except the depth
// values themselves.

/// One primitive's footprint on a ray: the ray parameter of its Mahalanobis
/// minimum and the squared Mahalanobis distance there.
struct RayContribution {
  std::uint32_t prim = 0;
  double tau = 0.0;
  double mahal_sq = 0.0;
};

namespace detail {

// d/dq of the unit-quaternion rotation matrix, per component (w, x, y, z).
// Valid at unit q; gradients through the pre-normalization are recovered by
// projecting onto the tangent space afterwards.
inline std::array<Mat3, 4> rotation_jacobians(const Quat& q) {
  const double w = q.w(), x = q.x(), y = q.y(), z = q.z();
  std::array<Mat3, 4> p;
  p[0] << 0, -z, y, z, 0, -x, -y, x, 0;           // d/dw
  p[1] << 0, y, z, y, -2 * x, -w, z, w, -2 * x;   // d/dx
  p[2] << -2 * y, x, w, x, 0, z, -w, z, -2 * y;   // d/dy
  p[3] << -2 * z, -w, x, w, -2 * z, y, x, y, 0;   // d/dz
  for (auto& m : p) m *= 2.0;
  return p;
}

// Closest-approach parameters of a ray against a primitive's regularized
// inverse covariance: tau* = -(v^T A delta) / (v^T A v), d = min Mahalanobis^2.
struct RayGaussian {
  double tau, mahal_sq;
  double b, c;  // v^T A delta and v^T A v, reused by gradients
};

inline RayGaussian ray_gaussian(const Mat3& a, const Vec3& mean, const Vec3& origin,
                                const Vec3& dir) {
  const Vec3 delta = origin - mean;
  const Vec3 av = a * dir;
  const double c = dir.dot(av);
  const double b = av.dot(delta);
  const double tau = -b / c;
  const Vec3 e = delta + tau * dir;
  return {tau, e.dot(a * e), b, c};
}

// Gathers the contributions of `candidates` whose Mahalanobis minimum lies in
// front of the origin (tau > 0) within the 3-sigma bound, sorted by
// (tau, index). A camera inside a primitive's support (minimum behind the
// origin) drops it; applied identically in rendering, loss, and gradients.
inline void gather_contributions(const GaussianMap& map, std::span<const std::uint32_t> candidates,
                                 const Vec3& origin, const Vec3& dir,
                                 std::vector<RayContribution>& out) {
  out.clear();
  for (std::uint32_t idx : candidates) {
    const RayGaussian rg = ray_gaussian(map.inv_covariance(idx), map.primitives()[idx].mean,
                                        origin, dir);
    if (!(rg.tau > 0.0)) continue;
    if (rg.mahal_sq > kSupportMahalanobisSq) continue;
    out.push_back({idx, rg.tau, rg.mahal_sq});
  }
  std::sort(out.begin(), out.end(), [](const RayContribution& l, const RayContribution& r) {
    return l.tau != r.tau ? l.tau < r.tau : l.prim < r.prim;
  });
}

}  // namespace detail

/// Front-to-back visible contributions of the whole map along one ray.
inline std::vector<RayContribution> collect_ray_contributions(const GaussianMap& map,
                                                              const Vec3& origin,
                                                              const Vec3& dir) {
  if (!dir.allFinite() || dir.squaredNorm() == 0.0) throw InvalidInputError("collect_ray_contributions: bad direction");
  std::vector<std::uint32_t> all(map.size());
  std::iota(all.begin(), all.end(), 0u);
  std::vector<RayContribution> out;
  detail::gather_contributions(map, all, origin, dir, out);
  return out;
}

struct CompositeResult {
  Vec3 color = Vec3::Zero();
  double depth = 0.0;
  std::vector<double> weights;  // per input primitive, in input order
};

/// Front-to-back alpha compositing over primitives already sorted by their
/// closest-approach depth along the ray: w_k = a_k prod_{j<k} (1 - a_j) with
/// a_k = opacity_k exp(-mahal_k / 2). No culling: every input contributes.
inline CompositeResult composite_ray(std::span<const GaussianPrimitive> prims, const Vec3& origin,
                                     const Vec3& dir) {
  if (!dir.allFinite() || dir.squaredNorm() == 0.0) throw InvalidInputError("composite_ray: bad direction");
  std::vector<double> taus(prims.size()), alphas(prims.size());
  for (std::size_t k = 0; k < prims.size(); ++k) {
    const detail::RayGaussian rg =
        detail::ray_gaussian(regularized_inverse(covariance(prims[k])), prims[k].mean, origin, dir);
    taus[k] = rg.tau;
    alphas[k] = prims[k].opacity * std::exp(-0.5 * rg.mahal_sq);
    if (k > 0 && taus[k] < taus[k - 1]) {
      throw InvalidInputError("composite_ray: primitives are not sorted by depth along the ray");
    }
  }
  CompositeResult out;
  out.weights.resize(prims.size());
  double transmittance = 1.0;
  for (std::size_t k = 0; k < prims.size(); ++k) {
    const double w = alphas[k] * transmittance;
    out.weights[k] = w;
    out.color += w * prims[k].color;
    out.depth += w * taus[k];
    transmittance *= 1.0 - alphas[k];
  }
  return out;
}

struct RenderedFrame {
  int width = 0, height = 0;
  std::vector<Vec3> color;     // row-major
  std::vector<double> depth;   // weight-composited ray depth; 0 where nothing renders
  std::vector<double> weight;  // accumulated weight sum per pixel (<= 1)
};

namespace detail {

struct TileBinning {
  static constexpr int kTileSize = 16;
  int tiles_x = 0, tiles_y = 0;
  std::vector<std::vector<std::uint32_t>> tiles;

  const std::vector<std::uint32_t>& at(int u, int v) const {
    return tiles[static_cast<std::size_t>(v / kTileSize) * tiles_x + u / kTileSize];
  }
};

// Conservative pixel bounds per primitive: project the 8 corners of the world
// 3-sigma bounding box; any corner at or behind the camera plane falls back to
// the whole frame. Perspective projection maps a convex box with positive
// depth into the convex hull of its projected corners, so the pixel rectangle
// plus a guard pixel covers every ray that can meet the support.
inline TileBinning bin_primitives(const GaussianMap& map, const CameraIntrinsics& k,
                                  const Pose& pose, int width, int height) {
  TileBinning bins;
  bins.tiles_x = (width + TileBinning::kTileSize - 1) / TileBinning::kTileSize;
  bins.tiles_y = (height + TileBinning::kTileSize - 1) / TileBinning::kTileSize;
  bins.tiles.resize(static_cast<std::size_t>(bins.tiles_x) * bins.tiles_y);

  const Pose world_to_cam = invert_pose(pose);
  for (std::uint32_t i = 0; i < map.size(); ++i) {
    const GaussianPrimitive& g = map.primitives()[i];
    const Mat3 sigma = covariance(g);
    const Vec3 half = 3.0 * sigma.diagonal().cwiseMax(0.0).cwiseSqrt();

    double u_min = 1e300, u_max = -1e300, v_min = 1e300, v_max = -1e300;
    bool any_front = false, any_back = false;
    for (int corner = 0; corner < 8; ++corner) {
      const Vec3 offset((corner & 1) ? half.x() : -half.x(), (corner & 2) ? half.y() : -half.y(),
                        (corner & 4) ? half.z() : -half.z());
      const Vec3 pc = world_to_cam.apply(g.mean + offset);
      if (pc.z() <= 1e-9) {
        any_back = true;
        continue;
      }
      any_front = true;
      const double u = k.fx * pc.x() / pc.z() + k.cx;
      const double v = k.fy * pc.y() / pc.z() + k.cy;
      u_min = std::min(u_min, u);
      u_max = std::max(u_max, u);
      v_min = std::min(v_min, v);
      v_max = std::max(v_max, v);
    }
    if (!any_front) continue;  // fully behind: tau* <= 0 on every forward ray
    int px0, px1, py0, py1;
    if (any_back) {
      px0 = 0;
      py0 = 0;
      px1 = width - 1;
      py1 = height - 1;
    } else {
      px0 = std::max(0, static_cast<int>(std::floor(u_min)) - 1);
      px1 = std::min(width - 1, static_cast<int>(std::ceil(u_max)) + 1);
      py0 = std::max(0, static_cast<int>(std::floor(v_min)) - 1);
      py1 = std::min(height - 1, static_cast<int>(std::ceil(v_max)) + 1);
      if (px0 > px1 || py0 > py1) continue;  // outside the frame
    }
    for (int ty = py0 / TileBinning::kTileSize; ty <= py1 / TileBinning::kTileSize; ++ty)
      for (int tx = px0 / TileBinning::kTileSize; tx <= px1 / TileBinning::kTileSize; ++tx)
        bins.tiles[static_cast<std::size_t>(ty) * bins.tiles_x + tx].push_back(i);
  }
  return bins;
}

}  // namespace detail

/// Renders color, depth, and accumulated weight for every pixel by compositing
/// the visible 3-sigma contributions front to back. Deterministic for any
/// worker count (per-pixel outputs, fixed traversal order).
inline RenderedFrame render_frame(const GaussianMap& map, const CameraIntrinsics& intrinsics,
                                  const Pose& pose, int width, int height) {
  intrinsics.validate();
  if (width < 1 || height < 1) throw InvalidInputError("render_frame: image size must be positive");

  RenderedFrame frame;
  frame.width = width;
  frame.height = height;
  frame.color.assign(static_cast<std::size_t>(width) * height, Vec3::Zero());
  frame.depth.assign(static_cast<std::size_t>(width) * height, 0.0);
  frame.weight.assign(static_cast<std::size_t>(width) * height, 0.0);

  const detail::TileBinning bins = detail::bin_primitives(map, intrinsics, pose, width, height);
  const Mat3 cam_rot = quaternion_to_matrix(pose.rotation);
  const Vec3 origin = pose.translation;
  const auto& prims = map.primitives();

  parallel_chunks(static_cast<std::size_t>(height), default_chunk_count(height),
                  [&](std::size_t, std::size_t row_begin, std::size_t row_end) {
    std::vector<RayContribution> contribs;
    for (std::size_t v = row_begin; v < row_end; ++v) {
      for (int u = 0; u < width; ++u) {
        const Vec3 dir = cam_rot * intrinsics.pixel_ray(u, static_cast<double>(v));
        detail::gather_contributions(map, bins.at(u, static_cast<int>(v)), origin, dir, contribs);
        Vec3 color = Vec3::Zero();
        double depth = 0.0, weight_sum = 0.0, transmittance = 1.0;
        for (const RayContribution& rc : contribs) {
          const double a = prims[rc.prim].opacity * std::exp(-0.5 * rc.mahal_sq);
          const double w = a * transmittance;
          color += w * prims[rc.prim].color;
          depth += w * rc.tau;
          weight_sum += w;
          transmittance *= 1.0 - a;
        }
        const std::size_t px = v * width + u;
        frame.color[px] = color;
        frame.depth[px] = depth;
        frame.weight[px] = weight_sum;
      }
    }
  });
  return frame;
}

/// Observed inputs the anchored refinement fits against.
struct ObservedFrame {
  std::vector<Vec3> image;  // row-major color in [0, 1]
  DepthFrame depth;         // 0 marks pixels without depth supervision
  CameraIntrinsics intrinsics;
  Pose pose;

  void validate() const {
    intrinsics.validate();
    if (depth.width != intrinsics.width || depth.height != intrinsics.height) {
      throw InvalidInputError("ObservedFrame: depth size does not match intrinsics");
    }
    if (image.size() != static_cast<std::size_t>(depth.width) * depth.height) {
      throw InvalidInputError("ObservedFrame: image size does not match intrinsics");
    }
  }
};

/// Photometric + depth objective: sum over pixels of |I_hat - I|^2 plus
/// beta |D_hat - D|^2 restricted to pixels with valid observed depth.
inline double rendering_loss(const RenderedFrame& rendered, std::span<const Vec3> observed_color,
                             const DepthFrame& observed_depth, double beta) {
  if (!(beta >= 0.0)) throw InvalidInputError("rendering_loss: beta must be >= 0");
  if (rendered.width != observed_depth.width || rendered.height != observed_depth.height) {
    throw InvalidInputError("rendering_loss: rendered and observed sizes differ");
  }
  const std::size_t n = static_cast<std::size_t>(rendered.width) * rendered.height;
  if (observed_color.size() != n || rendered.color.size() != n) {
    throw InvalidInputError("rendering_loss: color buffer size mismatch");
  }
  double loss = 0.0;
  for (std::size_t px = 0; px < n; ++px) {
    loss += (rendered.color[px] - observed_color[px]).squaredNorm();
    const double d_obs = observed_depth.depth[px];
    if (d_obs > 0.0) {
      const double rd = rendered.depth[px] - d_obs;
      loss += beta * rd * rd;
    }
  }
  return loss;
}

/// Loss summed over frames, each rendered at its own intrinsics/pose.
inline double total_rendering_loss(const GaussianMap& map, std::span<const ObservedFrame> frames,
                                   double beta) {
  double loss = 0.0;
  for (const ObservedFrame& f : frames) {
    f.validate();
    const RenderedFrame r = render_frame(map, f.intrinsics, f.pose, f.intrinsics.width,
                                         f.intrinsics.height);
    loss += rendering_loss(r, f.image, f.depth, beta);
  }
  return loss;
}

/// Per-primitive gradient of the rendering loss. Means are anchored to their
/// back-projected measurements and never move: d_mean is identically zero.
struct PrimitiveGradient {
  Vec3 d_mean = Vec3::Zero();
  Vec3 d_scale = Vec3::Zero();
  Eigen::Vector4d d_rotation = Eigen::Vector4d::Zero();  // (w, x, y, z), tangent-projected
  double d_opacity = 0.0;
  Vec3 d_color = Vec3::Zero();
};

struct LossGradient {
  double loss = 0.0;
  std::vector<PrimitiveGradient> gradients;
};

namespace detail {

inline constexpr std::size_t kGradientChunks = 16;

struct GradientScratch {
  std::vector<RayContribution> contribs;
  std::vector<double> alpha, weight, trans, env;  // per contribution
};

// Forward + backward pass for one pixel, accumulating into grads.
inline double pixel_loss_gradient(const GaussianMap& map, const TileBinning& bins,
                                  const CameraIntrinsics& k, const Mat3& cam_rot,
                                  const Vec3& origin,
                                  const std::vector<std::array<Mat3, 4>>& rot_jac,
                                  const std::vector<Mat3>& rot_mat, int u, int v,
                                  const Vec3& obs_color, double obs_depth, double beta,
                                  GradientScratch& s, std::vector<PrimitiveGradient>& grads) {
  const auto& prims = map.primitives();
  const Vec3 dir = cam_rot * k.pixel_ray(u, v);
  gather_contributions(map, bins.at(u, v), origin, dir, s.contribs);

  const std::size_t m = s.contribs.size();
  s.alpha.resize(m);
  s.weight.resize(m);
  s.trans.resize(m);
  s.env.resize(m);

  Vec3 rendered_color = Vec3::Zero();
  double rendered_depth = 0.0;
  double transmittance = 1.0;
  for (std::size_t i = 0; i < m; ++i) {
    const RayContribution& rc = s.contribs[i];
    const double e = std::exp(-0.5 * rc.mahal_sq);
    const double a = prims[rc.prim].opacity * e;
    s.env[i] = e;
    s.alpha[i] = a;
    s.trans[i] = transmittance;
    s.weight[i] = a * transmittance;
    rendered_color += s.weight[i] * prims[rc.prim].color;
    rendered_depth += s.weight[i] * rc.tau;
    transmittance *= 1.0 - a;
  }

  const Vec3 rc_res = rendered_color - obs_color;
  const bool depth_valid = obs_depth > 0.0;
  const double rd_res = depth_valid ? rendered_depth - obs_depth : 0.0;
  const double loss = rc_res.squaredNorm() + (depth_valid ? beta * rd_res * rd_res : 0.0);
  if (m == 0) return loss;

  // dL/dw_i, and the suffix recurrence B_i = a_{i+1} g_{i+1} + (1-a_{i+1}) B_{i+1}
  // giving dL/da_i = T_i (g_i - B_i) without dividing by (1 - a).
  auto g_of = [&](std::size_t i) {
    double g = 2.0 * rc_res.dot(prims[s.contribs[i].prim].color);
    if (depth_valid) g += 2.0 * beta * rd_res * s.contribs[i].tau;
    return g;
  };
  double suffix = 0.0;  // B_i
  for (std::size_t ii = m; ii-- > 0;) {
    const RayContribution& rc = s.contribs[ii];
    const GaussianPrimitive& g = prims[rc.prim];
    PrimitiveGradient& acc = grads[rc.prim];
    const double gi = g_of(ii);
    const double dL_da = s.trans[ii] * (gi - suffix);
    suffix = s.alpha[ii] * gi + (1.0 - s.alpha[ii]) * suffix;

    acc.d_color += 2.0 * s.weight[ii] * rc_res;
    acc.d_opacity += dL_da * s.env[ii];

    const double dL_dd = -0.5 * s.alpha[ii] * dL_da;          // through a = o exp(-d/2)
    const double dL_dz = depth_valid ? 2.0 * beta * rd_res * s.weight[ii] : 0.0;
    if (dL_dd == 0.0 && dL_dz == 0.0) continue;

    const Mat3& a_mat = map.inv_covariance(rc.prim);
    const Vec3 delta = origin - g.mean;
    const Vec3 u2 = a_mat * dir;           // A v
    const Vec3 u3 = a_mat * delta;         // A delta
    const Vec3 u1 = u3 + rc.tau * u2;      // A e at the minimum
    const double c = dir.dot(u2);

    const Mat3& rot = rot_mat[rc.prim];
    const Vec3 r1 = rot.transpose() * u1;
    const Vec3 r2 = rot.transpose() * u2;
    const Vec3 r3 = rot.transpose() * u3;
    const Vec3 s2 = g.scale.cwiseProduct(g.scale);

    // Scale axes: dSigma/ds_i = 2 s_i r_i r_i^T.
    for (int ax = 0; ax < 3; ++ax) {
      const double dd = -2.0 * g.scale[ax] * r1[ax] * r1[ax];
      const double db = -2.0 * g.scale[ax] * r2[ax] * r3[ax];
      const double dc = -2.0 * g.scale[ax] * r2[ax] * r2[ax];
      const double dtau = (-db - rc.tau * dc) / c;
      acc.d_scale[ax] += dL_dd * dd + dL_dz * dtau;
    }

    // Quaternion components: dSigma/dq_l = P_l D R^T + R D P_l^T.
    const std::array<Mat3, 4>& jac = rot_jac[rc.prim];
    for (int l = 0; l < 4; ++l) {
      const Mat3& p = jac[l];
      const Vec3 p1 = p.transpose() * u1;
      const Vec3 p2 = p.transpose() * u2;
      const Vec3 p3 = p.transpose() * u3;
      const double dd = -2.0 * p1.dot(s2.cwiseProduct(r1));
      const double db = -(p2.dot(s2.cwiseProduct(r3)) + r2.dot(s2.cwiseProduct(p3)));
      const double dc = -2.0 * p2.dot(s2.cwiseProduct(r2));
      const double dtau = (-db - rc.tau * dc) / c;
      acc.d_rotation[l] += dL_dd * dd + dL_dz * dtau;
    }
  }
  return loss;
}

}  // namespace detail

/// Analytic gradient of total_rendering_loss over scale, rotation, opacity,
/// and color (means anchored: their gradient is reported as zero). Rotation
/// gradients are projected onto the unit-quaternion tangent space.
/// Deterministic for any worker count.
inline LossGradient loss_gradient(const GaussianMap& map, std::span<const ObservedFrame> frames,
                                  double beta) {
  if (!(beta >= 0.0)) throw InvalidInputError("loss_gradient: beta must be >= 0");
  LossGradient out;
  out.gradients.assign(map.size(), PrimitiveGradient{});

  std::vector<Mat3> rot_mat(map.size());
  std::vector<std::array<Mat3, 4>> rot_jac(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) {
    const Quat q = map.primitives()[i].rotation.normalized();
    rot_mat[i] = q.toRotationMatrix();
    rot_jac[i] = detail::rotation_jacobians(q);
  }

  for (const ObservedFrame& f : frames) {
    f.validate();
    const int width = f.intrinsics.width, height = f.intrinsics.height;
    const detail::TileBinning bins =
        detail::bin_primitives(map, f.intrinsics, f.pose, width, height);
    const Mat3 cam_rot = quaternion_to_matrix(f.pose.rotation);
    const Vec3 origin = f.pose.translation;

    const std::size_t chunk_count =
        std::min<std::size_t>(detail::kGradientChunks, static_cast<std::size_t>(height));
    std::vector<std::vector<PrimitiveGradient>> chunk_grads(chunk_count);
    std::vector<double> chunk_loss(chunk_count, 0.0);

    parallel_chunks(static_cast<std::size_t>(height), chunk_count,
                    [&](std::size_t c, std::size_t row_begin, std::size_t row_end) {
      chunk_grads[c].assign(map.size(), PrimitiveGradient{});
      detail::GradientScratch scratch;
      double loss = 0.0;
      for (std::size_t v = row_begin; v < row_end; ++v) {
        for (int u = 0; u < width; ++u) {
          const std::size_t px = v * width + u;
          loss += detail::pixel_loss_gradient(map, bins, f.intrinsics, cam_rot, origin, rot_jac,
                                              rot_mat, u, static_cast<int>(v), f.image[px],
                                              f.depth.depth[px], beta, scratch, chunk_grads[c]);
        }
      }
      chunk_loss[c] = loss;
    });

    for (std::size_t c = 0; c < chunk_count; ++c) {
      out.loss += chunk_loss[c];
      for (std::size_t i = 0; i < map.size(); ++i) {
        PrimitiveGradient& dst = out.gradients[i];
        const PrimitiveGradient& src = chunk_grads[c][i];
        dst.d_scale += src.d_scale;
        dst.d_rotation += src.d_rotation;
        dst.d_opacity += src.d_opacity;
        dst.d_color += src.d_color;
      }
    }
  }

  // Project rotation gradients onto the tangent space of the unit sphere.
  for (std::size_t i = 0; i < map.size(); ++i) {
    const Quat q = map.primitives()[i].rotation.normalized();
    Eigen::Vector4d qv(q.w(), q.x(), q.y(), q.z());
    Eigen::Vector4d& g = out.gradients[i].d_rotation;
    g -= qv * qv.dot(g);
  }
  return out;
}

/// Gradient-descent configuration for the anchored refinement.
struct OptimizerConfig {
  double beta = 1.0;
  double lr_scale = 1e-3;
  double lr_rotation = 1e-3;
  double lr_opacity = 1e-2;
  double lr_color = 1e-2;
  int max_iters = 100;
  double tol = 1e-9;  // relative loss-decrease convergence threshold

  void validate() const {
    if (!(beta >= 0.0)) throw InvalidInputError("OptimizerConfig: beta must be >= 0");
    if (!(lr_scale > 0.0) || !(lr_rotation > 0.0) || !(lr_opacity > 0.0) || !(lr_color > 0.0)) {
      throw InvalidInputError("OptimizerConfig: learning rates must be positive");
    }
    if (max_iters < 0) throw InvalidInputError("OptimizerConfig: max_iters must be >= 0");
    if (!(tol >= 0.0)) throw InvalidInputError("OptimizerConfig: tol must be >= 0");
  }
};

struct OptimizeResult {
  std::vector<double> loss_trace;  // initial loss plus one entry per accepted step
  int iterations = 0;              // accepted steps
  bool converged = false;          // stopped on tol or a stalled line search
};

namespace detail {

inline void apply_step(GaussianMap& map, const std::vector<PrimitiveGradient>& grads,
                       double step, const OptimizerConfig& cfg) {
  auto& prims = map.mutate_primitives();
  for (std::size_t i = 0; i < prims.size(); ++i) {
    GaussianPrimitive& g = prims[i];
    const PrimitiveGradient& d = grads[i];
    g.scale = (g.scale - step * cfg.lr_scale * d.d_scale).cwiseMax(kScaleFloor);
    g.opacity = std::clamp(g.opacity - step * cfg.lr_opacity * d.d_opacity, 0.0, 1.0);
    g.color = (g.color - step * cfg.lr_color * d.d_color).cwiseMax(0.0).cwiseMin(1.0);
    Eigen::Vector4d q(g.rotation.w(), g.rotation.x(), g.rotation.y(), g.rotation.z());
    q -= step * cfg.lr_rotation * d.d_rotation;
    if (q.norm() > 1e-9) {
      q.normalize();
      g.rotation = Quat(q[0], q[1], q[2], q[3]);
    }
  }
  map.refresh_derived();
}

}  // namespace detail

/// Geometrically anchored refinement: projected gradient descent over scales,
/// rotations, opacities, and colors with a backtracking line search (at most
/// 20 halvings per iteration, warm-started from the previous accepted step).
/// Means never move. The returned trace is monotone non-increasing; a NaN
/// loss raises a numerical error naming the iteration.
inline OptimizeResult optimize_anchored(GaussianMap& map, std::span<const ObservedFrame> frames,
                                        const OptimizerConfig& config) {
  config.validate();
  for (const ObservedFrame& f : frames) f.validate();
  if (frames.empty()) throw InvalidInputError("optimize_anchored: no frames");

  OptimizeResult result;
  double current_loss = total_rendering_loss(map, frames, config.beta);
  if (std::isnan(current_loss)) throw NumericalError("optimize_anchored: NaN loss at iteration 0");
  result.loss_trace.push_back(current_loss);

  double warm_step = 1.0;
  for (int iter = 1; iter <= config.max_iters; ++iter) {
    const LossGradient lg = loss_gradient(map, frames, config.beta);
    if (std::isnan(lg.loss)) {
      throw NumericalError("optimize_anchored: NaN loss at iteration " + std::to_string(iter));
    }

    double step = std::min(1.0, 2.0 * warm_step);
    bool accepted = false;
    for (int halving = 0; halving <= 20; ++halving) {
      GaussianMap candidate = map;
      detail::apply_step(candidate, lg.gradients, step, config);
      const double cand_loss = total_rendering_loss(candidate, frames, config.beta);
      if (!std::isnan(cand_loss) && cand_loss <= current_loss) {
        map = std::move(candidate);
        const double previous = current_loss;
        current_loss = cand_loss;
        result.loss_trace.push_back(current_loss);
        result.iterations = iter;
        warm_step = step;
        accepted = true;
        if (previous - current_loss <= config.tol * std::max(1.0, previous)) {
          result.converged = true;
        }
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      result.converged = true;  // line search stalled: no descent direction left
      break;
    }
    if (result.converged) break;
  }
  map.rebuild_derived();
  return result;
}

/// Constructive witness that photometric + depth supervision cannot pin down
/// occupancy: a single opaque layer and a split double layer that produce the
/// same color and composited depth on the probe ray, yet different occupancy.
struct AmbiguityWitness {
  GaussianMap single;  // one primitive at depth `depth`
  GaussianMap pair;    // two primitives straddling it at depth +- offset
  CameraIntrinsics intrinsics;
  Pose pose;           // identity; probe ray is the principal pixel
  double depth = 2.0;
  double offset = 0.3;
  GridSpec probe_grid;  // region where the occupancy fields disagree
};

inline AmbiguityWitness ambiguity_witness() {
  AmbiguityWitness w;
  w.intrinsics = CameraIntrinsics{80.0, 80.0, 32.0, 32.0, 64, 64};

  const Vec3 color(0.8, 0.3, 0.1);
  const Vec3 scale = Vec3::Constant(0.1);
  const double weight = 0.8;  // total composited weight on the probe ray

  GaussianPrimitive one;
  one.mean = Vec3(0.0, 0.0, w.depth);
  one.scale = scale;
  one.opacity = weight;
  one.color = color;
  w.single.insert_batch(std::vector<GaussianPrimitive>{one});

  // Front layer takes w/2; the rear layer recovers the rest through the
  // remaining transmittance: o2 = w / (2 - w), so w2 = o2 (1 - w/2) = w/2.
  GaussianPrimitive front = one, rear = one;
  front.mean.z() = w.depth - w.offset;
  rear.mean.z() = w.depth + w.offset;
  front.opacity = weight / 2.0;
  rear.opacity = weight / (2.0 - weight);
  w.pair.insert_batch(std::vector<GaussianPrimitive>{front, rear});

  w.probe_grid.origin = Vec3(-0.52, -0.52, 0.5);
  w.probe_grid.dims = {13, 13, 32};
  w.probe_grid.voxel_size = 0.08;
  return w;
}

}  // namespace levox
