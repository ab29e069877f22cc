#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "levox/common.hpp"
#include "levox/core.hpp"

namespace levox {

inline constexpr double kScaleFloor = 1e-6;          // meters; smallest admissible axis scale
inline constexpr double kCovarianceEpsilon = 1e-12;  // added to the covariance diagonal before inversion
inline constexpr double kSupportMahalanobisSq = 9.0; // 3-sigma support boundary
inline constexpr double kDefaultGamma = 3.0;         // along-ray elongation of new primitives
inline constexpr double kDefaultKappa = 1.0;         // pixel-footprint scale of new primitives
inline constexpr double kDefaultInitOpacity = 0.5;
inline constexpr double kDefaultAssociationRadius = 0.08;  // meters

/// Anisotropic Gaussian with optional unit-norm language feature. The scale
/// entries are per-axis standard deviations in the primitive's local frame.
struct GaussianPrimitive {
  Vec3 mean = Vec3::Zero();
  Vec3 scale = Vec3::Constant(kScaleFloor);
  Quat rotation{1.0, 0.0, 0.0, 0.0};
  double opacity = kDefaultInitOpacity;
  Vec3 color = Vec3::Constant(0.5);
  Eigen::VectorXf feature;  // empty when absent

  bool has_feature() const { return feature.size() > 0; }
};

/// Sigma = B B^T with B = R diag(scale), assembled from the upper triangle so
/// the result is exactly symmetric in floating point.
inline Mat3 covariance_from(const Vec3& scale, const Quat& rotation) {
  const Mat3 b = rotation.normalized().toRotationMatrix() * scale.asDiagonal();
  Mat3 sigma;
  for (int i = 0; i < 3; ++i) {
    for (int j = i; j < 3; ++j) {
      const double v = b.row(i).dot(b.row(j));
      sigma(i, j) = v;
      sigma(j, i) = v;
    }
  }
  return sigma;
}

inline Mat3 covariance(const GaussianPrimitive& g) { return covariance_from(g.scale, g.rotation); }

/// Inverse of (Sigma + eps I); the ridge keeps floor-scaled axes invertible.
inline Mat3 regularized_inverse(const Mat3& sigma) {
  Mat3 a = sigma;
  a.diagonal().array() += kCovarianceEpsilon;
  return a.inverse();
}

inline double regularized_log_det(const Mat3& sigma) {
  Mat3 a = sigma;
  a.diagonal().array() += kCovarianceEpsilon;
  return std::log(a.determinant());
}

/// Metric depth image; 0 marks invalid pixels, valid values lie in
/// (0, max_range]. Out-of-range and non-finite inputs are zeroed.
struct DepthFrame {
  int width = 0, height = 0;
  double max_range = 10.0;
  std::vector<double> depth;  // row-major

  double at(int u, int v) const { return depth[static_cast<std::size_t>(v) * width + u]; }
  bool valid(int u, int v) const { return at(u, v) > 0.0; }
};

inline DepthFrame make_depth_frame(int width, int height, std::vector<double> values,
                                   double max_range = 10.0) {
  if (width <= 0 || height <= 0) throw InvalidInputError("make_depth_frame: image size must be positive");
  if (!(max_range > 0.0)) throw InvalidInputError("make_depth_frame: max_range must be positive");
  if (values.size() != static_cast<std::size_t>(width) * height) {
    throw InvalidInputError("make_depth_frame: pixel count does not match size");
  }
  for (double& d : values) {
    if (!std::isfinite(d) || d <= 0.0 || d > max_range) d = 0.0;
  }
  DepthFrame out;
  out.width = width;
  out.height = height;
  out.max_range = max_range;
  out.depth = std::move(values);
  return out;
}

/// Dense per-pixel embedding raster (dim floats per pixel, row-major).
struct PixelEmbeddingFrame {
  int width = 0, height = 0, dim = 0;
  std::vector<float> data;

  const float* at(int u, int v) const {
    return data.data() + (static_cast<std::size_t>(v) * width + u) * dim;
  }

  void validate() const {
    if (width <= 0 || height <= 0 || dim <= 0) throw InvalidInputError("PixelEmbeddingFrame: bad dimensions");
    if (data.size() != static_cast<std::size_t>(width) * height * dim) {
      throw InvalidInputError("PixelEmbeddingFrame: data size does not match dimensions");
    }
  }
};

struct BackprojectedPoint {
  Vec3 world;
  int u = 0, v = 0;
};

/// World-space points of the valid depth pixels sampled on a stride grid
/// (row-major order: v outer, u inner, both starting at 0).
inline std::vector<BackprojectedPoint> backproject(const DepthFrame& depth,
                                                   const CameraIntrinsics& intrinsics,
                                                   const Pose& pose, int pixel_stride = 1) {
  intrinsics.validate();
  if (pixel_stride < 1) throw InvalidInputError("backproject: pixel_stride must be >= 1");
  if (depth.width != intrinsics.width || depth.height != intrinsics.height) {
    throw InvalidInputError("backproject: depth size does not match intrinsics");
  }
  std::vector<BackprojectedPoint> out;
  for (int v = 0; v < depth.height; v += pixel_stride) {
    for (int u = 0; u < depth.width; u += pixel_stride) {
      const double z = depth.at(u, v);
      if (z <= 0.0) continue;
      out.push_back({pose.apply(intrinsics.unproject(u, v, z)), u, v});
    }
  }
  return out;
}

/// World-frame rotation whose local +z axis points along the viewing ray of
/// pixel (u, v).
inline Quat ray_aligned_rotation(const CameraIntrinsics& intrinsics, double u, double v,
                                 const Pose& pose) {
  intrinsics.validate();
  if (u < 0.0 || u >= intrinsics.width || v < 0.0 || v >= intrinsics.height) {
    throw InvalidInputError("ray_aligned_rotation: pixel outside image bounds");
  }
  const Vec3 dir_world = pose.rotation * intrinsics.pixel_ray(u, v).normalized();
  return Quat::FromTwoVectors(Vec3::UnitZ(), dir_world).normalized();
}

/// New primitive for a measured depth pixel: mean at the back-projected point
/// (fixed thereafter), perpendicular scale kappa * z / min(fx, fy) matching the
/// pixel footprint, along-ray scale gamma times that, ray-aligned orientation.
inline GaussianPrimitive init_primitive(int u, int v, double depth_value, const Vec3& color,
                                        const CameraIntrinsics& intrinsics, const Pose& pose,
                                        double gamma = kDefaultGamma, double kappa = kDefaultKappa,
                                        double init_opacity = kDefaultInitOpacity) {
  if (!(depth_value > 0.0)) throw InvalidInputError("init_primitive: depth must be positive");
  if (!(gamma > 0.0) || !(kappa > 0.0)) throw InvalidInputError("init_primitive: gamma and kappa must be positive");
  if (init_opacity < 0.0 || init_opacity > 1.0) throw InvalidInputError("init_primitive: opacity must be in [0, 1]");
  GaussianPrimitive g;
  g.rotation = ray_aligned_rotation(intrinsics, u, v, pose);  // validates intrinsics and pixel
  const double s_perp =
      std::max(kScaleFloor, kappa * depth_value / std::min(intrinsics.fx, intrinsics.fy));
  g.scale = Vec3(s_perp, s_perp, std::max(kScaleFloor, gamma * s_perp));
  g.mean = pose.apply(intrinsics.unproject(u, v, depth_value));
  g.opacity = init_opacity;
  g.color = color;
  return g;
}

namespace detail {

struct CellKey {
  std::int32_t x = 0, y = 0, z = 0;
  bool operator==(const CellKey&) const = default;
};

struct CellKeyHash {
  std::size_t operator()(const CellKey& k) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::uint64_t v) {
      h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    };
    mix(static_cast<std::uint32_t>(k.x));
    mix(static_cast<std::uint32_t>(k.y));
    mix(static_cast<std::uint32_t>(k.z));
    return static_cast<std::size_t>(h);
  }
};

inline std::int32_t cell_coord(double p, double cell) {
  return static_cast<std::int32_t>(std::floor(p / cell));
}

}  // namespace detail

/// Language-embedded Gaussian map. Owns the primitives plus derived data kept
/// in sync with them: per-primitive regularized inverse covariances and
/// log-determinants, and a uniform hash grid over 3-sigma bounding boxes used
/// for neighbor queries. Also carries the running feature accumulators fed by
/// associate_semantics (transient; not serialized).
class GaussianMap {
 public:
  GaussianMap() = default;
  explicit GaussianMap(int feature_dim) : feature_dim_(feature_dim) {
    if (feature_dim < 0) throw InvalidInputError("GaussianMap: feature_dim must be >= 0");
  }

  static GaussianMap from_primitives(int feature_dim, std::vector<GaussianPrimitive> primitives) {
    GaussianMap map(feature_dim);
    map.insert_batch(primitives);
    return map;
  }

  const std::vector<GaussianPrimitive>& primitives() const { return primitives_; }
  std::size_t size() const { return primitives_.size(); }
  bool empty() const { return primitives_.empty(); }
  int feature_dim() const { return feature_dim_; }

  std::size_t featured_count() const {
    std::size_t n = 0;
    for (const auto& g : primitives_) n += g.has_feature() ? 1 : 0;
    return n;
  }

  const Mat3& inv_covariance(std::size_t i) const { return inv_cov_[i]; }
  double log_det_covariance(std::size_t i) const { return log_det_[i]; }

  /// Validates and appends a batch, then rebuilds the derived data. Scales are
  /// clamped to the floor and quaternions renormalized; out-of-range opacity,
  /// color, or feature dimensions are rejected.
  void insert_batch(std::span<const GaussianPrimitive> batch) {
    int new_dim = feature_dim_;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const GaussianPrimitive& g = batch[i];
      if (!g.mean.allFinite() || !g.scale.allFinite() || !g.color.allFinite() ||
          !std::isfinite(g.opacity)) {
        throw InvalidInputError("insert_batch: non-finite primitive at batch index " + std::to_string(i));
      }
      if (g.scale.minCoeff() <= 0.0) throw InvalidInputError("insert_batch: non-positive scale at batch index " + std::to_string(i));
      if (g.opacity < 0.0 || g.opacity > 1.0) throw InvalidInputError("insert_batch: opacity outside [0, 1] at batch index " + std::to_string(i));
      if (g.color.minCoeff() < 0.0 || g.color.maxCoeff() > 1.0) throw InvalidInputError("insert_batch: color outside [0, 1] at batch index " + std::to_string(i));
      if (g.rotation.norm() < 1e-6) throw InvalidInputError("insert_batch: zero quaternion at batch index " + std::to_string(i));
      if (g.has_feature()) {
        if (new_dim == 0) new_dim = static_cast<int>(g.feature.size());
        if (static_cast<int>(g.feature.size()) != new_dim) {
          throw InvalidInputError("insert_batch: feature dimension mismatch at batch index " + std::to_string(i));
        }
      }
    }
    feature_dim_ = new_dim;
    primitives_.reserve(primitives_.size() + batch.size());
    for (const GaussianPrimitive& g : batch) {
      GaussianPrimitive p = g;
      p.scale = p.scale.cwiseMax(kScaleFloor);
      p.rotation.normalize();
      primitives_.push_back(std::move(p));
    }
    feature_sums_.resize(primitives_.size());
    feature_counts_.resize(primitives_.size(), 0);
    rebuild_derived();
  }

  void insert_batch(const std::vector<GaussianPrimitive>& batch) {
    insert_batch(std::span<const GaussianPrimitive>(batch.data(), batch.size()));
  }

  /// Indices (ascending) of primitives whose 3-sigma support contains x, i.e.
  /// squared Mahalanobis distance <= 9 under the regularized covariance.
  std::vector<std::uint32_t> query_neighbors(const Vec3& x) const {
    std::vector<std::uint32_t> out;
    auto test = [&](std::uint32_t idx) {
      const Vec3 d = x - primitives_[idx].mean;
      if (d.dot(inv_cov_[idx] * d) <= kSupportMahalanobisSq) out.push_back(idx);
    };
    if (cell_size_ > 0.0) {
      const detail::CellKey key{detail::cell_coord(x.x(), cell_size_),
                                detail::cell_coord(x.y(), cell_size_),
                                detail::cell_coord(x.z(), cell_size_)};
      auto it = cells_.find(key);
      if (it != cells_.end() && !oversized_.empty()) {
        // Both lists are ascending and disjoint; merge to keep output sorted.
        std::vector<std::uint32_t> merged(it->second.size() + oversized_.size());
        std::merge(it->second.begin(), it->second.end(), oversized_.begin(), oversized_.end(),
                   merged.begin());
        for (std::uint32_t idx : merged) test(idx);
      } else if (it != cells_.end()) {
        for (std::uint32_t idx : it->second) test(idx);
      } else {
        for (std::uint32_t idx : oversized_) test(idx);
      }
    }
    return out;
  }

  /// Mutable access for optimizers. Callers that change scales or rotations
  /// must call refresh_derived() (or rebuild_derived() if support extents moved
  /// enough to matter for the index) before any query or rendering.
  std::vector<GaussianPrimitive>& mutate_primitives() { return primitives_; }

  /// Recomputes inverse covariances and log-determinants only; keeps the index.
  void refresh_derived() {
    inv_cov_.resize(primitives_.size());
    log_det_.resize(primitives_.size());
    parallel_for(primitives_.size(), [&](std::size_t i) {
      const Mat3 sigma = covariance(primitives_[i]);
      inv_cov_[i] = regularized_inverse(sigma);
      log_det_[i] = regularized_log_det(sigma);
    });
  }

  /// Recomputes caches and rebuilds the hash grid from scratch.
  void rebuild_derived() {
    refresh_derived();
    cells_.clear();
    oversized_.clear();
    cell_size_ = 0.0;
    if (primitives_.empty()) return;

    std::vector<double> extents(primitives_.size());
    std::vector<Vec3> half(primitives_.size());
    parallel_for(primitives_.size(), [&](std::size_t i) {
      const Mat3 sigma = covariance(primitives_[i]);
      const Vec3 h = 3.0 * sigma.diagonal().cwiseMax(0.0).cwiseSqrt();
      half[i] = h;
      extents[i] = 2.0 * h.maxCoeff();
    });
    std::vector<double> sorted = extents;
    std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
    cell_size_ = std::max(sorted[sorted.size() / 2], 6.0 * kScaleFloor);

    // A primitive spanning a huge number of cells goes on a brute-force list
    // instead of bloating the grid; queries check both.
    constexpr std::int64_t kMaxCellsPerAxis = 64;
    for (std::size_t i = 0; i < primitives_.size(); ++i) {
      const Vec3 lo = primitives_[i].mean - half[i];
      const Vec3 hi = primitives_[i].mean + half[i];
      detail::CellKey lo_key{detail::cell_coord(lo.x(), cell_size_), detail::cell_coord(lo.y(), cell_size_),
                             detail::cell_coord(lo.z(), cell_size_)};
      detail::CellKey hi_key{detail::cell_coord(hi.x(), cell_size_), detail::cell_coord(hi.y(), cell_size_),
                             detail::cell_coord(hi.z(), cell_size_)};
      const std::int64_t nx = static_cast<std::int64_t>(hi_key.x) - lo_key.x + 1;
      const std::int64_t ny = static_cast<std::int64_t>(hi_key.y) - lo_key.y + 1;
      const std::int64_t nz = static_cast<std::int64_t>(hi_key.z) - lo_key.z + 1;
      if (nx > kMaxCellsPerAxis || ny > kMaxCellsPerAxis || nz > kMaxCellsPerAxis) {
        oversized_.push_back(static_cast<std::uint32_t>(i));
        continue;
      }
      for (std::int32_t cz = lo_key.z; cz <= hi_key.z; ++cz)
        for (std::int32_t cy = lo_key.y; cy <= hi_key.y; ++cy)
          for (std::int32_t cx = lo_key.x; cx <= hi_key.x; ++cx)
            cells_[detail::CellKey{cx, cy, cz}].push_back(static_cast<std::uint32_t>(i));
    }
  }

  /// Accumulates one embedding observation for primitive idx and refreshes its
  /// feature (L2-normalized running mean; dropped if the mean near-cancels).
  void accumulate_feature(std::size_t idx, const float* embedding, int dim) {
    if (feature_dim_ == 0) feature_dim_ = dim;
    if (dim != feature_dim_) throw InvalidInputError("accumulate_feature: embedding dimension mismatch");
    Eigen::VectorXd& sum = feature_sums_[idx];
    if (sum.size() == 0) sum = Eigen::VectorXd::Zero(dim);
    for (int d = 0; d < dim; ++d) sum[d] += static_cast<double>(embedding[d]);
    feature_counts_[idx] += 1;
    refresh_feature(idx);
  }

  void apply_similarity_in_place(const SimilarityTransform& t) {
    if (!(t.scale > 0.0)) throw InvalidInputError("transform_map: scale must be positive");
    for (auto& g : primitives_) {
      g.mean = t.apply(g.mean);
      g.scale = (t.scale * g.scale).cwiseMax(kScaleFloor);
      g.rotation = (t.rotation * g.rotation).normalized();
    }
    rebuild_derived();
  }

 private:
  void refresh_feature(std::size_t idx) {
    const Eigen::VectorXd& sum = feature_sums_[idx];
    const std::uint32_t count = feature_counts_[idx];
    GaussianPrimitive& g = primitives_[idx];
    if (count == 0 || sum.size() == 0) return;
    const Eigen::VectorXd mean = sum / static_cast<double>(count);
    const double norm = mean.norm();
    if (norm < 1e-9) {
      g.feature.resize(0);
    } else {
      g.feature = (mean / norm).cast<float>();
    }
  }

  std::vector<GaussianPrimitive> primitives_;
  int feature_dim_ = 0;

  std::vector<Mat3> inv_cov_;
  std::vector<double> log_det_;

  double cell_size_ = 0.0;
  std::unordered_map<detail::CellKey, std::vector<std::uint32_t>, detail::CellKeyHash> cells_;
  std::vector<std::uint32_t> oversized_;

  std::vector<Eigen::VectorXd> feature_sums_;
  std::vector<std::uint32_t> feature_counts_;
};

inline std::vector<std::uint32_t> query_neighbors(const GaussianMap& map, const Vec3& x) {
  return map.query_neighbors(x);
}

/// Attaches embeddings to primitives: every sampled valid-depth pixel
/// back-projects to a world point, finds the nearest primitive mean within
/// `radius` (ties -> lowest index), and adds its embedding to that primitive's
/// running mean. Returns the number of pixels that found a primitive.
inline std::size_t associate_semantics(GaussianMap& map, const PixelEmbeddingFrame& embeddings,
                                       const DepthFrame& depth, const CameraIntrinsics& intrinsics,
                                       const Pose& pose,
                                       double radius = kDefaultAssociationRadius,
                                       int pixel_stride = 1) {
  embeddings.validate();
  intrinsics.validate();
  if (map.empty()) throw InvalidInputError("associate_semantics: map is empty");
  if (!(radius > 0.0)) throw InvalidInputError("associate_semantics: radius must be positive");
  if (pixel_stride < 1) throw InvalidInputError("associate_semantics: pixel_stride must be >= 1");
  if (embeddings.width != depth.width || embeddings.height != depth.height) {
    throw InvalidInputError("associate_semantics: embedding and depth sizes differ");
  }
  if (depth.width != intrinsics.width || depth.height != intrinsics.height) {
    throw InvalidInputError("associate_semantics: frame size does not match intrinsics");
  }
  if (map.feature_dim() != 0 && map.feature_dim() != embeddings.dim) {
    throw InvalidInputError("associate_semantics: map feature_dim " + std::to_string(map.feature_dim()) +
                            " conflicts with embedding dim " + std::to_string(embeddings.dim));
  }

  // Transient grid over primitive means with cell edge = radius, so the 27
  // surrounding cells cover every candidate within the radius.
  std::unordered_map<detail::CellKey, std::vector<std::uint32_t>, detail::CellKeyHash> grid;
  const auto& prims = map.primitives();
  for (std::size_t i = 0; i < prims.size(); ++i) {
    const Vec3& m = prims[i].mean;
    grid[detail::CellKey{detail::cell_coord(m.x(), radius), detail::cell_coord(m.y(), radius),
                         detail::cell_coord(m.z(), radius)}]
        .push_back(static_cast<std::uint32_t>(i));
  }

  const double radius_sq = radius * radius;
  std::size_t associated = 0;
  for (int v = 0; v < depth.height; v += pixel_stride) {
    for (int u = 0; u < depth.width; u += pixel_stride) {
      const double z = depth.at(u, v);
      if (z <= 0.0) continue;
      const Vec3 p = pose.apply(intrinsics.unproject(u, v, z));
      const detail::CellKey base{detail::cell_coord(p.x(), radius), detail::cell_coord(p.y(), radius),
                                 detail::cell_coord(p.z(), radius)};
      double best_d = radius_sq;
      std::int64_t best_idx = -1;
      for (std::int32_t dz = -1; dz <= 1; ++dz)
        for (std::int32_t dy = -1; dy <= 1; ++dy)
          for (std::int32_t dx = -1; dx <= 1; ++dx) {
            auto it = grid.find(detail::CellKey{base.x + dx, base.y + dy, base.z + dz});
            if (it == grid.end()) continue;
            for (std::uint32_t idx : it->second) {
              const double d = (prims[idx].mean - p).squaredNorm();
              if (d < best_d || (d == best_d && (best_idx < 0 || idx < best_idx))) {
                best_d = d;
                best_idx = idx;
              }
            }
          }
      if (best_idx >= 0) {
        map.accumulate_feature(static_cast<std::size_t>(best_idx), embeddings.at(u, v),
                               embeddings.dim);
        ++associated;
      }
    }
  }
  return associated;
}

/// Transformed copy: means move as points, scales multiply by the similarity
/// scale, orientations are premultiplied by the rotation. Opacities, colors,
/// and features are invariant.
inline GaussianMap transform_map(const GaussianMap& map, const SimilarityTransform& t) {
  GaussianMap out = map;
  out.apply_similarity_in_place(t);
  return out;
}

}  // namespace levox
