#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "levox/common.hpp"
#include "levox/core.hpp"
#include "levox/gsmap.hpp"
#include "levox/occproj.hpp"

namespace levox {

inline constexpr int kDefaultPixelStride = 4;
inline constexpr int kDefaultFrameStride = 2;
inline constexpr double kDefaultVoxelSize = 0.08;
inline constexpr double kDefaultMaxRange = 10.0;
inline constexpr double kDefaultDepthFactor = 1e-3;  // meters per stored depth unit
inline constexpr double kDefaultOcclusionToleranceVoxels = 1.0;

/// One annotated RGB-D view: depth in meters plus per-pixel labels
/// (0 = no class, 255 = unknown, 1..254 = class ids).
struct LabeledFrame {
  DepthFrame depth;
  std::vector<std::uint8_t> labels;  // row-major
  CameraIntrinsics intrinsics;
  Pose pose;
  double timestamp = 0.0;
};

struct LabeledFrameSet {
  std::vector<LabeledFrame> frames;
  double depth_factor = kDefaultDepthFactor;  // applied when loading raw rasters
  double max_range = kDefaultMaxRange;

  void validate() const {
    if (!(max_range > 0.0)) throw InvalidInputError("LabeledFrameSet: max_range must be positive");
    if (!(depth_factor > 0.0)) throw InvalidInputError("LabeledFrameSet: depth_factor must be positive");
    for (std::size_t i = 0; i < frames.size(); ++i) {
      const LabeledFrame& f = frames[i];
      f.intrinsics.validate();
      if (f.depth.width != f.intrinsics.width || f.depth.height != f.intrinsics.height) {
        throw InvalidInputError("LabeledFrameSet: frame " + std::to_string(i) +
                                " depth size does not match intrinsics");
      }
      if (f.labels.size() != static_cast<std::size_t>(f.depth.width) * f.depth.height) {
        throw InvalidInputError("LabeledFrameSet: frame " + std::to_string(i) +
                                " label raster size does not match depth");
      }
    }
  }
};

struct SparseVoxel {
  std::uint8_t label = 0;
  std::uint32_t point_count = 0;
};

/// Sparse labeled voxels keyed by integer grid coordinate floor(p / voxel_size).
struct SparseLabeledVoxels {
  double voxel_size = kDefaultVoxelSize;
  std::map<std::array<int, 3>, SparseVoxel> voxels;
};

/// Back-projects every `pixel_stride`-sampled valid-depth pixel carrying a
/// class label (1..254; 0 and 255 do not vote) into the world frame and
/// majority-votes a label per voxel. Ties go to the lowest label id. Points
/// beyond the set's max_range are discarded. Frame order never matters.
inline SparseLabeledVoxels extract_sparse_voxels(const LabeledFrameSet& set,
                                                 int pixel_stride = kDefaultPixelStride,
                                                 double voxel_size = kDefaultVoxelSize) {
  set.validate();
  if (set.frames.empty()) throw InvalidInputError("extract_sparse_voxels: no frames");
  if (pixel_stride < 1) throw InvalidInputError("extract_sparse_voxels: pixel_stride must be >= 1");
  if (!(voxel_size > 0.0)) throw InvalidInputError("extract_sparse_voxels: voxel_size must be positive");

  using VoteTable = std::map<std::array<int, 3>, std::map<std::uint8_t, std::uint32_t>>;
  const std::size_t chunk_count = default_chunk_count(set.frames.size());
  std::vector<VoteTable> chunk_votes(chunk_count);

  parallel_chunks(set.frames.size(), chunk_count,
                  [&](std::size_t c, std::size_t begin, std::size_t end) {
    VoteTable& votes = chunk_votes[c];
    for (std::size_t fi = begin; fi < end; ++fi) {
      const LabeledFrame& f = set.frames[fi];
      for (int v = 0; v < f.depth.height; v += pixel_stride) {
        for (int u = 0; u < f.depth.width; u += pixel_stride) {
          const double d = f.depth.at(u, v);
          if (!(d > 0.0) || d > set.max_range) continue;
          const std::uint8_t label = f.labels[static_cast<std::size_t>(v) * f.depth.width + u];
          if (label == kLabelFree || label == kLabelUnknown) continue;
          const Vec3 p = f.pose.apply(f.intrinsics.unproject(u, v, d));
          const std::array<int, 3> key = {static_cast<int>(std::floor(p.x() / voxel_size)),
                                          static_cast<int>(std::floor(p.y() / voxel_size)),
                                          static_cast<int>(std::floor(p.z() / voxel_size))};
          ++votes[key][label];
        }
      }
    }
  });

  VoteTable merged;
  for (const VoteTable& votes : chunk_votes) {
    for (const auto& [key, counts] : votes) {
      auto& dst = merged[key];
      for (const auto& [label, count] : counts) dst[label] += count;
    }
  }

  SparseLabeledVoxels out;
  out.voxel_size = voxel_size;
  for (const auto& [key, counts] : merged) {
    SparseVoxel voxel;
    std::uint32_t best = 0;
    for (const auto& [label, count] : counts) {  // ascending labels: ties keep the lowest
      voxel.point_count += count;
      if (count > best) {
        best = count;
        voxel.label = label;
      }
    }
    out.voxels.emplace(key, voxel);
  }
  return out;
}

struct DenseLabels {
  GridSpec spec;
  std::vector<std::uint8_t> labels;
};

/// Expands sparse voxels onto a dense grid anchored at their minimum corner.
/// Each cell adopts the label of its nearest sparse voxel when the
/// center-to-center distance is at most one voxel (so only the cell itself and
/// its six face neighbors qualify); nearest ties go to the lexicographically
/// smallest voxel coordinate; cells with no sparse voxel that close stay 0.
inline DenseLabels densify_grid(const SparseLabeledVoxels& sparse) {
  if (sparse.voxels.empty()) throw InvalidInputError("densify_grid: empty sparse set");
  if (!(sparse.voxel_size > 0.0)) throw InvalidInputError("densify_grid: voxel_size must be positive");

  std::array<int, 3> lo = sparse.voxels.begin()->first, hi = lo;
  for (const auto& [key, voxel] : sparse.voxels) {
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], key[a]);
      hi[a] = std::max(hi[a], key[a]);
    }
  }

  DenseLabels out;
  out.spec.voxel_size = sparse.voxel_size;
  out.spec.origin = Vec3(lo[0], lo[1], lo[2]) * sparse.voxel_size;
  out.spec.dims = {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1};
  out.spec.validate();
  out.labels.assign(out.spec.voxel_count(), 0);

  // Face-neighbor candidates in ascending lexicographic absolute coordinate.
  static constexpr std::array<std::array<int, 3>, 6> kFaceOffsets = {
      {{-1, 0, 0}, {0, -1, 0}, {0, 0, -1}, {0, 0, 1}, {0, 1, 0}, {1, 0, 0}}};

  for (int k = 0; k < out.spec.dims[2]; ++k) {
    for (int j = 0; j < out.spec.dims[1]; ++j) {
      for (int i = 0; i < out.spec.dims[0]; ++i) {
        const std::array<int, 3> cell = {lo[0] + i, lo[1] + j, lo[2] + k};
        const auto self = sparse.voxels.find(cell);
        std::uint8_t label = 0;
        if (self != sparse.voxels.end()) {
          label = self->second.label;
        } else {
          for (const auto& off : kFaceOffsets) {
            const std::array<int, 3> nb = {cell[0] + off[0], cell[1] + off[1], cell[2] + off[2]};
            const auto it = sparse.voxels.find(nb);
            if (it != sparse.voxels.end()) {
              label = it->second.label;
              break;
            }
          }
        }
        out.labels[out.spec.linear(i, j, k)] = label;
      }
    }
  }
  return out;
}

/// Union over every `frame_stride`-sampled frame of the voxels whose center is
/// in front of the camera, lands inside the image, and is no deeper than the
/// measured depth at its pixel plus tolerance_voxels * voxel_size. Pixels
/// without a valid measurement observe nothing. Optional single 6-connected
/// dilation.
inline std::vector<std::uint8_t> observability_mask(const GridSpec& spec,
                                                    const LabeledFrameSet& set,
                                                    int frame_stride = kDefaultFrameStride,
                                                    double tolerance_voxels = kDefaultOcclusionToleranceVoxels,
                                                    bool dilate = false) {
  spec.validate();
  set.validate();
  if (frame_stride < 1) throw InvalidInputError("observability_mask: frame_stride must be >= 1");
  if (!(tolerance_voxels >= 0.0)) throw InvalidInputError("observability_mask: tolerance must be >= 0");

  std::vector<std::size_t> sampled;
  for (std::size_t fi = 0; fi < set.frames.size(); fi += frame_stride) sampled.push_back(fi);
  std::vector<Pose> world_to_cam(sampled.size());
  for (std::size_t s = 0; s < sampled.size(); ++s) {
    world_to_cam[s] = invert_pose(set.frames[sampled[s]].pose);
  }

  const double tolerance = tolerance_voxels * spec.voxel_size;
  std::vector<std::uint8_t> mask(spec.voxel_count(), 0);
  parallel_chunks(mask.size(), default_chunk_count(mask.size()),
                  [&](std::size_t, std::size_t begin, std::size_t end) {
    for (std::size_t idx = begin; idx < end; ++idx) {
      const auto ijk = spec.unlinear(idx);
      const Vec3 center = spec.center(ijk[0], ijk[1], ijk[2]);
      for (std::size_t s = 0; s < sampled.size(); ++s) {
        const LabeledFrame& f = set.frames[sampled[s]];
        const Vec3 pc = world_to_cam[s].apply(center);
        if (!(pc.z() > 0.0)) continue;
        const int u = static_cast<int>(std::lround(f.intrinsics.fx * pc.x() / pc.z() + f.intrinsics.cx));
        const int v = static_cast<int>(std::lround(f.intrinsics.fy * pc.y() / pc.z() + f.intrinsics.cy));
        if (!f.intrinsics.contains_pixel(u, v)) continue;
        const double measured = f.depth.at(u, v);
        if (!(measured > 0.0)) continue;
        if (pc.z() <= measured + tolerance) {
          mask[idx] = 1;
          break;
        }
      }
    }
  });

  if (dilate) {
    std::vector<std::uint8_t> grown = mask;
    for (int k = 0; k < spec.dims[2]; ++k) {
      for (int j = 0; j < spec.dims[1]; ++j) {
        for (int i = 0; i < spec.dims[0]; ++i) {
          if (!mask[spec.linear(i, j, k)]) continue;
          const std::array<std::array<int, 3>, 6> nbrs = {
              {{i - 1, j, k}, {i + 1, j, k}, {i, j - 1, k}, {i, j + 1, k}, {i, j, k - 1}, {i, j, k + 1}}};
          for (const auto& nb : nbrs) {
            if (nb[0] < 0 || nb[1] < 0 || nb[2] < 0 || nb[0] >= spec.dims[0] ||
                nb[1] >= spec.dims[1] || nb[2] >= spec.dims[2]) {
              continue;
            }
            grown[spec.linear(nb[0], nb[1], nb[2])] = 1;
          }
        }
      }
    }
    mask = std::move(grown);
  }
  return mask;
}

/// Ground-truth field: unmasked voxels become unknown (255); masked voxels
/// keep their dense label, with 0 meaning observed free space. Occupancy is 1
/// exactly on class-labeled voxels.
inline OccupancyField assemble_benchmark(const DenseLabels& dense,
                                         const std::vector<std::uint8_t>& mask) {
  dense.spec.validate();
  if (dense.labels.size() != dense.spec.voxel_count() || mask.size() != dense.labels.size()) {
    throw InvalidInputError("assemble_benchmark: raster sizes disagree");
  }
  OccupancyField field;
  field.spec = dense.spec;
  field.allocate();
  for (std::size_t i = 0; i < dense.labels.size(); ++i) {
    if (dense.labels[i] == kLabelUnknown) {
      throw InvalidInputError("assemble_benchmark: dense labels may not contain 255");
    }
    if (!mask[i]) {
      field.label[i] = kLabelUnknown;
      continue;
    }
    field.label[i] = dense.labels[i];
    if (dense.labels[i] != kLabelFree) field.occupancy[i] = 1.0f;
  }
  return field;
}

/// Axis-aligned scene content box. Containment is half-open: min faces belong
/// to the box, max faces do not, so voxel-aligned boxes occupy exactly
/// extent/voxel_size layers per axis.
struct SceneBox {
  Vec3 min = Vec3::Zero();
  Vec3 max = Vec3::Zero();
  int class_id = 1;
  Vec3 color = Vec3::Constant(0.5);
};

/// Circular camera path at fixed height, always looking at `target`.
struct OrbitPath {
  Vec3 target = Vec3::Zero();
  double radius = 1.0;
  double height = 1.0;
  int frame_count = 1;
  double start_angle = 0.0;
  double revolutions = 1.0;
  double timestamp_step = 0.1;
};

struct SceneSpec {
  Vec3 room_min = Vec3::Zero();
  Vec3 room_max = Vec3::Ones();
  std::vector<SceneBox> boxes;
  CameraIntrinsics intrinsics;
  OrbitPath orbit;
  double voxel_size = kDefaultVoxelSize;
  double max_range = kDefaultMaxRange;
  double depth_noise = 0.0;  // std dev of added range noise, meters
  double mask_tolerance_voxels = kDefaultOcclusionToleranceVoxels;
  int mask_frame_stride = 1;
  bool mask_dilate = false;
  std::uint64_t seed = 0;

  // Class ids must be exactly 1..C so that labels line up with text-embedding
  // rows (class c <-> row c-1) without a side table.
  std::vector<int> class_ids() const {
    std::vector<int> ids;
    for (const SceneBox& b : boxes) ids.push_back(b.class_id);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    return ids;
  }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (!(room_min[a] < room_max[a])) throw InvalidInputError("SceneSpec: room must have positive extent");
    }
    intrinsics.validate();
    if (orbit.frame_count < 1) throw InvalidInputError("SceneSpec: orbit needs at least one frame");
    if (!(orbit.radius > 0.0)) throw InvalidInputError("SceneSpec: orbit radius must be positive");
    if (!(orbit.timestamp_step > 0.0)) throw InvalidInputError("SceneSpec: timestamp_step must be positive");
    if (!(voxel_size > 0.0)) throw InvalidInputError("SceneSpec: voxel_size must be positive");
    if (!(max_range > 0.0)) throw InvalidInputError("SceneSpec: max_range must be positive");
    if (!(depth_noise >= 0.0)) throw InvalidInputError("SceneSpec: depth_noise must be >= 0");
    if (mask_frame_stride < 1) throw InvalidInputError("SceneSpec: mask_frame_stride must be >= 1");
    if (!(mask_tolerance_voxels >= 0.0)) throw InvalidInputError("SceneSpec: mask tolerance must be >= 0");
    for (const SceneBox& b : boxes) {
      for (int a = 0; a < 3; ++a) {
        if (!(b.min[a] < b.max[a])) throw InvalidInputError("SceneSpec: box must have positive extent");
        if (b.min[a] < room_min[a] || b.max[a] > room_max[a]) {
          throw InvalidInputError("SceneSpec: box leaves the room");
        }
      }
      if (b.class_id < 1 || b.class_id > 254) throw InvalidInputError("SceneSpec: class ids must be in [1, 254]");
    }
    const std::vector<int> ids = class_ids();
    for (std::size_t c = 0; c < ids.size(); ++c) {
      if (ids[c] != static_cast<int>(c) + 1) {
        throw InvalidInputError("SceneSpec: class ids must be exactly 1..C");
      }
    }
  }
};

namespace detail {

inline bool inside_box(const SceneBox& b, const Vec3& p) {
  return p.x() >= b.min.x() && p.x() < b.max.x() && p.y() >= b.min.y() && p.y() < b.max.y() &&
         p.z() >= b.min.z() && p.z() < b.max.z();
}

// Slab intersection in the given ray parametrization; returns the entry
// parameter or a negative value on miss. Rays starting inside a box miss it.
inline double ray_box_entry(const Vec3& origin, const Vec3& dir, const SceneBox& b) {
  double t_near = -std::numeric_limits<double>::infinity();
  double t_far = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(dir[a]) < 1e-12) {
      if (origin[a] < b.min[a] || origin[a] > b.max[a]) return -1.0;
      continue;
    }
    double t0 = (b.min[a] - origin[a]) / dir[a];
    double t1 = (b.max[a] - origin[a]) / dir[a];
    if (t0 > t1) std::swap(t0, t1);
    t_near = std::max(t_near, t0);
    t_far = std::min(t_far, t1);
  }
  if (t_near > t_far || !(t_near > 1e-9)) return -1.0;
  return t_near;
}

}  // namespace detail

/// Analytic voxelization: each voxel center takes the class of the first
/// listed box containing it, else 0.
inline std::vector<std::uint8_t> box_labels(const std::vector<SceneBox>& boxes,
                                            const GridSpec& spec) {
  spec.validate();
  std::vector<std::uint8_t> labels(spec.voxel_count(), 0);
  for (int k = 0; k < spec.dims[2]; ++k) {
    for (int j = 0; j < spec.dims[1]; ++j) {
      for (int i = 0; i < spec.dims[0]; ++i) {
        const Vec3 c = spec.center(i, j, k);
        for (const SceneBox& b : boxes) {
          if (detail::inside_box(b, c)) {
            labels[spec.linear(i, j, k)] = static_cast<std::uint8_t>(b.class_id);
            break;
          }
        }
      }
    }
  }
  return labels;
}

/// Everything the downstream pipeline consumes from a synthetic scene.
struct SyntheticScene {
  LabeledFrameSet frames;
  std::vector<std::vector<Vec3>> colors;        // per frame, row-major
  std::vector<PixelEmbeddingFrame> embeddings;  // per frame; zero rows off-object
  std::vector<TrajectoryEntry> trajectory;
  OccupancyField ground_truth;  // analytic voxelization masked by observability
  TextEmbeddingSet texts;       // orthonormal rows, row c-1 for class c
  std::uint64_t map_seed = 0;
};

/// Deterministic synthetic scene: orbit camera, analytic ray-box depth
/// quantized to millimeters, per-class orthonormal pixel embeddings, and
/// ground truth that marks voxels never observed by any frame as unknown.
/// Rays that hit no box return no depth (and observe nothing).
inline SyntheticScene generate_scene(const SceneSpec& spec) {
  spec.validate();

  SyntheticScene scene;
  scene.frames.max_range = spec.max_range;
  scene.frames.depth_factor = kDefaultDepthFactor;
  scene.map_seed = derive_seed(spec.seed, 1);

  const std::vector<int> ids = spec.class_ids();
  const int class_count = static_cast<int>(ids.size());
  if (class_count > 0) {
    Eigen::MatrixXf basis = Eigen::MatrixXf::Identity(class_count, class_count);
    std::vector<std::string> names;
    for (int c = 0; c < class_count; ++c) names.push_back("class_" + std::to_string(c + 1));
    scene.texts = make_text_embedding_set(names, basis);
  }

  const CameraIntrinsics& k = spec.intrinsics;
  const int w = k.width, h = k.height;
  for (int fi = 0; fi < spec.orbit.frame_count; ++fi) {
    const double angle = spec.orbit.start_angle +
                         2.0 * M_PI * spec.orbit.revolutions * fi / spec.orbit.frame_count;
    const Vec3 eye(spec.orbit.target.x() + spec.orbit.radius * std::cos(angle),
                   spec.orbit.target.y() + spec.orbit.radius * std::sin(angle),
                   spec.orbit.height);
    for (int a = 0; a < 3; ++a) {
      if (eye[a] < spec.room_min[a] || eye[a] > spec.room_max[a]) {
        throw InvalidInputError("generate_scene: camera path leaves the room");
      }
    }
    const Vec3 forward = (spec.orbit.target - eye).normalized();
    const Vec3 across = forward.cross(Vec3::UnitZ());
    if (across.norm() < 1e-9) throw InvalidInputError("generate_scene: camera looks straight up or down");
    const Vec3 x_cam = across.normalized();
    const Vec3 y_cam = forward.cross(x_cam);
    Mat3 rot;
    rot.col(0) = x_cam;
    rot.col(1) = y_cam;
    rot.col(2) = forward;

    LabeledFrame frame;
    frame.intrinsics = k;
    frame.pose.rotation = Quat(rot).normalized();
    frame.pose.translation = eye;
    frame.timestamp = fi * spec.orbit.timestamp_step;

    Rng noise_rng(derive_seed(spec.seed, 0x10000u + static_cast<std::uint64_t>(fi)));
    std::vector<double> depth(static_cast<std::size_t>(w) * h, 0.0);
    frame.labels.assign(depth.size(), 0);
    std::vector<Vec3> color(depth.size(), Vec3::Zero());
    PixelEmbeddingFrame emb;
    emb.width = w;
    emb.height = h;
    emb.dim = std::max(1, class_count);
    emb.data.assign(depth.size() * emb.dim, 0.0f);

    for (int v = 0; v < h; ++v) {
      for (int u = 0; u < w; ++u) {
        const Vec3 dir = rot * k.pixel_ray(u, v);  // z-normalized: parameter = pinhole depth
        double best_t = std::numeric_limits<double>::infinity();
        const SceneBox* hit = nullptr;
        for (const SceneBox& b : spec.boxes) {
          const double t = detail::ray_box_entry(eye, dir, b);
          if (t > 0.0 && t < best_t) {
            best_t = t;
            hit = &b;
          }
        }
        if (hit == nullptr) continue;
        double d = best_t;
        if (spec.depth_noise > 0.0) d += spec.depth_noise * noise_rng.normal();
        d = std::round(d * 1000.0) / 1000.0;  // millimeter sensor quantization
        if (!(d > 0.0) || d > spec.max_range) continue;
        const std::size_t px = static_cast<std::size_t>(v) * w + u;
        depth[px] = d;
        frame.labels[px] = static_cast<std::uint8_t>(hit->class_id);
        color[px] = hit->color;
        emb.data[px * emb.dim + (hit->class_id - 1)] = 1.0f;
      }
    }

    frame.depth = make_depth_frame(w, h, std::move(depth), spec.max_range);
    scene.trajectory.push_back({frame.timestamp, frame.pose});
    scene.frames.frames.push_back(std::move(frame));
    scene.colors.push_back(std::move(color));
    scene.embeddings.push_back(std::move(emb));
  }

  GridSpec grid = grid_covering(spec.room_min, spec.room_max, spec.voxel_size);
  DenseLabels dense{grid, box_labels(spec.boxes, grid)};
  const std::vector<std::uint8_t> mask = observability_mask(
      grid, scene.frames, spec.mask_frame_stride, spec.mask_tolerance_voxels, spec.mask_dilate);
  scene.ground_truth = assemble_benchmark(dense, mask);
  return scene;
}

}  // namespace levox
