#pragma once

#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "levox/common.hpp"
#include "levox/core.hpp"
#include "levox/gsmap.hpp"
#include "levox/splatopt.hpp"

namespace levox {

/// Map initialization policy. Every `pixel_stride`-sampled valid-depth pixel
/// seeds an anchored primitive unless it is beyond `max_depth` (0 disables the
/// cap) or its back-projected point lies within `min_spacing` of an already
/// admitted mean (0 disables the gate). The range cap keeps distant
/// observations from seeding oversized primitives where closer views cover the
/// same surface; the spacing gate bounds how many primitives pile up per
/// surface patch while still filling view-dependent sampling gaps.
struct InitConfig {
  int pixel_stride = 1;
  double kappa = kDefaultKappa;
  double gamma = kDefaultGamma;
  double opacity = kDefaultInitOpacity;
  double max_depth = 0.0;
  double min_spacing = 0.0;

  void validate() const {
    if (pixel_stride < 1) throw InvalidInputError("InitConfig: pixel_stride must be >= 1");
    if (!(kappa > 0.0) || !(gamma > 0.0)) throw InvalidInputError("InitConfig: kappa and gamma must be positive");
    if (opacity < 0.0 || opacity > 1.0) throw InvalidInputError("InitConfig: opacity must be in [0, 1]");
    if (!(max_depth >= 0.0)) throw InvalidInputError("InitConfig: max_depth must be >= 0");
    if (!(min_spacing >= 0.0)) throw InvalidInputError("InitConfig: min_spacing must be >= 0");
  }
};

/// Builds an anchored map from posed RGB-D frames, frame by frame in order,
/// pixels row-major; deterministic for any worker count.
inline GaussianMap init_map(std::span<const ObservedFrame> frames, const InitConfig& config) {
  config.validate();
  if (frames.empty()) throw InvalidInputError("init_map: no frames");
  for (const ObservedFrame& f : frames) f.validate();

  // Occupied-cell grid over admitted means; cell edge = min_spacing makes the
  // 27 surrounding cells a superset of every mean within the gate radius.
  std::unordered_map<detail::CellKey, std::vector<Vec3>, detail::CellKeyHash> occupied;
  const double gate_sq = config.min_spacing * config.min_spacing;
  auto gated = [&](const Vec3& p) {
    const detail::CellKey base{detail::cell_coord(p.x(), config.min_spacing),
                               detail::cell_coord(p.y(), config.min_spacing),
                               detail::cell_coord(p.z(), config.min_spacing)};
    for (std::int32_t dz = -1; dz <= 1; ++dz)
      for (std::int32_t dy = -1; dy <= 1; ++dy)
        for (std::int32_t dx = -1; dx <= 1; ++dx) {
          const auto it = occupied.find(detail::CellKey{base.x + dx, base.y + dy, base.z + dz});
          if (it == occupied.end()) continue;
          for (const Vec3& q : it->second) {
            if ((q - p).squaredNorm() < gate_sq) return true;
          }
        }
    return false;
  };

  GaussianMap map;
  std::vector<GaussianPrimitive> batch;
  for (const ObservedFrame& f : frames) {
    batch.clear();
    for (int v = 0; v < f.intrinsics.height; v += config.pixel_stride) {
      for (int u = 0; u < f.intrinsics.width; u += config.pixel_stride) {
        const double d = f.depth.at(u, v);
        if (!(d > 0.0)) continue;
        if (config.max_depth > 0.0 && d > config.max_depth) continue;
        const Vec3& color = f.image[static_cast<std::size_t>(v) * f.intrinsics.width + u];
        if (config.min_spacing > 0.0) {
          const Vec3 p = f.pose.apply(f.intrinsics.unproject(u, v, d));
          if (gated(p)) continue;
          occupied[detail::CellKey{detail::cell_coord(p.x(), config.min_spacing),
                                   detail::cell_coord(p.y(), config.min_spacing),
                                   detail::cell_coord(p.z(), config.min_spacing)}]
              .push_back(p);
        }
        batch.push_back(init_primitive(u, v, d, color, f.intrinsics, f.pose, config.gamma,
                                       config.kappa, config.opacity));
      }
    }
    map.insert_batch(batch);
  }
  if (map.empty()) throw InvalidInputError("init_map: no valid depth pixels");
  return map;
}

/// Attaches per-frame pixel embeddings to an initialized map.
/// Returns the total number of associated pixels.
inline std::size_t associate_all(GaussianMap& map, std::span<const PixelEmbeddingFrame> embeddings,
                                 std::span<const ObservedFrame> frames,
                                 double radius = kDefaultAssociationRadius, int pixel_stride = 1) {
  if (embeddings.size() != frames.size()) {
    throw InvalidInputError("associate_all: embedding and frame counts differ");
  }
  std::size_t total = 0;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    total += associate_semantics(map, embeddings[i], frames[i].depth, frames[i].intrinsics,
                                 frames[i].pose, radius, pixel_stride);
  }
  return total;
}

}  // namespace levox
