#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "levox/common.hpp"
#include "levox/core.hpp"
#include "levox/gsmap.hpp"

namespace levox {

inline constexpr double kDefaultTauOcc = 0.5;
inline constexpr std::uint8_t kLabelFree = 0;
inline constexpr std::uint8_t kLabelUnknown = 255;

/// Axis-aligned voxel lattice. Voxel (i, j, k) covers
/// origin + [i, i+1) x [j, j+1) x [k, k+1) times voxel_size; its center sits at
/// origin + (i + 1/2, j + 1/2, k + 1/2) * voxel_size. Linear storage is
/// x-fastest, then y, then z.
struct GridSpec {
  Vec3 origin = Vec3::Zero();
  std::array<int, 3> dims{0, 0, 0};
  double voxel_size = 0.08;

  void validate() const {
    if (!origin.allFinite()) throw InvalidInputError("GridSpec: origin must be finite");
    if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1) throw InvalidInputError("GridSpec: dims must be >= 1");
    if (!(voxel_size > 0.0) || !std::isfinite(voxel_size)) throw InvalidInputError("GridSpec: voxel_size must be positive");
  }

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }

  std::size_t linear(int i, int j, int k) const {
    return (static_cast<std::size_t>(k) * dims[1] + j) * dims[0] + i;
  }

  std::array<int, 3> unlinear(std::size_t idx) const {
    const int i = static_cast<int>(idx % dims[0]);
    const int j = static_cast<int>((idx / dims[0]) % dims[1]);
    const int k = static_cast<int>(idx / (static_cast<std::size_t>(dims[0]) * dims[1]));
    return {i, j, k};
  }

  Vec3 center(int i, int j, int k) const {
    return origin + Vec3((i + 0.5) * voxel_size, (j + 0.5) * voxel_size, (k + 0.5) * voxel_size);
  }

  bool operator==(const GridSpec& o) const {
    return origin == o.origin && dims == o.dims && voxel_size == o.voxel_size;
  }
};

/// Smallest grid of `voxel_size` voxels anchored at `lo` that covers [lo, hi].
inline GridSpec grid_covering(const Vec3& lo, const Vec3& hi, double voxel_size) {
  if (!(voxel_size > 0.0)) throw InvalidInputError("grid_covering: voxel_size must be positive");
  GridSpec spec;
  spec.origin = lo;
  spec.voxel_size = voxel_size;
  for (int a = 0; a < 3; ++a) {
    const double extent = hi[a] - lo[a];
    if (!(extent > 0.0)) throw InvalidInputError("grid_covering: hi must exceed lo on every axis");
    spec.dims[a] = std::max(1, static_cast<int>(std::ceil(extent / voxel_size - 1e-9)));
  }
  return spec;
}

/// Dense occupancy + semantics over a voxel grid. Labels: 0 free, 255 unknown
/// (unobserved), 1..254 class ids. `features` holds unit feature vectors for
/// the voxels that have one, sorted by linear index.
struct OccupancyField {
  GridSpec spec;
  std::vector<float> occupancy;
  std::vector<std::uint8_t> label;
  int feature_dim = 0;
  std::vector<std::pair<std::uint64_t, Eigen::VectorXf>> features;

  void allocate() {
    occupancy.assign(spec.voxel_count(), 0.0f);
    label.assign(spec.voxel_count(), kLabelFree);
    features.clear();
  }

  void validate() const {
    spec.validate();
    if (occupancy.size() != spec.voxel_count() || label.size() != spec.voxel_count()) {
      throw InvalidInputError("OccupancyField: buffer sizes do not match grid");
    }
  }
};

/// Named per-class text embeddings, one unit-norm row per category. Category
/// order defines the class ids: category c (0-based) labels voxels with c + 1.
struct TextEmbeddingSet {
  std::vector<std::string> categories;
  Eigen::MatrixXf embeddings;  // rows: categories, cols: feature dim

  int dim() const { return static_cast<int>(embeddings.cols()); }
  int size() const { return static_cast<int>(embeddings.rows()); }

  int find(const std::string& name) const {
    for (int c = 0; c < size(); ++c)
      if (categories[c] == name) return c;
    return -1;
  }
};

inline TextEmbeddingSet make_text_embedding_set(std::vector<std::string> categories,
                                                Eigen::MatrixXf embeddings) {
  if (categories.empty()) throw InvalidInputError("TextEmbeddingSet: no categories");
  if (categories.size() > 254) throw InvalidInputError("TextEmbeddingSet: at most 254 categories supported");
  if (embeddings.rows() != static_cast<Eigen::Index>(categories.size())) {
    throw InvalidInputError("TextEmbeddingSet: row count does not match category count");
  }
  if (embeddings.cols() < 1) throw InvalidInputError("TextEmbeddingSet: feature dimension must be >= 1");
  std::set<std::string> seen;
  for (const auto& name : categories) {
    if (name.empty()) throw InvalidInputError("TextEmbeddingSet: empty category name");
    if (!seen.insert(name).second) throw InvalidInputError("TextEmbeddingSet: duplicate category '" + name + "'");
  }
  for (Eigen::Index r = 0; r < embeddings.rows(); ++r) {
    const double n = embeddings.row(r).cast<double>().norm();
    if (n < 1e-9) throw InvalidInputError("TextEmbeddingSet: zero embedding for '" + categories[r] + "'");
    embeddings.row(r) = (embeddings.row(r).cast<double>() / n).cast<float>();
  }
  TextEmbeddingSet out;
  out.categories = std::move(categories);
  out.embeddings = std::move(embeddings);
  return out;
}

/// Gaussian support of g at x: exp(-1/2 (x-mu)^T (Sigma + eps I)^-1 (x-mu)).
/// 1 at the mean, decays with Mahalanobis distance, no opacity factor.
inline double spatial_support(const GaussianPrimitive& g, const Vec3& x) {
  const Vec3 d = x - g.mean;
  const Mat3 a = regularized_inverse(covariance(g));
  return std::exp(-0.5 * d.dot(a * d));
}

/// Probabilistic union of per-primitive supports: 1 - prod_k (1 - alpha_k),
/// evaluated in the given order. Empty input -> 0.
inline double compose_occupancy(std::span<const double> alphas) {
  double free_prob = 1.0;
  for (double a : alphas) {
    if (!(a >= 0.0) || !(a <= 1.0)) throw InvalidInputError("compose_occupancy: support outside [0, 1]");
    free_prob *= (1.0 - a);
  }
  return 1.0 - free_prob;
}

namespace detail {

// Log of the opacity-weighted Gaussian density up to the shared (2pi)^{-3/2}
// factor, which cancels in the softmax.
inline double log_component_weight(double opacity, double mahal_sq, double log_det) {
  if (opacity <= 0.0) return -std::numeric_limits<double>::infinity();
  return std::log(opacity) - 0.5 * mahal_sq - 0.5 * log_det;
}

// Normalizes log weights in place into probabilities; returns false when the
// mixture carries no mass at all.
inline bool softmax_in_place(std::vector<double>& log_w) {
  double max_lw = -std::numeric_limits<double>::infinity();
  for (double lw : log_w) max_lw = std::max(max_lw, lw);
  if (!std::isfinite(max_lw)) return false;
  double total = 0.0;
  for (double& lw : log_w) {
    lw = std::exp(lw - max_lw);
    total += lw;
  }
  for (double& lw : log_w) lw /= total;
  return true;
}

}  // namespace detail

/// Posterior assignment probabilities of point x under the opacity-weighted
/// Gaussian mixture of `neighbors`: r_k proportional to o_k N(x; mu_k, Sigma_k).
/// Sums to 1; computed in log space for stability.
inline std::vector<double> responsibilities(std::span<const GaussianPrimitive> neighbors,
                                            const Vec3& x) {
  if (neighbors.empty()) throw DegenerateMixtureError("responsibilities: empty neighbor set");
  std::vector<double> log_w(neighbors.size());
  for (std::size_t k = 0; k < neighbors.size(); ++k) {
    const GaussianPrimitive& g = neighbors[k];
    const Mat3 sigma = covariance(g);
    const Vec3 d = x - g.mean;
    log_w[k] = detail::log_component_weight(g.opacity, d.dot(regularized_inverse(sigma) * d),
                                            regularized_log_det(sigma));
  }
  if (!detail::softmax_in_place(log_w)) {
    throw DegenerateMixtureError("responsibilities: mixture has zero total mass");
  }
  return log_w;
}

/// Responsibility-weighted mean feature at x, L2-normalized. Every neighbor
/// with nonzero responsibility must carry a feature; a near-cancelling mean is
/// a degenerate-feature error.
inline Eigen::VectorXf expected_feature(std::span<const GaussianPrimitive> neighbors,
                                        const Vec3& x) {
  const std::vector<double> resp = responsibilities(neighbors, x);
  Eigen::VectorXd acc;
  for (std::size_t k = 0; k < neighbors.size(); ++k) {
    if (resp[k] <= 0.0) continue;
    if (!neighbors[k].has_feature()) {
      throw DegenerateFeatureError("expected_feature: neighbor with nonzero responsibility has no feature");
    }
    if (acc.size() == 0) acc = Eigen::VectorXd::Zero(neighbors[k].feature.size());
    if (neighbors[k].feature.size() != acc.size()) {
      throw InvalidInputError("expected_feature: inconsistent feature dimensions");
    }
    acc += resp[k] * neighbors[k].feature.cast<double>();
  }
  if (acc.size() == 0) throw DegenerateFeatureError("expected_feature: no mass on featured neighbors");
  const double norm = acc.norm();
  if (norm < 1e-9) throw DegenerateFeatureError("expected_feature: expected feature near-cancels");
  return (acc / norm).cast<float>();
}

/// Cosine similarity of a unit feature against every category embedding.
inline std::vector<double> text_similarity(const Eigen::VectorXf& feature,
                                           const TextEmbeddingSet& texts) {
  if (feature.size() != texts.dim()) throw InvalidInputError("text_similarity: feature dimension mismatch");
  const double norm = feature.cast<double>().norm();
  if (std::abs(norm - 1.0) > 1e-3) throw InvalidInputError("text_similarity: feature must be unit norm");
  std::vector<double> out(texts.size());
  const Eigen::VectorXd f = feature.cast<double>();
  for (int c = 0; c < texts.size(); ++c) {
    out[c] = texts.embeddings.row(c).cast<double>().dot(f);
  }
  return out;
}

struct ProjectStats {
  std::size_t gated_voxels = 0;            // voxels whose occupancy reached tau_occ
  std::size_t degenerate_feature_voxels = 0;  // gated voxels left unlabeled for lack of features
};

/// Dense open-vocabulary occupancy from a Gaussian map. Per voxel center:
/// gather the 3-sigma neighbors, compose occupancy from their supports, and,
/// where occupancy reaches tau_occ, attach the responsibility-weighted feature
/// of the featured neighbors and the argmax text label (ties -> lowest class
/// id). Gated voxels with no featured mass keep label 0 and are counted in
/// stats. Deterministic for any worker count.
inline OccupancyField project(const GaussianMap& map, const GridSpec& spec,
                              double tau_occ = kDefaultTauOcc,
                              const TextEmbeddingSet* texts = nullptr,
                              ProjectStats* stats = nullptr) {
  spec.validate();
  if (!(tau_occ >= 0.0) || !(tau_occ <= 1.0)) throw InvalidInputError("project: tau_occ must be in [0, 1]");
  if (texts != nullptr && map.feature_dim() != 0 && texts->dim() != map.feature_dim()) {
    throw InvalidInputError("project: text embedding dimension does not match map feature dimension");
  }

  OccupancyField field;
  field.spec = spec;
  field.feature_dim = map.feature_dim();
  field.allocate();

  const std::size_t n = spec.voxel_count();
  const std::size_t chunk_count = default_chunk_count(n);
  struct ChunkOut {
    std::vector<std::pair<std::uint64_t, Eigen::VectorXf>> features;
    std::size_t gated = 0;
    std::size_t degenerate = 0;
  };
  std::vector<ChunkOut> chunks(chunk_count);
  const auto& prims = map.primitives();

  parallel_chunks(n, chunk_count, [&](std::size_t c, std::size_t begin, std::size_t end) {
    ChunkOut& out = chunks[c];
    std::vector<double> log_w;
    for (std::size_t idx = begin; idx < end; ++idx) {
      const auto ijk = spec.unlinear(idx);
      const Vec3 x = spec.center(ijk[0], ijk[1], ijk[2]);
      const std::vector<std::uint32_t> nbrs = map.query_neighbors(x);

      double free_prob = 1.0;
      for (std::uint32_t k : nbrs) {
        const Vec3 d = x - prims[k].mean;
        free_prob *= 1.0 - std::exp(-0.5 * d.dot(map.inv_covariance(k) * d));
      }
      const float occ = static_cast<float>(1.0 - free_prob);
      field.occupancy[idx] = occ;
      if (!(static_cast<double>(occ) >= tau_occ)) continue;
      ++out.gated;

      // Feature expectation over the featured neighbors only; softmax over the
      // subset equals the full posterior renormalized, which the final L2
      // normalization absorbs.
      log_w.clear();
      std::vector<std::uint32_t> featured;
      for (std::uint32_t k : nbrs) {
        if (!prims[k].has_feature()) continue;
        const Vec3 d = x - prims[k].mean;
        featured.push_back(k);
        log_w.push_back(detail::log_component_weight(
            prims[k].opacity, d.dot(map.inv_covariance(k) * d), map.log_det_covariance(k)));
      }
      if (featured.empty() || !detail::softmax_in_place(log_w)) {
        ++out.degenerate;
        continue;
      }
      Eigen::VectorXd acc = Eigen::VectorXd::Zero(map.feature_dim());
      for (std::size_t j = 0; j < featured.size(); ++j) {
        acc += log_w[j] * prims[featured[j]].feature.cast<double>();
      }
      const double norm = acc.norm();
      if (norm < 1e-9) {
        ++out.degenerate;
        continue;
      }
      const Eigen::VectorXf feature = (acc / norm).cast<float>();
      out.features.emplace_back(idx, feature);

      if (texts != nullptr) {
        const Eigen::VectorXd f = feature.cast<double>();
        int best = 0;
        double best_sim = texts->embeddings.row(0).cast<double>().dot(f);
        for (int cls = 1; cls < texts->size(); ++cls) {
          const double sim = texts->embeddings.row(cls).cast<double>().dot(f);
          if (sim > best_sim) {
            best_sim = sim;
            best = cls;
          }
        }
        field.label[idx] = static_cast<std::uint8_t>(best + 1);
      }
    }
  });

  ProjectStats total;
  for (auto& c : chunks) {
    total.gated_voxels += c.gated;
    total.degenerate_feature_voxels += c.degenerate;
    field.features.insert(field.features.end(), std::make_move_iterator(c.features.begin()),
                          std::make_move_iterator(c.features.end()));
  }
  if (stats != nullptr) *stats = total;
  return field;
}

}  // namespace levox
