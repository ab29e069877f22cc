#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "levox/common.hpp"
#include "levox/core.hpp"
#include "levox/gsmap.hpp"
#include "levox/occproj.hpp"

namespace levox {

/// Trajectory entries whose timestamps differ by no more than this pair up
/// during alignment; when timestamp matching yields too few pairs, equal-length
/// trajectories fall back to pairing by index.
inline constexpr double kTrajectoryMatchTolerance = 0.02;

struct ClassCounts {
  std::size_t tp = 0, fp = 0, fn = 0;
};

/// Metrics over a prediction/ground-truth grid pair. `per_class_iou` holds the
/// classes that were evaluated; requested classes absent from both grids are
/// listed in `classes_skipped` and excluded from `miou` (the mean over
/// `per_class_iou`). `counts` covers every requested class.
struct EvalReport {
  double iou = 0.0;
  double miou = 0.0;
  std::map<int, double> per_class_iou;
  std::vector<int> classes_evaluated;
  std::vector<int> classes_skipped;
  std::map<int, ClassCounts> counts;
  SimilarityTransform alignment = SimilarityTransform::identity();
};

namespace detail {

inline void require_same_grid(const OccupancyField& pred, const OccupancyField& gt,
                              const char* where) {
  pred.validate();
  gt.validate();
  if (!(pred.spec == gt.spec)) throw InvalidInputError(std::string(where) + ": grid specs differ");
}

}  // namespace detail

/// Binary IoU between predicted occupancy (occupancy >= tau_occ) and ground
/// truth (label in [1, 254]), ignoring voxels with ground-truth label 255.
/// Empty union on both sides counts as a perfect 1.
inline double binary_iou(const OccupancyField& pred, const OccupancyField& gt,
                         double tau_occ = kDefaultTauOcc) {
  detail::require_same_grid(pred, gt, "binary_iou");
  if (!(tau_occ >= 0.0) || !(tau_occ <= 1.0)) throw InvalidInputError("binary_iou: tau_occ must be in [0, 1]");

  const std::size_t n = gt.label.size();
  const std::size_t chunk_count = default_chunk_count(n);
  std::vector<std::array<std::size_t, 2>> partial(chunk_count, {0, 0});
  parallel_chunks(n, chunk_count, [&](std::size_t c, std::size_t begin, std::size_t end) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = begin; i < end; ++i) {
      if (gt.label[i] == kLabelUnknown) continue;
      const bool p = pred.occupancy[i] >= static_cast<float>(tau_occ);
      const bool g = gt.label[i] != kLabelFree;
      if (p && g) ++inter;
      if (p || g) ++uni;
    }
    partial[c] = {inter, uni};
  });
  std::size_t inter = 0, uni = 0;
  for (const auto& q : partial) {
    inter += q[0];
    uni += q[1];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct ClassIouResult {
  std::map<int, double> per_class_iou;
  double miou = 0.0;
  std::vector<int> classes_evaluated;
  std::vector<int> classes_skipped;
  std::map<int, ClassCounts> counts;
};

/// Per-class IoU over voxels with ground-truth label != 255: for class c,
/// |pred = c and gt = c| / |pred = c or gt = c|. Classes with no support in
/// either grid are skipped; the mean runs over the evaluated classes only.
/// An effective subset that ends up empty is an error.
inline ClassIouResult class_iou(const OccupancyField& pred, const OccupancyField& gt,
                                std::span<const int> class_subset) {
  detail::require_same_grid(pred, gt, "class_iou");
  if (class_subset.empty()) throw InvalidInputError("class_iou: empty class subset");
  std::set<int> seen;
  for (int c : class_subset) {
    if (c < 1 || c > 254) throw InvalidInputError("class_iou: class ids must lie in [1, 254]");
    if (!seen.insert(c).second) throw InvalidInputError("class_iou: duplicate class id " + std::to_string(c));
  }

  const std::size_t k = class_subset.size();
  const std::size_t n = gt.label.size();
  const std::size_t chunk_count = default_chunk_count(n);
  std::vector<std::vector<ClassCounts>> partial(chunk_count, std::vector<ClassCounts>(k));
  parallel_chunks(n, chunk_count, [&](std::size_t c, std::size_t begin, std::size_t end) {
    std::vector<ClassCounts>& local = partial[c];
    for (std::size_t i = begin; i < end; ++i) {
      if (gt.label[i] == kLabelUnknown) continue;
      for (std::size_t s = 0; s < k; ++s) {
        const bool p = pred.label[i] == class_subset[s];
        const bool g = gt.label[i] == class_subset[s];
        if (p && g) ++local[s].tp;
        if (p && !g) ++local[s].fp;
        if (!p && g) ++local[s].fn;
      }
    }
  });

  ClassIouResult out;
  double total = 0.0;
  for (std::size_t s = 0; s < k; ++s) {
    ClassCounts sum;
    for (const auto& local : partial) {
      sum.tp += local[s].tp;
      sum.fp += local[s].fp;
      sum.fn += local[s].fn;
    }
    const int cls = class_subset[s];
    out.counts[cls] = sum;
    const std::size_t uni = sum.tp + sum.fp + sum.fn;
    if (uni == 0) {
      out.classes_skipped.push_back(cls);
      continue;
    }
    const double iou = static_cast<double>(sum.tp) / static_cast<double>(uni);
    out.per_class_iou[cls] = iou;
    out.classes_evaluated.push_back(cls);
    total += iou;
  }
  if (out.classes_evaluated.empty()) {
    throw InvalidInputError("class_iou: no requested class present in prediction or ground truth");
  }
  out.miou = total / static_cast<double>(out.classes_evaluated.size());
  return out;
}

namespace detail {

/// Camera-center correspondences, preferring nearest-timestamp pairs within
/// kTrajectoryMatchTolerance (each entry used at most once, closest pairs
/// first) and falling back to index order for equal-length trajectories whose
/// timestamps do not line up.
inline void match_trajectories(const Trajectory& pred, const Trajectory& gt,
                               std::vector<Vec3>& src, std::vector<Vec3>& dst) {
  struct Candidate {
    double dt;
    std::size_t i, j;
  };
  std::vector<Candidate> candidates;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double best_dt = kTrajectoryMatchTolerance;
    std::size_t best_j = gt.size();
    for (std::size_t j = 0; j < gt.size(); ++j) {
      const double dt = std::abs(pred[i].timestamp - gt[j].timestamp);
      if (dt < best_dt || (dt == best_dt && best_j == gt.size())) {
        best_dt = dt;
        best_j = j;
      }
    }
    if (best_j != gt.size()) candidates.push_back({best_dt, i, best_j});
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Candidate& a, const Candidate& b) { return a.dt < b.dt; });
  std::vector<char> used(gt.size(), 0);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (const Candidate& c : candidates) {
    if (used[c.j]) continue;
    used[c.j] = 1;
    pairs.emplace_back(c.i, c.j);
  }
  if (pairs.size() < 3 && pred.size() == gt.size()) {
    pairs.clear();
    for (std::size_t i = 0; i < pred.size(); ++i) pairs.emplace_back(i, i);
  }
  if (pairs.size() < 3) {
    throw InsufficientCorrespondencesError("align_and_evaluate: only " + std::to_string(pairs.size()) +
                                           " matched trajectory pairs, need at least 3");
  }
  std::sort(pairs.begin(), pairs.end());
  src.reserve(pairs.size());
  dst.reserve(pairs.size());
  for (const auto& [i, j] : pairs) {
    src.push_back(pred[i].pose.translation);
    dst.push_back(gt[j].pose.translation);
  }
}

}  // namespace detail

/// Full evaluation protocol: estimate the Sim(3) (or SE(3) when estimate_scale
/// is false) aligning the predicted camera centers onto the ground-truth ones,
/// transform the map, project it onto the ground-truth grid, and score binary
/// IoU plus per-class IoU over the text-set classes (class c = category row
/// c - 1).
inline EvalReport align_and_evaluate(const GaussianMap& map, const Trajectory& pred_trajectory,
                                     const OccupancyField& gt_field, const Trajectory& gt_trajectory,
                                     bool estimate_scale, const TextEmbeddingSet& texts,
                                     double tau_occ = kDefaultTauOcc) {
  gt_field.validate();
  std::vector<Vec3> src, dst;
  detail::match_trajectories(pred_trajectory, gt_trajectory, src, dst);

  EvalReport report;
  report.alignment = umeyama_align(src, dst, estimate_scale);
  const GaussianMap aligned = transform_map(map, report.alignment);
  const OccupancyField pred = project(aligned, gt_field.spec, tau_occ, &texts);

  report.iou = binary_iou(pred, gt_field, tau_occ);
  std::vector<int> subset(static_cast<std::size_t>(texts.size()));
  for (int c = 0; c < texts.size(); ++c) subset[static_cast<std::size_t>(c)] = c + 1;
  ClassIouResult classes = class_iou(pred, gt_field, subset);
  report.miou = classes.miou;
  report.per_class_iou = std::move(classes.per_class_iou);
  report.classes_evaluated = std::move(classes.classes_evaluated);
  report.classes_skipped = std::move(classes.classes_skipped);
  report.counts = std::move(classes.counts);
  return report;
}

}  // namespace levox
