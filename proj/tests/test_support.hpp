#pragma once

// Shared helpers and independent oracles for the test suite. The oracles
// deliberately re-derive quantities from definitions (dense loops, textbook
// formulas) instead of calling the library's optimized paths.

#include <unistd.h>

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "levox/common.hpp"
#include "levox/core.hpp"
#include "levox/gsmap.hpp"
#include "levox/occproj.hpp"

namespace levox_test {

using levox::GaussianPrimitive;
using levox::Mat3;
using levox::Quat;
using levox::Rng;
using levox::Vec3;

inline std::string tmp_dir() {
  static std::string dir = [] {
    auto d = std::filesystem::temp_directory_path() /
             ("levox_tests_" + std::to_string(static_cast<unsigned>(::getpid())));
    std::filesystem::create_directories(d);
    return d.string();
  }();
  return dir;
}

inline std::string tmp_path(const std::string& name) {
  return (std::filesystem::path(tmp_dir()) / name).string();
}

inline Quat random_rotation(Rng& rng) {
  Quat q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  while (q.norm() < 1e-6) q = Quat(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  return q.normalized();
}

inline Vec3 random_point(Rng& rng, double lo, double hi) {
  return Vec3(rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi));
}

inline GaussianPrimitive random_primitive(Rng& rng, const Vec3& box_lo, const Vec3& box_hi,
                                          double scale_lo, double scale_hi, int feature_dim = 0) {
  GaussianPrimitive g;
  g.mean = Vec3(rng.uniform(box_lo.x(), box_hi.x()), rng.uniform(box_lo.y(), box_hi.y()),
                rng.uniform(box_lo.z(), box_hi.z()));
  g.scale = Vec3(rng.uniform(scale_lo, scale_hi), rng.uniform(scale_lo, scale_hi),
                 rng.uniform(scale_lo, scale_hi));
  g.rotation = random_rotation(rng);
  g.opacity = rng.uniform(0.05, 0.95);
  g.color = Vec3(rng.uniform(), rng.uniform(), rng.uniform());
  if (feature_dim > 0) {
    Eigen::VectorXd f(feature_dim);
    for (int d = 0; d < feature_dim; ++d) f[d] = rng.normal();
    if (f.norm() < 1e-6) f[0] = 1.0;
    g.feature = (f / f.norm()).cast<float>();
  }
  return g;
}

// Textbook covariance R diag(s^2) R^T; algebraically equal to the library's
// B B^T but computed by a different expression.
inline Mat3 oracle_covariance(const GaussianPrimitive& g) {
  const Mat3 r = g.rotation.normalized().toRotationMatrix();
  const Vec3 s2 = g.scale.cwiseProduct(g.scale);
  return r * s2.asDiagonal() * r.transpose();
}

inline double oracle_mahalanobis_sq(const GaussianPrimitive& g, const Vec3& x) {
  Mat3 sigma = oracle_covariance(g);
  sigma.diagonal().array() += levox::kCovarianceEpsilon;
  const Vec3 d = x - g.mean;
  return d.dot(sigma.inverse() * d);
}

// Exact support test over every primitive, no spatial index.
inline std::vector<std::uint32_t> oracle_neighbors(const std::vector<GaussianPrimitive>& prims,
                                                   const Vec3& x) {
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < prims.size(); ++i) {
    if (oracle_mahalanobis_sq(prims[i], x) <= 9.0) out.push_back(static_cast<std::uint32_t>(i));
  }
  return out;
}

struct OracleVoxel {
  float occupancy = 0.0f;
  std::uint8_t label = 0;
  bool has_feature = false;
  Eigen::VectorXf feature;
};

// Dense projection straight from the definitions: gather 3-sigma neighbors by
// brute force, compose occupancy in index order, take the opacity-weighted
// Gaussian posterior over the featured neighbors, normalize, argmax over text
// embeddings (ties -> lowest class id).
inline OracleVoxel oracle_project_voxel(const std::vector<GaussianPrimitive>& prims, const Vec3& x,
                                        double tau_occ, const levox::TextEmbeddingSet* texts) {
  OracleVoxel out;
  const std::vector<std::uint32_t> nbrs = oracle_neighbors(prims, x);
  double free_prob = 1.0;
  for (std::uint32_t k : nbrs) {
    free_prob *= 1.0 - std::exp(-0.5 * oracle_mahalanobis_sq(prims[k], x));
  }
  out.occupancy = static_cast<float>(1.0 - free_prob);
  if (!(static_cast<double>(out.occupancy) >= tau_occ)) return out;

  std::vector<double> weights;
  std::vector<std::uint32_t> featured;
  double max_lw = -std::numeric_limits<double>::infinity();
  for (std::uint32_t k : nbrs) {
    if (!prims[k].has_feature()) continue;
    if (prims[k].opacity <= 0.0) continue;
    Mat3 sigma = oracle_covariance(prims[k]);
    sigma.diagonal().array() += levox::kCovarianceEpsilon;
    const double lw = std::log(prims[k].opacity) - 0.5 * oracle_mahalanobis_sq(prims[k], x) -
                      0.5 * std::log(sigma.determinant());
    featured.push_back(k);
    weights.push_back(lw);
    max_lw = std::max(max_lw, lw);
  }
  if (featured.empty() || !std::isfinite(max_lw)) return out;
  double total = 0.0;
  for (double& w : weights) {
    w = std::exp(w - max_lw);
    total += w;
  }
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(prims[featured[0]].feature.size());
  for (std::size_t j = 0; j < featured.size(); ++j) {
    acc += (weights[j] / total) * prims[featured[j]].feature.cast<double>();
  }
  if (acc.norm() < 1e-9) return out;
  out.has_feature = true;
  out.feature = (acc / acc.norm()).cast<float>();
  if (texts != nullptr) {
    int best = 0;
    double best_sim = texts->embeddings.row(0).cast<double>().dot(acc.normalized());
    for (int c = 1; c < texts->size(); ++c) {
      const double sim = texts->embeddings.row(c).cast<double>().dot(acc.normalized());
      if (sim > best_sim) {
        best_sim = sim;
        best = c;
      }
    }
    out.label = static_cast<std::uint8_t>(best + 1);
  }
  return out;
}

}  // namespace levox_test
