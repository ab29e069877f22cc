#include <cmath>
#include <vector>

#include "catch_amalgamated.hpp"
#include "levox/gsmap.hpp"
#include "test_support.hpp"

using namespace levox;
using levox_test::oracle_neighbors;
using levox_test::random_point;
using levox_test::random_primitive;
using levox_test::random_rotation;
using Catch::Approx;

TEST_CASE("covariance: isotropic scale gives s^2 I for any rotation") {
  Rng rng(21);
  GaussianPrimitive g;
  g.scale = Vec3::Constant(0.3);
  g.rotation = random_rotation(rng);
  const Mat3 sigma = covariance(g);
  REQUIRE((sigma - 0.09 * Mat3::Identity()).norm() < 1e-15);
}

TEST_CASE("covariance: symmetric positive definite for random primitives") {
  Rng rng(22);
  for (int t = 0; t < 50; ++t) {
    const GaussianPrimitive g =
        random_primitive(rng, Vec3::Zero(), Vec3::Ones(), 1e-4, 0.5);
    const Mat3 sigma = covariance(g);
    REQUIRE((sigma - sigma.transpose()).norm() == 0.0);  // bitwise symmetry by construction
    Eigen::SelfAdjointEigenSolver<Mat3> es(sigma);
    REQUIRE(es.eigenvalues().minCoeff() > 0.0);
    // Regularized inverse actually inverts.
    Mat3 reg = sigma;
    reg.diagonal().array() += kCovarianceEpsilon;
    REQUIRE((regularized_inverse(sigma) * reg - Mat3::Identity()).norm() < 1e-6);
  }
}

TEST_CASE("backproject: full-frame valid depth yields one point per sampled pixel") {
  CameraIntrinsics k{500.0, 500.0, 80.0, 60.0, 160, 120};
  DepthFrame depth = make_depth_frame(160, 120, std::vector<double>(160 * 120, 2.0));
  const Pose pose;
  REQUIRE(backproject(depth, k, pose, 1).size() == 19200);
  REQUIRE(backproject(depth, k, pose, 2).size() == 4800);

  depth.depth[5] = 0.0;  // invalid pixels are skipped
  REQUIRE(backproject(depth, k, pose, 1).size() == 19199);

  REQUIRE_THROWS_AS(backproject(depth, k, pose, 0), InvalidInputError);
  const DepthFrame wrong = make_depth_frame(8, 8, std::vector<double>(64, 1.0));
  REQUIRE_THROWS_AS(backproject(wrong, k, pose, 1), InvalidInputError);
}

TEST_CASE("backproject: principal point pixel lands on the camera axis") {
  Rng rng(23);
  CameraIntrinsics k{400.0, 420.0, 8.0, 6.0, 16, 12};
  std::vector<double> d(16 * 12, 0.0);
  d[6 * 16 + 8] = 3.25;
  const DepthFrame depth = make_depth_frame(16, 12, d);
  const Pose pose{random_rotation(rng), random_point(rng, -2.0, 2.0)};
  const auto pts = backproject(depth, k, pose, 1);
  REQUIRE(pts.size() == 1);
  REQUIRE(pts[0].u == 8);
  REQUIRE(pts[0].v == 6);
  REQUIRE((pts[0].world - pose.apply(Vec3(0.0, 0.0, 3.25))).norm() < 1e-12);
}

TEST_CASE("make_depth_frame: sanitizes invalid values") {
  std::vector<double> d{1.0, -0.5, 12.0, std::nan(""), 10.0, 0.0};
  const DepthFrame f = make_depth_frame(3, 2, d, 10.0);
  REQUIRE(f.at(0, 0) == 1.0);
  REQUIRE(f.at(1, 0) == 0.0);   // negative
  REQUIRE(f.at(2, 0) == 0.0);   // beyond max_range
  REQUIRE(f.at(0, 1) == 0.0);   // nan
  REQUIRE(f.at(1, 1) == 10.0);  // exactly max_range stays
  REQUIRE_FALSE(f.valid(2, 1));
  REQUIRE_THROWS_AS(make_depth_frame(2, 2, d), InvalidInputError);
}

TEST_CASE("ray_aligned_rotation: principal pixel under identity pose keeps +z") {
  CameraIntrinsics k{600.0, 600.0, 320.0, 240.0, 640, 480};
  const Quat q = ray_aligned_rotation(k, 320.0, 240.0, Pose{});
  const Vec3 z = quaternion_to_matrix(q) * Vec3::UnitZ();
  REQUIRE((z - Vec3::UnitZ()).norm() < 1e-12);
  REQUIRE_THROWS_AS(ray_aligned_rotation(k, -1.0, 0.0, Pose{}), InvalidInputError);
  REQUIRE_THROWS_AS(ray_aligned_rotation(k, 0.0, 480.0, Pose{}), InvalidInputError);
}

TEST_CASE("ray_aligned_rotation: local +z always points along the pixel ray") {
  Rng rng(24);
  CameraIntrinsics k{300.0, 280.0, 64.0, 48.0, 128, 96};
  for (int t = 0; t < 25; ++t) {
    const Pose pose{random_rotation(rng), random_point(rng, -1.0, 1.0)};
    const double u = rng.uniform(0.0, 127.0);
    const double v = rng.uniform(0.0, 95.0);
    const Quat q = ray_aligned_rotation(k, u, v, pose);
    const Vec3 expected = (pose.rotation * k.pixel_ray(u, v).normalized()).normalized();
    REQUIRE((quaternion_to_matrix(q) * Vec3::UnitZ() - expected).norm() < 1e-9);
  }
}

TEST_CASE("init_primitive: pixel-footprint scales with along-ray elongation") {
  CameraIntrinsics k{600.0, 600.0, 320.0, 240.0, 640, 480};
  const GaussianPrimitive g = init_primitive(320, 240, 3.0, Vec3(0.2, 0.4, 0.6), k, Pose{});
  REQUIRE(g.scale.x() == Approx(0.005).margin(1e-15));
  REQUIRE(g.scale.y() == Approx(0.005).margin(1e-15));
  REQUIRE(g.scale.z() == Approx(0.015).margin(1e-15));
  REQUIRE((g.mean - Vec3(0.0, 0.0, 3.0)).norm() < 1e-12);
  REQUIRE(g.opacity == kDefaultInitOpacity);
  REQUIRE((g.color - Vec3(0.2, 0.4, 0.6)).norm() == 0.0);
  REQUIRE_FALSE(g.has_feature());
  REQUIRE_THROWS_AS(init_primitive(320, 240, 0.0, Vec3::Zero(), k, Pose{}), InvalidInputError);
}

TEST_CASE("init_primitive: scale floor applies at vanishing depth") {
  CameraIntrinsics k{600.0, 600.0, 4.0, 4.0, 8, 8};
  const GaussianPrimitive g = init_primitive(4, 4, 1e-7, Vec3::Zero(), k, Pose{}, 3.0, 1.0);
  REQUIRE(g.scale.x() == kScaleFloor);
  REQUIRE(g.scale.z() == Approx(3.0 * kScaleFloor));
}

TEST_CASE("init_primitive: uses min focal length and respects pose") {
  Rng rng(25);
  CameraIntrinsics k{200.0, 400.0, 32.0, 24.0, 64, 48};
  const Pose pose{random_rotation(rng), random_point(rng, -2.0, 2.0)};
  const GaussianPrimitive g = init_primitive(10, 20, 2.0, Vec3::Zero(), k, pose, 2.0, 1.5);
  REQUIRE(g.scale.x() == Approx(1.5 * 2.0 / 200.0));
  REQUIRE(g.scale.z() == Approx(2.0 * 1.5 * 2.0 / 200.0));
  REQUIRE((g.mean - pose.apply(k.unproject(10, 20, 2.0))).norm() < 1e-12);
  const Vec3 ray = (pose.rotation * k.pixel_ray(10, 20).normalized()).normalized();
  REQUIRE((quaternion_to_matrix(g.rotation) * Vec3::UnitZ() - ray).norm() < 1e-9);
}

TEST_CASE("insert_batch: validation failures name the batch index") {
  GaussianMap map;
  std::vector<GaussianPrimitive> batch(2);
  batch[1].opacity = 1.5;
  REQUIRE_THROWS_WITH(map.insert_batch(batch), Catch::Matchers::ContainsSubstring("index 1"));
  REQUIRE(map.empty());

  batch[1].opacity = 0.5;
  batch[1].color = Vec3(-0.1, 0.0, 0.0);
  REQUIRE_THROWS_AS(map.insert_batch(batch), InvalidInputError);
  batch[1].color = Vec3::Zero();
  batch[1].scale = Vec3(0.0, 0.1, 0.1);
  REQUIRE_THROWS_AS(map.insert_batch(batch), InvalidInputError);
}

TEST_CASE("insert_batch: clamps scales to the floor and normalizes rotations") {
  GaussianMap map;
  GaussianPrimitive g;
  g.scale = Vec3(1e-9, 0.1, 0.2);
  g.rotation = Quat(2.0, 0.0, 0.0, 0.0);
  map.insert_batch(std::vector<GaussianPrimitive>{g});
  REQUIRE(map.primitives()[0].scale.x() == kScaleFloor);
  REQUIRE(map.primitives()[0].rotation.norm() == Approx(1.0).margin(1e-12));
}

TEST_CASE("insert_batch: feature dimension fixed by first featured primitive") {
  Rng rng(26);
  GaussianMap map;
  std::vector<GaussianPrimitive> batch{
      random_primitive(rng, Vec3::Zero(), Vec3::Ones(), 0.01, 0.1, 8)};
  map.insert_batch(batch);
  REQUIRE(map.feature_dim() == 8);
  std::vector<GaussianPrimitive> bad{
      random_primitive(rng, Vec3::Zero(), Vec3::Ones(), 0.01, 0.1, 4)};
  REQUIRE_THROWS_AS(map.insert_batch(bad), InvalidInputError);
  REQUIRE(map.size() == 1);
}

TEST_CASE("query_neighbors: exact agreement with brute force") {
  Rng rng(27);
  GaussianMap map;
  std::vector<GaussianPrimitive> batch;
  for (int i = 0; i < 200; ++i) {
    batch.push_back(random_primitive(rng, Vec3::Zero(), Vec3::Constant(2.0), 0.01, 0.4));
  }
  map.insert_batch(batch);
  // Second batch exercises re-indexing across inserts.
  std::vector<GaussianPrimitive> more;
  for (int i = 0; i < 100; ++i) {
    more.push_back(random_primitive(rng, Vec3::Constant(0.5), Vec3::Constant(2.5), 0.005, 0.6));
  }
  map.insert_batch(more);
  REQUIRE(map.size() == 300);

  for (int t = 0; t < 200; ++t) {
    Vec3 x = random_point(rng, -0.5, 3.0);
    if (t % 4 == 0) x = map.primitives()[static_cast<std::size_t>(t) % map.size()].mean;
    const auto got = map.query_neighbors(x);
    const auto expected = oracle_neighbors(map.primitives(), x);
    REQUIRE(got == expected);
    REQUIRE(std::is_sorted(got.begin(), got.end()));
  }
}

TEST_CASE("query_neighbors: mixed extents route oversized primitives correctly") {
  Rng rng(28);
  GaussianMap map;
  std::vector<GaussianPrimitive> batch;
  for (int i = 0; i < 60; ++i) {
    batch.push_back(random_primitive(rng, Vec3::Zero(), Vec3::Ones(), 1e-4, 2e-4));
  }
  // A few huge primitives force the oversized brute-force list.
  for (int i = 0; i < 3; ++i) {
    batch.push_back(random_primitive(rng, Vec3::Zero(), Vec3::Ones(), 0.5, 1.0));
  }
  map.insert_batch(batch);
  for (int t = 0; t < 100; ++t) {
    Vec3 x = random_point(rng, -0.5, 1.5);
    if (t % 3 == 0) x = map.primitives()[static_cast<std::size_t>(t) % map.size()].mean;
    REQUIRE(map.query_neighbors(x) == oracle_neighbors(map.primitives(), x));
  }
}

TEST_CASE("associate_semantics: nearest primitive within radius collects embeddings") {
  CameraIntrinsics k{100.0, 100.0, 16.0, 12.0, 32, 24};
  const DepthFrame depth = make_depth_frame(32, 24, std::vector<double>(32 * 24, 2.0));
  const Pose pose;

  GaussianMap map;
  std::vector<GaussianPrimitive> prims(2);
  prims[0].mean = k.unproject(8, 12, 2.0);
  prims[1].mean = k.unproject(24, 12, 2.0);
  for (auto& g : prims) g.scale = Vec3::Constant(0.02);
  map.insert_batch(prims);

  PixelEmbeddingFrame emb;
  emb.width = 32;
  emb.height = 24;
  emb.dim = 4;
  emb.data.assign(32 * 24 * 4, 0.0f);
  for (int v = 0; v < 24; ++v)
    for (int u = 0; u < 32; ++u) emb.data[(v * 32 + u) * 4 + (u < 16 ? 0 : 1)] = 1.0f;

  const std::size_t associated = associate_semantics(map, emb, depth, k, pose, 0.08, 1);

  // Independent count: pixels whose back-projected point lies within the radius
  // of some primitive mean.
  std::size_t expected = 0;
  for (int v = 0; v < 24; ++v)
    for (int u = 0; u < 32; ++u) {
      const Vec3 p = k.unproject(u, v, 2.0);
      double best = 1e9;
      for (const auto& g : map.primitives()) best = std::min(best, (g.mean - p).norm());
      if (best <= 0.08) ++expected;
    }
  REQUIRE(associated == expected);
  REQUIRE(expected > 0);

  REQUIRE(map.featured_count() == 2);
  Eigen::VectorXf e0 = Eigen::VectorXf::Zero(4), e1 = Eigen::VectorXf::Zero(4);
  e0[0] = 1.0f;
  e1[1] = 1.0f;
  REQUIRE((map.primitives()[0].feature - e0).norm() < 1e-6);
  REQUIRE((map.primitives()[1].feature - e1).norm() < 1e-6);
}

TEST_CASE("associate_semantics: running mean accumulates across calls") {
  CameraIntrinsics k{50.0, 50.0, 2.0, 2.0, 4, 4};
  const DepthFrame depth = make_depth_frame(4, 4, std::vector<double>(16, 1.0));
  GaussianMap map;
  GaussianPrimitive g;
  g.mean = k.unproject(2, 2, 1.0);
  map.insert_batch(std::vector<GaussianPrimitive>{g});

  auto constant_frame = [&](int hot) {
    PixelEmbeddingFrame emb;
    emb.width = 4;
    emb.height = 4;
    emb.dim = 3;
    emb.data.assign(16 * 3, 0.0f);
    for (int p = 0; p < 16; ++p) emb.data[p * 3 + hot] = 1.0f;
    return emb;
  };

  associate_semantics(map, constant_frame(0), depth, k, Pose{}, 0.5, 1);
  associate_semantics(map, constant_frame(2), depth, k, Pose{}, 0.5, 1);
  const Eigen::VectorXf f = map.primitives()[0].feature;
  REQUIRE(f.size() == 3);
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  REQUIRE(f[0] == Approx(inv_sqrt2).margin(1e-6));
  REQUIRE(f[1] == Approx(0.0).margin(1e-9));
  REQUIRE(f[2] == Approx(inv_sqrt2).margin(1e-6));
}

TEST_CASE("associate_semantics: near-cancelling embeddings drop the feature") {
  CameraIntrinsics k{50.0, 50.0, 2.0, 2.0, 4, 4};
  const DepthFrame depth = make_depth_frame(4, 4, std::vector<double>(16, 1.0));
  GaussianMap map;
  GaussianPrimitive g;
  g.mean = k.unproject(2, 2, 1.0);
  map.insert_batch(std::vector<GaussianPrimitive>{g});

  PixelEmbeddingFrame plus;
  plus.width = 4;
  plus.height = 4;
  plus.dim = 2;
  plus.data.assign(32, 0.0f);
  for (int p = 0; p < 16; ++p) plus.data[p * 2] = 1.0f;
  PixelEmbeddingFrame minus = plus;
  for (auto& x : minus.data) x = -x;

  associate_semantics(map, plus, depth, k, Pose{}, 0.5, 1);
  REQUIRE(map.primitives()[0].has_feature());
  associate_semantics(map, minus, depth, k, Pose{}, 0.5, 1);
  REQUIRE_FALSE(map.primitives()[0].has_feature());
}

TEST_CASE("associate_semantics: ties go to the lowest primitive index") {
  CameraIntrinsics k{50.0, 50.0, 2.0, 2.0, 4, 4};
  std::vector<double> d(16, 0.0);
  d[2 * 4 + 2] = 1.0;
  const DepthFrame depth = make_depth_frame(4, 4, d);
  GaussianMap map;
  GaussianPrimitive g;
  g.mean = k.unproject(2, 2, 1.0);
  map.insert_batch(std::vector<GaussianPrimitive>{g, g});  // identical means

  PixelEmbeddingFrame emb;
  emb.width = 4;
  emb.height = 4;
  emb.dim = 2;
  emb.data.assign(32, 0.0f);
  for (int p = 0; p < 16; ++p) emb.data[p * 2] = 1.0f;

  REQUIRE(associate_semantics(map, emb, depth, k, Pose{}, 0.1, 1) == 1);
  REQUIRE(map.primitives()[0].has_feature());
  REQUIRE_FALSE(map.primitives()[1].has_feature());
}

TEST_CASE("associate_semantics: input contract violations") {
  CameraIntrinsics k{50.0, 50.0, 2.0, 2.0, 4, 4};
  const DepthFrame depth = make_depth_frame(4, 4, std::vector<double>(16, 1.0));
  PixelEmbeddingFrame emb;
  emb.width = 4;
  emb.height = 4;
  emb.dim = 2;
  emb.data.assign(32, 0.0f);

  GaussianMap empty;
  REQUIRE_THROWS_AS(associate_semantics(empty, emb, depth, k, Pose{}), InvalidInputError);

  GaussianMap map;
  GaussianPrimitive g;
  g.mean = Vec3(0.0, 0.0, 1.0);
  map.insert_batch(std::vector<GaussianPrimitive>{g});
  REQUIRE_THROWS_AS(associate_semantics(map, emb, depth, k, Pose{}, -1.0), InvalidInputError);
  REQUIRE_THROWS_AS(associate_semantics(map, emb, depth, k, Pose{}, 0.08, 0), InvalidInputError);

  associate_semantics(map, emb, depth, k, Pose{});  // fixes feature dim to 2
  PixelEmbeddingFrame wrong = emb;
  wrong.dim = 4;
  wrong.data.assign(4 * 4 * 4, 0.0f);
  REQUIRE_THROWS_AS(associate_semantics(map, wrong, depth, k, Pose{}), InvalidInputError);
}

TEST_CASE("transform_map: supports move with the transform") {
  Rng rng(29);
  for (int t = 0; t < 10; ++t) {
    GaussianMap map;
    std::vector<GaussianPrimitive> batch;
    for (int i = 0; i < 40; ++i) {
      batch.push_back(random_primitive(rng, Vec3::Zero(), Vec3::Ones(), 0.02, 0.3, 4));
    }
    map.insert_batch(batch);
    const SimilarityTransform s{rng.uniform(0.3, 2.5), random_rotation(rng),
                                random_point(rng, -2.0, 2.0)};
    const GaussianMap moved = transform_map(map, s);
    REQUIRE(moved.size() == map.size());
    REQUIRE(moved.feature_dim() == map.feature_dim());

    for (std::size_t i = 0; i < map.size(); ++i) {
      const auto& before = map.primitives()[i];
      const auto& after = moved.primitives()[i];
      REQUIRE((after.mean - s.apply(before.mean)).norm() == 0.0);  // same arithmetic, bitwise equal
      REQUIRE((after.scale - s.scale * before.scale).norm() < 1e-15);
      REQUIRE(after.opacity == before.opacity);
      REQUIRE((after.color - before.color).norm() == 0.0);
      REQUIRE(after.feature.size() == before.feature.size());
      if (before.has_feature()) REQUIRE((after.feature - before.feature).norm() == 0.0f);
      const Mat3 expected_rot =
          quaternion_to_matrix(s.rotation) * quaternion_to_matrix(before.rotation);
      REQUIRE((quaternion_to_matrix(after.rotation) - expected_rot).norm() < 1e-12);

      const Vec3 x = random_point(rng, -0.5, 1.5);
      const double sup_before = spatial_support(before, x);
      const double sup_after = spatial_support(after, s.apply(x));
      REQUIRE(sup_after == Approx(sup_before).margin(1e-9));
    }
    // Index is rebuilt: neighbor queries stay exact in the new frame.
    for (int q = 0; q < 30; ++q) {
      const Vec3 x = s.apply(random_point(rng, -0.2, 1.2));
      REQUIRE(moved.query_neighbors(x) == oracle_neighbors(moved.primitives(), x));
    }
  }
}

TEST_CASE("transform_map: rejects non-positive scale") {
  GaussianMap map;
  GaussianPrimitive g;
  map.insert_batch(std::vector<GaussianPrimitive>{g});
  SimilarityTransform s;
  s.scale = 0.0;
  REQUIRE_THROWS_AS(transform_map(map, s), InvalidInputError);
}
