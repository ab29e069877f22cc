#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "catch_amalgamated.hpp"
#include "levox/bench.hpp"
#include "levox/io.hpp"
#include "levox/pipeline.hpp"
#include "test_support.hpp"

using namespace levox;
using levox_test::random_rotation;
using levox_test::tmp_path;
using Catch::Approx;

namespace {

void truncate_file(const std::string& path, std::size_t keep) {
  std::filesystem::resize_file(path, keep);
}

void corrupt_byte(const std::string& path, std::size_t offset, char value) {
  std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
  f.seekp(static_cast<std::streamoff>(offset));
  f.put(value);
}

GaussianMap random_map(std::uint64_t seed, int count, int feature_dim) {
  Rng rng(seed);
  std::vector<GaussianPrimitive> prims;
  for (int i = 0; i < count; ++i) {
    GaussianPrimitive g;
    g.mean = Vec3(rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0));
    g.scale = Vec3(rng.uniform(0.01, 0.4), rng.uniform(0.01, 0.4), rng.uniform(0.01, 0.4));
    g.rotation = random_rotation(rng);
    g.opacity = rng.uniform(0.05, 0.95);
    g.color = Vec3(rng.uniform(), rng.uniform(), rng.uniform());
    if (feature_dim > 0 && i % 3 != 2) {  // leave every third primitive featureless
      Eigen::VectorXf f(feature_dim);
      for (int d = 0; d < feature_dim; ++d) f[d] = static_cast<float>(rng.normal());
      f.normalize();
      g.feature = f;
    }
    prims.push_back(g);
  }
  return GaussianMap::from_primitives(feature_dim, std::move(prims));
}

OccupancyField random_field(std::uint64_t seed, int feature_dim) {
  Rng rng(seed);
  OccupancyField field;
  field.spec.origin = Vec3(-0.3, 0.1, 0.7);
  field.spec.voxel_size = 0.25;
  field.spec.dims = {5, 4, 3};
  field.feature_dim = feature_dim;
  field.allocate();
  for (std::size_t i = 0; i < field.occupancy.size(); ++i) {
    field.occupancy[i] = static_cast<float>(rng.uniform());
    field.label[i] = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    if (feature_dim > 0 && rng.uniform() < 0.3) {
      Eigen::VectorXf f(feature_dim);
      for (int d = 0; d < feature_dim; ++d) f[d] = static_cast<float>(rng.normal());
      f.normalize();
      field.features.emplace_back(i, std::move(f));
    }
  }
  return field;
}

SceneSpec tiny_scene_spec() {
  SceneSpec spec;
  spec.room_min = Vec3(0.0, 0.0, 0.0);
  spec.room_max = Vec3(3.0, 3.0, 2.0);
  spec.boxes.push_back({Vec3(0.8, 0.8, 0.0), Vec3(1.6, 1.6, 0.6), 1, Vec3(0.8, 0.2, 0.2)});
  spec.boxes.push_back({Vec3(1.9, 1.9, 0.0), Vec3(2.4, 2.4, 0.4), 2, Vec3(0.2, 0.3, 0.9)});
  spec.intrinsics.width = 16;
  spec.intrinsics.height = 12;
  spec.intrinsics.fx = 14.0;
  spec.intrinsics.fy = 14.0;
  spec.intrinsics.cx = 8.0;
  spec.intrinsics.cy = 6.0;
  spec.orbit.target = Vec3(1.5, 1.5, 0.3);
  spec.orbit.radius = 1.3;
  spec.orbit.height = 1.2;
  spec.orbit.frame_count = 6;
  spec.voxel_size = 0.1;
  spec.depth_noise = 0.001;
  spec.seed = 7;
  return spec;
}

}  // namespace

TEST_CASE("depth pngs round-trip through millimeter quantization") {
  const std::string path = tmp_path("depth.png");
  Rng rng(41);
  std::vector<double> depth(6 * 4, 0.0);
  for (std::size_t i = 0; i < depth.size(); ++i) {
    if (i % 5 == 0) continue;  // keep some invalid pixels
    depth[i] = std::round(rng.uniform(0.05, 9.5) * 1000.0) / 1000.0;
  }
  const DepthFrame frame = make_depth_frame(6, 4, depth, 10.0);
  write_depth_png(path, frame, 1e-3);
  const DepthFrame back = read_depth_png(path, 1e-3, 10.0);

  REQUIRE(back.width == 6);
  REQUIRE(back.height == 4);
  for (std::size_t i = 0; i < depth.size(); ++i) {
    REQUIRE(back.depth[i] == Approx(frame.depth[i]).margin(1e-12));
    if (frame.depth[i] == 0.0) REQUIRE(back.depth[i] == 0.0);
  }

  SECTION("read-side max_range invalidates far pixels") {
    const DepthFrame clipped = read_depth_png(path, 1e-3, 1.0);
    for (std::size_t i = 0; i < depth.size(); ++i) {
      if (frame.depth[i] > 1.0) REQUIRE(clipped.depth[i] == 0.0);
    }
  }
  SECTION("write rejects out-of-range values") {
    DepthFrame big;
    big.width = 1;
    big.height = 1;
    big.depth = {70.0};
    REQUIRE_THROWS_AS(write_depth_png(tmp_path("big.png"), big, 1e-3), InvalidInputError);
    REQUIRE_THROWS_AS(write_depth_png(tmp_path("big.png"), big, 0.0), InvalidInputError);
  }
}

TEST_CASE("label and color pngs round-trip exactly") {
  Rng rng(42);
  const int w = 7, h = 5;
  std::vector<std::uint8_t> labels(w * h);
  for (auto& l : labels) l = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  const std::string lpath = tmp_path("labels.png");
  write_label_png(lpath, labels, w, h);
  const LabelImage lback = read_label_png(lpath);
  REQUIRE(lback.width == w);
  REQUIRE(lback.height == h);
  REQUIRE(lback.labels == labels);

  std::vector<Vec3> colors(w * h);
  for (auto& c : colors) {  // already 8-bit representable, so the trip is exact
    c = Vec3(rng.uniform_int(0, 255) / 255.0, rng.uniform_int(0, 255) / 255.0,
             rng.uniform_int(0, 255) / 255.0);
  }
  const std::string cpath = tmp_path("color.png");
  write_color_png(cpath, colors, w, h);
  const ColorImage cback = read_color_png(cpath);
  REQUIRE(cback.width == w);
  REQUIRE(cback.height == h);
  for (int i = 0; i < w * h; ++i) REQUIRE((cback.pixels[i] - colors[i]).norm() == 0.0);

  SECTION("color writer validates inputs") {
    REQUIRE_THROWS_AS(write_color_png(tmp_path("bad.png"), colors, w, h + 1), InvalidInputError);
    std::vector<Vec3> out_of_range = {Vec3(1.5, 0.0, 0.0)};
    REQUIRE_THROWS_AS(write_color_png(tmp_path("bad.png"), out_of_range, 1, 1), InvalidInputError);
  }
}

TEST_CASE("png readers reject missing, corrupt, and mismatched files") {
  REQUIRE_THROWS_AS(read_label_png(tmp_path("missing.png")), IoError);

  const std::string garbage = tmp_path("garbage.png");
  {
    std::ofstream out(garbage, std::ios::binary);
    out << "this is not a png";
  }
  REQUIRE_THROWS_AS(read_label_png(garbage), IoError);

  const std::string depth_path = tmp_path("depth_as_label.png");
  DepthFrame frame;
  frame.width = 2;
  frame.height = 2;
  frame.depth = {0.1, 0.2, 0.3, 0.4};
  write_depth_png(depth_path, frame);
  REQUIRE_THROWS_AS(read_label_png(depth_path), IoError);    // 16-bit where 8 expected
  REQUIRE_THROWS_AS(read_color_png(depth_path), IoError);    // gray where rgb expected
  REQUIRE_THROWS_AS(read_depth_png(tmp_path("missing.png")), IoError);

  const std::string cut = tmp_path("cut.png");
  std::filesystem::copy_file(depth_path, cut, std::filesystem::copy_options::overwrite_existing);
  truncate_file(cut, std::filesystem::file_size(cut) / 2);
  REQUIRE_THROWS_AS(read_depth_png(cut), IoError);
}

TEST_CASE("embedding rasters round-trip exactly") {
  Rng rng(43);
  PixelEmbeddingFrame frame;
  frame.width = 5;
  frame.height = 3;
  frame.dim = 4;
  frame.data.resize(5 * 3 * 4);
  for (auto& v : frame.data) v = static_cast<float>(rng.normal());

  const std::string path = tmp_path("emb.bin");
  write_embedding_raster(path, frame);
  const PixelEmbeddingFrame back = read_embedding_raster(path);
  REQUIRE(back.width == frame.width);
  REQUIRE(back.height == frame.height);
  REQUIRE(back.dim == frame.dim);
  REQUIRE(back.data == frame.data);

  SECTION("corrupt rasters are rejected") {
    const std::string cut = tmp_path("emb_cut.bin");
    std::filesystem::copy_file(path, cut, std::filesystem::copy_options::overwrite_existing);
    truncate_file(cut, std::filesystem::file_size(cut) - 2);
    REQUIRE_THROWS_AS(read_embedding_raster(cut), IoError);
    corrupt_byte(path, 8, 0);  // zero out part of the dim field
    corrupt_byte(path, 9, 0);
    corrupt_byte(path, 10, 0);
    corrupt_byte(path, 11, 0);
    REQUIRE_THROWS_AS(read_embedding_raster(path), IoError);
  }
}

TEST_CASE("gaussian maps round-trip exactly") {
  const GaussianMap map = random_map(44, 23, 5);
  const std::string path = tmp_path("map.legsmap");
  write_gaussian_map(path, map);
  const GaussianMap back = read_gaussian_map(path);

  REQUIRE(back.size() == map.size());
  REQUIRE(back.feature_dim() == map.feature_dim());
  for (std::size_t i = 0; i < map.size(); ++i) {
    const GaussianPrimitive& a = map.primitives()[i];
    const GaussianPrimitive& b = back.primitives()[i];
    REQUIRE(a.mean == b.mean);
    REQUIRE(a.scale == b.scale);
    REQUIRE(a.rotation.coeffs() == b.rotation.coeffs());
    REQUIRE(a.opacity == b.opacity);
    REQUIRE(a.color == b.color);
    REQUIRE(a.has_feature() == b.has_feature());
    if (a.has_feature()) REQUIRE(a.feature == b.feature);
  }

  SECTION("featureless and empty maps survive the trip") {
    const GaussianMap plain = random_map(45, 7, 0);
    const std::string p2 = tmp_path("plain.legsmap");
    write_gaussian_map(p2, plain);
    const GaussianMap plain_back = read_gaussian_map(p2);
    REQUIRE(plain_back.size() == 7);
    REQUIRE(plain_back.feature_dim() == 0);

    const GaussianMap empty = GaussianMap::from_primitives(3, {});
    const std::string p3 = tmp_path("empty.legsmap");
    write_gaussian_map(p3, empty);
    REQUIRE(read_gaussian_map(p3).size() == 0);
    REQUIRE(read_gaussian_map(p3).feature_dim() == 3);
  }

  SECTION("corrupt map files are rejected") {
    const std::string bad = tmp_path("bad.legsmap");
    std::filesystem::copy_file(path, bad, std::filesystem::copy_options::overwrite_existing);
    corrupt_byte(bad, 0, 'X');
    REQUIRE_THROWS_AS(read_gaussian_map(bad), IoError);

    const std::string cut = tmp_path("cut.legsmap");
    std::filesystem::copy_file(path, cut, std::filesystem::copy_options::overwrite_existing);
    truncate_file(cut, std::filesystem::file_size(cut) - 11);
    REQUIRE_THROWS_AS(read_gaussian_map(cut), IoError);
    REQUIRE_THROWS_AS(read_gaussian_map(tmp_path("missing.legsmap")), IoError);
  }
}

TEST_CASE("map sidecars round-trip and reject unknown keys") {
  const std::string map_path = tmp_path("side.legsmap");
  MapSidecar sidecar;
  sidecar.source_trajectory = "traj.txt";
  sidecar.gamma = 2.5;
  sidecar.kappa = 0.4;
  write_map_sidecar(map_path, sidecar);
  const MapSidecar back = read_map_sidecar(map_path);
  REQUIRE(back.source_trajectory == "traj.txt");
  REQUIRE(back.gamma == 2.5);
  REQUIRE(back.kappa == 0.4);

  {
    std::ofstream out(map_sidecar_path(map_path));
    out << R"({"gamma": 1.0, "mystery": 3})";
  }
  REQUIRE_THROWS_WITH(read_map_sidecar(map_path), Catch::Matchers::ContainsSubstring("mystery"));
}

TEST_CASE("occupancy fields round-trip exactly") {
  const OccupancyField field = random_field(46, 3);
  const std::string path = tmp_path("field.occgrid");
  write_occupancy_field(path, field);
  const OccupancyField back = read_occupancy_field(path);

  REQUIRE(back.spec == field.spec);
  REQUIRE(back.occupancy == field.occupancy);
  REQUIRE(back.label == field.label);
  REQUIRE(back.feature_dim == field.feature_dim);
  REQUIRE(back.features.size() == field.features.size());
  for (std::size_t i = 0; i < field.features.size(); ++i) {
    REQUIRE(back.features[i].first == field.features[i].first);
    REQUIRE(back.features[i].second == field.features[i].second);
  }

  SECTION("featureless fields carry no feature block") {
    const OccupancyField plain = random_field(47, 0);
    const std::string p2 = tmp_path("plain.occgrid");
    write_occupancy_field(p2, plain);
    const OccupancyField plain_back = read_occupancy_field(p2);
    REQUIRE(plain_back.feature_dim == 0);
    REQUIRE(plain_back.features.empty());
    REQUIRE(plain_back.occupancy == plain.occupancy);
  }

  SECTION("corrupt grid files are rejected") {
    const std::string bad = tmp_path("bad.occgrid");
    std::filesystem::copy_file(path, bad, std::filesystem::copy_options::overwrite_existing);
    corrupt_byte(bad, 3, 'x');
    REQUIRE_THROWS_AS(read_occupancy_field(bad), IoError);

    const std::string cut = tmp_path("cut.occgrid");
    std::filesystem::copy_file(path, cut, std::filesystem::copy_options::overwrite_existing);
    truncate_file(cut, 60);
    REQUIRE_THROWS_AS(read_occupancy_field(cut), IoError);

    // has_features byte contradicting feature_dim
    const std::string inconsistent = tmp_path("inconsistent.occgrid");
    std::filesystem::copy_file(path, inconsistent, std::filesystem::copy_options::overwrite_existing);
    corrupt_byte(inconsistent, 8 + 24 + 8 + 12, 0);
    REQUIRE_THROWS_AS(read_occupancy_field(inconsistent), IoError);
  }

  SECTION("non-increasing feature indices are rejected") {
    OccupancyField two;
    two.spec.origin = Vec3::Zero();
    two.spec.voxel_size = 0.1;
    two.spec.dims = {2, 1, 1};
    two.feature_dim = 1;
    two.allocate();
    two.features.emplace_back(0, Eigen::VectorXf::Ones(1));
    two.features.emplace_back(1, Eigen::VectorXf::Ones(1));
    const std::string p = tmp_path("order.occgrid");
    write_occupancy_field(p, two);
    // header 57 bytes, occupancy 8, labels 2, count 8 -> first index at 75
    corrupt_byte(p, 75, 1);
    corrupt_byte(p, 87, 0);
    REQUIRE_THROWS_AS(read_occupancy_field(p), IoError);
  }
}

TEST_CASE("text embedding sets round-trip exactly") {
  Rng rng(48);
  Eigen::MatrixXf m(3, 4);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) m(r, c) = static_cast<float>(rng.normal());
  const TextEmbeddingSet set = make_text_embedding_set({"chair", "table", "lamp"}, m);

  const std::string path = tmp_path("texts.json");
  write_text_embeddings(path, set);
  const TextEmbeddingSet back = read_text_embeddings(path);
  REQUIRE(back.categories == set.categories);
  REQUIRE(back.embeddings == set.embeddings);

  SECTION("schema and payload mismatches are rejected") {
    {
      std::ofstream out(path, std::ios::app | std::ios::binary);
    }
    std::ofstream bin(tmp_path("texts.bin"), std::ios::binary | std::ios::app);
    bin.put('\0');
    bin.close();
    REQUIRE_THROWS_AS(read_text_embeddings(path), IoError);  // trailing bytes in matrix

    {
      std::ofstream out(path);
      out << R"({"categories": ["a"], "dim": 2, "data": "texts.bin", "extra": 1})";
    }
    REQUIRE_THROWS_WITH(read_text_embeddings(path), Catch::Matchers::ContainsSubstring("extra"));
    {
      std::ofstream out(path);
      out << R"({"categories": ["a"], "dim": 2})";
    }
    REQUIRE_THROWS_WITH(read_text_embeddings(path), Catch::Matchers::ContainsSubstring("data"));
    {
      std::ofstream out(path);
      out << "not json at all";
    }
    REQUIRE_THROWS_AS(read_text_embeddings(path), InvalidInputError);
  }
}

TEST_CASE("loss traces round-trip exactly") {
  const std::vector<double> trace = {636.25, 45.5, 1e-12, 0.1 + 0.2, 7.0};
  const std::string path = tmp_path("trace.csv");
  save_loss_trace(path, trace);
  REQUIRE(load_loss_trace(path) == trace);

  {
    std::ofstream out(path);
    out << "wrong,header\n0,1.0\n";
  }
  REQUIRE_THROWS_AS(load_loss_trace(path), IoError);
  {
    std::ofstream out(path);
    out << "iter,loss\n0,1.0\n2,0.5\n";  // gap in iteration numbering
  }
  REQUIRE_THROWS_AS(load_loss_trace(path), IoError);
}

TEST_CASE("similarity exports match direct dot products and round-trip") {
  OccupancyField field;
  field.spec.origin = Vec3::Zero();
  field.spec.voxel_size = 0.5;
  field.spec.dims = {3, 2, 2};
  field.feature_dim = 2;
  field.allocate();
  Eigen::VectorXf fa(2), fb(2);
  fa << 1.0f, 0.0f;
  fb << std::sqrt(0.5f), std::sqrt(0.5f);
  field.features.emplace_back(field.spec.linear(1, 0, 0), fa);
  field.features.emplace_back(field.spec.linear(2, 1, 1), fb);

  Eigen::MatrixXf m = Eigen::MatrixXf::Identity(2, 2);
  const TextEmbeddingSet texts = make_text_embedding_set({"red", "blue"}, m);

  const auto rows = compute_similarities(field, texts, "red");
  REQUIRE(rows.size() == 2);
  REQUIRE(rows[0].i == 1);
  REQUIRE(rows[0].j == 0);
  REQUIRE(rows[0].k == 0);
  REQUIRE(rows[0].similarity == 1.0f);
  REQUIRE(rows[1].i == 2);
  REQUIRE(rows[1].j == 1);
  REQUIRE(rows[1].k == 1);
  REQUIRE(rows[1].similarity == Approx(std::sqrt(0.5)).epsilon(1e-6));

  const std::string path = tmp_path("sim.csv");
  save_similarity_csv(path, rows);
  const auto back = load_similarity_csv(path);
  REQUIRE(back.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    REQUIRE(back[i].i == rows[i].i);
    REQUIRE(back[i].j == rows[i].j);
    REQUIRE(back[i].k == rows[i].k);
    REQUIRE(back[i].similarity == rows[i].similarity);  // %.9g round-trips f32
  }

  SECTION("unknown categories list the available names") {
    REQUIRE_THROWS_WITH(compute_similarities(field, texts, "green"),
                        Catch::Matchers::ContainsSubstring("red") &&
                            Catch::Matchers::ContainsSubstring("blue"));
  }
  SECTION("featureless fields and dimension mismatches are rejected") {
    OccupancyField plain = field;
    plain.feature_dim = 0;
    plain.features.clear();
    REQUIRE_THROWS_AS(compute_similarities(plain, texts, "red"), InvalidInputError);

    const TextEmbeddingSet wide = make_text_embedding_set({"x"}, Eigen::MatrixXf::Ones(1, 3));
    REQUIRE_THROWS_AS(compute_similarities(field, wide, "x"), InvalidInputError);
  }
}

TEST_CASE("manifests resolve paths and validate their schema") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(tmp_path("dataset"));
  fs::create_directories(dir / "frames");

  DatasetManifest manifest;
  manifest.intrinsics.width = 4;
  manifest.intrinsics.height = 3;
  manifest.intrinsics.fx = 4.0;
  manifest.intrinsics.fy = 4.0;
  manifest.intrinsics.cx = 2.0;
  manifest.intrinsics.cy = 1.5;
  manifest.trajectory = "traj.txt";
  manifest.frames.push_back({"frames/depth_0.png", "frames/labels_0.png", "", ""});
  manifest.frames.push_back({"frames/depth_1.png", "", "", ""});

  const std::string mpath = (dir / "manifest.json").string();
  save_manifest(mpath, manifest);

  Trajectory traj;
  for (int i = 0; i < 2; ++i) {
    TrajectoryEntry e;
    e.timestamp = 0.1 * i;
    e.pose.translation = Vec3(i, 0.0, 0.5);
    traj.push_back(e);
  }
  save_trajectory((dir / "traj.txt").string(), traj);
  DepthFrame depth;
  depth.width = 4;
  depth.height = 3;
  depth.depth.assign(12, 1.25);
  write_depth_png((dir / "frames/depth_0.png").string(), depth);
  write_depth_png((dir / "frames/depth_1.png").string(), depth);
  std::vector<std::uint8_t> labels(12, 2);
  write_label_png((dir / "frames/labels_0.png").string(), labels, 4, 3);

  const DatasetManifest loaded = load_manifest(mpath);
  REQUIRE(loaded.frames.size() == 2);
  REQUIRE(loaded.trajectory == (dir / "traj.txt").string());
  REQUIRE(loaded.frames[0].depth == (dir / "frames/depth_0.png").string());
  REQUIRE(loaded.frames[0].labels == (dir / "frames/labels_0.png").string());
  REQUIRE(loaded.frames[0].color.empty());
  REQUIRE(loaded.intrinsics.fx == 4.0);

  SECTION("observed frames default to mid-grey without color images") {
    const std::vector<ObservedFrame> frames = load_observed_frames(loaded);
    REQUIRE(frames.size() == 2);
    REQUIRE(frames[0].image.size() == 12);
    REQUIRE(frames[0].image[5] == Vec3::Constant(0.5));
    REQUIRE(frames[1].depth.depth[0] == Approx(1.25).margin(1e-12));
    REQUIRE(frames[1].pose.translation.x() == 1.0);
  }
  SECTION("labeled frames require label images on every frame") {
    REQUIRE_THROWS_WITH(load_labeled_frames(loaded),
                        Catch::Matchers::ContainsSubstring("frame 1"));
  }
  SECTION("embedding loads require rasters on every frame") {
    REQUIRE_THROWS_WITH(load_embedding_frames(loaded),
                        Catch::Matchers::ContainsSubstring("frame 0"));
  }
  SECTION("trajectory length must match the frame list") {
    traj.push_back(traj.back());
    save_trajectory((dir / "traj.txt").string(), traj);
    REQUIRE_THROWS_WITH(load_observed_frames(load_manifest(mpath)),
                        Catch::Matchers::ContainsSubstring("trajectory"));
  }
  SECTION("schema violations name the offending field") {
    {
      std::ofstream out(mpath);
      out << R"({"intrinsics": {"width": 4, "height": 3, "fx": 4, "fy": 4, "cx": 2, "cy": 1.5},
                 "trajectory": "traj.txt", "frames": [], "surprise": true})";
    }
    REQUIRE_THROWS_WITH(load_manifest(mpath), Catch::Matchers::ContainsSubstring("surprise"));
    {
      std::ofstream out(mpath);
      out << R"({"intrinsics": {"width": 4, "height": 3, "fx": 4, "fy": 4, "cx": 2, "cy": 1.5},
                 "trajectory": "traj.txt", "frames": [{"labels": "l.png"}]})";
    }
    REQUIRE_THROWS_WITH(load_manifest(mpath), Catch::Matchers::ContainsSubstring("depth"));
  }
}

TEST_CASE("scene specs round-trip through json") {
  const SceneSpec spec = tiny_scene_spec();
  const std::string path = tmp_path("scene.json");
  save_scene_spec(path, spec);
  const SceneSpec back = load_scene_spec(path);

  REQUIRE(back.room_min == spec.room_min);
  REQUIRE(back.room_max == spec.room_max);
  REQUIRE(back.boxes.size() == spec.boxes.size());
  for (std::size_t i = 0; i < spec.boxes.size(); ++i) {
    REQUIRE(back.boxes[i].min == spec.boxes[i].min);
    REQUIRE(back.boxes[i].max == spec.boxes[i].max);
    REQUIRE(back.boxes[i].class_id == spec.boxes[i].class_id);
    REQUIRE(back.boxes[i].color == spec.boxes[i].color);
  }
  REQUIRE(back.intrinsics.fx == spec.intrinsics.fx);
  REQUIRE(back.orbit.target == spec.orbit.target);
  REQUIRE(back.orbit.frame_count == spec.orbit.frame_count);
  REQUIRE(back.voxel_size == spec.voxel_size);
  REQUIRE(back.depth_noise == spec.depth_noise);
  REQUIRE(back.seed == spec.seed);

  SECTION("unknown keys at any level are rejected") {
    nlohmann::json j = scene_spec_to_json(spec);
    j["bogus"] = 1;
    REQUIRE_THROWS_WITH(scene_spec_from_json(j, "test"), Catch::Matchers::ContainsSubstring("bogus"));
    j.erase("bogus");
    j["orbit"]["tilt"] = 0.5;
    REQUIRE_THROWS_WITH(scene_spec_from_json(j, "test"), Catch::Matchers::ContainsSubstring("tilt"));
    j["orbit"].erase("tilt");
    j["boxes"][0]["weight"] = 2;
    REQUIRE_THROWS_WITH(scene_spec_from_json(j, "test"), Catch::Matchers::ContainsSubstring("weight"));
  }
  SECTION("invalid geometry is rejected on load") {
    nlohmann::json j = scene_spec_to_json(spec);
    j["room_max"] = detail::vec3_json(spec.room_min);  // zero extent
    REQUIRE_THROWS_AS(scene_spec_from_json(j, "test"), InvalidInputError);
  }
}

TEST_CASE("optimizer and pipeline configs parse with defaults") {
  SECTION("empty objects yield the documented defaults") {
    const OptimizerConfig oc = optimizer_config_from_json(nlohmann::json::object(), "test");
    REQUIRE(oc.beta == 1.0);
    REQUIRE(oc.max_iters == 100);

    const PipelineConfig pc = pipeline_config_from_json(nlohmann::json::object(), "test");
    REQUIRE(pc.gamma == kDefaultGamma);
    REQUIRE(pc.kappa == kDefaultKappa);
    REQUIRE(pc.tau_occ == kDefaultTauOcc);
    REQUIRE(pc.voxel_size == 0.08);
    REQUIRE(pc.pixel_stride == 1);
    REQUIRE(pc.seed == 0);
  }
  SECTION("partial overrides keep the rest") {
    const PipelineConfig pc =
        pipeline_config_from_json(nlohmann::json{{"kappa", 0.4}, {"seed", 11}}, "test");
    REQUIRE(pc.kappa == 0.4);
    REQUIRE(pc.seed == 11);
    REQUIRE(pc.gamma == kDefaultGamma);
  }
  SECTION("unknown keys and wrong types name the field") {
    REQUIRE_THROWS_WITH(pipeline_config_from_json(nlohmann::json{{"kapa", 0.4}}, "test"),
                        Catch::Matchers::ContainsSubstring("kapa"));
    REQUIRE_THROWS_WITH(pipeline_config_from_json(nlohmann::json{{"kappa", "high"}}, "test"),
                        Catch::Matchers::ContainsSubstring("kappa"));
    REQUIRE_THROWS_WITH(optimizer_config_from_json(nlohmann::json{{"beta", true}}, "test"),
                        Catch::Matchers::ContainsSubstring("beta"));
  }
  SECTION("invalid values are rejected") {
    REQUIRE_THROWS_AS(pipeline_config_from_json(nlohmann::json{{"voxel_size", -0.1}}, "test"),
                      InvalidInputError);
    REQUIRE_THROWS_AS(pipeline_config_from_json(nlohmann::json{{"pixel_stride", 0}}, "test"),
                      InvalidInputError);
  }
  SECTION("config files load from disk") {
    const std::string path = tmp_path("pipeline.json");
    {
      std::ofstream out(path);
      out << R"({"voxel_size": 0.05, "frame_stride": 2})";
    }
    const PipelineConfig pc = load_pipeline_config(path);
    REQUIRE(pc.voxel_size == 0.05);
    REQUIRE(pc.frame_stride == 2);
    REQUIRE_THROWS_AS(load_pipeline_config(tmp_path("missing.json")), IoError);
  }
}

TEST_CASE("eval reports round-trip through json") {
  EvalReport report;
  report.iou = 0.9021;
  report.miou = 0.8935;
  report.per_class_iou = {{1, 0.91}, {2, 0.877}};
  report.classes_evaluated = {1, 2};
  report.classes_skipped = {3};
  report.counts[1] = {100, 5, 7};
  report.counts[2] = {80, 9, 11};
  report.counts[3] = {0, 0, 0};
  report.alignment.scale = 1.25;
  report.alignment.rotation = Quat(0.9689124217106447, 0.0, 0.0, 0.24740395925452294);
  report.alignment.translation = Vec3(0.5, -1.0, 2.0);

  const std::string path = tmp_path("report.json");
  save_eval_report(path, report);
  const EvalReport back = load_eval_report(path);

  REQUIRE(back.iou == report.iou);
  REQUIRE(back.miou == report.miou);
  REQUIRE(back.per_class_iou == report.per_class_iou);
  REQUIRE(back.classes_evaluated == report.classes_evaluated);
  REQUIRE(back.classes_skipped == report.classes_skipped);
  REQUIRE(back.counts.at(2).fn == 11);
  REQUIRE(back.alignment.scale == report.alignment.scale);
  REQUIRE(back.alignment.rotation.coeffs() == report.alignment.rotation.coeffs());
  REQUIRE(back.alignment.translation == report.alignment.translation);

  const std::string table = format_eval_report(report);
  REQUIRE(table.find("binary IoU  0.9021") != std::string::npos);
  REQUIRE(table.find("mIoU        0.8935") != std::string::npos);
  REQUIRE(table.find("n/a") != std::string::npos);  // class 3 has counts but no IoU
}

TEST_CASE("synthetic datasets round-trip through the manifest loaders") {
  const SceneSpec spec = tiny_scene_spec();
  const SyntheticScene scene = generate_scene(spec);
  const std::string dir = tmp_path("synth_ds");
  const SyntheticDatasetPaths paths = write_synthetic_dataset(dir, scene);

  const DatasetManifest manifest = load_manifest(paths.manifest);
  REQUIRE(manifest.frames.size() == scene.frames.frames.size());

  const LabeledFrameSet labeled = load_labeled_frames(manifest);
  for (std::size_t i = 0; i < labeled.frames.size(); ++i) {
    const LabeledFrame& a = scene.frames.frames[i];
    const LabeledFrame& b = labeled.frames[i];
    REQUIRE(b.labels == a.labels);
    REQUIRE(b.timestamp == a.timestamp);
    REQUIRE((b.pose.translation - a.pose.translation).norm() < 1e-14);
    REQUIRE(b.pose.rotation.angularDistance(a.pose.rotation) < 1e-14);
    for (std::size_t p = 0; p < a.depth.depth.size(); ++p) {
      REQUIRE(b.depth.depth[p] == Approx(a.depth.depth[p]).margin(1e-12));
    }
  }

  const std::vector<ObservedFrame> observed = load_observed_frames(manifest);
  for (std::size_t i = 0; i < observed.size(); ++i) {
    for (std::size_t p = 0; p < observed[i].image.size(); ++p) {
      REQUIRE((observed[i].image[p] - scene.colors[i][p]).cwiseAbs().maxCoeff() < 0.5 / 255.0 + 1e-12);
    }
  }

  const std::vector<PixelEmbeddingFrame> embeddings = load_embedding_frames(manifest);
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    REQUIRE(embeddings[i].data == scene.embeddings[i].data);
  }

  const OccupancyField gt = read_occupancy_field(paths.ground_truth);
  REQUIRE(gt.spec == scene.ground_truth.spec);
  REQUIRE(gt.occupancy == scene.ground_truth.occupancy);
  REQUIRE(gt.label == scene.ground_truth.label);

  const TextEmbeddingSet texts = read_text_embeddings(paths.texts);
  REQUIRE(texts.categories == scene.texts.categories);
  REQUIRE(texts.embeddings == scene.texts.embeddings);

  SECTION("rewriting the dataset is byte-identical") {
    const std::string dir2 = tmp_path("synth_ds2");
    const SyntheticDatasetPaths paths2 = write_synthetic_dataset(dir2, generate_scene(spec));
    const auto slurp = [](const std::string& p) {
      std::ifstream in(p, std::ios::binary);
      return std::string(std::istreambuf_iterator<char>(in), {});
    };
    REQUIRE(slurp(paths2.manifest) == slurp(paths.manifest));
    REQUIRE(slurp(paths2.ground_truth) == slurp(paths.ground_truth));
    REQUIRE(slurp(paths2.trajectory) == slurp(paths.trajectory));
    REQUIRE(slurp((std::filesystem::path(dir2) / "frames/depth_0003.png").string()) ==
            slurp((std::filesystem::path(dir) / "frames/depth_0003.png").string()));
    REQUIRE(slurp((std::filesystem::path(dir2) / "frames/embeddings_0002.bin").string()) ==
            slurp((std::filesystem::path(dir) / "frames/embeddings_0002.bin").string()));
  }
}
