#include <cstdint>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "levox/eval.hpp"
#include "levox/io.hpp"
#include "levox/pipeline.hpp"

using namespace levox;

namespace {

struct GlobalOpts {
  std::string config_path;
  std::uint64_t seed = 0;
  int threads = 0;
  bool verbose = false;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* threads_opt = nullptr;
};

void log_verbose(const GlobalOpts& g, const std::string& message) {
  if (g.verbose) std::cerr << "levox: " << message << "\n";
}

PipelineConfig resolve_config(const GlobalOpts& g) {
  PipelineConfig cfg;
  if (!g.config_path.empty()) cfg = load_pipeline_config(g.config_path);
  if (g.seed_opt->count() > 0) cfg.seed = g.seed;
  return cfg;
}

/// True when the config file itself sets `key` (flags > config file > the
/// manifest's own declared value).
bool config_file_sets(const GlobalOpts& g, const char* key) {
  if (g.config_path.empty()) return false;
  return detail::parse_json_file(g.config_path).contains(key);
}

template <typename T>
void override_if_set(const CLI::Option* opt, T& dst, const T& src) {
  if (opt != nullptr && opt->count() > 0) dst = src;
}

void carry_sidecar(const std::string& in_map, const std::string& out_map) {
  try {
    write_map_sidecar(out_map, read_map_sidecar(in_map));
  } catch (const IoError&) {
    // no sidecar next to the input map; nothing to carry
  }
}

struct InitMapArgs {
  std::string manifest_path, out_path;
  double kappa = 0.0, gamma = 0.0, o_init = 0.0, max_range = 0.0;
  double min_spacing = 0.0, max_depth = 0.0;
  int pixel_stride = 1, frame_stride = 1;
  CLI::Option *kappa_opt = nullptr, *gamma_opt = nullptr, *o_init_opt = nullptr,
              *max_range_opt = nullptr, *pixel_stride_opt = nullptr, *frame_stride_opt = nullptr;
};

int cmd_init_map(const GlobalOpts& g, const InitMapArgs& a) {
  PipelineConfig cfg = resolve_config(g);
  override_if_set(a.kappa_opt, cfg.kappa, a.kappa);
  override_if_set(a.gamma_opt, cfg.gamma, a.gamma);
  override_if_set(a.o_init_opt, cfg.o_init, a.o_init);
  override_if_set(a.max_range_opt, cfg.max_range, a.max_range);
  override_if_set(a.pixel_stride_opt, cfg.pixel_stride, a.pixel_stride);
  override_if_set(a.frame_stride_opt, cfg.frame_stride, a.frame_stride);
  cfg.validate();

  DatasetManifest manifest = load_manifest(a.manifest_path);
  if (a.max_range_opt->count() > 0 || config_file_sets(g, "max_range")) {
    manifest.max_range = cfg.max_range;
  }
  const std::vector<ObservedFrame> all = load_observed_frames(manifest);
  std::vector<ObservedFrame> frames;
  for (std::size_t i = 0; i < all.size(); i += static_cast<std::size_t>(cfg.frame_stride)) {
    frames.push_back(all[i]);
  }
  log_verbose(g, "initializing from " + std::to_string(frames.size()) + " of " +
                     std::to_string(all.size()) + " frames");

  InitConfig ic;
  ic.pixel_stride = cfg.pixel_stride;
  ic.kappa = cfg.kappa;
  ic.gamma = cfg.gamma;
  ic.opacity = cfg.o_init;
  ic.max_depth = a.max_depth;
  ic.min_spacing = a.min_spacing;
  const GaussianMap map = init_map(frames, ic);

  write_gaussian_map(a.out_path, map);
  MapSidecar sidecar;
  sidecar.source_trajectory = manifest.trajectory;
  sidecar.gamma = cfg.gamma;
  sidecar.kappa = cfg.kappa;
  write_map_sidecar(a.out_path, sidecar);
  std::printf("%zu\n", map.size());
  return 0;
}

struct OptimizeArgs {
  std::string map_path, manifest_path, out_path, trace_path, optimizer_path;
  double beta = 0.0;
  int max_iters = 0, frame_stride = 1;
  CLI::Option *beta_opt = nullptr, *max_iters_opt = nullptr, *frame_stride_opt = nullptr;
};

int cmd_optimize(const GlobalOpts& g, const OptimizeArgs& a) {
  PipelineConfig cfg = resolve_config(g);
  override_if_set(a.frame_stride_opt, cfg.frame_stride, a.frame_stride);
  cfg.validate();

  OptimizerConfig oc;
  oc.beta = cfg.beta;
  if (!a.optimizer_path.empty()) oc = load_optimizer_config(a.optimizer_path);
  override_if_set(a.beta_opt, oc.beta, a.beta);
  override_if_set(a.max_iters_opt, oc.max_iters, a.max_iters);
  oc.validate();

  GaussianMap map = read_gaussian_map(a.map_path);
  const DatasetManifest manifest = load_manifest(a.manifest_path);
  const std::vector<ObservedFrame> all = load_observed_frames(manifest);
  std::vector<ObservedFrame> frames;
  for (std::size_t i = 0; i < all.size(); i += static_cast<std::size_t>(cfg.frame_stride)) {
    frames.push_back(all[i]);
  }
  log_verbose(g, "optimizing " + std::to_string(map.size()) + " primitives against " +
                     std::to_string(frames.size()) + " frames");
  const OptimizeResult result = optimize_anchored(map, frames, oc);

  write_gaussian_map(a.out_path, map);
  carry_sidecar(a.map_path, a.out_path);
  if (!a.trace_path.empty()) save_loss_trace(a.trace_path, result.loss_trace);
  log_verbose(g, "stopped after " + std::to_string(result.iterations) + " iterations, loss " +
                     std::to_string(result.loss_trace.back()) +
                     (result.converged ? " (converged)" : ""));
  return 0;
}

struct AssociateArgs {
  std::string map_path, manifest_path, out_path;
  double radius = 0.0;
  int pixel_stride = 1;
  CLI::Option *radius_opt = nullptr, *pixel_stride_opt = nullptr;
};

int cmd_associate(const GlobalOpts& g, const AssociateArgs& a) {
  PipelineConfig cfg = resolve_config(g);
  override_if_set(a.radius_opt, cfg.association_radius, a.radius);
  override_if_set(a.pixel_stride_opt, cfg.pixel_stride, a.pixel_stride);
  cfg.validate();

  GaussianMap map = read_gaussian_map(a.map_path);
  const DatasetManifest manifest = load_manifest(a.manifest_path);
  const std::vector<ObservedFrame> frames = load_observed_frames(manifest);
  const std::vector<PixelEmbeddingFrame> embeddings = load_embedding_frames(manifest);
  const std::size_t pixels =
      associate_all(map, embeddings, frames, cfg.association_radius, cfg.pixel_stride);
  std::size_t featured = 0;
  for (const GaussianPrimitive& p : map.primitives()) {
    if (p.has_feature()) ++featured;
  }
  log_verbose(g, std::to_string(featured) + " of " + std::to_string(map.size()) +
                     " primitives received features from " + std::to_string(pixels) + " pixels");

  write_gaussian_map(a.out_path, map);
  carry_sidecar(a.map_path, a.out_path);
  std::printf("%.6f\n", map.size() == 0 ? 0.0 : double(featured) / double(map.size()));
  return 0;
}

struct ProjectArgs {
  std::string map_path, out_path, grid_from, texts_path;
  std::vector<double> origin;
  std::vector<int> dims;
  double voxel_size = 0.0, tau_occ = 0.0;
  CLI::Option *voxel_opt = nullptr, *tau_opt = nullptr;
};

int cmd_project(const GlobalOpts& g, const ProjectArgs& a) {
  PipelineConfig cfg = resolve_config(g);
  override_if_set(a.voxel_opt, cfg.voxel_size, a.voxel_size);
  override_if_set(a.tau_opt, cfg.tau_occ, a.tau_occ);
  cfg.validate();

  GridSpec spec;
  if (!a.grid_from.empty()) {
    spec = read_occupancy_field(a.grid_from).spec;
  } else if (!a.origin.empty() && !a.dims.empty()) {
    spec.origin = Vec3(a.origin[0], a.origin[1], a.origin[2]);
    spec.dims = {a.dims[0], a.dims[1], a.dims[2]};
    spec.voxel_size = cfg.voxel_size;
  } else {
    throw InvalidInputError("project: pass either --grid-from or both --origin and --dims");
  }
  spec.validate();

  const GaussianMap map = read_gaussian_map(a.map_path);
  TextEmbeddingSet texts;
  const bool with_texts = !a.texts_path.empty();
  if (with_texts) texts = read_text_embeddings(a.texts_path);
  log_verbose(g, "projecting " + std::to_string(map.size()) + " primitives into " +
                     std::to_string(spec.voxel_count()) + " voxels");

  const OccupancyField field = project(map, spec, cfg.tau_occ, with_texts ? &texts : nullptr);
  write_occupancy_field(a.out_path, field);
  return 0;
}

struct BuildBenchArgs {
  std::string manifest_path, out_path;
  double voxel_size = 0.0, mask_tolerance = kDefaultOcclusionToleranceVoxels;
  int pixel_stride = 1, frame_stride = 1;
  bool dilate = false;
  CLI::Option *voxel_opt = nullptr, *pixel_stride_opt = nullptr, *frame_stride_opt = nullptr;
};

int cmd_build_bench(const GlobalOpts& g, const BuildBenchArgs& a) {
  PipelineConfig cfg = resolve_config(g);
  override_if_set(a.voxel_opt, cfg.voxel_size, a.voxel_size);
  override_if_set(a.pixel_stride_opt, cfg.pixel_stride, a.pixel_stride);
  override_if_set(a.frame_stride_opt, cfg.frame_stride, a.frame_stride);
  cfg.validate();

  const DatasetManifest manifest = load_manifest(a.manifest_path);
  const LabeledFrameSet set = load_labeled_frames(manifest);
  log_verbose(g, "building benchmark grid from " + std::to_string(set.frames.size()) + " frames");
  const SparseLabeledVoxels sparse = extract_sparse_voxels(set, cfg.pixel_stride, cfg.voxel_size);
  const DenseLabels dense = densify_grid(sparse);
  const std::vector<std::uint8_t> mask =
      observability_mask(dense.spec, set, cfg.frame_stride, a.mask_tolerance, a.dilate);
  const OccupancyField field = assemble_benchmark(dense, mask);

  write_occupancy_field(a.out_path, field);
  std::size_t occupied = 0;
  for (std::size_t i = 0; i < field.label.size(); ++i) {
    if (field.label[i] != kLabelFree && field.label[i] != kLabelUnknown) ++occupied;
  }
  std::printf("%zu\n", occupied);
  return 0;
}

struct SynthArgs {
  std::string spec_path, out_dir;
};

int cmd_synth(const GlobalOpts& g, const SynthArgs& a) {
  SceneSpec spec = load_scene_spec(a.spec_path);
  if (g.seed_opt->count() > 0) spec.seed = g.seed;
  log_verbose(g, "generating " + std::to_string(spec.orbit.frame_count) + " frames");
  const SyntheticScene scene = generate_scene(spec);
  const SyntheticDatasetPaths paths = write_synthetic_dataset(a.out_dir, scene);
  log_verbose(g, "dataset written to " + paths.manifest);

  std::size_t occupied = 0;
  for (std::size_t i = 0; i < scene.ground_truth.label.size(); ++i) {
    const std::uint8_t l = scene.ground_truth.label[i];
    if (l != kLabelFree && l != kLabelUnknown) ++occupied;
  }
  std::printf("%zu\n", occupied);
  return 0;
}

struct EvalArgs {
  std::string map_path, pred_traj_path, gt_grid_path, gt_traj_path, texts_path, out_path;
  std::string mode;
  double tau_occ = 0.0;
  CLI::Option* tau_opt = nullptr;
};

int cmd_eval(const GlobalOpts& g, const EvalArgs& a) {
  PipelineConfig cfg = resolve_config(g);
  override_if_set(a.tau_opt, cfg.tau_occ, a.tau_occ);
  cfg.validate();

  const GaussianMap map = read_gaussian_map(a.map_path);
  const Trajectory pred_traj = load_trajectory(a.pred_traj_path);
  const OccupancyField gt = read_occupancy_field(a.gt_grid_path);
  const Trajectory gt_traj = load_trajectory(a.gt_traj_path);
  const TextEmbeddingSet texts = read_text_embeddings(a.texts_path);

  const bool estimate_scale = a.mode == "mono";
  log_verbose(g, std::string("aligning with ") + (estimate_scale ? "Sim(3)" : "SE(3)"));
  const EvalReport report =
      align_and_evaluate(map, pred_traj, gt, gt_traj, estimate_scale, texts, cfg.tau_occ);

  std::cerr << format_eval_report(report);
  if (a.out_path.empty()) {
    std::cout << eval_report_to_json(report).dump(2) << "\n";
  } else {
    save_eval_report(a.out_path, report);
  }
  return 0;
}

struct QueryArgs {
  std::string grid_path, texts_path, category, out_path;
};

int cmd_query(const GlobalOpts& g, const QueryArgs& a) {
  const OccupancyField field = read_occupancy_field(a.grid_path);
  const TextEmbeddingSet texts = read_text_embeddings(a.texts_path);
  const std::vector<VoxelSimilarity> rows = compute_similarities(field, texts, a.category);
  log_verbose(g, std::to_string(rows.size()) + " featured voxels scored");

  if (a.out_path.empty()) {
    std::cout << "i,j,k,similarity\n";
    char line[96];
    for (const VoxelSimilarity& s : rows) {
      std::snprintf(line, sizeof(line), "%d,%d,%d,%.9g\n", s.i, s.j, s.k,
                    static_cast<double>(s.similarity));
      std::cout << line;
    }
  } else {
    save_similarity_csv(a.out_path, rows);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Language-embedded Gaussian maps to open-vocabulary voxel occupancy"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOpts g;
  app.add_option("--config", g.config_path, "pipeline config JSON");
  g.seed_opt = app.add_option("--seed", g.seed, "override the pipeline seed");
  g.threads_opt = app.add_option("--threads", g.threads, "cap worker threads");
  app.add_flag("--verbose", g.verbose, "log progress to stderr");

  InitMapArgs init_args;
  CLI::App* init = app.add_subcommand("init-map", "back-project depth into a Gaussian map");
  init->add_option("manifest", init_args.manifest_path, "dataset manifest JSON")->required();
  init->add_option("-o,--out", init_args.out_path, "output map file")->required();
  init_args.kappa_opt = init->add_option("--kappa", init_args.kappa, "pixel footprint scale");
  init_args.gamma_opt = init->add_option("--gamma", init_args.gamma, "along-ray elongation");
  init_args.o_init_opt = init->add_option("--o-init", init_args.o_init, "initial opacity");
  init_args.max_range_opt = init->add_option("--max-range", init_args.max_range, "depth cutoff");
  init_args.pixel_stride_opt = init->add_option("--pixel-stride", init_args.pixel_stride, "");
  init_args.frame_stride_opt = init->add_option("--frame-stride", init_args.frame_stride, "");
  init->add_option("--min-spacing", init_args.min_spacing, "seed spacing gate, meters");
  init->add_option("--max-depth", init_args.max_depth, "skip pixels deeper than this");

  OptimizeArgs opt_args;
  CLI::App* optimize = app.add_subcommand("optimize", "geometrically anchored refinement");
  optimize->add_option("map", opt_args.map_path, "input map file")->required();
  optimize->add_option("manifest", opt_args.manifest_path, "dataset manifest JSON")->required();
  optimize->add_option("-o,--out", opt_args.out_path, "output map file")->required();
  optimize->add_option("--trace", opt_args.trace_path, "loss trace CSV");
  optimize->add_option("--optimizer", opt_args.optimizer_path, "optimizer config JSON");
  opt_args.beta_opt = optimize->add_option("--beta", opt_args.beta, "depth loss weight");
  opt_args.max_iters_opt = optimize->add_option("--max-iters", opt_args.max_iters, "");
  opt_args.frame_stride_opt = optimize->add_option("--frame-stride", opt_args.frame_stride, "");

  AssociateArgs assoc_args;
  CLI::App* associate = app.add_subcommand("associate", "attach language features to primitives");
  associate->add_option("map", assoc_args.map_path, "input map file")->required();
  associate->add_option("manifest", assoc_args.manifest_path, "manifest with embedding rasters")
      ->required();
  associate->add_option("-o,--out", assoc_args.out_path, "output map file")->required();
  assoc_args.radius_opt = associate->add_option("--radius", assoc_args.radius, "match radius");
  assoc_args.pixel_stride_opt =
      associate->add_option("--pixel-stride", assoc_args.pixel_stride, "");

  ProjectArgs proj_args;
  CLI::App* project = app.add_subcommand("project", "render the map into a voxel grid");
  project->add_option("map", proj_args.map_path, "input map file")->required();
  project->add_option("-o,--out", proj_args.out_path, "output occupancy grid")->required();
  project->add_option("--grid-from", proj_args.grid_from, "copy the grid layout of this file");
  project->add_option("--origin", proj_args.origin, "grid origin")->expected(3);
  project->add_option("--dims", proj_args.dims, "grid dimensions")->expected(3);
  proj_args.voxel_opt = project->add_option("--voxel-size", proj_args.voxel_size, "");
  proj_args.tau_opt = project->add_option("--tau-occ", proj_args.tau_occ, "semantic gate");
  project->add_option("--texts", proj_args.texts_path, "text embedding set JSON");

  BuildBenchArgs bench_args;
  CLI::App* bench = app.add_subcommand("build-bench", "ground-truth grid from labeled RGB-D");
  bench->add_option("manifest", bench_args.manifest_path, "manifest with label images")->required();
  bench->add_option("-o,--out", bench_args.out_path, "output occupancy grid")->required();
  bench_args.voxel_opt = bench->add_option("--voxel-size", bench_args.voxel_size, "");
  bench_args.pixel_stride_opt = bench->add_option("--pixel-stride", bench_args.pixel_stride, "");
  bench_args.frame_stride_opt = bench->add_option("--frame-stride", bench_args.frame_stride, "");
  bench->add_option("--mask-tolerance", bench_args.mask_tolerance, "occlusion slack, voxels");
  bench->add_flag("--dilate", bench_args.dilate, "dilate the observability mask");

  SynthArgs synth_args;
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic labeled dataset");
  synth->add_option("spec", synth_args.spec_path, "scene spec JSON")->required();
  synth->add_option("-o,--out", synth_args.out_dir, "output dataset directory")->required();

  EvalArgs eval_args;
  CLI::App* eval = app.add_subcommand("eval", "align a map to ground truth and score it");
  eval->add_option("map", eval_args.map_path, "predicted map file")->required();
  eval->add_option("pred_traj", eval_args.pred_traj_path, "predicted trajectory")->required();
  eval->add_option("gt_grid", eval_args.gt_grid_path, "ground-truth occupancy grid")->required();
  eval->add_option("gt_traj", eval_args.gt_traj_path, "ground-truth trajectory")->required();
  eval->add_option("--texts", eval_args.texts_path, "text embedding set JSON")->required();
  eval->add_option("--mode", eval_args.mode, "mono (Sim(3)) or rgbd (SE(3))")
      ->required()
      ->check(CLI::IsMember({"mono", "rgbd"}));
  eval->add_option("-o,--out", eval_args.out_path, "report JSON (default: stdout)");
  eval_args.tau_opt = eval->add_option("--tau-occ", eval_args.tau_occ, "occupancy threshold");

  QueryArgs query_args;
  CLI::App* query = app.add_subcommand("query", "per-voxel similarity for one category");
  query->add_option("grid", query_args.grid_path, "occupancy grid with features")->required();
  query->add_option("texts", query_args.texts_path, "text embedding set JSON")->required();
  query->add_option("category", query_args.category, "category name")->required();
  query->add_option("-o,--out", query_args.out_path, "similarity CSV (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (g.threads_opt->count() > 0) set_max_threads(g.threads);
    if (init->parsed()) return cmd_init_map(g, init_args);
    if (optimize->parsed()) return cmd_optimize(g, opt_args);
    if (associate->parsed()) return cmd_associate(g, assoc_args);
    if (project->parsed()) return cmd_project(g, proj_args);
    if (bench->parsed()) return cmd_build_bench(g, bench_args);
    if (synth->parsed()) return cmd_synth(g, synth_args);
    if (eval->parsed()) return cmd_eval(g, eval_args);
    if (query->parsed()) return cmd_query(g, query_args);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const InvalidInputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
