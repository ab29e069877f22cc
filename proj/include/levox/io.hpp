#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "levox/bench.hpp"
#include "levox/common.hpp"
#include "levox/core.hpp"
#include "levox/eval.hpp"
#include "levox/gsmap.hpp"
#include "levox/occproj.hpp"
#include "levox/splatopt.hpp"

namespace levox {

inline constexpr char kGaussianMapMagic[8] = {'L', 'E', 'G', 'S', 'M', 'A', 'P', '1'};
inline constexpr char kOccupancyMagic[8] = {'O', 'C', 'C', 'G', 'R', 'I', 'D', '1'};

namespace detail {

// ---- little-endian scalar framing -----------------------------------------

template <typename T>
void write_le(std::ostream& out, T value) {
  static_assert(std::is_arithmetic_v<T>);
  using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>;
  static_assert(sizeof(U) == sizeof(T));
  const U bits = std::bit_cast<U>(value);
  std::array<char, sizeof(U)> bytes;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  }
  out.write(bytes.data(), bytes.size());
}

template <typename T>
T read_le(std::istream& in, const std::string& path) {
  using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>;
  std::array<char, sizeof(U)> bytes;
  if (!in.read(bytes.data(), bytes.size())) throw IoError("unexpected end of file: " + path);
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bits |= static_cast<U>(static_cast<unsigned char>(bytes[i])) << (8 * i);
  }
  return std::bit_cast<T>(bits);
}

inline std::ofstream open_binary_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  return out;
}

inline std::ifstream open_binary_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  return in;
}

inline void finish_write(std::ostream& out, const std::string& path) {
  out.flush();
  if (!out) throw IoError("write failed: " + path);
}

// ---- JSON schema helpers ---------------------------------------------------

inline nlohmann::json parse_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for reading: " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidInputError(path + ": " + e.what());
  }
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << j.dump(2) << '\n';
  finish_write(out, path);
}

inline void reject_unknown_keys(const nlohmann::json& j, std::span<const char* const> allowed,
                                const std::string& context) {
  if (!j.is_object()) throw InvalidInputError(context + ": expected a JSON object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* key : allowed) {
      if (item.key() == key) {
        known = true;
        break;
      }
    }
    if (!known) throw InvalidInputError(context + ": unknown field '" + item.key() + "'");
  }
}

template <typename T>
T json_get(const nlohmann::json& j, const char* key, const std::string& context) {
  auto it = j.find(key);
  if (it == j.end()) throw InvalidInputError(context + ": missing field '" + key + "'");
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw InvalidInputError(context + ": field '" + key + "' has the wrong type");
  }
}

template <typename T>
T json_get_or(const nlohmann::json& j, const char* key, T fallback, const std::string& context) {
  if (j.find(key) == j.end()) return fallback;
  return json_get<T>(j, key, context);
}

inline Vec3 json_vec3(const nlohmann::json& j, const char* key, const std::string& context) {
  const auto arr = json_get<std::vector<double>>(j, key, context);
  if (arr.size() != 3) throw InvalidInputError(context + ": field '" + key + "' must have 3 entries");
  return Vec3(arr[0], arr[1], arr[2]);
}

inline nlohmann::json vec3_json(const Vec3& v) {
  return nlohmann::json::array({v.x(), v.y(), v.z()});
}

/// Resolves `path` relative to the directory containing `base_file`.
inline std::string resolve_relative(const std::string& base_file, const std::string& path) {
  std::filesystem::path p(path);
  if (p.is_absolute()) return path;
  return (std::filesystem::path(base_file).parent_path() / p).string();
}

// ---- libpng plumbing -------------------------------------------------------

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FileHandle = std::unique_ptr<std::FILE, FileCloser>;

/// One decoded PNG image; samples are host-endian u16 even for 8-bit files.
struct PngImage {
  int width = 0, height = 0, channels = 0, bit_depth = 0;
  std::vector<std::uint16_t> samples;  // row-major, channel-interleaved
};

inline PngImage read_png(const std::string& path, int want_channels, int want_bit_depth) {
  FileHandle file(std::fopen(path.c_str(), "rb"));
  if (!file) throw IoError("cannot open for reading: " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) throw IoError("libpng allocation failed reading " + path);
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng allocation failed reading " + path);
  }

  PngImage image;
  std::vector<png_bytep> rows;
  std::vector<unsigned char> raw;
  // All C++ buffers above outlive the setjmp region, so the longjmp skips no
  // live destructors.
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("corrupt PNG file: " + path);
  }

  png_init_io(png, file.get());
  png_read_info(png, info);
  image.width = static_cast<int>(png_get_image_width(png, info));
  image.height = static_cast<int>(png_get_image_height(png, info));
  image.bit_depth = png_get_bit_depth(png, info);
  image.channels = png_get_channels(png, info);
  const int color_type = png_get_color_type(png, info);

  const bool shape_ok =
      image.bit_depth == want_bit_depth && image.channels == want_channels &&
      (want_channels == 1 ? color_type == PNG_COLOR_TYPE_GRAY : color_type == PNG_COLOR_TYPE_RGB);
  if (!shape_ok || image.width <= 0 || image.height <= 0) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unexpected PNG layout (want " + std::to_string(want_bit_depth) + "-bit, " +
                  std::to_string(want_channels) + " channel): " + path);
  }

  const std::size_t row_bytes = png_get_rowbytes(png, info);
  raw.resize(row_bytes * static_cast<std::size_t>(image.height));
  rows.resize(static_cast<std::size_t>(image.height));
  for (int v = 0; v < image.height; ++v) rows[static_cast<std::size_t>(v)] = raw.data() + row_bytes * v;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t n = static_cast<std::size_t>(image.width) * image.height * image.channels;
  image.samples.resize(n);
  if (want_bit_depth == 16) {
    for (std::size_t i = 0; i < n; ++i) {  // PNG stores 16-bit samples big-endian
      image.samples[i] = static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) image.samples[i] = raw[i];
  }
  return image;
}

inline void write_png(const std::string& path, int width, int height, int channels, int bit_depth,
                      std::span<const std::uint16_t> samples) {
  if (width <= 0 || height <= 0) throw InvalidInputError("write_png: image size must be positive");
  const std::size_t n = static_cast<std::size_t>(width) * height * channels;
  if (samples.size() != n) throw InvalidInputError("write_png: sample count does not match size");

  FileHandle file(std::fopen(path.c_str(), "wb"));
  if (!file) throw IoError("cannot open for writing: " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) throw IoError("libpng allocation failed writing " + path);
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng allocation failed writing " + path);
  }

  std::vector<unsigned char> raw(n * (bit_depth == 16 ? 2 : 1));
  if (bit_depth == 16) {
    for (std::size_t i = 0; i < n; ++i) {
      raw[2 * i] = static_cast<unsigned char>(samples[i] >> 8);
      raw[2 * i + 1] = static_cast<unsigned char>(samples[i] & 0xff);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      if (samples[i] > 255) {
        png_destroy_write_struct(&png, &info);
        throw InvalidInputError("write_png: sample exceeds 8-bit range");
      }
      raw[i] = static_cast<unsigned char>(samples[i]);
    }
  }
  const std::size_t row_bytes = static_cast<std::size_t>(width) * channels * (bit_depth == 16 ? 2 : 1);
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int v = 0; v < height; ++v) rows[static_cast<std::size_t>(v)] = raw.data() + row_bytes * v;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG write failed: " + path);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
               bit_depth, channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

// ---- image files -----------------------------------------------------------

/// Writes depth in meters as a 16-bit grayscale PNG storing round(d / factor);
/// invalid pixels (0) stay 0. Values that do not fit 16 bits are an error.
inline void write_depth_png(const std::string& path, const DepthFrame& frame,
                            double depth_factor = kDefaultDepthFactor) {
  if (!(depth_factor > 0.0)) throw InvalidInputError("write_depth_png: depth_factor must be positive");
  std::vector<std::uint16_t> units(frame.depth.size());
  for (std::size_t i = 0; i < frame.depth.size(); ++i) {
    const long long q = std::llround(frame.depth[i] / depth_factor);
    if (q < 0 || q > 65535) throw InvalidInputError("write_depth_png: depth exceeds 16-bit range");
    units[i] = static_cast<std::uint16_t>(q);
  }
  detail::write_png(path, frame.width, frame.height, 1, 16, units);
}

/// Reads a 16-bit grayscale depth PNG into meters (value * depth_factor);
/// out-of-range readings are invalidated per make_depth_frame.
inline DepthFrame read_depth_png(const std::string& path, double depth_factor = kDefaultDepthFactor,
                                 double max_range = kDefaultMaxRange) {
  if (!(depth_factor > 0.0)) throw InvalidInputError("read_depth_png: depth_factor must be positive");
  const detail::PngImage img = detail::read_png(path, 1, 16);
  std::vector<double> depth(img.samples.size());
  for (std::size_t i = 0; i < img.samples.size(); ++i) depth[i] = img.samples[i] * depth_factor;
  return make_depth_frame(img.width, img.height, std::move(depth), max_range);
}

struct LabelImage {
  int width = 0, height = 0;
  std::vector<std::uint8_t> labels;  // row-major
};

inline void write_label_png(const std::string& path, std::span<const std::uint8_t> labels, int width,
                            int height) {
  std::vector<std::uint16_t> samples(labels.begin(), labels.end());
  detail::write_png(path, width, height, 1, 8, samples);
}

inline LabelImage read_label_png(const std::string& path) {
  const detail::PngImage img = detail::read_png(path, 1, 8);
  LabelImage out;
  out.width = img.width;
  out.height = img.height;
  out.labels.assign(img.samples.begin(), img.samples.end());
  return out;
}

struct ColorImage {
  int width = 0, height = 0;
  std::vector<Vec3> pixels;  // row-major, [0, 1]
};

inline void write_color_png(const std::string& path, std::span<const Vec3> pixels, int width,
                            int height) {
  if (pixels.size() != static_cast<std::size_t>(width) * height) {
    throw InvalidInputError("write_color_png: pixel count does not match size");
  }
  std::vector<std::uint16_t> samples(pixels.size() * 3);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    for (int ch = 0; ch < 3; ++ch) {
      const double c = pixels[i][ch];
      if (!(c >= 0.0) || !(c <= 1.0)) throw InvalidInputError("write_color_png: color outside [0, 1]");
      samples[3 * i + ch] = static_cast<std::uint16_t>(std::lround(c * 255.0));
    }
  }
  detail::write_png(path, width, height, 3, 8, samples);
}

inline ColorImage read_color_png(const std::string& path) {
  const detail::PngImage img = detail::read_png(path, 3, 8);
  ColorImage out;
  out.width = img.width;
  out.height = img.height;
  out.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    out.pixels[i] = Vec3(img.samples[3 * i] / 255.0, img.samples[3 * i + 1] / 255.0,
                         img.samples[3 * i + 2] / 255.0);
  }
  return out;
}

// ---- embedding rasters -----------------------------------------------------

inline void write_embedding_raster(const std::string& path, const PixelEmbeddingFrame& frame) {
  frame.validate();
  std::ofstream out = detail::open_binary_out(path);
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(frame.width));
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(frame.height));
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(frame.dim));
  for (float v : frame.data) detail::write_le<float>(out, v);
  detail::finish_write(out, path);
}

inline PixelEmbeddingFrame read_embedding_raster(const std::string& path) {
  std::ifstream in = detail::open_binary_in(path);
  PixelEmbeddingFrame frame;
  frame.width = static_cast<int>(detail::read_le<std::uint32_t>(in, path));
  frame.height = static_cast<int>(detail::read_le<std::uint32_t>(in, path));
  frame.dim = static_cast<int>(detail::read_le<std::uint32_t>(in, path));
  if (frame.width <= 0 || frame.height <= 0 || frame.dim <= 0 ||
      static_cast<std::uint64_t>(frame.width) * frame.height * frame.dim > (1ull << 32)) {
    throw IoError("implausible embedding raster header: " + path);
  }
  frame.data.resize(static_cast<std::size_t>(frame.width) * frame.height * frame.dim);
  for (float& v : frame.data) v = detail::read_le<float>(in, path);
  return frame;
}

// ---- Gaussian map (LEGSMAP1) ----------------------------------------------

/// Provenance carried next to a map file in `<map path>.json`.
struct MapSidecar {
  std::string source_trajectory;
  double gamma = kDefaultGamma;
  double kappa = kDefaultKappa;
};

/// Binary little-endian map: 8-byte magic + 8 zero pad, {count u64, feature_dim
/// u32}, then per primitive mean/scale/rotation(wxyz)/opacity/color as f64 and,
/// when feature_dim > 0, feature_dim f32s (zeros for primitives without a
/// feature; an all-zero vector reads back as "no feature").
inline void write_gaussian_map(const std::string& path, const GaussianMap& map) {
  std::ofstream out = detail::open_binary_out(path);
  out.write(kGaussianMapMagic, 8);
  const char pad[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  out.write(pad, 8);
  detail::write_le<std::uint64_t>(out, map.size());
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(map.feature_dim()));
  for (const GaussianPrimitive& g : map.primitives()) {
    for (int a = 0; a < 3; ++a) detail::write_le<double>(out, g.mean[a]);
    for (int a = 0; a < 3; ++a) detail::write_le<double>(out, g.scale[a]);
    detail::write_le<double>(out, g.rotation.w());
    detail::write_le<double>(out, g.rotation.x());
    detail::write_le<double>(out, g.rotation.y());
    detail::write_le<double>(out, g.rotation.z());
    detail::write_le<double>(out, g.opacity);
    for (int a = 0; a < 3; ++a) detail::write_le<double>(out, g.color[a]);
    if (map.feature_dim() > 0) {
      for (int d = 0; d < map.feature_dim(); ++d) {
        detail::write_le<float>(out, g.has_feature() ? g.feature[d] : 0.0f);
      }
    }
  }
  detail::finish_write(out, path);
}

inline GaussianMap read_gaussian_map(const std::string& path) {
  std::ifstream in = detail::open_binary_in(path);
  char magic[16];
  if (!in.read(magic, 16)) throw IoError("unexpected end of file: " + path);
  if (std::memcmp(magic, kGaussianMapMagic, 8) != 0) throw IoError("not a Gaussian map file: " + path);
  const std::uint64_t count = detail::read_le<std::uint64_t>(in, path);
  const std::uint32_t dim = detail::read_le<std::uint32_t>(in, path);
  if (dim > 65536 || count > (1ull << 40)) throw IoError("implausible map header: " + path);

  std::vector<GaussianPrimitive> prims(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    GaussianPrimitive& g = prims[i];
    for (int a = 0; a < 3; ++a) g.mean[a] = detail::read_le<double>(in, path);
    for (int a = 0; a < 3; ++a) g.scale[a] = detail::read_le<double>(in, path);
    const double w = detail::read_le<double>(in, path);
    const double x = detail::read_le<double>(in, path);
    const double y = detail::read_le<double>(in, path);
    const double z = detail::read_le<double>(in, path);
    g.rotation = Quat(w, x, y, z);
    g.opacity = detail::read_le<double>(in, path);
    for (int a = 0; a < 3; ++a) g.color[a] = detail::read_le<double>(in, path);
    if (dim > 0) {
      Eigen::VectorXf f(dim);
      for (std::uint32_t d = 0; d < dim; ++d) f[d] = detail::read_le<float>(in, path);
      if (f.norm() > 0.0f) g.feature = std::move(f);
    }
  }
  return GaussianMap::from_primitives(static_cast<int>(dim), std::move(prims));
}

inline std::string map_sidecar_path(const std::string& map_path) { return map_path + ".json"; }

inline void write_map_sidecar(const std::string& map_path, const MapSidecar& sidecar) {
  nlohmann::json j;
  j["source_trajectory"] = sidecar.source_trajectory;
  j["gamma"] = sidecar.gamma;
  j["kappa"] = sidecar.kappa;
  detail::write_json_file(map_sidecar_path(map_path), j);
}

inline MapSidecar read_map_sidecar(const std::string& map_path) {
  const std::string path = map_sidecar_path(map_path);
  const nlohmann::json j = detail::parse_json_file(path);
  static constexpr const char* kKeys[] = {"source_trajectory", "gamma", "kappa"};
  detail::reject_unknown_keys(j, kKeys, path);
  MapSidecar s;
  s.source_trajectory = detail::json_get_or<std::string>(j, "source_trajectory", "", path);
  s.gamma = detail::json_get_or<double>(j, "gamma", s.gamma, path);
  s.kappa = detail::json_get_or<double>(j, "kappa", s.kappa, path);
  return s;
}

// ---- occupancy fields (OCCGRID1) --------------------------------------------

/// Binary little-endian grid: 8-byte magic, {origin 3xf64, voxel_size f64,
/// dims 3xu32, has_features u8, feature_dim u32}, occupancy f32 raster
/// (x-fastest), label u8 raster, then, when has_features, {count u64,
/// (linear index u64, feature_dim f32s) x count} sorted by index.
inline void write_occupancy_field(const std::string& path, const OccupancyField& field) {
  field.validate();
  std::ofstream out = detail::open_binary_out(path);
  out.write(kOccupancyMagic, 8);
  for (int a = 0; a < 3; ++a) detail::write_le<double>(out, field.spec.origin[a]);
  detail::write_le<double>(out, field.spec.voxel_size);
  for (int a = 0; a < 3; ++a) detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(field.spec.dims[a]));
  const bool has_features = field.feature_dim > 0;
  detail::write_le<std::uint8_t>(out, has_features ? 1 : 0);
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(field.feature_dim));
  for (float v : field.occupancy) detail::write_le<float>(out, v);
  out.write(reinterpret_cast<const char*>(field.label.data()),
            static_cast<std::streamsize>(field.label.size()));
  if (has_features) {
    detail::write_le<std::uint64_t>(out, field.features.size());
    for (const auto& [idx, f] : field.features) {
      if (f.size() != field.feature_dim) {
        throw InvalidInputError("write_occupancy_field: feature dimension mismatch");
      }
      detail::write_le<std::uint64_t>(out, idx);
      for (int d = 0; d < field.feature_dim; ++d) detail::write_le<float>(out, f[d]);
    }
  }
  detail::finish_write(out, path);
}

inline OccupancyField read_occupancy_field(const std::string& path) {
  std::ifstream in = detail::open_binary_in(path);
  char magic[8];
  if (!in.read(magic, 8)) throw IoError("unexpected end of file: " + path);
  if (std::memcmp(magic, kOccupancyMagic, 8) != 0) throw IoError("not an occupancy grid file: " + path);

  OccupancyField field;
  for (int a = 0; a < 3; ++a) field.spec.origin[a] = detail::read_le<double>(in, path);
  field.spec.voxel_size = detail::read_le<double>(in, path);
  for (int a = 0; a < 3; ++a) {
    field.spec.dims[a] = static_cast<int>(detail::read_le<std::uint32_t>(in, path));
  }
  const std::uint8_t has_features = detail::read_le<std::uint8_t>(in, path);
  field.feature_dim = static_cast<int>(detail::read_le<std::uint32_t>(in, path));
  if (has_features > 1 || (has_features == 0) != (field.feature_dim == 0)) {
    throw IoError("inconsistent feature header: " + path);
  }
  field.spec.validate();
  const std::size_t n = field.spec.voxel_count();
  if (n > (1ull << 34)) throw IoError("implausible grid size: " + path);

  field.occupancy.resize(n);
  for (float& v : field.occupancy) v = detail::read_le<float>(in, path);
  field.label.resize(n);
  if (!in.read(reinterpret_cast<char*>(field.label.data()), static_cast<std::streamsize>(n))) {
    throw IoError("unexpected end of file: " + path);
  }
  if (has_features) {
    const std::uint64_t count = detail::read_le<std::uint64_t>(in, path);
    if (count > n) throw IoError("more features than voxels: " + path);
    field.features.resize(count);
    std::uint64_t prev = 0;
    for (std::uint64_t i = 0; i < count; ++i) {
      const std::uint64_t idx = detail::read_le<std::uint64_t>(in, path);
      if (idx >= n || (i > 0 && idx <= prev)) throw IoError("feature indices not strictly increasing: " + path);
      prev = idx;
      Eigen::VectorXf f(field.feature_dim);
      for (int d = 0; d < field.feature_dim; ++d) f[d] = detail::read_le<float>(in, path);
      field.features[i] = {idx, std::move(f)};
    }
  }
  return field;
}

// ---- text embedding sets -----------------------------------------------------

/// JSON manifest {categories, dim, data} next to a raw f32 matrix (row-major,
/// one row per category). `data` is resolved relative to the manifest.
inline void write_text_embeddings(const std::string& json_path, const TextEmbeddingSet& set,
                                  std::string bin_filename = "") {
  if (bin_filename.empty()) {
    bin_filename = std::filesystem::path(json_path).stem().string() + ".bin";
  }
  nlohmann::json j;
  j["categories"] = set.categories;
  j["dim"] = set.dim();
  j["data"] = bin_filename;
  detail::write_json_file(json_path, j);

  const std::string bin_path = detail::resolve_relative(json_path, bin_filename);
  std::ofstream out = detail::open_binary_out(bin_path);
  for (int r = 0; r < set.size(); ++r) {
    for (int c = 0; c < set.dim(); ++c) detail::write_le<float>(out, set.embeddings(r, c));
  }
  detail::finish_write(out, bin_path);
}

inline TextEmbeddingSet read_text_embeddings(const std::string& json_path) {
  const nlohmann::json j = detail::parse_json_file(json_path);
  static constexpr const char* kKeys[] = {"categories", "dim", "data"};
  detail::reject_unknown_keys(j, kKeys, json_path);
  const auto categories = detail::json_get<std::vector<std::string>>(j, "categories", json_path);
  const int dim = detail::json_get<int>(j, "dim", json_path);
  const std::string data = detail::json_get<std::string>(j, "data", json_path);
  if (dim < 1) throw InvalidInputError(json_path + ": field 'dim' must be >= 1");
  if (categories.empty()) throw InvalidInputError(json_path + ": field 'categories' must not be empty");

  const std::string bin_path = detail::resolve_relative(json_path, data);
  std::ifstream in = detail::open_binary_in(bin_path);
  Eigen::MatrixXf m(static_cast<Eigen::Index>(categories.size()), dim);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = detail::read_le<float>(in, bin_path);
  }
  char extra;
  if (in.read(&extra, 1)) throw IoError("trailing bytes in embedding matrix: " + bin_path);
  return make_text_embedding_set(categories, std::move(m));
}

// ---- loss traces ---------------------------------------------------------------

inline void save_loss_trace(const std::string& path, std::span<const double> trace) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "iter,loss\n";
  char line[64];
  for (std::size_t i = 0; i < trace.size(); ++i) {
    std::snprintf(line, sizeof(line), "%zu,%.17g\n", i, trace[i]);
    out << line;
  }
  detail::finish_write(out, path);
}

inline std::vector<double> load_loss_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for reading: " + path);
  std::string header;
  if (!std::getline(in, header) || header != "iter,loss") {
    throw IoError("not a loss trace file: " + path);
  }
  std::vector<double> trace;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t iter = 0;
    double loss = 0.0;
    if (std::sscanf(line.c_str(), "%zu,%lf", &iter, &loss) != 2 || iter != trace.size()) {
      throw IoError("malformed loss trace line in " + path);
    }
    trace.push_back(loss);
  }
  return trace;
}

// ---- per-voxel similarity export ----------------------------------------------

struct VoxelSimilarity {
  int i = 0, j = 0, k = 0;
  float similarity = 0.0f;
};

/// Cosine similarity between each featured voxel and one category embedding
/// (both sides unit-norm, so the dot product suffices).
inline std::vector<VoxelSimilarity> compute_similarities(const OccupancyField& field,
                                                         const TextEmbeddingSet& texts,
                                                         const std::string& category) {
  field.validate();
  const int row = texts.find(category);
  if (row < 0) {
    std::string names;
    for (const auto& name : texts.categories) names += (names.empty() ? "" : ", ") + name;
    throw InvalidInputError("unknown category '" + category + "'; available: " + names);
  }
  if (field.feature_dim == 0) throw InvalidInputError("occupancy field carries no features");
  if (texts.dim() != field.feature_dim) {
    throw InvalidInputError("text embedding dimension does not match field features");
  }
  std::vector<VoxelSimilarity> out;
  out.reserve(field.features.size());
  for (const auto& [idx, f] : field.features) {
    const auto ijk = field.spec.unlinear(idx);
    VoxelSimilarity s;
    s.i = ijk[0];
    s.j = ijk[1];
    s.k = ijk[2];
    s.similarity = f.dot(texts.embeddings.row(row));
    out.push_back(s);
  }
  return out;
}

inline void save_similarity_csv(const std::string& path, std::span<const VoxelSimilarity> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "i,j,k,similarity\n";
  char line[96];
  for (const VoxelSimilarity& s : rows) {
    std::snprintf(line, sizeof(line), "%d,%d,%d,%.9g\n", s.i, s.j, s.k,
                  static_cast<double>(s.similarity));
    out << line;
  }
  detail::finish_write(out, path);
}

inline std::vector<VoxelSimilarity> load_similarity_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for reading: " + path);
  std::string header;
  if (!std::getline(in, header) || header != "i,j,k,similarity") {
    throw IoError("not a similarity export: " + path);
  }
  std::vector<VoxelSimilarity> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    VoxelSimilarity s;
    double value = 0.0;
    if (std::sscanf(line.c_str(), "%d,%d,%d,%lf", &s.i, &s.j, &s.k, &value) != 4) {
      throw IoError("malformed similarity line in " + path);
    }
    s.similarity = static_cast<float>(value);
    rows.push_back(s);
  }
  return rows;
}

// ---- dataset manifests -----------------------------------------------------

/// Per-frame artifact paths; empty strings mark absent optional files.
struct FrameFiles {
  std::string depth;       // required, 16-bit grayscale PNG
  std::string labels;      // optional, 8-bit grayscale PNG
  std::string color;       // optional, RGB8 PNG
  std::string embeddings;  // optional, binary f32 raster
};

struct DatasetManifest {
  CameraIntrinsics intrinsics;
  std::string trajectory;  // TUM text file, one entry per frame, index-paired
  double depth_factor = kDefaultDepthFactor;
  double max_range = kDefaultMaxRange;
  std::vector<FrameFiles> frames;

  void validate() const {
    intrinsics.validate();
    if (!(depth_factor > 0.0)) throw InvalidInputError("DatasetManifest: depth_factor must be positive");
    if (!(max_range > 0.0)) throw InvalidInputError("DatasetManifest: max_range must be positive");
    if (trajectory.empty()) throw InvalidInputError("DatasetManifest: missing field 'trajectory'");
    if (frames.empty()) throw InvalidInputError("DatasetManifest: empty frame list");
    for (const FrameFiles& f : frames) {
      if (f.depth.empty()) throw InvalidInputError("DatasetManifest: frame missing field 'depth'");
    }
  }
};

inline void save_manifest(const std::string& path, const DatasetManifest& manifest) {
  nlohmann::json j;
  j["intrinsics"] = {{"width", manifest.intrinsics.width}, {"height", manifest.intrinsics.height},
                     {"fx", manifest.intrinsics.fx},       {"fy", manifest.intrinsics.fy},
                     {"cx", manifest.intrinsics.cx},       {"cy", manifest.intrinsics.cy}};
  j["trajectory"] = manifest.trajectory;
  j["depth_factor"] = manifest.depth_factor;
  j["max_range"] = manifest.max_range;
  j["frames"] = nlohmann::json::array();
  for (const FrameFiles& f : manifest.frames) {
    nlohmann::json entry;
    entry["depth"] = f.depth;
    if (!f.labels.empty()) entry["labels"] = f.labels;
    if (!f.color.empty()) entry["color"] = f.color;
    if (!f.embeddings.empty()) entry["embeddings"] = f.embeddings;
    j["frames"].push_back(std::move(entry));
  }
  detail::write_json_file(path, j);
}

/// Loads a manifest and resolves every stored path relative to the manifest's
/// directory.
inline DatasetManifest load_manifest(const std::string& path) {
  const nlohmann::json j = detail::parse_json_file(path);
  static constexpr const char* kKeys[] = {"intrinsics", "trajectory", "depth_factor", "max_range",
                                          "frames"};
  detail::reject_unknown_keys(j, kKeys, path);

  DatasetManifest m;
  const nlohmann::json intr = detail::json_get<nlohmann::json>(j, "intrinsics", path);
  static constexpr const char* kIntrKeys[] = {"width", "height", "fx", "fy", "cx", "cy"};
  detail::reject_unknown_keys(intr, kIntrKeys, path + ": intrinsics");
  m.intrinsics.width = detail::json_get<int>(intr, "width", path + ": intrinsics");
  m.intrinsics.height = detail::json_get<int>(intr, "height", path + ": intrinsics");
  m.intrinsics.fx = detail::json_get<double>(intr, "fx", path + ": intrinsics");
  m.intrinsics.fy = detail::json_get<double>(intr, "fy", path + ": intrinsics");
  m.intrinsics.cx = detail::json_get<double>(intr, "cx", path + ": intrinsics");
  m.intrinsics.cy = detail::json_get<double>(intr, "cy", path + ": intrinsics");
  m.trajectory = detail::resolve_relative(path, detail::json_get<std::string>(j, "trajectory", path));
  m.depth_factor = detail::json_get_or<double>(j, "depth_factor", m.depth_factor, path);
  m.max_range = detail::json_get_or<double>(j, "max_range", m.max_range, path);

  const nlohmann::json frames = detail::json_get<nlohmann::json>(j, "frames", path);
  if (!frames.is_array()) throw InvalidInputError(path + ": field 'frames' must be an array");
  static constexpr const char* kFrameKeys[] = {"depth", "labels", "color", "embeddings"};
  for (const nlohmann::json& entry : frames) {
    const std::string ctx = path + ": frames";
    detail::reject_unknown_keys(entry, kFrameKeys, ctx);
    FrameFiles f;
    f.depth = detail::resolve_relative(path, detail::json_get<std::string>(entry, "depth", ctx));
    if (entry.contains("labels")) {
      f.labels = detail::resolve_relative(path, detail::json_get<std::string>(entry, "labels", ctx));
    }
    if (entry.contains("color")) {
      f.color = detail::resolve_relative(path, detail::json_get<std::string>(entry, "color", ctx));
    }
    if (entry.contains("embeddings")) {
      f.embeddings =
          detail::resolve_relative(path, detail::json_get<std::string>(entry, "embeddings", ctx));
    }
    m.frames.push_back(std::move(f));
  }
  m.validate();
  return m;
}

namespace detail {

inline Trajectory load_manifest_trajectory(const DatasetManifest& manifest) {
  const Trajectory traj = load_trajectory(manifest.trajectory);
  if (traj.size() != manifest.frames.size()) {
    throw InvalidInputError("manifest lists " + std::to_string(manifest.frames.size()) +
                            " frames but trajectory has " + std::to_string(traj.size()) + " entries");
  }
  return traj;
}

}  // namespace detail

/// Loads depth + labels + poses for benchmark-grid construction. Every frame
/// must declare a label image.
inline LabeledFrameSet load_labeled_frames(const DatasetManifest& manifest) {
  manifest.validate();
  const Trajectory traj = detail::load_manifest_trajectory(manifest);
  LabeledFrameSet set;
  set.depth_factor = manifest.depth_factor;
  set.max_range = manifest.max_range;
  for (std::size_t i = 0; i < manifest.frames.size(); ++i) {
    const FrameFiles& files = manifest.frames[i];
    if (files.labels.empty()) {
      throw InvalidInputError("frame " + std::to_string(i) + " has no label image");
    }
    LabeledFrame frame;
    frame.depth = read_depth_png(files.depth, manifest.depth_factor, manifest.max_range);
    const LabelImage labels = read_label_png(files.labels);
    if (labels.width != frame.depth.width || labels.height != frame.depth.height) {
      throw InvalidInputError("frame " + std::to_string(i) + ": label size does not match depth");
    }
    frame.labels = labels.labels;
    frame.intrinsics = manifest.intrinsics;
    frame.pose = traj[i].pose;
    frame.timestamp = traj[i].timestamp;
    set.frames.push_back(std::move(frame));
  }
  set.validate();
  return set;
}

/// Loads depth + color + poses for initialization and optimization. Frames
/// without a color image get a mid-grey one.
inline std::vector<ObservedFrame> load_observed_frames(const DatasetManifest& manifest) {
  manifest.validate();
  const Trajectory traj = detail::load_manifest_trajectory(manifest);
  std::vector<ObservedFrame> frames;
  for (std::size_t i = 0; i < manifest.frames.size(); ++i) {
    const FrameFiles& files = manifest.frames[i];
    ObservedFrame frame;
    frame.depth = read_depth_png(files.depth, manifest.depth_factor, manifest.max_range);
    if (files.color.empty()) {
      frame.image.assign(static_cast<std::size_t>(frame.depth.width) * frame.depth.height,
                         Vec3::Constant(0.5));
    } else {
      ColorImage color = read_color_png(files.color);
      if (color.width != frame.depth.width || color.height != frame.depth.height) {
        throw InvalidInputError("frame " + std::to_string(i) + ": color size does not match depth");
      }
      frame.image = std::move(color.pixels);
    }
    frame.intrinsics = manifest.intrinsics;
    frame.pose = traj[i].pose;
    frame.validate();
    frames.push_back(std::move(frame));
  }
  return frames;
}

/// Loads the per-frame embedding rasters; every frame must declare one.
inline std::vector<PixelEmbeddingFrame> load_embedding_frames(const DatasetManifest& manifest) {
  manifest.validate();
  std::vector<PixelEmbeddingFrame> frames;
  for (std::size_t i = 0; i < manifest.frames.size(); ++i) {
    if (manifest.frames[i].embeddings.empty()) {
      throw InvalidInputError("frame " + std::to_string(i) + " has no embedding raster");
    }
    frames.push_back(read_embedding_raster(manifest.frames[i].embeddings));
    frames.back().validate();
  }
  return frames;
}

// ---- scene specs -------------------------------------------------------------

inline nlohmann::json scene_spec_to_json(const SceneSpec& spec) {
  nlohmann::json j;
  j["room_min"] = detail::vec3_json(spec.room_min);
  j["room_max"] = detail::vec3_json(spec.room_max);
  j["boxes"] = nlohmann::json::array();
  for (const SceneBox& b : spec.boxes) {
    j["boxes"].push_back({{"min", detail::vec3_json(b.min)},
                          {"max", detail::vec3_json(b.max)},
                          {"class_id", b.class_id},
                          {"color", detail::vec3_json(b.color)}});
  }
  j["intrinsics"] = {{"width", spec.intrinsics.width}, {"height", spec.intrinsics.height},
                     {"fx", spec.intrinsics.fx},       {"fy", spec.intrinsics.fy},
                     {"cx", spec.intrinsics.cx},       {"cy", spec.intrinsics.cy}};
  j["orbit"] = {{"target", detail::vec3_json(spec.orbit.target)},
                {"radius", spec.orbit.radius},
                {"height", spec.orbit.height},
                {"frame_count", spec.orbit.frame_count},
                {"start_angle", spec.orbit.start_angle},
                {"revolutions", spec.orbit.revolutions},
                {"timestamp_step", spec.orbit.timestamp_step}};
  j["voxel_size"] = spec.voxel_size;
  j["max_range"] = spec.max_range;
  j["depth_noise"] = spec.depth_noise;
  j["mask_tolerance_voxels"] = spec.mask_tolerance_voxels;
  j["mask_frame_stride"] = spec.mask_frame_stride;
  j["mask_dilate"] = spec.mask_dilate;
  j["seed"] = spec.seed;
  return j;
}

inline SceneSpec scene_spec_from_json(const nlohmann::json& j, const std::string& context) {
  static constexpr const char* kKeys[] = {"room_min",   "room_max",   "boxes",
                                          "intrinsics", "orbit",      "voxel_size",
                                          "max_range",  "depth_noise", "mask_tolerance_voxels",
                                          "mask_frame_stride", "mask_dilate", "seed"};
  detail::reject_unknown_keys(j, kKeys, context);
  SceneSpec spec;
  spec.room_min = detail::json_vec3(j, "room_min", context);
  spec.room_max = detail::json_vec3(j, "room_max", context);

  const nlohmann::json boxes = detail::json_get<nlohmann::json>(j, "boxes", context);
  if (!boxes.is_array()) throw InvalidInputError(context + ": field 'boxes' must be an array");
  static constexpr const char* kBoxKeys[] = {"min", "max", "class_id", "color"};
  for (const nlohmann::json& bj : boxes) {
    detail::reject_unknown_keys(bj, kBoxKeys, context + ": boxes");
    SceneBox b;
    b.min = detail::json_vec3(bj, "min", context + ": boxes");
    b.max = detail::json_vec3(bj, "max", context + ": boxes");
    b.class_id = detail::json_get<int>(bj, "class_id", context + ": boxes");
    b.color = detail::json_vec3(bj, "color", context + ": boxes");
    spec.boxes.push_back(b);
  }

  const nlohmann::json intr = detail::json_get<nlohmann::json>(j, "intrinsics", context);
  static constexpr const char* kIntrKeys[] = {"width", "height", "fx", "fy", "cx", "cy"};
  detail::reject_unknown_keys(intr, kIntrKeys, context + ": intrinsics");
  spec.intrinsics.width = detail::json_get<int>(intr, "width", context);
  spec.intrinsics.height = detail::json_get<int>(intr, "height", context);
  spec.intrinsics.fx = detail::json_get<double>(intr, "fx", context);
  spec.intrinsics.fy = detail::json_get<double>(intr, "fy", context);
  spec.intrinsics.cx = detail::json_get<double>(intr, "cx", context);
  spec.intrinsics.cy = detail::json_get<double>(intr, "cy", context);

  const nlohmann::json orbit = detail::json_get<nlohmann::json>(j, "orbit", context);
  static constexpr const char* kOrbitKeys[] = {"target",      "radius",      "height",
                                               "frame_count", "start_angle", "revolutions",
                                               "timestamp_step"};
  detail::reject_unknown_keys(orbit, kOrbitKeys, context + ": orbit");
  spec.orbit.target = detail::json_vec3(orbit, "target", context + ": orbit");
  spec.orbit.radius = detail::json_get<double>(orbit, "radius", context + ": orbit");
  spec.orbit.height = detail::json_get<double>(orbit, "height", context + ": orbit");
  spec.orbit.frame_count = detail::json_get<int>(orbit, "frame_count", context + ": orbit");
  spec.orbit.start_angle = detail::json_get_or<double>(orbit, "start_angle", spec.orbit.start_angle,
                                                       context + ": orbit");
  spec.orbit.revolutions = detail::json_get_or<double>(orbit, "revolutions", spec.orbit.revolutions,
                                                       context + ": orbit");
  spec.orbit.timestamp_step = detail::json_get_or<double>(orbit, "timestamp_step",
                                                          spec.orbit.timestamp_step, context + ": orbit");

  spec.voxel_size = detail::json_get_or<double>(j, "voxel_size", spec.voxel_size, context);
  spec.max_range = detail::json_get_or<double>(j, "max_range", spec.max_range, context);
  spec.depth_noise = detail::json_get_or<double>(j, "depth_noise", spec.depth_noise, context);
  spec.mask_tolerance_voxels =
      detail::json_get_or<double>(j, "mask_tolerance_voxels", spec.mask_tolerance_voxels, context);
  spec.mask_frame_stride =
      detail::json_get_or<int>(j, "mask_frame_stride", spec.mask_frame_stride, context);
  spec.mask_dilate = detail::json_get_or<bool>(j, "mask_dilate", spec.mask_dilate, context);
  spec.seed = detail::json_get_or<std::uint64_t>(j, "seed", spec.seed, context);
  spec.validate();
  return spec;
}

inline SceneSpec load_scene_spec(const std::string& path) {
  return scene_spec_from_json(detail::parse_json_file(path), path);
}

inline void save_scene_spec(const std::string& path, const SceneSpec& spec) {
  detail::write_json_file(path, scene_spec_to_json(spec));
}

// ---- optimizer config ----------------------------------------------------------

inline OptimizerConfig optimizer_config_from_json(const nlohmann::json& j,
                                                  const std::string& context) {
  static constexpr const char* kKeys[] = {"beta",       "lr_scale", "lr_rotation", "lr_opacity",
                                          "lr_color",   "max_iters", "tol"};
  detail::reject_unknown_keys(j, kKeys, context);
  OptimizerConfig cfg;
  cfg.beta = detail::json_get_or<double>(j, "beta", cfg.beta, context);
  cfg.lr_scale = detail::json_get_or<double>(j, "lr_scale", cfg.lr_scale, context);
  cfg.lr_rotation = detail::json_get_or<double>(j, "lr_rotation", cfg.lr_rotation, context);
  cfg.lr_opacity = detail::json_get_or<double>(j, "lr_opacity", cfg.lr_opacity, context);
  cfg.lr_color = detail::json_get_or<double>(j, "lr_color", cfg.lr_color, context);
  cfg.max_iters = detail::json_get_or<int>(j, "max_iters", cfg.max_iters, context);
  cfg.tol = detail::json_get_or<double>(j, "tol", cfg.tol, context);
  cfg.validate();
  return cfg;
}

inline OptimizerConfig load_optimizer_config(const std::string& path) {
  return optimizer_config_from_json(detail::parse_json_file(path), path);
}

// ---- pipeline config -------------------------------------------------------------

/// Aggregated knobs shared by the CLI subcommands; one JSON file, overridable
/// per flag. Unknown keys are rejected.
struct PipelineConfig {
  double gamma = kDefaultGamma;
  double kappa = kDefaultKappa;
  double o_init = kDefaultInitOpacity;
  double beta = 1.0;
  double tau_occ = kDefaultTauOcc;
  double voxel_size = 0.08;
  int pixel_stride = 1;
  int frame_stride = 1;
  double max_range = kDefaultMaxRange;
  double association_radius = kDefaultAssociationRadius;
  int feature_dim = 0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(gamma > 0.0)) throw InvalidInputError("PipelineConfig: gamma must be positive");
    if (!(kappa > 0.0)) throw InvalidInputError("PipelineConfig: kappa must be positive");
    if (!(o_init >= 0.0) || !(o_init <= 1.0)) throw InvalidInputError("PipelineConfig: o_init must be in [0, 1]");
    if (!(beta >= 0.0)) throw InvalidInputError("PipelineConfig: beta must be >= 0");
    if (!(tau_occ >= 0.0) || !(tau_occ <= 1.0)) throw InvalidInputError("PipelineConfig: tau_occ must be in [0, 1]");
    if (!(voxel_size > 0.0)) throw InvalidInputError("PipelineConfig: voxel_size must be positive");
    if (pixel_stride < 1) throw InvalidInputError("PipelineConfig: pixel_stride must be >= 1");
    if (frame_stride < 1) throw InvalidInputError("PipelineConfig: frame_stride must be >= 1");
    if (!(max_range > 0.0)) throw InvalidInputError("PipelineConfig: max_range must be positive");
    if (!(association_radius > 0.0)) throw InvalidInputError("PipelineConfig: association_radius must be positive");
    if (feature_dim < 0) throw InvalidInputError("PipelineConfig: feature_dim must be >= 0");
  }
};

inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const std::string& context) {
  static constexpr const char* kKeys[] = {"gamma",       "kappa",        "o_init",
                                          "beta",        "tau_occ",      "voxel_size",
                                          "pixel_stride", "frame_stride", "max_range",
                                          "association_radius", "feature_dim", "seed"};
  detail::reject_unknown_keys(j, kKeys, context);
  PipelineConfig cfg;
  cfg.gamma = detail::json_get_or<double>(j, "gamma", cfg.gamma, context);
  cfg.kappa = detail::json_get_or<double>(j, "kappa", cfg.kappa, context);
  cfg.o_init = detail::json_get_or<double>(j, "o_init", cfg.o_init, context);
  cfg.beta = detail::json_get_or<double>(j, "beta", cfg.beta, context);
  cfg.tau_occ = detail::json_get_or<double>(j, "tau_occ", cfg.tau_occ, context);
  cfg.voxel_size = detail::json_get_or<double>(j, "voxel_size", cfg.voxel_size, context);
  cfg.pixel_stride = detail::json_get_or<int>(j, "pixel_stride", cfg.pixel_stride, context);
  cfg.frame_stride = detail::json_get_or<int>(j, "frame_stride", cfg.frame_stride, context);
  cfg.max_range = detail::json_get_or<double>(j, "max_range", cfg.max_range, context);
  cfg.association_radius =
      detail::json_get_or<double>(j, "association_radius", cfg.association_radius, context);
  cfg.feature_dim = detail::json_get_or<int>(j, "feature_dim", cfg.feature_dim, context);
  cfg.seed = detail::json_get_or<std::uint64_t>(j, "seed", cfg.seed, context);
  cfg.validate();
  return cfg;
}

inline PipelineConfig load_pipeline_config(const std::string& path) {
  return pipeline_config_from_json(detail::parse_json_file(path), path);
}

// ---- eval reports -----------------------------------------------------------------

inline nlohmann::json eval_report_to_json(const EvalReport& report) {
  nlohmann::json j;
  j["iou"] = report.iou;
  j["miou"] = report.miou;
  j["per_class_iou"] = nlohmann::json::object();
  for (const auto& [cls, iou] : report.per_class_iou) {
    j["per_class_iou"][std::to_string(cls)] = iou;
  }
  j["classes_evaluated"] = report.classes_evaluated;
  j["classes_skipped"] = report.classes_skipped;
  j["counts"] = nlohmann::json::object();
  for (const auto& [cls, c] : report.counts) {
    j["counts"][std::to_string(cls)] = {{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}};
  }
  const Quat& q = report.alignment.rotation;
  j["alignment"] = {{"scale", report.alignment.scale},
                    {"rotation_wxyz", {q.w(), q.x(), q.y(), q.z()}},
                    {"translation", detail::vec3_json(report.alignment.translation)}};
  return j;
}

inline EvalReport eval_report_from_json(const nlohmann::json& j, const std::string& context) {
  static constexpr const char* kKeys[] = {"iou",  "miou",   "per_class_iou", "classes_evaluated",
                                          "classes_skipped", "counts", "alignment"};
  detail::reject_unknown_keys(j, kKeys, context);
  EvalReport report;
  report.iou = detail::json_get<double>(j, "iou", context);
  report.miou = detail::json_get<double>(j, "miou", context);
  const nlohmann::json per_class = detail::json_get<nlohmann::json>(j, "per_class_iou", context);
  for (const auto& item : per_class.items()) {
    report.per_class_iou[std::stoi(item.key())] = item.value().get<double>();
  }
  report.classes_evaluated = detail::json_get<std::vector<int>>(j, "classes_evaluated", context);
  report.classes_skipped = detail::json_get<std::vector<int>>(j, "classes_skipped", context);
  const nlohmann::json counts = detail::json_get<nlohmann::json>(j, "counts", context);
  for (const auto& item : counts.items()) {
    ClassCounts c;
    c.tp = item.value().at("tp").get<std::size_t>();
    c.fp = item.value().at("fp").get<std::size_t>();
    c.fn = item.value().at("fn").get<std::size_t>();
    report.counts[std::stoi(item.key())] = c;
  }
  const nlohmann::json a = detail::json_get<nlohmann::json>(j, "alignment", context);
  report.alignment.scale = detail::json_get<double>(a, "scale", context);
  const auto rq = detail::json_get<std::vector<double>>(a, "rotation_wxyz", context);
  if (rq.size() != 4) throw InvalidInputError(context + ": rotation_wxyz must have 4 entries");
  report.alignment.rotation = Quat(rq[0], rq[1], rq[2], rq[3]);
  report.alignment.translation = detail::json_vec3(a, "translation", context);
  return report;
}

inline void save_eval_report(const std::string& path, const EvalReport& report) {
  detail::write_json_file(path, eval_report_to_json(report));
}

inline EvalReport load_eval_report(const std::string& path) {
  return eval_report_from_json(detail::parse_json_file(path), path);
}

/// Human-readable metric table.
inline std::string format_eval_report(const EvalReport& report) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof(line), "binary IoU  %.4f\nmIoU        %.4f\n", report.iou, report.miou);
  out << line;
  out << "class   IoU      TP       FP       FN\n";
  for (const auto& [cls, c] : report.counts) {
    const auto it = report.per_class_iou.find(cls);
    if (it != report.per_class_iou.end()) {
      std::snprintf(line, sizeof(line), "%-7d %.4f %8zu %8zu %8zu\n", cls, it->second, c.tp, c.fp,
                    c.fn);
    } else {
      std::snprintf(line, sizeof(line), "%-7d n/a    %8zu %8zu %8zu\n", cls, c.tp, c.fp, c.fn);
    }
    out << line;
  }
  const Quat& q = report.alignment.rotation;
  std::snprintf(line, sizeof(line),
                "alignment   scale %.6f  rot wxyz (%.6f, %.6f, %.6f, %.6f)  t (%.6f, %.6f, %.6f)\n",
                report.alignment.scale, q.w(), q.x(), q.y(), q.z(), report.alignment.translation.x(),
                report.alignment.translation.y(), report.alignment.translation.z());
  out << line;
  return out.str();
}

// ---- synthetic dataset export --------------------------------------------------

struct SyntheticDatasetPaths {
  std::string manifest;
  std::string ground_truth;
  std::string texts;
  std::string trajectory;
};

/// Writes a generated scene as an on-disk dataset: per-frame depth/label/color
/// PNGs and embedding rasters, a TUM trajectory, the category embeddings, the
/// ground-truth grid, and a manifest tying them together.
inline SyntheticDatasetPaths write_synthetic_dataset(const std::string& dir,
                                                     const SyntheticScene& scene) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "frames");

  DatasetManifest manifest;
  manifest.intrinsics = scene.frames.frames.empty() ? CameraIntrinsics{} : scene.frames.frames[0].intrinsics;
  manifest.trajectory = "trajectory.txt";
  manifest.depth_factor = scene.frames.depth_factor;
  manifest.max_range = scene.frames.max_range;

  char name[64];
  for (std::size_t i = 0; i < scene.frames.frames.size(); ++i) {
    const LabeledFrame& frame = scene.frames.frames[i];
    FrameFiles files;
    std::snprintf(name, sizeof(name), "frames/depth_%04zu.png", i);
    files.depth = name;
    write_depth_png((fs::path(dir) / name).string(), frame.depth, manifest.depth_factor);
    std::snprintf(name, sizeof(name), "frames/labels_%04zu.png", i);
    files.labels = name;
    write_label_png((fs::path(dir) / name).string(), frame.labels, frame.depth.width,
                    frame.depth.height);
    std::snprintf(name, sizeof(name), "frames/color_%04zu.png", i);
    files.color = name;
    write_color_png((fs::path(dir) / name).string(), scene.colors[i], frame.depth.width,
                    frame.depth.height);
    std::snprintf(name, sizeof(name), "frames/embeddings_%04zu.bin", i);
    files.embeddings = name;
    write_embedding_raster((fs::path(dir) / name).string(), scene.embeddings[i]);
    manifest.frames.push_back(std::move(files));
  }

  SyntheticDatasetPaths paths;
  paths.trajectory = (fs::path(dir) / "trajectory.txt").string();
  save_trajectory(paths.trajectory, scene.trajectory);
  paths.ground_truth = (fs::path(dir) / "ground_truth.occgrid").string();
  write_occupancy_field(paths.ground_truth, scene.ground_truth);
  paths.texts = (fs::path(dir) / "texts.json").string();
  write_text_embeddings(paths.texts, scene.texts);
  paths.manifest = (fs::path(dir) / "manifest.json").string();
  save_manifest(paths.manifest, manifest);
  return paths;
}

}  // namespace levox
