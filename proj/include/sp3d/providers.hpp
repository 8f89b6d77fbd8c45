#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "sp3d/geometry.hpp"
#include "sp3d/render.hpp"

namespace sp3d {

/// H x W x C float features, row-major with channels innermost.
struct FeatureMap {
  int width = 0, height = 0, channels = 0;
  std::vector<float> data;

  FeatureMap() = default;
  FeatureMap(int w, int h, int c)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, 0.0f) {}

  float* pixel(int x, int y) { return data.data() + (static_cast<std::size_t>(y) * width + x) * channels; }
  const float* pixel(int x, int y) const {
    return data.data() + (static_cast<std::size_t>(y) * width + x) * channels;
  }
};

/// H x W mask ids (0 = no mask) with exact per-id pixel counts.
struct MaskMap {
  int width = 0, height = 0;
  std::vector<std::uint16_t> ids;
  std::map<std::uint16_t, std::uint32_t> counts;

  MaskMap() = default;
  MaskMap(int w, int h) : width(w), height(h), ids(static_cast<std::size_t>(w) * h, 0) {}

  std::uint16_t at(int x, int y) const { return ids[static_cast<std::size_t>(y) * width + x]; }
  void recount();
};

inline constexpr std::uint32_t kFeatureFormatVersion = 1;
inline constexpr std::uint32_t kMaskFormatVersion = 1;

void write_feature_map(const std::filesystem::path& path, const FeatureMap& map);
FeatureMap read_feature_map(const std::filesystem::path& path);

// Also writes `<path>.json` with the per-id pixel counts.
void write_mask_map(const std::filesystem::path& path, const MaskMap& map);
MaskMap read_mask_map(const std::filesystem::path& path);
std::filesystem::path mask_sidecar_path(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Synthetic toy objects

enum class PrimitiveKind { Sphere, Box, Cylinder };

/// size: sphere (radius, -, -); box half extents; cylinder (radius, -, half height), axis z.
struct Primitive {
  PrimitiveKind kind = PrimitiveKind::Sphere;
  Vec3 center;
  Vec3 size;
  Vec3 color{0.5, 0.5, 0.5};
  std::string name;  // semantic name; also keys the oracle feature code
  int group = 0;     // index into ToyObjectSpec::group_names

  double signed_distance(const Vec3& p) const;
};

struct ToyObjectSpec {
  std::string name;
  std::vector<Primitive> parts;
  std::vector<std::string> group_names;
  double overlap_tolerance = 0.02;

  void validate() const;
};

// Built-in fixtures: "snowman", "table", "lamp", "mushroom".
ToyObjectSpec toy_spec(const std::string& name);
std::vector<std::string> toy_spec_names();

struct ToyObject {
  TriangleMesh mesh;
  std::vector<int> fine_of_face;
  std::vector<int> coarse_of_face;
  std::vector<std::string> fine_names;    // per fine label
  std::vector<std::string> coarse_names;  // per coarse label
};

// The seed rotates the whole object about z and jitters part colors.
ToyObject make_toy_object(const ToyObjectSpec& spec, std::uint64_t seed);

TriangleMesh make_sphere_mesh(const Vec3& center, double radius, int slices, int stacks);
TriangleMesh make_box_mesh(const Vec3& center, const Vec3& half_extents);
TriangleMesh make_cylinder_mesh(const Vec3& center, double radius, double half_height, int slices);

enum class Granularity { Fine, Coarse };

// Fixed unit-length code for a semantic part name.
std::vector<float> part_code(const std::string& name, int channels);

struct SyntheticView {
  FeatureMap features;
  MaskMap masks;
};

struct SynthesisOptions {
  int channels = 32;
  double feature_noise = 0.0;
  std::uint64_t seed = 0;
};

// Oracle stand-in for a 2D feature extractor and mask generator.
std::vector<SyntheticView> synthesize_views(const ToyObject& object, const ViewSet& views, Granularity level,
                                            const SynthesisOptions& options);

}  // namespace sp3d
