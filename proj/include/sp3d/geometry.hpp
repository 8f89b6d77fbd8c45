#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "sp3d/vec3.hpp"

namespace sp3d {

using Face = std::array<std::uint32_t, 3>;

/// Triangle mesh in object units. Colors are per-vertex RGB in [0,1];
/// face normals are always recomputed from the winding.
struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;
  std::vector<Vec3> vertex_colors;
  std::vector<Vec3> face_normals;

  std::size_t num_faces() const { return faces.size(); }
  double face_area(std::size_t f) const;
  Vec3 face_centroid(std::size_t f) const;
  Vec3 face_color(std::size_t f) const;

  // Fills face_normals and default colors; throws on invalid indices or no faces.
  void finalize();
};

struct SampledCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;
  std::vector<Vec3> colors;
  std::vector<std::uint32_t> face_of;

  std::size_t size() const { return points.size(); }
};

/// p' = (p + translation) * uniform_scale
struct NormalizationTransform {
  Vec3 translation;
  double uniform_scale = 1.0;

  Vec3 apply(const Vec3& p) const { return (p + translation) * uniform_scale; }
  Vec3 invert(const Vec3& p) const { return p / uniform_scale - translation; }
};

TriangleMesh load_mesh(const std::filesystem::path& path);
void save_ply(const TriangleMesh& mesh, const std::filesystem::path& path);
void save_obj(const TriangleMesh& mesh, const std::filesystem::path& path);

std::pair<TriangleMesh, NormalizationTransform> normalize_unit(const TriangleMesh& mesh);

// Area-weighted uniform surface sampling. Deterministic for a fixed seed.
SampledCloud sample_surface(const TriangleMesh& mesh, std::size_t n, std::uint64_t seed);

/// Exact k-nearest-neighbour index over a fixed point set. Results are ordered
/// by (distance, index), so equidistant points come back lowest index first.
class KdTree {
 public:
  explicit KdTree(std::vector<Vec3> points);

  std::vector<std::uint32_t> knn(const Vec3& query, std::size_t k) const;
  std::size_t size() const { return points_.size(); }
  const Vec3& point(std::size_t i) const { return points_[i]; }

 private:
  struct Node {
    std::uint32_t begin, end;  // range into order_
    std::int32_t left = -1, right = -1;
    std::uint8_t axis = 0;
    double split = 0.0;
  };
  std::int32_t build(std::uint32_t begin, std::uint32_t end);

  std::vector<Vec3> points_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
};

std::vector<std::uint32_t> knn(const SampledCloud& cloud, const Vec3& query, std::size_t k);

// Neighbour lists for every point of the cloud (the point itself included).
std::vector<std::vector<std::uint32_t>> knn_table(std::span<const Vec3> points, std::size_t k);

struct RayHit {
  double t;
  std::uint32_t face;
  Vec3 point;
};

// Closest intersection along origin + t*direction, t > 0.
std::optional<RayHit> intersect_ray(const TriangleMesh& mesh, const Vec3& origin,
                                    const Vec3& direction);

}  // namespace sp3d
