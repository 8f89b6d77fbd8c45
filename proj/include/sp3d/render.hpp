#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "sp3d/geometry.hpp"

namespace sp3d {

/// Pinhole camera. Pixel (i, j) covers [i, i+1) x [j, j+1); row 0 is the top
/// of the image, so the principal point sits at (width/2, height/2).
struct Camera {
  Vec3 position;
  Vec3 look_at;
  Vec3 up{0.0, 0.0, 1.0};
  double vertical_fov = 50.0 * 3.14159265358979323846 / 180.0;
  int width = 256;
  int height = 256;
  double near = 0.1;
  double far = 10.0;

  void validate() const;
  double focal() const;

  // Orthonormal camera frame: right, true up, forward (viewing direction).
  struct Frame {
    Vec3 right, up, forward;
  };
  Frame frame() const;

  // True when the camera sits on a coordinate axis looking at the origin.
  bool is_axis_aligned() const;
};

struct Projection {
  double u, v, depth;
};

std::optional<Projection> project(const Vec3& point, const Camera& camera);
Vec3 unproject(double u, double v, double depth, const Camera& camera);

// Fixed cameras: +x, +y, +z, -x, -y, -z at `distance`; random ones uniform on the sphere.
std::vector<Camera> make_cameras(int n_fixed, int n_random, std::uint64_t seed, int resolution,
                                 double distance = 2.0);

/// Row-major H x W buffers.
struct DepthMap {
  int width = 0, height = 0;
  std::vector<float> depth;           // camera-space z, +inf for background
  std::vector<std::int32_t> face_id;  // -1 for background

  float at(int x, int y) const { return depth[static_cast<std::size_t>(y) * width + x]; }
};

DepthMap rasterize_depth(const TriangleMesh& mesh, const Camera& camera);

struct PixelRef {
  float u = 0.0f, v = 0.0f;
  bool in_frame = false;
  bool visible = false;
};

struct ViewRender {
  int width = 0, height = 0;
  DepthMap depth;
  std::vector<std::int32_t> point_of_pixel;  // -1 where no visible point
  std::vector<PixelRef> pixel_of_point;

  std::int32_t point_at(int x, int y) const { return point_of_pixel[static_cast<std::size_t>(y) * width + x]; }
  std::size_t num_visible() const;
};

inline constexpr double kDefaultDepthTolerance = 0.01;

ViewRender compute_visibility(const SampledCloud& cloud, const Camera& camera, const DepthMap& depth,
                              double tau = kDefaultDepthTolerance);

struct ViewSet {
  std::vector<Camera> cameras;
  std::vector<ViewRender> renders;

  std::size_t size() const { return cameras.size(); }
};

ViewSet render_views(const TriangleMesh& mesh, const SampledCloud& cloud, const std::vector<Camera>& cameras,
                     double tau = kDefaultDepthTolerance);

}  // namespace sp3d
