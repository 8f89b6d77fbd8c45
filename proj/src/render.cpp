#include "sp3d/render.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "sp3d/error.hpp"

namespace sp3d {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

void Camera::validate() const {
  if (!(vertical_fov > 0.0 && vertical_fov < kPi)) throw InvalidArgument("camera fov must lie in (0, pi)");
  if (width < 1 || height < 1) throw InvalidArgument("camera resolution must be >= 1");
  if (!(near < far) || !(near > 0.0)) throw InvalidArgument("camera requires 0 < near < far");
  if (norm2(look_at - position) == 0.0) throw InvalidArgument("camera position equals look_at");
}

double Camera::focal() const { return 0.5 * height / std::tan(0.5 * vertical_fov); }

Camera::Frame Camera::frame() const {
  Vec3 forward = normalized(look_at - position);
  Vec3 right = cross(forward, up);
  if (norm2(right) < 1e-18) {
    // up parallel to the view direction: fall back to whichever axis is least aligned.
    Vec3 alt = std::abs(forward.z) < 0.9 ? Vec3{0, 0, 1} : Vec3{0, 1, 0};
    right = cross(forward, alt);
  }
  right = normalized(right);
  return {right, cross(right, forward), forward};
}

bool Camera::is_axis_aligned() const {
  if (norm2(look_at) > 1e-18) return false;
  int nonzero = 0;
  for (std::size_t i = 0; i < 3; ++i)
    if (std::abs(position[i]) > 1e-12) ++nonzero;
  return nonzero == 1;
}

std::optional<Projection> project(const Vec3& point, const Camera& camera) {
  auto fr = camera.frame();
  Vec3 d = point - camera.position;
  double z = dot(d, fr.forward);
  if (z < camera.near || z > camera.far) return std::nullopt;
  double f = camera.focal();
  return Projection{0.5 * camera.width + f * dot(d, fr.right) / z,
                    0.5 * camera.height - f * dot(d, fr.up) / z, z};
}

Vec3 unproject(double u, double v, double depth, const Camera& camera) {
  auto fr = camera.frame();
  double f = camera.focal();
  double xc = (u - 0.5 * camera.width) * depth / f;
  double yc = (0.5 * camera.height - v) * depth / f;
  return camera.position + xc * fr.right + yc * fr.up + depth * fr.forward;
}

std::vector<Camera> make_cameras(int n_fixed, int n_random, std::uint64_t seed, int resolution,
                                 double distance) {
  if (n_fixed != 0 && n_fixed != 6) throw InvalidArgument("make_cameras: n_fixed must be 0 or 6");
  if (n_random < 0) throw InvalidArgument("make_cameras: n_random must be >= 0");
  std::vector<Camera> cams;
  auto add = [&](Vec3 dir) {
    Camera c;
    c.position = dir * distance;
    c.look_at = {};
    c.up = std::abs(normalized(dir).z) > 0.99 ? Vec3{0, 1, 0} : Vec3{0, 0, 1};
    c.width = c.height = resolution;
    c.validate();
    cams.push_back(c);
  };
  if (n_fixed == 6) {
    for (Vec3 d : {Vec3{1, 0, 0}, Vec3{0, 1, 0}, Vec3{0, 0, 1}, Vec3{-1, 0, 0}, Vec3{0, -1, 0}, Vec3{0, 0, -1}})
      add(d);
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int i = 0; i < n_random; ++i) {
    Vec3 d;
    do {
      d = {gauss(rng), gauss(rng), gauss(rng)};
    } while (norm2(d) < 1e-12);
    add(normalized(d));
  }
  return cams;
}

DepthMap rasterize_depth(const TriangleMesh& mesh, const Camera& camera) {
  camera.validate();
  const int W = camera.width, H = camera.height;
  DepthMap out;
  out.width = W;
  out.height = H;
  out.depth.assign(static_cast<std::size_t>(W) * H, std::numeric_limits<float>::infinity());
  out.face_id.assign(out.depth.size(), -1);
  std::vector<double> zbuf(out.depth.size(), std::numeric_limits<double>::infinity());

  auto fr = camera.frame();
  const double f = camera.focal();
  std::vector<Vec3> cam(mesh.vertices.size());
  for (std::size_t i = 0; i < cam.size(); ++i) {
    Vec3 d = mesh.vertices[i] - camera.position;
    cam[i] = {dot(d, fr.right), dot(d, fr.up), dot(d, fr.forward)};
  }

  struct ScreenVert {
    double x, y, inv_z;
  };
  auto to_screen = [&](const Vec3& c) {
    return ScreenVert{0.5 * W + f * c.x / c.z, 0.5 * H - f * c.y / c.z, 1.0 / c.z};
  };

  auto draw = [&](const ScreenVert& a, const ScreenVert& b, const ScreenVert& c, std::int32_t face) {
    double area = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    if (std::abs(area) < 1e-18) return;
    int x0 = std::max(0, static_cast<int>(std::floor(std::min({a.x, b.x, c.x}))));
    int x1 = std::min(W - 1, static_cast<int>(std::ceil(std::max({a.x, b.x, c.x}))));
    int y0 = std::max(0, static_cast<int>(std::floor(std::min({a.y, b.y, c.y}))));
    int y1 = std::min(H - 1, static_cast<int>(std::ceil(std::max({a.y, b.y, c.y}))));
    double inv_area = 1.0 / area;
    for (int y = y0; y <= y1; ++y) {
      double py = y + 0.5;
      for (int x = x0; x <= x1; ++x) {
        double px = x + 0.5;
        double w0 = ((b.x - px) * (c.y - py) - (b.y - py) * (c.x - px)) * inv_area;
        double w1 = ((c.x - px) * (a.y - py) - (c.y - py) * (a.x - px)) * inv_area;
        double w2 = 1.0 - w0 - w1;
        if (w0 < 0.0 || w1 < 0.0 || w2 < 0.0) continue;
        // 1/z is affine in screen space, so this is the perspective-correct depth.
        double z = 1.0 / (w0 * a.inv_z + w1 * b.inv_z + w2 * c.inv_z);
        if (z < camera.near || z > camera.far) continue;
        std::size_t idx = static_cast<std::size_t>(y) * W + x;
        if (z < zbuf[idx]) {
          zbuf[idx] = z;
          out.face_id[idx] = face;
        }
      }
    }
  };

  std::vector<Vec3> poly;
  poly.reserve(4);
  for (std::size_t fi = 0; fi < mesh.faces.size(); ++fi) {
    const Face& t = mesh.faces[fi];
    Vec3 v[3] = {cam[t[0]], cam[t[1]], cam[t[2]]};
    if (v[0].z < camera.near && v[1].z < camera.near && v[2].z < camera.near) continue;
    poly.clear();
    // Clip against the near plane (Sutherland-Hodgman on a single plane).
    for (int i = 0; i < 3; ++i) {
      const Vec3& p = v[i];
      const Vec3& q = v[(i + 1) % 3];
      bool pin = p.z >= camera.near, qin = q.z >= camera.near;
      if (pin) poly.push_back(p);
      if (pin != qin) {
        double s = (camera.near - p.z) / (q.z - p.z);
        poly.push_back(p + s * (q - p));
      }
    }
    if (poly.size() < 3) continue;
    ScreenVert s0 = to_screen(poly[0]);
    for (std::size_t i = 1; i + 1 < poly.size(); ++i)
      draw(s0, to_screen(poly[i]), to_screen(poly[i + 1]), static_cast<std::int32_t>(fi));
  }
  for (std::size_t i = 0; i < zbuf.size(); ++i) out.depth[i] = static_cast<float>(zbuf[i]);
  return out;
}

std::size_t ViewRender::num_visible() const {
  return static_cast<std::size_t>(
      std::count_if(pixel_of_point.begin(), pixel_of_point.end(), [](const PixelRef& r) { return r.visible; }));
}

ViewRender compute_visibility(const SampledCloud& cloud, const Camera& camera, const DepthMap& depth, double tau) {
  if (depth.width != camera.width || depth.height != camera.height)
    throw InvalidArgument("compute_visibility: depth map resolution does not match camera");
  ViewRender r;
  r.width = depth.width;
  r.height = depth.height;
  r.depth = depth;
  r.point_of_pixel.assign(depth.depth.size(), -1);
  r.pixel_of_point.resize(cloud.size());
  std::vector<double> best(depth.depth.size(), std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    auto proj = project(cloud.points[i], camera);
    if (!proj) continue;
    PixelRef& ref = r.pixel_of_point[i];
    ref.u = static_cast<float>(proj->u);
    ref.v = static_cast<float>(proj->v);
    int x = static_cast<int>(std::floor(proj->u));
    int y = static_cast<int>(std::floor(proj->v));
    if (x < 0 || y < 0 || x >= r.width || y >= r.height) continue;
    ref.in_frame = true;
    std::size_t idx = static_cast<std::size_t>(y) * r.width + x;
    double surface = depth.depth[idx];
    if (!std::isfinite(surface) || std::abs(proj->depth - surface) > tau) continue;
    ref.visible = true;
    if (proj->depth < best[idx]) {
      best[idx] = proj->depth;
      r.point_of_pixel[idx] = static_cast<std::int32_t>(i);
    }
  }
  return r;
}

ViewSet render_views(const TriangleMesh& mesh, const SampledCloud& cloud, const std::vector<Camera>& cameras,
                     double tau) {
  ViewSet set;
  set.cameras = cameras;
  set.renders.reserve(cameras.size());
  for (const Camera& c : cameras) set.renders.push_back(compute_visibility(cloud, c, rasterize_depth(mesh, c), tau));
  return set;
}

}  // namespace sp3d
