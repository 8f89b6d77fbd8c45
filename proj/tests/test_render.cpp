#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "sp3d/error.hpp"
#include "sp3d/providers.hpp"
#include "sp3d/render.hpp"
#include "support.hpp"

using namespace sp3d;

namespace {

Camera axis_camera(Vec3 pos, int res = 64) {
  Camera c;
  c.position = pos;
  c.look_at = {};
  c.up = std::abs(normalized(pos).z) > 0.99 ? Vec3{0, 1, 0} : Vec3{0, 0, 1};
  c.width = c.height = res;
  return c;
}

TriangleMesh single_triangle() {
  TriangleMesh m;
  m.vertices = {{0, -0.4, -0.4}, {0, 0.4, -0.4}, {0, 0, 0.4}};
  m.faces = {{0, 1, 2}};
  m.finalize();
  return m;
}

}  // namespace

TEST_SUITE("render") {

TEST_CASE("make_cameras") {
  auto cams = make_cameras(6, 30, 4, 32);
  REQUIRE(cams.size() == 36);
  CHECK(cams[0].position == Vec3{2, 0, 0});
  CHECK(cams[0].look_at == Vec3{0, 0, 0});
  CHECK(cams[5].position == Vec3{0, 0, -2});
  for (std::size_t i = 0; i < 6; ++i) CHECK(cams[i].is_axis_aligned());
  for (std::size_t i = 6; i < 36; ++i) CHECK(norm(cams[i].position) == doctest::Approx(2.0));
  auto again = make_cameras(6, 30, 4, 32);
  for (std::size_t i = 0; i < 36; ++i) CHECK(again[i].position == cams[i].position);
  CHECK(make_cameras(6, 30, 5, 32)[10].position != cams[10].position);
  CHECK_THROWS_AS(make_cameras(3, 0, 0, 32), InvalidArgument);
}

TEST_CASE("random cameras are spread over the sphere") {
  auto cams = make_cameras(0, 4000, 8, 8);
  Vec3 mean{};
  int upper = 0;
  for (const auto& c : cams) {
    mean += c.position / 2.0;
    upper += c.position.z > 0;
  }
  mean = mean / static_cast<double>(cams.size());
  CHECK(norm(mean) < 0.05);
  CHECK(std::abs(upper / 4000.0 - 0.5) < 0.03);
}

TEST_CASE("camera validation") {
  Camera c = axis_camera({2, 0, 0});
  c.vertical_fov = 0.0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = axis_camera({2, 0, 0});
  c.width = 0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = axis_camera({2, 0, 0});
  c.near = 5, c.far = 1;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
}

TEST_CASE("project") {
  Camera cam = axis_camera({2, 0, 0}, 100);
  SUBCASE("optical axis lands on the principal point") {
    auto p = project({0.3, 0, 0}, cam);
    REQUIRE(p);
    CHECK(p->u == doctest::Approx(50.0));
    CHECK(p->v == doctest::Approx(50.0));
    CHECK(p->depth == doctest::Approx(1.7));
  }
  SUBCASE("up is towards row 0") {
    auto p = project({0, 0, 0.3}, cam);
    REQUIRE(p);
    CHECK(p->v < 50.0);
  }
  SUBCASE("behind the camera is out of frustum") { CHECK_FALSE(project({3, 0, 0}, cam)); }
  SUBCASE("round trip through unproject") {
    std::mt19937_64 rng(2);
    std::vector<Camera> cams = make_cameras(6, 4, 1, 128);
    int tested = 0;
    double worst = 0.0;
    while (tested < 1000) {
      const auto& c = cams[static_cast<std::size_t>(tested) % cams.size()];
      Vec3 p = testing::random_vec(rng, -0.7, 0.7);
      auto pr = project(p, c);
      if (!pr) continue;
      worst = std::max(worst, norm(unproject(pr->u, pr->v, pr->depth, c) - p));
      ++tested;
    }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("rasterize_depth") {
  SUBCASE("sphere centre depth") {
    auto sphere = make_sphere_mesh({0, 0, 0}, 0.5, 96, 48);
    Camera cam = axis_camera({2, 0, 0}, 128);
    auto d = rasterize_depth(sphere, cam);
    CHECK(d.at(64, 64) == doctest::Approx(1.5).epsilon(1e-2 / 1.5));
    CHECK(std::isinf(d.at(0, 0)));
    CHECK(d.face_id[0] == -1);
  }
  SUBCASE("empty frustum") {
    Camera cam = axis_camera({2, 0, 0}, 32);
    auto mesh = testing::cube_mesh(2.5, 3.0);  // behind the camera
    auto d = rasterize_depth(mesh, cam);
    for (float z : d.depth) CHECK(std::isinf(z));
  }
  SUBCASE("adding geometry never increases depth") {
    Camera cam = axis_camera({2, 0.3, 0.4}, 48);
    auto a = make_sphere_mesh({0, 0, 0}, 0.3, 24, 12);
    auto both = a;
    auto b = testing::cube_mesh(-0.1, 0.45);
    auto base = static_cast<std::uint32_t>(both.vertices.size());
    for (const auto& v : b.vertices) both.vertices.push_back(v);
    for (auto f : b.faces) both.faces.push_back({f[0] + base, f[1] + base, f[2] + base});
    both.finalize();
    auto da = rasterize_depth(a, cam), db = rasterize_depth(both, cam);
    for (std::size_t i = 0; i < da.depth.size(); ++i) CHECK(db.depth[i] <= da.depth[i]);
  }
  SUBCASE("deterministic") {
    auto mesh = make_toy_object(toy_spec("table"), 3).mesh;
    Camera cam = make_cameras(6, 3, 2, 64)[7];
    auto a = rasterize_depth(mesh, cam), b = rasterize_depth(mesh, cam);
    CHECK(a.depth == b.depth);
    CHECK(a.face_id == b.face_id);
  }
}

TEST_CASE("compute_visibility") {
  SUBCASE("front cap visible, back cap occluded") {
    auto sphere = make_sphere_mesh({0, 0, 0}, 0.5, 96, 48);
    auto cloud = sample_surface(sphere, 4000, 3);
    Camera cam = axis_camera({2, 0, 0}, 256);
    auto r = compute_visibility(cloud, cam, rasterize_depth(sphere, cam));
    int front = 0, front_vis = 0, back = 0, back_occ = 0;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      if (cloud.points[i].x > 0.25) front++, front_vis += r.pixel_of_point[i].visible;
      if (cloud.points[i].x < -0.25) back++, back_occ += !r.pixel_of_point[i].visible;
    }
    CHECK(front_vis >= 0.99 * front);
    CHECK(back_occ >= 0.99 * back);
  }
  SUBCASE("single point on an unoccluded triangle") {
    auto tri = single_triangle();
    SampledCloud cloud;
    cloud.points = {{0, 0, 0}};
    Camera cam = axis_camera({2, 0, 0}, 32);
    auto r = compute_visibility(cloud, cam, rasterize_depth(tri, cam));
    CHECK(r.pixel_of_point[0].visible);
    CHECK(r.num_visible() == 1);
  }
  SUBCASE("tau = 0 loses recall") {
    auto sphere = make_sphere_mesh({0, 0, 0}, 0.5, 48, 24);
    auto cloud = sample_surface(sphere, 3000, 4);
    Camera cam = axis_camera({2, 0, 0}, 96);
    auto depth = rasterize_depth(sphere, cam);
    auto loose = compute_visibility(cloud, cam, depth, 0.01);
    auto strict = compute_visibility(cloud, cam, depth, 0.0);
    std::size_t a = 0, b = 0;
    for (std::size_t i = 0; i < cloud.size(); ++i)
      if (cloud.points[i].x > 0) a += loose.pixel_of_point[i].visible, b += strict.pixel_of_point[i].visible;
    CHECK(b < a);
  }
  SUBCASE("resolution mismatch") {
    auto tri = single_triangle();
    Camera cam = axis_camera({2, 0, 0}, 32);
    auto depth = rasterize_depth(tri, axis_camera({2, 0, 0}, 16));
    CHECK_THROWS_AS(compute_visibility(SampledCloud{}, cam, depth), InvalidArgument);
  }
  SUBCASE("correspondences are mutually consistent and conservative") {
    auto toy = make_toy_object(toy_spec("lamp"), 2);
    auto cloud = sample_surface(toy.mesh, 3000, 2);
    auto cams = make_cameras(6, 6, 3, 96);
    auto views = render_views(toy.mesh, cloud, cams);
    for (std::size_t k = 0; k < views.size(); ++k) {
      const auto& r = views.renders[k];
      for (int y = 0; y < r.height; ++y)
        for (int x = 0; x < r.width; ++x) {
          auto p = r.point_at(x, y);
          if (p < 0) continue;
          const auto& ref = r.pixel_of_point[static_cast<std::size_t>(p)];
          CHECK(ref.visible);
          CHECK(static_cast<int>(std::floor(ref.u)) == x);
          CHECK(static_cast<int>(std::floor(ref.v)) == y);
        }
      for (std::size_t i = 0; i < cloud.size(); ++i) {
        const auto& ref = r.pixel_of_point[i];
        if (!ref.visible) continue;
        auto pr = project(cloud.points[i], cams[k]);
        REQUIRE(pr);
        double surface = r.depth.at(static_cast<int>(std::floor(pr->u)), static_cast<int>(std::floor(pr->v)));
        CHECK(pr->depth - surface <= kDefaultDepthTolerance + 1e-12);
      }
    }
  }
}

}  // TEST_SUITE
