#include <cstring>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "sp3d/error.hpp"
#include "sp3d/pipeline.hpp"
#include "sp3d/semantics.hpp"
#include "sp3d/service.hpp"
#include "support.hpp"

// after Eigen: resolv.h defines _res
#include "httplib.h"

using namespace sp3d;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

PipelineConfig service_config() {
  PipelineConfig c;
  c.points = 600;
  c.random_views = 6;
  c.resolution = 48;
  c.channels = 8;
  c.pretrain.backbone = {16, 8, 8, 16};
  c.fit.iterations = 300;
  c.fit.lr = 3e-3;
  c.fit.field.feature_dim = 8;
  c.fit.field.head_hidden = 32;
  c.fit.field.skip_hidden = 32;
  c.fit.field.head_layers = 3;
  c.fit.field.skip_layers = 3;
  return c;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Fixture {
  testing::TempDir tmp;
  PipelineConfig config = service_config();
  fs::path data, backbone_path;

  Fixture() {
    data = tmp / "data";
    backbone_path = tmp / "backbone.ckpt";
    for (const auto& dir : synth_dataset(data, {"snowman"}, config)) export_views(dir, config);
    save_backbone(backbone_path, backbone_init(config.pretrain.backbone, 3));
  }
};

json body_of(const httplib::Result& r) { return json::parse(r->body); }

}  // namespace

TEST_SUITE("service") {

TEST_CASE("service end to end") {
  Fixture fx;
  Service service({fx.data, fx.backbone_path, fx.config});
  int port = service.start("127.0.0.1", 0);
  REQUIRE(port > 0);
  httplib::Client http("127.0.0.1", port);

  auto list = http.Get("/api/objects");
  REQUIRE(list);
  CHECK(list->status == 200);
  auto objects = body_of(list)["objects"];
  REQUIRE(objects.size() == 1);
  CHECK(objects[0]["id"] == "snowman");
  CHECK(objects[0]["status"] == "idle");
  CHECK(objects[0]["category"] == "snowman");

  SUBCASE("error statuses before fitting") {
    auto r = http.Get("/api/objects/nope/status");
    CHECK(r->status == 404);
    CHECK(body_of(r)["code"] == "not_found");
    r = http.Get("/api/nothing/here");
    CHECK(r->status == 404);
    CHECK(body_of(r).contains("message"));
    r = http.Get("/api/objects/snowman/segments?scale=0.5");
    CHECK(r->status == 409);
    CHECK(body_of(r)["code"] == "not_fitted");
    r = http.Post("/api/objects/snowman/click", R"({"point": [0, 0, 0], "scale": 1})", "application/json");
    CHECK(r->status == 409);
  }

  auto started = http.Post("/api/objects/snowman/fit");
  REQUIRE(started);
  CHECK(started->status == 202);
  CHECK(body_of(started)["status"] == "fitting");
  // the fit takes well over the few milliseconds these requests need
  auto again = http.Post("/api/objects/snowman/fit");
  CHECK(again->status == 409);
  CHECK(body_of(again)["code"] == "fit_running");
  auto busy = http.Get("/api/objects/snowman/segments?scale=0.5");
  CHECK(busy->status == 503);
  service.wait_idle();

  auto status = body_of(http.Get("/api/objects/snowman/status"));
  CHECK(status["status"] == "ready");
  CHECK(status["progress"]["iteration"] == 300);
  CHECK(status["loss"].get<double>() > 0.0);

  // library view of the same object
  auto obj = load_object(fx.data / "snowman");
  auto backbone = load_backbone(fx.backbone_path);
  auto field = load_field(field_path(obj.dir));
  auto inputs = field_inputs(encode_points(backbone, obj.cloud), obj.cloud, field.config);

  SUBCASE("segments agree with the library and are byte-stable") {
    auto r = http.Get("/api/objects/snowman/segments?scale=0.5");
    REQUIRE(r->status == 200);
    auto seg = body_of(r);
    auto lib = segment_at_scale(field, inputs, 0.5, fx.config.cluster);
    CHECK(seg["labels"].get<std::vector<int>>() == lib.labels);
    CHECK(seg["num_parts"] == lib.num_parts());
    CHECK(seg["counts"].get<std::vector<std::size_t>>() == lib.counts);
    CHECK(seg["scale"] == 0.5);
    CHECK(http.Get("/api/objects/snowman/segments?scale=0.5")->body == r->body);
    // quantized to the 0.01 grid
    CHECK(http.Get("/api/objects/snowman/segments?scale=0.504")->body == r->body);
    CHECK(http.Get("/api/objects/snowman/segments?scale=abc")->status == 422);
    CHECK(http.Get("/api/objects/snowman/segments?scale=-1")->status == 422);
    CHECK(http.Get("/api/objects/snowman/segments?scale=inf")->status == 422);
    CHECK(http.Get("/api/objects/snowman/segments")->status == 422);
  }

  SUBCASE("click matches the segments at every sampled point") {
    auto seg = body_of(http.Get("/api/objects/snowman/segments?scale=1"));
    auto labels = seg["labels"].get<std::vector<int>>();
    for (std::size_t i = 0; i < obj.cloud.size(); i += 37) {
      const auto& p = obj.cloud.points[i];
      json req{{"point", {p.x, p.y, p.z}}, {"scale", 1.0}};
      auto r = http.Post("/api/objects/snowman/click", req.dump(), "application/json");
      REQUIRE(r->status == 200);
      auto hit = body_of(r);
      CHECK(hit["point"] == i);
      CHECK(hit["part"] == labels[i]);
      auto members = hit["points"].get<std::vector<std::uint32_t>>();
      CHECK(members.size() == seg["counts"][static_cast<std::size_t>(labels[i])].get<std::size_t>());
      for (auto m : members) CHECK(labels[m] == labels[i]);
    }
  }

  SUBCASE("ray clicks") {
    json ray{{"origin", {2.0, 0.0, 0.05}}, {"direction", {-1.0, 0.0, 0.0}}, {"scale", 0.5}};
    auto r = http.Post("/api/objects/snowman/click", ray.dump(), "application/json");
    REQUIRE(r->status == 200);
    Click c;
    c.origin = {2.0, 0.0, 0.05};
    c.direction = {-1.0, 0.0, 0.0};
    CHECK(body_of(r)["point"] == resolve_click(c, obj.cloud, obj.mesh));

    json miss{{"origin", {2.0, 0.0, 0.0}}, {"direction", {1.0, 0.0, 0.0}}, {"scale", 0.5}};
    r = http.Post("/api/objects/snowman/click", miss.dump(), "application/json");
    CHECK(r->status == 422);
    CHECK(body_of(r)["code"] == "invalid_ray");
    json zero{{"origin", {2.0, 0.0, 0.0}}, {"direction", {0.0, 0.0, 0.0}}, {"scale", 0.5}};
    CHECK(http.Post("/api/objects/snowman/click", zero.dump(), "application/json")->status == 422);
    json short_vec{{"origin", {2.0, 0.0}}, {"direction", {1.0, 0.0, 0.0}}, {"scale", 0.5}};
    CHECK(http.Post("/api/objects/snowman/click", short_vec.dump(), "application/json")->status == 422);
    CHECK(http.Post("/api/objects/snowman/click", "{oops", "application/json")->status == 422);
    CHECK(http.Post("/api/objects/snowman/click", R"({"point": [0, 0, 0]})", "application/json")->status == 422);
    CHECK(http.Post("/api/objects/nope/click", ray.dump(), "application/json")->status == 404);
  }

  SUBCASE("binary cloud") {
    auto r = http.Get("/api/objects/snowman/cloud");
    REQUIRE(r->status == 200);
    const auto n = obj.cloud.size();
    REQUIRE(r->body.size() == 4 + 15 * n);
    std::uint32_t count = 0;
    std::memcpy(&count, r->body.data(), 4);
    CHECK(count == n);
    for (std::size_t i = 0; i < n; i += 101) {
      float xyz[3];
      std::memcpy(xyz, r->body.data() + 4 + 12 * i, 12);
      CHECK(xyz[0] == static_cast<float>(obj.cloud.points[i].x));
      CHECK(xyz[2] == static_cast<float>(obj.cloud.points[i].z));
      auto red = static_cast<std::uint8_t>(r->body[4 + 12 * n + 3 * i]);
      CHECK(std::abs(red - obj.cloud.colors[i].x * 255.0) <= 0.5);
    }
  }

  SUBCASE("labels") {
    auto r = http.Get("/api/objects/snowman/labels");
    CHECK(body_of(r)["labels"].empty());
    save_labels(obj.dir / "labels" / "scale_0.50", {{0, "head", 2, "", "head", ""}, {1, "body", 0, "", "body", ""}});
    auto one = body_of(http.Get("/api/objects/snowman/labels?scale=0.5"));
    REQUIRE(one["labels"].size() == 2);
    CHECK(one["labels"][0]["label"] == "head");
    CHECK(one["labels"][0]["view_id"] == 2);
    CHECK(body_of(http.Get("/api/objects/snowman/labels?scale=1"))["labels"].empty());
    auto all = body_of(http.Get("/api/objects/snowman/labels"));
    CHECK(all["labels"]["0.50"].size() == 2);
  }

  SUBCASE("upload") {
    auto ply = fx.tmp / "cube.ply";
    save_ply(testing::cube_mesh(0.0, 3.0), ply);
    auto bytes = file_bytes(ply);
    auto r = http.Post("/api/objects?name=cube&format=ply&category=box", bytes, "application/octet-stream");
    REQUIRE(r->status == 201);
    auto created = body_of(r);
    CHECK(created["id"] == "cube");
    CHECK(created["faces"] == 12);
    CHECK(created["points"] == fx.config.points);
    // normalized into the unit sphere on the way in
    auto mesh = load_mesh(fx.data / "cube" / "mesh.ply");
    for (const auto& v : mesh.vertices) CHECK(norm(v) <= 1.0 + 1e-9);

    auto listed = body_of(http.Get("/api/objects"))["objects"];
    CHECK(listed.size() == 2);
    CHECK(listed[0]["id"] == "cube");
    CHECK(listed[0]["category"] == "box");
    CHECK(http.Get("/api/objects/cube/cloud")->status == 200);

    CHECK(http.Post("/api/objects?name=cube", bytes, "application/octet-stream")->status == 409);
    CHECK(http.Post("/api/objects?name=bad/name", bytes, "application/octet-stream")->status == 422);
    CHECK(http.Post("/api/objects?format=stl", bytes, "application/octet-stream")->status == 422);
    CHECK(http.Post("/api/objects?name=e", "", "application/octet-stream")->status == 422);
    auto junk = http.Post("/api/objects?name=junk", "ply\nnonsense", "application/octet-stream");
    CHECK(junk->status == 422);
    CHECK_FALSE(fs::exists(fx.data / "junk"));
    auto unnamed = http.Post("/api/objects", bytes, "application/octet-stream");
    REQUIRE(unnamed->status == 201);
    CHECK(body_of(unnamed)["id"] == "object_2");

    // no masks: the object can be viewed but not fitted
    auto fit = http.Post("/api/objects/cube/fit");
    CHECK(fit->status == 422);
    CHECK(body_of(fit)["code"] == "no_masks");
  }

  service.stop();
}

TEST_CASE("service restart picks up fitted fields") {
  Fixture fx;
  fx.config.fit.iterations = 20;
  {
    Service service({fx.data, fx.backbone_path, fx.config});
    int port = service.start("127.0.0.1", 0);
    httplib::Client http("127.0.0.1", port);
    CHECK(http.Post("/api/objects/snowman/fit")->status == 202);
    service.wait_idle();
  }
  Service service({fx.data, fx.backbone_path, fx.config});
  int port = service.start("127.0.0.1", 0);
  httplib::Client http("127.0.0.1", port);
  CHECK(body_of(http.Get("/api/objects/snowman/status"))["status"] == "ready");
  CHECK(http.Get("/api/objects/snowman/segments?scale=0")->status == 200);
}

TEST_CASE("service options") {
  Fixture fx;
  CHECK_THROWS_AS(Service({fx.data, fx.tmp / "missing.ckpt", fx.config}), InvalidArgument);
  CHECK(Service::quantize_scale(0.504) == doctest::Approx(0.5));
  CHECK(Service::quantize_scale(0.506) == doctest::Approx(0.51));
  CHECK(Service::quantize_scale(0.0) == 0.0);
}

}  // TEST_SUITE
