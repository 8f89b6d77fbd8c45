#include <fstream>
#include <sstream>

#include "doctest.h"
#include "sp3d/error.hpp"
#include "sp3d/metrics.hpp"
#include "sp3d/pipeline.hpp"
#include "support.hpp"
#include "toml.hpp"

using namespace sp3d;
namespace fs = std::filesystem;

namespace {

// nlohmann -> toml++ so config_to_json output can be fed back through the parser
toml::table to_toml(const nlohmann::json& j);

toml::array to_toml_array(const nlohmann::json& j) {
  toml::array a;
  for (const auto& e : j) {
    if (e.is_string()) a.push_back(e.get<std::string>());
    else if (e.is_number_integer()) a.push_back(e.get<std::int64_t>());
    else a.push_back(e.get<double>());
  }
  return a;
}

toml::table to_toml(const nlohmann::json& j) {
  toml::table t;
  for (const auto& [k, v] : j.items()) {
    if (v.is_object()) t.insert(k, to_toml(v));
    else if (v.is_array()) t.insert(k, to_toml_array(v));
    else if (v.is_boolean()) t.insert(k, v.get<bool>());
    else if (v.is_number_integer()) t.insert(k, v.get<std::int64_t>());
    else if (v.is_number()) t.insert(k, v.get<double>());
    else t.insert(k, v.get<std::string>());
  }
  return t;
}

std::string invalid_message(const std::string& text) {
  try {
    parse_config(text);
  } catch (const InvalidArgument& e) {
    return e.what();
  }
  return "";
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

PipelineConfig small_config() {
  PipelineConfig c;
  c.points = 600;
  c.random_views = 4;
  c.resolution = 48;
  c.channels = 8;
  return c;
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("config defaults and shipped example") {
  PipelineConfig d;
  CHECK(d.resolution == 128);
  CHECK(d.fit.iterations == 500);
  CHECK(d.pretrain.steps == 2000);
  CHECK(parse_config("").resolution == 128);
  auto shipped = load_config(fs::path(SP3D_ASSET_DIR) / "config" / "default.toml");
  CHECK(config_to_json(shipped) == config_to_json(d));
  CHECK_THROWS_AS(load_config("/nonexistent/x.toml"), InvalidArgument);
}

TEST_CASE("config parsing") {
  auto c = parse_config(R"(
seed = 7
[views]
points = 1000
tau = 0.02
[fit]
iterations = 40
lr = 1
mask_levels = ["coarse"]
[fit.field]
use_skip = false
epsilon = 4.0
[segment]
sweep = [0.25, 1]
)");
  CHECK(c.seed == 7);
  CHECK(c.fit.seed == 7);
  CHECK(c.pretrain.seed == 7);
  CHECK(c.points == 1000);
  CHECK(c.tau == 0.02);
  CHECK(c.fit.iterations == 40);
  CHECK(c.fit.lr == 1.0);
  CHECK(c.mask_levels == std::vector<std::string>{"coarse"});
  CHECK_FALSE(c.fit.field.use_skip);
  CHECK(c.fit.masks.epsilon == 4.0);
  CHECK(c.sweep == std::vector<double>{0.25, 1.0});
  CHECK(c.resolution == 128);

  CHECK(invalid_message("colour = 1").find("unknown key 'colour'") != std::string::npos);
  CHECK(invalid_message("[fit.field]\nwidth = 3").find("'fit.field.width'") != std::string::npos);
  CHECK(invalid_message("[views]\npoints = 1.5").find("integer") != std::string::npos);
  CHECK(invalid_message("[views]\npoints = \"many\"").find("integer") != std::string::npos);
  CHECK(invalid_message("[views]\npoints = -3").find(">= 0") != std::string::npos);
  CHECK(invalid_message("[views]\npoints = 0").find("positive") != std::string::npos);
  CHECK(invalid_message("[views]\ntau = -0.1").find("positive") != std::string::npos);
  CHECK(invalid_message("[fit]\nlr = true").find("number") != std::string::npos);
  CHECK(invalid_message("[fit.field]\nuse_skip = 1").find("boolean") != std::string::npos);
  CHECK(invalid_message("views = 3").find("table") != std::string::npos);
  CHECK(invalid_message("[views]\nfixed = 3").find("0 or 6") != std::string::npos);
  CHECK(invalid_message("[fit]\nmask_levels = []").find("empty") != std::string::npos);
  CHECK(invalid_message("[fit]\nmask_levels = [\"medium\"]").find("medium") != std::string::npos);
  CHECK(invalid_message("[segment]\nsweep = [1, -1]").find("sweep") != std::string::npos);
  CHECK(invalid_message("[segment]\nsweep = [\"a\"]").find("array of numbers") != std::string::npos);
  CHECK(invalid_message("[views\npoints = 1").find("line 1") != std::string::npos);
}

TEST_CASE("config round trip through TOML") {
  auto c = parse_config("seed = 3\n[views]\nresolution = 64\n[segment]\ndbscan = true\nmin_cluster_size = 25");
  std::ostringstream text;
  text << to_toml(config_to_json(c));
  auto back = parse_config(text.str());
  CHECK(config_to_json(back) == config_to_json(c));
  CHECK(back.cluster.dbscan);
  CHECK(back.cluster.min_cluster_size == 25);
}

TEST_CASE("set_seed") {
  PipelineConfig c;
  c.set_seed(99);
  CHECK(c.seed == 99);
  CHECK(c.pretrain.seed == 99);
  CHECK(c.fit.seed == 99);
}

TEST_CASE("synthetic dataset layout") {
  testing::TempDir tmp;
  auto cfg = small_config();
  auto dirs = synth_dataset(tmp / "data", {"snowman", "table", "snowman"}, cfg);
  REQUIRE(dirs.size() == 3);
  CHECK(dirs[2].filename() == "snowman_1");
  fs::create_directories(tmp / "data" / "empty");
  auto listed = list_objects(tmp / "data");
  REQUIRE(listed.size() == 3);
  CHECK(listed[0].filename() == "snowman");
  CHECK(listed[1].filename() == "snowman_1");
  CHECK(listed[2].filename() == "table");

  auto meta = read_object_meta(dirs[1]);
  CHECK(meta.category == "table");
  CHECK(meta.spec == std::optional<std::string>("table"));
  CHECK(meta.seed == 2);
  CHECK(read_object_meta(dirs[0]).seed != read_object_meta(dirs[2]).seed);
  CHECK(object_mesh_path(dirs[0]).filename() == "mesh.ply");
  auto gt = read_part_file(dirs[1] / "gt_instance.json");
  CHECK(gt.parts.size() == 5);
  CHECK(read_part_file(dirs[1] / "gt_coarse.json").parts.size() == 2);
  CHECK(gt.num_elements == load_mesh(dirs[1] / "mesh.ply").num_faces());

  // no object.json: the directory name is the category
  CHECK(read_object_meta(tmp / "data" / "empty").category == "empty");
  CHECK_THROWS_AS(object_mesh_path(tmp / "data" / "empty"), FormatError);
  CHECK_THROWS_AS(list_objects(tmp / "missing"), InvalidArgument);
  CHECK_THROWS_AS(synth_dataset(tmp / "x", {}, cfg), InvalidArgument);
  CHECK_THROWS_AS(synth_dataset(tmp / "x", {"teapot"}, cfg), InvalidArgument);
  std::ofstream(dirs[0] / "object.json") << "{";
  CHECK_THROWS_AS(read_object_meta(dirs[0]), FormatError);
}

TEST_CASE("views manifest round trip") {
  testing::TempDir tmp;
  ViewsManifest m;
  m.points = 123;
  m.cloud_seed = 77;
  m.tau = 0.005;
  m.cameras = make_cameras(6, 2, 4, 32, 2.5);
  m.has_features = true;
  m.mask_levels = {"fine"};
  write_views_manifest(tmp / "v.json", m);
  auto back = read_views_manifest(tmp / "v.json");
  CHECK(back.points == 123);
  CHECK(back.cloud_seed == 77);
  CHECK(back.tau == 0.005);
  CHECK(back.has_features);
  CHECK(back.mask_levels == m.mask_levels);
  REQUIRE(back.cameras.size() == 8);
  for (std::size_t k = 0; k < 8; ++k) {
    CHECK(back.cameras[k].position.x == m.cameras[k].position.x);
    CHECK(back.cameras[k].position.z == m.cameras[k].position.z);
    CHECK(back.cameras[k].vertical_fov == m.cameras[k].vertical_fov);
    CHECK(back.cameras[k].width == 32);
  }
  std::ofstream(tmp / "bad.json") << R"({"version": 2, "points": 1, "cloud_seed": 0, "tau": 0.01, "cameras": []})";
  CHECK_THROWS_AS(read_views_manifest(tmp / "bad.json"), FormatError);
  std::ofstream(tmp / "bad2.json") << R"({"version": 1, "points": 1, "cloud_seed": 0, "tau": 0.01,
    "cameras": [{"position": [0, 0], "look_at": [0, 0, 0], "up": [0, 0, 1], "fov": 1, "width": 8, "height": 8}]})";
  CHECK_THROWS_AS(read_views_manifest(tmp / "bad2.json"), FormatError);
}

TEST_CASE("export, load and fit one object") {
  testing::TempDir tmp;
  auto cfg = small_config();
  cfg.fit.iterations = 30;
  cfg.fit.field.feature_dim = 8;
  cfg.fit.field.head_hidden = 16;
  cfg.fit.field.skip_hidden = 16;
  cfg.pretrain.backbone = {16, 8, 8, 16};
  auto dir = synth_dataset(tmp / "data", {"snowman"}, cfg)[0];

  CHECK_THROWS_AS(load_object(dir), FormatError);
  auto manifest = export_views(dir, cfg);
  CHECK(manifest.cameras.size() == 10);
  CHECK(manifest.has_features);
  auto first_feat = slurp(dir / "views" / "feat_000.bin");
  CHECK(fs::exists(dir / "views" / "mask_coarse_009.bin"));
  CHECK(fs::exists(dir / "views" / "mask_fine_009.bin.json"));
  CHECK_FALSE(fs::exists(dir / "views" / "feat_010.bin"));

  SUBCASE("export is reproducible") {
    export_views(dir, cfg);
    CHECK(slurp(dir / "views" / "feat_000.bin") == first_feat);
  }

  auto obj = load_object(dir);
  CHECK(obj.id == "snowman");
  CHECK(obj.cloud.size() == 600);
  CHECK(obj.views.size() == 10);
  auto again = sample_surface(obj.mesh, 600, manifest.cloud_seed);
  CHECK(again.points[5].x == obj.cloud.points[5].x);
  auto feats = load_features(obj);
  REQUIRE(feats.size() == 10);
  CHECK(feats[0].channels == 8);
  auto masks = load_masks(obj);
  REQUIRE(masks.size() == 10);
  CHECK(masks[0].size() == 2);
  auto distill = load_distill_object(dir);
  CHECK(distill.views.size() == 10);

  CHECK_FALSE(has_field(dir));
  CHECK_THROWS_AS(read_fit_record(dir), ComputeError);
  auto backbone = backbone_init(cfg.pretrain.backbone, 1);
  int calls = 0;
  auto result = fit_object(obj, backbone, tmp / "bb.ckpt", cfg, [&](const FitStats&) { ++calls; });
  CHECK(calls == 30);
  CHECK(has_field(dir));
  auto record = read_fit_record(dir);
  CHECK(record.iterations == 30);
  CHECK(record.final_loss == result.final_loss());
  CHECK(record.backbone.is_absolute());
  std::ifstream log(dir / "fit_log.jsonl");
  int lines = 0;
  for (std::string line; std::getline(log, line); ++lines) CHECK(nlohmann::json::parse(line).contains("loss"));
  CHECK(lines == 30);

  SUBCASE("segment outputs") {
    std::vector<int> labels(obj.cloud.size());
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = obj.cloud.points[i].z > 0 ? 1 : 0;
    auto seg = make_segmentation(labels, 0.5);
    auto out = write_segment_outputs(obj, seg, "snowman");
    CHECK(out.stem.filename() == "scale_0.50");
    CHECK(fs::exists(dir / "seg" / "scale_0.50.json"));
    CHECK(fs::exists(dir / "seg" / "scale_0.50.ply"));
    auto pred = read_part_file(dir / "pred" / "scale_0.50.json");
    CHECK(pred.num_elements == obj.mesh.num_faces());
    CHECK(pred.category == "snowman");
    double conf = 0.0;
    for (const auto& p : pred.parts) {
      CHECK(p.label.rfind("part_", 0) == 0);
      conf += p.confidence;
    }
    CHECK(conf == doctest::Approx(1.0));
  }
  SUBCASE("mesh-only object") {
    fs::create_directories(tmp / "plain");
    save_ply(obj.mesh, tmp / "plain" / "mesh.ply");
    auto m = export_views(tmp / "plain", cfg);
    CHECK_FALSE(m.has_features);
    auto plain = load_object(tmp / "plain");
    CHECK_THROWS_AS(load_features(plain), FormatError);
    CHECK_THROWS_AS(load_masks(plain), InvalidArgument);
  }
}

TEST_CASE("scale_key") {
  CHECK(scale_key(0.0) == "0.00");
  CHECK(scale_key(1.234) == "1.23");
  CHECK(scale_key(2.0) == "2.00");
}

}  // TEST_SUITE
