#include "sp3d/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "sp3d/error.hpp"
#include "sp3d/metrics.hpp"
#include "toml.hpp"

namespace sp3d {

namespace fs = std::filesystem;
using nlohmann::json;

PipelineConfig::PipelineConfig() {
  fit.iterations = 500;
  fit.sampling.views_per_iter = 12;
  pretrain.steps = 2000;
}

void PipelineConfig::set_seed(std::uint64_t s) {
  seed = s;
  pretrain.seed = s;
  fit.seed = s;
}

// --- TOML --------------------------------------------------------------------

namespace {

class TableReader {
 public:
  TableReader(const toml::table& table, std::string path) : table_(table), path_(std::move(path)) {}
  ~TableReader() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (const auto& [key, node] : table_) {
      std::string k(key.str());
      if (!seen_.count(k)) throw InvalidArgument("config: unknown key '" + qualified(k) + "'");
    }
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    const toml::node* node = table_.get(key);
    if (!node) return;
    if constexpr (std::is_same_v<T, bool>) {
      auto v = node->value<bool>();
      if (!node->is_boolean() || !v) throw type_error(key, "boolean");
      out = *v;
    } else if constexpr (std::is_integral_v<T>) {
      auto v = node->value<std::int64_t>();
      if (!node->is_integer() || !v) throw type_error(key, "integer");
      if (*v < 0) throw InvalidArgument("config: '" + qualified(key) + "' must be >= 0");
      out = static_cast<T>(*v);
    } else if constexpr (std::is_floating_point_v<T>) {
      auto v = node->value<double>();
      if (!(node->is_integer() || node->is_floating_point()) || !v) throw type_error(key, "number");
      out = *v;
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      const auto* arr = node->as_array();
      if (!arr) throw type_error(key, "array of numbers");
      out.clear();
      for (const auto& e : *arr) {
        auto v = e.value<double>();
        if (!(e.is_integer() || e.is_floating_point()) || !v) throw type_error(key, "array of numbers");
        out.push_back(*v);
      }
    } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
      const auto* arr = node->as_array();
      if (!arr) throw type_error(key, "array of strings");
      out.clear();
      for (const auto& e : *arr) {
        auto v = e.value<std::string>();
        if (!v) throw type_error(key, "array of strings");
        out.push_back(*v);
      }
    } else {
      static_assert(sizeof(T) == 0, "unsupported config type");
    }
  }

  // Nested table, or nullptr when absent.
  const toml::table* sub(const char* key) {
    seen_.insert(key);
    const toml::node* node = table_.get(key);
    if (!node) return nullptr;
    if (!node->is_table()) throw type_error(key, "table");
    return node->as_table();
  }

  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  InvalidArgument type_error(const char* key, const char* expected) const {
    return InvalidArgument("config: '" + qualified(key) + "' must be " + expected);
  }

  const toml::table& table_;
  std::string path_;
  std::set<std::string> seen_;
};

void validate(const PipelineConfig& c) {
  auto positive = [](bool ok, const char* what) {
    if (!ok) throw InvalidArgument(std::string("config: ") + what + " must be positive");
  };
  positive(c.points > 0, "views.points");
  positive(c.resolution > 0, "views.resolution");
  positive(c.camera_distance > 0, "views.camera_distance");
  positive(c.tau > 0, "views.tau");
  positive(c.channels > 0, "synth.channels");
  positive(c.pretrain.steps > 0, "pretrain.steps");
  positive(c.pretrain.lr > 0, "pretrain.lr");
  positive(c.fit.iterations > 0, "fit.iterations");
  positive(c.fit.sampling.views_per_iter > 0, "fit.views_per_iter");
  positive(c.fit.sampling.pixels_per_view > 1, "fit.pixels_per_view");
  positive(c.fit.lr > 0, "fit.lr");
  positive(c.fit.field.margin > 0, "fit.field.margin");
  positive(c.fit.field.feature_dim > 0, "fit.field.feature_dim");
  positive(c.fit.field.epsilon > 0, "fit.field.epsilon");
  positive(c.label_in_flight > 0, "label.max_in_flight");
  if (c.fixed_views != 0 && c.fixed_views != 6) throw InvalidArgument("config: views.fixed must be 0 or 6");
  if (c.mask_levels.empty()) throw InvalidArgument("config: fit.mask_levels must not be empty");
  for (const auto& l : c.mask_levels)
    if (l != "fine" && l != "coarse") throw InvalidArgument("config: unknown mask level '" + l + "'");
  for (double s : c.sweep)
    if (!(s >= 0.0)) throw InvalidArgument("config: segment.sweep scales must be >= 0");
}

}  // namespace

PipelineConfig parse_config(const std::string& text) {
  toml::table root;
  try {
    root = toml::parse(text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "config: " << e.description() << " at line " << e.source().begin.line;
    throw InvalidArgument(msg.str());
  }
  PipelineConfig c;
  {
    TableReader top(root, "");
    std::uint64_t seed = c.seed;
    top.read("seed", seed);
    if (auto* t = top.sub("views")) {
      TableReader r(*t, "views");
      r.read("points", c.points);
      r.read("fixed", c.fixed_views);
      r.read("random", c.random_views);
      r.read("resolution", c.resolution);
      r.read("camera_distance", c.camera_distance);
      r.read("tau", c.tau);
    }
    if (auto* t = top.sub("synth")) {
      TableReader r(*t, "synth");
      r.read("channels", c.channels);
      r.read("feature_noise", c.feature_noise);
    }
    if (auto* t = top.sub("pretrain")) {
      TableReader r(*t, "pretrain");
      auto& p = c.pretrain;
      r.read("steps", p.steps);
      r.read("lr", p.lr);
      r.read("fixed_views_per_step", p.fixed_views_per_step);
      r.read("random_views_per_step", p.random_views_per_step);
      r.read("visible_only_average", p.visible_only_average);
      if (auto* b = r.sub("backbone")) {
        TableReader rb(*b, "pretrain.backbone");
        rb.read("hidden", p.backbone.hidden);
        rb.read("out_dim", p.backbone.out_dim);
        rb.read("k_local", p.backbone.k_local);
        rb.read("k_global", p.backbone.k_global);
      }
    }
    if (auto* t = top.sub("fit")) {
      TableReader r(*t, "fit");
      auto& f = c.fit;
      r.read("iterations", f.iterations);
      r.read("views_per_iter", f.sampling.views_per_iter);
      r.read("pixels_per_view", f.sampling.pixels_per_view);
      r.read("lr", f.lr);
      r.read("min_mask_points", f.masks.min_mask_points);
      r.read("mask_levels", c.mask_levels);
      if (auto* ft = r.sub("field")) {
        TableReader rf(*ft, "fit.field");
        auto& fc = f.field;
        rf.read("feature_dim", fc.feature_dim);
        rf.read("head_hidden", fc.head_hidden);
        rf.read("head_layers", fc.head_layers);
        rf.read("skip_hidden", fc.skip_hidden);
        rf.read("skip_layers", fc.skip_layers);
        rf.read("scale_frequencies", fc.scale_frequencies);
        rf.read("position_frequencies", fc.position_encoding.n_frequencies);
        rf.read("margin", fc.margin);
        rf.read("epsilon", fc.epsilon);
        rf.read("use_skip", fc.use_skip);
      }
      f.masks.epsilon = f.field.epsilon;
    }
    if (auto* t = top.sub("segment")) {
      TableReader r(*t, "segment");
      r.read("min_cluster_size", c.cluster.min_cluster_size);
      r.read("selection_epsilon", c.cluster.selection_epsilon);
      r.read("dbscan", c.cluster.dbscan);
      r.read("sweep", c.sweep);
    }
    if (auto* t = top.sub("label")) {
      TableReader r(*t, "label");
      r.read("max_in_flight", c.label_in_flight);
    }
    c.set_seed(seed);
  }
  validate(c);
  return c;
}

PipelineConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

json config_to_json(const PipelineConfig& c) {
  const auto& p = c.pretrain;
  const auto& f = c.fit;
  return {{"seed", c.seed},
          {"views",
           {{"points", c.points},
            {"fixed", c.fixed_views},
            {"random", c.random_views},
            {"resolution", c.resolution},
            {"camera_distance", c.camera_distance},
            {"tau", c.tau}}},
          {"synth", {{"channels", c.channels}, {"feature_noise", c.feature_noise}}},
          {"pretrain",
           {{"steps", p.steps},
            {"lr", p.lr},
            {"fixed_views_per_step", p.fixed_views_per_step},
            {"random_views_per_step", p.random_views_per_step},
            {"visible_only_average", p.visible_only_average},
            {"backbone",
             {{"hidden", p.backbone.hidden},
              {"out_dim", p.backbone.out_dim},
              {"k_local", p.backbone.k_local},
              {"k_global", p.backbone.k_global}}}}},
          {"fit",
           {{"iterations", f.iterations},
            {"views_per_iter", f.sampling.views_per_iter},
            {"pixels_per_view", f.sampling.pixels_per_view},
            {"lr", f.lr},
            {"min_mask_points", f.masks.min_mask_points},
            {"mask_levels", c.mask_levels},
            {"field",
             {{"feature_dim", f.field.feature_dim},
              {"head_hidden", f.field.head_hidden},
              {"head_layers", f.field.head_layers},
              {"skip_hidden", f.field.skip_hidden},
              {"skip_layers", f.field.skip_layers},
              {"scale_frequencies", f.field.scale_frequencies},
              {"position_frequencies", f.field.position_encoding.n_frequencies},
              {"margin", f.field.margin},
              {"epsilon", f.field.epsilon},
              {"use_skip", f.field.use_skip}}}}},
          {"segment",
           {{"min_cluster_size", c.cluster.min_cluster_size},
            {"selection_epsilon", c.cluster.selection_epsilon},
            {"dbscan", c.cluster.dbscan},
            {"sweep", c.sweep}}},
          {"label", {{"max_in_flight", c.label_in_flight}}}};
}

// --- object directories --------------------------------------------------------

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.filename().string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::string view_file(const char* prefix, std::size_t k) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%03zu.bin", prefix, k);
  return buf;
}

json vec_json(const Vec3& v) { return json::array({v.x, v.y, v.z}); }

Vec3 vec_from(const json& j) {
  if (!j.is_array() || j.size() != 3) throw FormatError("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

PartFile part_file_from_labels(const std::string& category, const std::vector<int>& labels,
                               const std::vector<std::string>& names) {
  PartFile pf;
  pf.category = category;
  pf.num_elements = labels.size();
  for (auto& inst : instances_from_labels(labels)) {
    auto id = static_cast<std::size_t>(std::stoi(inst.label));
    inst.label = id < names.size() ? names[id] : inst.label;
    pf.parts.push_back(std::move(inst));
  }
  return pf;
}

}  // namespace

ObjectMeta read_object_meta(const fs::path& dir) {
  ObjectMeta m;
  auto path = dir / "object.json";
  if (!fs::exists(path)) {
    m.category = dir.filename().string();
    return m;
  }
  auto j = read_json(path);
  try {
    m.category = j.value("category", dir.filename().string());
    if (j.contains("spec")) m.spec = j.at("spec").get<std::string>();
    m.seed = j.value("seed", std::uint64_t{0});
  } catch (const json::exception& e) {
    throw FormatError(std::string("object.json: ") + e.what());
  }
  return m;
}

void write_object_meta(const fs::path& dir, const ObjectMeta& m) {
  json j{{"category", m.category}, {"seed", m.seed}};
  if (m.spec) j["spec"] = *m.spec;
  write_json(dir / "object.json", j);
}

fs::path object_mesh_path(const fs::path& dir) {
  for (const char* name : {"mesh.ply", "mesh.obj"})
    if (fs::exists(dir / name)) return dir / name;
  throw FormatError("no mesh.ply or mesh.obj in " + dir.string());
}

std::vector<fs::path> list_objects(const fs::path& root) {
  if (!fs::is_directory(root)) throw InvalidArgument("not a directory: " + root.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && (fs::exists(e.path() / "mesh.ply") || fs::exists(e.path() / "mesh.obj")))
      out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<fs::path> synth_dataset(const fs::path& root, const std::vector<std::string>& specs,
                                    const PipelineConfig& config) {
  if (specs.empty()) throw InvalidArgument("no specs given");
  fs::create_directories(root);
  std::map<std::string, int> seen;
  std::vector<fs::path> dirs;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& name = specs[i];
    auto spec = toy_spec(name);
    int n = seen[name]++;
    auto dir = root / (n == 0 ? name : name + "_" + std::to_string(n));
    fs::create_directories(dir);
    std::uint64_t seed = config.seed * 1000 + i + 1;
    auto toy = make_toy_object(spec, seed);
    save_ply(toy.mesh, dir / "mesh.ply");
    write_object_meta(dir, {name, name, seed});
    write_part_file(dir / "gt_instance.json", part_file_from_labels(name, toy.fine_of_face, toy.fine_names));
    write_part_file(dir / "gt_semantic.json", part_file_from_labels(name, toy.fine_of_face, toy.fine_names));
    write_part_file(dir / "gt_coarse.json", part_file_from_labels(name, toy.coarse_of_face, toy.coarse_names));
    dirs.push_back(dir);
  }
  return dirs;
}

void write_views_manifest(const fs::path& path, const ViewsManifest& m) {
  json cams = json::array();
  for (const auto& c : m.cameras)
    cams.push_back({{"position", vec_json(c.position)},
                    {"look_at", vec_json(c.look_at)},
                    {"up", vec_json(c.up)},
                    {"fov", c.vertical_fov},
                    {"width", c.width},
                    {"height", c.height},
                    {"near", c.near},
                    {"far", c.far}});
  write_json(path, {{"version", 1},
                    {"points", m.points},
                    {"cloud_seed", m.cloud_seed},
                    {"tau", m.tau},
                    {"has_features", m.has_features},
                    {"mask_levels", m.mask_levels},
                    {"cameras", cams}});
}

ViewsManifest read_views_manifest(const fs::path& path) {
  auto j = read_json(path);
  ViewsManifest m;
  try {
    if (j.at("version").get<int>() != 1) throw FormatError("views.json: unsupported version");
    m.points = j.at("points").get<std::size_t>();
    m.cloud_seed = j.at("cloud_seed").get<std::uint64_t>();
    m.tau = j.at("tau").get<double>();
    m.has_features = j.value("has_features", false);
    m.mask_levels = j.value("mask_levels", std::vector<std::string>{});
    for (const auto& c : j.at("cameras")) {
      Camera cam;
      cam.position = vec_from(c.at("position"));
      cam.look_at = vec_from(c.at("look_at"));
      cam.up = vec_from(c.at("up"));
      cam.vertical_fov = c.at("fov").get<double>();
      cam.width = c.at("width").get<int>();
      cam.height = c.at("height").get<int>();
      cam.near = c.value("near", cam.near);
      cam.far = c.value("far", cam.far);
      cam.validate();
      m.cameras.push_back(cam);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("views.json: ") + e.what());
  }
  return m;
}

ViewsManifest export_views(const fs::path& dir, const PipelineConfig& config) {
  auto meta = read_object_meta(dir);
  auto mesh = load_mesh(object_mesh_path(dir));
  ViewsManifest m;
  m.points = config.points;
  m.cloud_seed = meta.seed ^ config.seed;
  m.tau = config.tau;
  m.cameras = make_cameras(config.fixed_views, config.random_views, m.cloud_seed + 1, config.resolution,
                           config.camera_distance);
  auto cloud = sample_surface(mesh, m.points, m.cloud_seed);
  auto views = render_views(mesh, cloud, m.cameras, m.tau);

  auto vdir = dir / "views";
  fs::create_directories(vdir);
  if (meta.spec) {
    auto toy = make_toy_object(toy_spec(*meta.spec), meta.seed);
    if (toy.mesh.num_faces() != mesh.num_faces()) throw FormatError("mesh does not match its toy spec");
    toy.mesh = mesh;
    SynthesisOptions so{config.channels, config.feature_noise, config.seed};
    for (const auto& level : config.mask_levels) {
      auto g = level == "fine" ? Granularity::Fine : Granularity::Coarse;
      auto syn = synthesize_views(toy, views, g, so);
      for (std::size_t k = 0; k < syn.size(); ++k) {
        if (g == Granularity::Fine) write_feature_map(vdir / view_file("feat", k), syn[k].features);
        write_mask_map(vdir / view_file(("mask_" + level).c_str(), k), syn[k].masks);
      }
    }
    m.mask_levels = config.mask_levels;
    m.has_features = std::find(m.mask_levels.begin(), m.mask_levels.end(), "fine") != m.mask_levels.end();
  }
  write_views_manifest(vdir / "views.json", m);
  return m;
}

ObjectData load_object(const fs::path& dir) {
  ObjectData o;
  o.id = dir.filename().string();
  o.dir = dir;
  auto manifest_path = dir / "views" / "views.json";
  if (!fs::exists(manifest_path)) throw FormatError("views not exported for " + o.id);
  o.manifest = read_views_manifest(manifest_path);
  o.mesh = load_mesh(object_mesh_path(dir));
  o.cloud = sample_surface(o.mesh, o.manifest.points, o.manifest.cloud_seed);
  o.views = render_views(o.mesh, o.cloud, o.manifest.cameras, o.manifest.tau);
  return o;
}

std::vector<FeatureMap> load_features(const ObjectData& o) {
  if (!o.manifest.has_features) throw FormatError("no feature maps for " + o.id);
  std::vector<FeatureMap> out;
  for (std::size_t k = 0; k < o.views.size(); ++k) out.push_back(read_feature_map(o.dir / "views" / view_file("feat", k)));
  return out;
}

std::vector<std::vector<MaskMap>> load_masks(const ObjectData& o) {
  std::vector<std::vector<MaskMap>> out(o.views.size());
  for (std::size_t k = 0; k < o.views.size(); ++k) {
    for (const auto& level : o.manifest.mask_levels) {
      auto path = o.dir / "views" / view_file(("mask_" + level).c_str(), k);
      if (fs::exists(path)) out[k].push_back(read_mask_map(path));
    }
  }
  bool any = std::any_of(out.begin(), out.end(), [](const auto& v) { return !v.empty(); });
  if (!any) throw InvalidArgument("no mask maps for " + o.id);
  return out;
}

DistillObject load_distill_object(const fs::path& dir) {
  auto o = load_object(dir);
  auto features = load_features(o);
  DistillObject d;
  for (std::size_t k = 0; k < o.views.size(); ++k)
    d.views.push_back(gather_visible(o.views.renders[k], o.views.cameras[k], features[k]));
  d.cloud = std::move(o.cloud);
  return d;
}

fs::path field_path(const fs::path& dir) { return dir / "field.ckpt"; }

bool has_field(const fs::path& dir) { return fs::exists(field_path(dir)) && fs::exists(dir / "fit.json"); }

void write_fit_record(const fs::path& dir, const FitRecord& r) {
  write_json(dir / "fit.json", {{"backbone", r.backbone.string()},
                                {"seed", r.seed},
                                {"iterations", r.iterations},
                                {"final_loss", r.final_loss},
                                {"wall_seconds", r.wall_seconds}});
}

FitRecord read_fit_record(const fs::path& dir) {
  if (!has_field(dir)) throw ComputeError("field not fitted");
  auto j = read_json(dir / "fit.json");
  FitRecord r;
  try {
    r.backbone = j.at("backbone").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.iterations = j.at("iterations").get<int>();
    r.final_loss = j.at("final_loss").get<double>();
    r.wall_seconds = j.value("wall_seconds", 0.0);
  } catch (const json::exception& e) {
    throw FormatError(std::string("fit.json: ") + e.what());
  }
  return r;
}

FitResult fit_object(const ObjectData& o, const Backbone& backbone, const fs::path& backbone_path,
                     const PipelineConfig& config, const FitCallback& on_iteration) {
  auto masks = load_masks(o);
  auto images = prepare_mask_images(o.views, masks, o.cloud, config.fit.masks);
  if (images.empty()) throw InvalidArgument("no usable masks for " + o.id);
  auto inputs = field_inputs(encode_points(backbone, o.cloud), o.cloud, config.fit.field);

  auto t0 = std::chrono::steady_clock::now();
  std::ofstream log(o.dir / "fit_log.jsonl");
  auto result = fit(inputs, images, config.fit, [&](const FitStats& s) {
    log << json{{"iteration", s.iteration}, {"loss", s.loss}, {"positive_distance", s.positive_distance},
                {"negative_distance", s.negative_distance}, {"wall_ms", s.wall_ms}}
               .dump()
        << "\n";
    if (on_iteration) on_iteration(s);
  });
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  save_field(field_path(o.dir), result.field);
  write_fit_record(o.dir, {fs::absolute(backbone_path), config.fit.seed, config.fit.iterations,
                           result.final_loss(), secs});
  return result;
}

std::string scale_key(double scale) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", scale);
  return buf;
}

SegmentOutput write_segment_outputs(const ObjectData& o, const Segmentation& seg, const std::string& category) {
  SegmentOutput out;
  out.segmentation = seg;
  auto key = scale_key(seg.scale);
  fs::create_directories(o.dir / "seg");
  fs::create_directories(o.dir / "pred");
  out.stem = o.dir / "seg" / ("scale_" + key);
  save_segmentation(out.stem, seg);
  out.mesh = vote_mesh(seg, o.cloud, o.mesh);
  save_mesh_segmentation(o.dir / "seg" / ("scale_" + key + "_faces"), out.mesh);
  auto ply = out.stem;
  ply += ".ply";
  save_colored_cloud(ply, o.cloud, seg.labels);

  PartFile pf;
  pf.category = category;
  pf.num_elements = o.mesh.num_faces();
  auto parts = instances_from_labels(out.mesh.labels);
  for (auto& inst : parts) {
    auto id = static_cast<std::size_t>(std::stoi(inst.label));
    inst.label = "part_" + inst.label;
    inst.confidence = id < seg.confidence.size() ? seg.confidence[id] : 0.0;
    pf.parts.push_back(std::move(inst));
  }
  write_part_file(o.dir / "pred" / ("scale_" + key + ".json"), pf);
  return out;
}

}  // namespace sp3d
