#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sp3d/distill.hpp"
#include "sp3d/grouping.hpp"
#include "sp3d/providers.hpp"
#include "sp3d/render.hpp"
#include "sp3d/segment.hpp"

namespace sp3d {

/// Settings shared by the CLI and the service. Library structs keep their own
/// defaults; the values here are sized for a laptop CPU.
struct PipelineConfig {
  std::uint64_t seed = 0;

  // [views]
  std::size_t points = 3000;
  int fixed_views = 6;
  int random_views = 30;
  int resolution = 128;
  double camera_distance = 2.0;
  double tau = kDefaultDepthTolerance;

  // [synth]
  int channels = 32;
  double feature_noise = 0.0;

  PretrainConfig pretrain;  // [pretrain], [pretrain.backbone]
  FitConfig fit;            // [fit], [fit.field]
  std::vector<std::string> mask_levels{"fine", "coarse"};

  ClusterOptions cluster;  // [segment]
  std::vector<double> sweep = kDefaultSweepScales;

  int label_in_flight = 4;  // [label]

  PipelineConfig();
  void set_seed(std::uint64_t s);
};

// Unknown keys and wrong types raise InvalidArgument.
PipelineConfig load_config(const std::filesystem::path& path);
PipelineConfig parse_config(const std::string& toml_text);
nlohmann::json config_to_json(const PipelineConfig& config);

// ---------------------------------------------------------------------------
// Object directories
//
//   <object>/mesh.ply                  normalized mesh
//   <object>/object.json               {category, spec?, seed?}
//   <object>/gt_instance.json          fine parts over faces
//   <object>/gt_semantic.json          fine parts with names
//   <object>/gt_coarse.json            coarse parts with names
//   <object>/views/views.json          cameras + cloud sampling parameters
//   <object>/views/feat_NNN.bin        SP3DFEAT
//   <object>/views/mask_<level>_NNN.bin SP3DMASK (+ .json sidecar)
//   <object>/field.ckpt                grouping field (+ .json), fit.json
//   <object>/seg/scale_S.{json,labels} point segmentations
//   <object>/pred/scale_S.json         face parts for evaluation
//   <object>/labels/scale_S/           part labels + transcripts

struct ObjectMeta {
  std::string category;
  std::optional<std::string> spec;  // built-in toy spec, when synthetic
  std::uint64_t seed = 0;
};

ObjectMeta read_object_meta(const std::filesystem::path& dir);
void write_object_meta(const std::filesystem::path& dir, const ObjectMeta& meta);

// Mesh path inside an object directory (mesh.ply, else mesh.obj).
std::filesystem::path object_mesh_path(const std::filesystem::path& dir);

// Subdirectories of `root` holding a mesh, sorted by name.
std::vector<std::filesystem::path> list_objects(const std::filesystem::path& root);

// Writes one object per spec name; returns the object directories.
std::vector<std::filesystem::path> synth_dataset(const std::filesystem::path& root,
                                                 const std::vector<std::string>& specs, const PipelineConfig& config);

struct ViewsManifest {
  std::size_t points = 0;
  std::uint64_t cloud_seed = 0;
  double tau = kDefaultDepthTolerance;
  std::vector<Camera> cameras;
  bool has_features = false;
  std::vector<std::string> mask_levels;
};

void write_views_manifest(const std::filesystem::path& path, const ViewsManifest& manifest);
ViewsManifest read_views_manifest(const std::filesystem::path& path);

// Samples the cloud, renders the cameras and, for synthetic objects, writes
// oracle features and masks at every level in config.mask_levels.
ViewsManifest export_views(const std::filesystem::path& dir, const PipelineConfig& config);

struct ObjectData {
  std::string id;
  std::filesystem::path dir;
  TriangleMesh mesh;
  SampledCloud cloud;
  ViewSet views;
  ViewsManifest manifest;
};

// Mesh, cloud and re-rendered visibility. Throws FormatError when the views are not exported.
ObjectData load_object(const std::filesystem::path& dir);

std::vector<FeatureMap> load_features(const ObjectData& object);
std::vector<std::vector<MaskMap>> load_masks(const ObjectData& object);

DistillObject load_distill_object(const std::filesystem::path& dir);

struct FitRecord {
  std::filesystem::path backbone;
  std::uint64_t seed = 0;
  int iterations = 0;
  double final_loss = 0.0;
  double wall_seconds = 0.0;
};

std::filesystem::path field_path(const std::filesystem::path& dir);
bool has_field(const std::filesystem::path& dir);
void write_fit_record(const std::filesystem::path& dir, const FitRecord& record);
FitRecord read_fit_record(const std::filesystem::path& dir);

// Fits and saves the field, fit.json and the training log (fit_log.jsonl).
FitResult fit_object(const ObjectData& object, const Backbone& backbone, const std::filesystem::path& backbone_path,
                     const PipelineConfig& config, const FitCallback& on_iteration = {});

// "1.00" style key used in file names and caches.
std::string scale_key(double scale);

struct SegmentOutput {
  Segmentation segmentation;
  MeshSegmentation mesh;
  std::filesystem::path stem;
};

// Saves seg/, pred/ and a coloured cloud for one segmentation.
SegmentOutput write_segment_outputs(const ObjectData& object, const Segmentation& seg, const std::string& category);

}  // namespace sp3d
