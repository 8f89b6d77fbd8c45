#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sp3d/geometry.hpp"
#include "sp3d/grouping.hpp"
#include "sp3d/numerics.hpp"
#include "sp3d/render.hpp"

namespace sp3d {

inline constexpr int kNoise = -1;

// max(20, n / 200)
std::size_t default_min_cluster_size(std::size_t n);

struct ClusterOptions {
  std::size_t min_cluster_size = 0;  // 0 = default_min_cluster_size(N)
  bool dbscan = false;               // plain DBSCAN instead of HDBSCAN
  // Clusters that split off at a feature distance below this are merged back
  // into their parent (0 = plain excess of mass).
  double selection_epsilon = 0.1;
};

// Density clustering of the rows of `features`. Returns labels 0..k-1 or kNoise.
// Throws ComputeError("no clusters at this scale") when everything is noise.
std::vector<int> cluster(const Matrix& features, const ClusterOptions& options = {});

std::vector<int> hdbscan(const Matrix& features, std::size_t min_cluster_size, double selection_epsilon = 0.0);
std::vector<int> dbscan(const Matrix& features, std::size_t min_points);
// Knee of the ascending k-distance curve (max distance to the chord).
double knee_epsilon(const Matrix& features, std::size_t k);

// Every noise point takes the label of the nearest cluster centroid (ties to the lower id).
std::vector<int> assign_noise(std::span<const int> labels, const Matrix& features);

struct Segmentation {
  double scale = 0.0;
  std::vector<int> labels;  // per point, contiguous ids from 0
  std::vector<std::size_t> counts;
  std::vector<double> confidence;  // counts / N

  std::size_t num_parts() const { return counts.size(); }
  std::vector<std::uint32_t> part_points(int part) const;
};

// Relabels ids by first occurrence and fills counts and confidences. No noise allowed.
Segmentation make_segmentation(std::span<const int> labels, double scale);

Segmentation segment_features(const Matrix& features, double scale, const ClusterOptions& options = {});
Segmentation segment_at_scale(const GroupingField& field, const FieldInputs& inputs, double scale,
                              const ClusterOptions& options = {});

inline const std::vector<double> kDefaultSweepScales{0.0, 0.5, 1.0, 1.5, 2.0};

struct SweepEntry {
  double scale = 0.0;
  std::optional<Segmentation> segmentation;
  std::string error;  // set when segmentation is empty
};

std::vector<SweepEntry> segment_sweep(const GroupingField& field, const FieldInputs& inputs,
                                      const std::vector<double>& scales = kDefaultSweepScales,
                                      const ClusterOptions& options = {});

struct MeshSegmentation {
  std::vector<int> labels;   // per face
  std::vector<bool> filled;  // true when the face had no sampled point
};

MeshSegmentation vote_mesh(const Segmentation& seg, const SampledCloud& cloud, const TriangleMesh& mesh);

// --- clicks ----------------------------------------------------------------

struct Click {
  std::optional<Vec3> point;
  Vec3 origin, direction;  // used when point is empty
};

// Nearest cloud point to the click. Rays are cast against the mesh first.
// Throws InvalidArgument("ray misses object").
std::uint32_t resolve_click(const Click& click, const SampledCloud& cloud, const TriangleMesh& mesh);

struct ClickResult {
  std::uint32_t point = 0;
  int part = 0;
  std::vector<std::uint32_t> points;
};

ClickResult click_segment(const Segmentation& seg, std::uint32_t point);
ClickResult click_segment(const GroupingField& field, const FieldInputs& inputs, const SampledCloud& cloud,
                          const TriangleMesh& mesh, const Click& click, double scale,
                          const ClusterOptions& options = {});

// --- user masks ------------------------------------------------------------

struct UserMask {
  std::size_t view = 0;
  MaskMap masks;
};

struct MaskSegmentConfig {
  FitConfig fit;  // iterations / sampling / lr for the fine-tune
  ClusterOptions cluster;
  MaskSegmentConfig() { fit.iterations = 300; }
};

struct MaskSegmentResult {
  Segmentation segmentation;
  std::vector<double> mask_scales;  // one per user mask, in view then id order
  double scale = 0.0;
  std::vector<bool> visible;  // per point: seen by at least one user-mask view
};

MaskSegmentResult segment_from_masks(const GroupingField& field, const FieldInputs& inputs, const SampledCloud& cloud,
                                     const ViewSet& views, const std::vector<UserMask>& masks,
                                     const MaskSegmentConfig& config = {});

// --- export ----------------------------------------------------------------

// `<stem>.json` header plus `<stem>.labels` (u16 per point).
void save_segmentation(const std::filesystem::path& stem, const Segmentation& seg);
Segmentation load_segmentation(const std::filesystem::path& stem);
void save_mesh_segmentation(const std::filesystem::path& stem, const MeshSegmentation& seg);
MeshSegmentation load_mesh_segmentation(const std::filesystem::path& stem);

std::array<std::uint8_t, 3> part_color(int part);
void save_colored_cloud(const std::filesystem::path& path, const SampledCloud& cloud, std::span<const int> labels);

}  // namespace sp3d
