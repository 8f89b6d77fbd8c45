#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "sp3d/geometry.hpp"
#include "sp3d/numerics.hpp"
#include "sp3d/providers.hpp"
#include "sp3d/render.hpp"

namespace sp3d {

struct BackboneConfig {
  int hidden = 64;
  int out_dim = 32;
  int k_local = 16;
  int k_global = 64;
};

/// Small point network standing in for a large point transformer:
///   stem(xyz, normal, color) -> mean over k_local neighbours -> mid
///   -> mean over k_global neighbours -> trunk -> out_dim features.
/// Each stage sees its own row concatenated with the pooled neighbourhood.
struct Backbone {
  BackboneConfig config;
  Mlp stem, mid, trunk;

  std::vector<std::span<float>> parameters();
};

Backbone backbone_init(const BackboneConfig& config, std::uint64_t seed);

// Flattened N x k neighbour tables (each point lists itself first).
struct Neighborhoods {
  int k_local = 0, k_global = 0;
  std::vector<std::uint32_t> local, global;
};

Neighborhoods build_neighborhoods(const SampledCloud& cloud, const BackboneConfig& config);

Matrix point_inputs(const SampledCloud& cloud);

struct BackboneTape {
  MlpTape stem, mid, trunk;
};

Matrix backbone_forward(const Backbone& net, const Matrix& inputs, const Neighborhoods& nbrs, BackboneTape* tape = nullptr);

struct BackboneGrads {
  MlpGrads stem, mid, trunk;
  static BackboneGrads zeros_like(const Backbone& net);
  std::vector<std::span<const double>> gradients() const;
};

void backbone_backward(const Backbone& net, const Neighborhoods& nbrs, const BackboneTape& tape, const Matrix& out_grad,
                       BackboneGrads& grads);

Matrix encode_points(const Backbone& net, const SampledCloud& cloud);

void save_backbone(const std::filesystem::path& path, const Backbone& net);
Backbone load_backbone(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Feature lifting

// Bilinear sample at continuous pixel coordinates (pixel centres at +0.5).
void sample_bilinear(const FeatureMap& map, double u, double v, std::span<double> out);

struct LiftedView {
  Matrix features;             // N x C
  std::vector<bool> fallback;  // true where the point was occluded
};

LiftedView lift_view(const ViewRender& render, const FeatureMap& features, const Matrix& f3d);

// Mean over views of the lifted features. With `visible_only`, fallback
// entries are left out of the mean (points never seen keep their F3D row).
Matrix average_views(const std::vector<LiftedView>& lifted, bool visible_only = false);

// ---------------------------------------------------------------------------
// Pretraining

// Visible-point features of one view, sampled once up front.
struct VisibleFeatures {
  bool canonical = false;
  std::vector<std::uint32_t> points;
  Matrix features;  // points.size() x C
};

VisibleFeatures gather_visible(const ViewRender& render, const Camera& camera, const FeatureMap& features);

struct DistillObject {
  SampledCloud cloud;
  std::vector<VisibleFeatures> views;
};

struct PretrainConfig {
  BackboneConfig backbone;
  int steps = 2000;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  int fixed_views_per_step = 6;
  int random_views_per_step = 2;
  bool visible_only_average = false;
};

struct PretrainStats {
  int step;
  double loss;
  double wall_ms;
};

struct PretrainResult {
  Backbone backbone;
  std::vector<PretrainStats> curve;
};

PretrainResult pretrain(const std::vector<DistillObject>& dataset, const PretrainConfig& config,
                        const std::function<void(const PretrainStats&)>& on_step = {});

}  // namespace sp3d
