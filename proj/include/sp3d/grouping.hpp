#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "sp3d/distill.hpp"
#include "sp3d/geometry.hpp"
#include "sp3d/numerics.hpp"
#include "sp3d/providers.hpp"
#include "sp3d/render.hpp"

namespace sp3d {

inline constexpr double kDefaultScaleFactor = 10.0;

/// One 2D mask lifted to the cloud.
struct MaskRecord {
  std::size_t view = 0;
  std::uint16_t id = 0;
  std::vector<std::uint32_t> pixels;  // flat pixel indices
  std::vector<std::uint32_t> points;  // unique covered points, ascending
  double scale = 0.0;
};

// Scale of the points covered by `pixels`:
// sqrt((e*sx)^2 + (e*sy)^2 + (e*sz)^2) with population standard deviations.
double mask_scale(std::span<const std::uint32_t> pixels, const ViewRender& render, const SampledCloud& cloud,
                  double epsilon = kDefaultScaleFactor);

std::vector<std::uint32_t> covered_points(std::span<const std::uint32_t> pixels, const ViewRender& render);

/// A mask map of one view with its usable pixels. A pixel is usable when it
/// carries a kept mask id and maps to a visible point.
struct MaskImage {
  std::size_t view = 0;
  std::vector<MaskRecord> masks;
  std::vector<std::uint32_t> valid_points;  // per usable pixel: point index
  std::vector<std::uint16_t> valid_mask;    // per usable pixel: index into `masks`
};

struct MaskImageOptions {
  double epsilon = kDefaultScaleFactor;
  std::size_t min_mask_points = 5;
};

// Views that end up with no usable pixels are dropped; `skipped` receives their indices.
std::vector<MaskImage> prepare_mask_images(const ViewSet& views, const std::vector<std::vector<MaskMap>>& masks_per_view,
                                           const SampledCloud& cloud, const MaskImageOptions& options = {},
                                           std::vector<std::size_t>* skipped = nullptr);

MaskImage prepare_mask_image(std::size_t view, const ViewRender& render, const MaskMap& masks,
                             const SampledCloud& cloud, const MaskImageOptions& options = {});

struct PixelPair {
  std::uint32_t i = 0, j = 0;
  bool same_mask = false;
  double scale = 0.0;
};

struct PairSampling {
  int views_per_iter = 90;
  int pixels_per_view = 256;
};

// Draws views with replacement, pixels uniformly per view, then shuffles and
// pairs consecutive pixels. Negative pairs use the anchor pixel's mask scale.
std::vector<PixelPair> sample_pairs(const std::vector<MaskImage>& images, const PairSampling& sampling,
                                    std::mt19937_64& rng);

// Margin loss for one pair: d for positives, max(0, m - d) for negatives.
double contrastive_loss(std::span<const double> fi, std::span<const double> fj, bool same_mask, double margin);

struct FieldConfig {
  int feature_dim = 32;
  int head_hidden = 64;
  int head_layers = 6;
  int skip_hidden = 64;
  int skip_layers = 4;
  int scale_frequencies = 4;
  PosEnc position_encoding{6, true};
  double margin = 1.0;
  double epsilon = kDefaultScaleFactor;
  bool use_skip = true;
};

/// Scale-conditioned grouping field: F(p, s) = head(F3D_p ++ enc(s)) + skip(pe(xyz_p) ++ n_p ++ c_p ++ enc(s)),
/// with enc(s) = [s, posenc(s)]. The backbone features are precomputed and never updated.
struct GroupingField {
  FieldConfig config;
  Mlp head;
  Mlp skip;  // empty when config.use_skip is false

  int scale_dim() const { return 1 + 2 * config.scale_frequencies; }
};

GroupingField field_init(const FieldConfig& config, int backbone_dim, std::uint64_t seed);

// Per-point inputs that do not depend on the scale.
struct FieldInputs {
  Matrix backbone;  // N x C
  Matrix skip;      // N x (pe + 6)

  std::size_t size() const { return static_cast<std::size_t>(backbone.rows()); }
};

FieldInputs field_inputs(const Matrix& backbone_features, const SampledCloud& cloud, const FieldConfig& config);

void encode_scale(double scale, int frequencies, std::span<double> out);

Matrix grouping_features(const GroupingField& field, const FieldInputs& inputs,
                         std::span<const std::uint32_t> points, std::span<const double> scales);
Matrix grouping_features(const GroupingField& field, const FieldInputs& inputs, double scale);
std::vector<double> grouping_feature(const GroupingField& field, const FieldInputs& inputs, std::uint32_t point,
                                     double scale);

struct FitConfig {
  int iterations = 3000;
  PairSampling sampling;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  MaskImageOptions masks;
  FieldConfig field;
};

struct FitStats {
  int iteration;
  double loss;
  double positive_distance;
  double negative_distance;
  double wall_ms;
};

struct FitResult {
  GroupingField field;
  std::vector<FitStats> curve;

  // Mean loss over the last `window` iterations.
  double final_loss(std::size_t window = 100) const;
};

using FitCallback = std::function<void(const FitStats&)>;

FitResult fit(const FieldInputs& inputs, const std::vector<MaskImage>& images, const FitConfig& config,
              const FitCallback& on_iteration = {});

// Continues training an existing field (same optimizer settings, fresh moments).
FitResult fine_tune(const GroupingField& field, const FieldInputs& inputs, const std::vector<MaskImage>& images,
                    const FitConfig& config, const FitCallback& on_iteration = {});

// head.* / skip.* tensors plus `<path>.json` metadata.
void save_field(const std::filesystem::path& path, const GroupingField& field);
GroupingField load_field(const std::filesystem::path& path);

}  // namespace sp3d
