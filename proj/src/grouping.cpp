#include "sp3d/grouping.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <string>

#include "json.hpp"
#include "sp3d/error.hpp"

namespace sp3d {

using nlohmann::json;

std::vector<std::uint32_t> covered_points(std::span<const std::uint32_t> pixels, const ViewRender& render) {
  std::vector<std::uint32_t> pts;
  pts.reserve(pixels.size());
  for (auto px : pixels) {
    if (px >= render.point_of_pixel.size()) throw InvalidArgument("mask pixel index out of range");
    if (auto p = render.point_of_pixel[px]; p >= 0) pts.push_back(static_cast<std::uint32_t>(p));
  }
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  return pts;
}

namespace {

double scale_of_points(std::span<const std::uint32_t> pts, const SampledCloud& cloud, double epsilon) {
  if (pts.empty()) throw InvalidArgument("mask_scale: mask covers zero points");
  Vec3 mean;
  for (auto p : pts) mean += cloud.points[p];
  mean = mean / static_cast<double>(pts.size());
  Vec3 var;
  for (auto p : pts) {
    Vec3 d = cloud.points[p] - mean;
    var += Vec3{d.x * d.x, d.y * d.y, d.z * d.z};
  }
  var = var / static_cast<double>(pts.size());
  return epsilon * std::sqrt(var.x + var.y + var.z);
}

}  // namespace

double mask_scale(std::span<const std::uint32_t> pixels, const ViewRender& render, const SampledCloud& cloud,
                  double epsilon) {
  return scale_of_points(covered_points(pixels, render), cloud, epsilon);
}

MaskImage prepare_mask_image(std::size_t view, const ViewRender& render, const MaskMap& masks,
                             const SampledCloud& cloud, const MaskImageOptions& options) {
  if (masks.width != render.width || masks.height != render.height)
    throw InvalidArgument("mask map resolution does not match view " + std::to_string(view));
  std::map<std::uint16_t, std::vector<std::uint32_t>> by_id;
  for (std::size_t px = 0; px < masks.ids.size(); ++px)
    if (masks.ids[px] != 0) by_id[masks.ids[px]].push_back(static_cast<std::uint32_t>(px));

  MaskImage image;
  image.view = view;
  for (auto& [id, pixels] : by_id) {
    MaskRecord rec;
    rec.view = view;
    rec.id = id;
    rec.points = covered_points(pixels, render);
    if (rec.points.size() < std::max<std::size_t>(options.min_mask_points, 1)) continue;
    rec.scale = scale_of_points(rec.points, cloud, options.epsilon);
    const auto mask_index = static_cast<std::uint16_t>(image.masks.size());
    for (auto px : pixels) {
      if (auto p = render.point_of_pixel[px]; p >= 0) {
        image.valid_points.push_back(static_cast<std::uint32_t>(p));
        image.valid_mask.push_back(mask_index);
      }
    }
    rec.pixels = std::move(pixels);
    image.masks.push_back(std::move(rec));
  }
  return image;
}

std::vector<MaskImage> prepare_mask_images(const ViewSet& views, const std::vector<std::vector<MaskMap>>& masks_per_view,
                                           const SampledCloud& cloud, const MaskImageOptions& options,
                                           std::vector<std::size_t>* skipped) {
  if (masks_per_view.size() != views.size()) throw InvalidArgument("need one mask list per view");
  std::vector<MaskImage> images;
  for (std::size_t k = 0; k < views.size(); ++k) {
    for (const MaskMap& m : masks_per_view[k]) {
      MaskImage img = prepare_mask_image(k, views.renders[k], m, cloud, options);
      if (img.valid_points.empty()) {
        if (skipped) skipped->push_back(k);
        continue;
      }
      images.push_back(std::move(img));
    }
  }
  return images;
}

std::vector<PixelPair> sample_pairs(const std::vector<MaskImage>& images, const PairSampling& sampling,
                                    std::mt19937_64& rng) {
  if (images.empty()) throw InvalidArgument("sample_pairs: no mask images with valid pixels");
  if (sampling.views_per_iter < 1 || sampling.pixels_per_view < 2)
    throw InvalidArgument("sample_pairs: need >= 1 view and >= 2 pixels per view");
  std::uniform_int_distribution<std::size_t> pick_image(0, images.size() - 1);
  std::vector<PixelPair> pairs;
  pairs.reserve(static_cast<std::size_t>(sampling.views_per_iter) * (sampling.pixels_per_view / 2));
  std::vector<std::size_t> drawn(static_cast<std::size_t>(sampling.pixels_per_view));
  for (int v = 0; v < sampling.views_per_iter; ++v) {
    const MaskImage& img = images[pick_image(rng)];
    std::uniform_int_distribution<std::size_t> pick_pixel(0, img.valid_points.size() - 1);
    for (auto& d : drawn) d = pick_pixel(rng);
    std::shuffle(drawn.begin(), drawn.end(), rng);
    for (std::size_t t = 0; t + 1 < drawn.size(); t += 2) {
      std::size_t a = drawn[t], b = drawn[t + 1];
      const MaskRecord& anchor = img.masks[img.valid_mask[a]];
      pairs.push_back({img.valid_points[a], img.valid_points[b], img.valid_mask[a] == img.valid_mask[b], anchor.scale});
    }
  }
  return pairs;
}

double contrastive_loss(std::span<const double> fi, std::span<const double> fj, bool same_mask, double margin) {
  if (fi.size() != fj.size()) throw InvalidArgument("contrastive_loss: dimension mismatch");
  double d2 = 0.0;
  for (std::size_t k = 0; k < fi.size(); ++k) d2 += (fi[k] - fj[k]) * (fi[k] - fj[k]);
  double dist = std::sqrt(d2);
  return same_mask ? dist : std::max(0.0, margin - dist);
}

// ---------------------------------------------------------------------------

GroupingField field_init(const FieldConfig& config, int backbone_dim, std::uint64_t seed) {
  if (config.head_layers < 1 || config.skip_layers < 1) throw InvalidArgument("field_init: layer counts must be >= 1");
  GroupingField field;
  field.config = config;
  const int s = field.scale_dim();
  std::vector<int> head{backbone_dim + s};
  for (int l = 0; l + 1 < config.head_layers; ++l) head.push_back(config.head_hidden);
  head.push_back(config.feature_dim);
  field.head = mlp_init(head, seed * 2 + 11);
  if (config.use_skip) {
    std::vector<int> skip{config.position_encoding.output_dim(3) + 6 + s};
    for (int l = 0; l + 1 < config.skip_layers; ++l) skip.push_back(config.skip_hidden);
    skip.push_back(config.feature_dim);
    field.skip = mlp_init(skip, seed * 2 + 12);
  }
  return field;
}

FieldInputs field_inputs(const Matrix& backbone_features, const SampledCloud& cloud, const FieldConfig& config) {
  if (backbone_features.rows() != static_cast<Eigen::Index>(cloud.size()))
    throw InvalidArgument("field_inputs: backbone features do not match cloud size");
  FieldInputs in;
  in.backbone = backbone_features;
  const int pe = config.position_encoding.output_dim(3);
  in.skip.resize(backbone_features.rows(), pe + 6);
  std::vector<double> buf(static_cast<std::size_t>(pe));
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.points[i];
    double xyz[3] = {p.x, p.y, p.z};
    posenc(xyz, config.position_encoding, buf);
    auto r = static_cast<Eigen::Index>(i);
    for (int c = 0; c < pe; ++c) in.skip(r, c) = buf[c];
    for (int c = 0; c < 3; ++c) {
      in.skip(r, pe + c) = cloud.normals[i][c];
      in.skip(r, pe + 3 + c) = cloud.colors[i][c];
    }
  }
  return in;
}

void encode_scale(double scale, int frequencies, std::span<double> out) {
  out[0] = scale;
  posenc(std::span<const double>(&scale, 1), PosEnc{frequencies, false}, out.subspan(1));
}

namespace {

struct FieldBatch {
  Matrix head_in, skip_in;
};

FieldBatch assemble(const GroupingField& field, const FieldInputs& inputs, std::span<const std::uint32_t> points,
                    std::span<const double> scales) {
  const auto rows = static_cast<Eigen::Index>(points.size());
  const int s = field.scale_dim();
  const auto cb = inputs.backbone.cols(), cs = inputs.skip.cols();
  FieldBatch b;
  b.head_in.resize(rows, cb + s);
  if (field.config.use_skip) b.skip_in.resize(rows, cs + s);
  std::vector<double> enc(static_cast<std::size_t>(s));
  double last = std::nan("");
  for (Eigen::Index r = 0; r < rows; ++r) {
    double sc = scales.size() == 1 ? scales[0] : scales[static_cast<std::size_t>(r)];
    if (!(sc >= 0.0)) throw InvalidArgument("grouping feature: scale must be non-negative");
    if (sc != last) {
      encode_scale(sc, field.config.scale_frequencies, enc);
      last = sc;
    }
    auto p = static_cast<Eigen::Index>(points[static_cast<std::size_t>(r)]);
    b.head_in.row(r).head(cb) = inputs.backbone.row(p);
    if (field.config.use_skip) b.skip_in.row(r).head(cs) = inputs.skip.row(p);
    for (int c = 0; c < s; ++c) {
      b.head_in(r, cb + c) = enc[c];
      if (field.config.use_skip) b.skip_in(r, cs + c) = enc[c];
    }
  }
  return b;
}

}  // namespace

Matrix grouping_features(const GroupingField& field, const FieldInputs& inputs, std::span<const std::uint32_t> points,
                         std::span<const double> scales) {
  if (scales.size() != 1 && scales.size() != points.size())
    throw InvalidArgument("grouping_features: need one scale or one per point");
  FieldBatch b = assemble(field, inputs, points, scales);
  Matrix f = mlp_forward(field.head, b.head_in);
  if (field.config.use_skip) f += mlp_forward(field.skip, b.skip_in);
  return f;
}

Matrix grouping_features(const GroupingField& field, const FieldInputs& inputs, double scale) {
  std::vector<std::uint32_t> all(inputs.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<std::uint32_t>(i);
  return grouping_features(field, inputs, all, std::span<const double>(&scale, 1));
}

std::vector<double> grouping_feature(const GroupingField& field, const FieldInputs& inputs, std::uint32_t point,
                                     double scale) {
  Matrix f = grouping_features(field, inputs, std::span<const std::uint32_t>(&point, 1), std::span<const double>(&scale, 1));
  return std::vector<double>(f.data(), f.data() + f.size());
}

double FitResult::final_loss(std::size_t window) const {
  if (curve.empty()) return std::nan("");
  window = std::min(window, curve.size());
  double sum = 0.0;
  for (std::size_t i = curve.size() - window; i < curve.size(); ++i) sum += curve[i].loss;
  return sum / static_cast<double>(window);
}

namespace {

FitResult run_fit(GroupingField field, const FieldInputs& inputs, const std::vector<MaskImage>& images,
                  const FitConfig& config, const FitCallback& on_iteration) {
  if (config.iterations < 0) throw InvalidArgument("fit: negative iteration count");
  const bool skip = field.config.use_skip;
  const double margin = field.config.margin;
  Adam adam({.lr = config.lr});
  std::mt19937_64 rng(config.seed ^ 0x94D049BB133111EBull);
  MlpGrads head_grads = MlpGrads::zeros_like(field.head);
  MlpGrads skip_grads = skip ? MlpGrads::zeros_like(field.skip) : MlpGrads{};
  FitResult result;
  auto t0 = std::chrono::steady_clock::now();

  std::vector<std::uint32_t> points;
  std::vector<double> scales;
  for (int it = 0; it < config.iterations; ++it) {
    auto pairs = sample_pairs(images, config.sampling, rng);
    const auto P = static_cast<Eigen::Index>(pairs.size());
    points.resize(2 * pairs.size());
    scales.resize(2 * pairs.size());
    for (std::size_t q = 0; q < pairs.size(); ++q) {
      points[2 * q] = pairs[q].i;
      points[2 * q + 1] = pairs[q].j;
      scales[2 * q] = scales[2 * q + 1] = pairs[q].scale;
    }
    FieldBatch batch = assemble(field, inputs, points, scales);
    MlpTape head_tape, skip_tape;
    Matrix f = mlp_forward(field.head, batch.head_in, head_tape);
    if (skip) f += mlp_forward(field.skip, batch.skip_in, skip_tape);

    Matrix grad = Matrix::Zero(f.rows(), f.cols());
    double loss = 0.0, pos_d = 0.0, neg_d = 0.0;
    int n_pos = 0, n_neg = 0;
    for (Eigen::Index q = 0; q < P; ++q) {
      Eigen::RowVectorXd diff = f.row(2 * q) - f.row(2 * q + 1);
      double dist = diff.norm();
      Eigen::RowVectorXd unit = dist > 1e-12 ? Eigen::RowVectorXd(diff / dist) : Eigen::RowVectorXd::Zero(diff.size());
      double coeff = 0.0;
      if (pairs[static_cast<std::size_t>(q)].same_mask) {
        loss += dist;
        coeff = 1.0;
        pos_d += dist;
        ++n_pos;
      } else {
        if (dist < margin) {
          loss += margin - dist;
          coeff = -1.0;
        }
        neg_d += dist;
        ++n_neg;
      }
      grad.row(2 * q) = (coeff / P) * unit;
      grad.row(2 * q + 1) = (-coeff / P) * unit;
    }
    loss /= static_cast<double>(P);
    if (!std::isfinite(loss)) throw ComputeError("fit: loss diverged at iteration " + std::to_string(it));

    head_grads.set_zero();
    mlp_backward(field.head, head_tape, grad, head_grads);
    auto params = field.head.parameters();
    auto grads = head_grads.gradients();
    if (skip) {
      skip_grads.set_zero();
      mlp_backward(field.skip, skip_tape, grad, skip_grads);
      for (auto s : field.skip.parameters()) params.push_back(s);
      for (auto g : skip_grads.gradients()) grads.push_back(g);
    }
    adam.step(params, grads);

    FitStats stats{it, loss, n_pos ? pos_d / n_pos : 0.0, n_neg ? neg_d / n_neg : 0.0,
                   std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()};
    result.curve.push_back(stats);
    if (on_iteration) on_iteration(stats);
  }
  result.field = std::move(field);
  return result;
}

}  // namespace

FitResult fit(const FieldInputs& inputs, const std::vector<MaskImage>& images, const FitConfig& config,
              const FitCallback& on_iteration) {
  GroupingField field = field_init(config.field, static_cast<int>(inputs.backbone.cols()), config.seed);
  return run_fit(std::move(field), inputs, images, config, on_iteration);
}

FitResult fine_tune(const GroupingField& field, const FieldInputs& inputs, const std::vector<MaskImage>& images,
                    const FitConfig& config, const FitCallback& on_iteration) {
  return run_fit(field, inputs, images, config, on_iteration);
}

void save_field(const std::filesystem::path& path, const GroupingField& field) {
  std::vector<NamedTensor> tensors;
  append_mlp(tensors, "head", field.head);
  if (field.config.use_skip) append_mlp(tensors, "skip", field.skip);
  save_checkpoint(path, tensors);
  const FieldConfig& c = field.config;
  json meta{{"version", 1},
            {"feature_dim", c.feature_dim},
            {"margin", c.margin},
            {"epsilon", c.epsilon},
            {"use_skip", c.use_skip},
            {"scale_encoding", {{"include_raw", true}, {"n_frequencies", c.scale_frequencies}}},
            {"position_encoding",
             {{"n_frequencies", c.position_encoding.n_frequencies}, {"include_input", c.position_encoding.include_input}}}};
  auto side = path;
  side += ".json";
  std::ofstream(side) << meta.dump(2) << '\n';
}

GroupingField load_field(const std::filesystem::path& path) {
  auto side = path;
  side += ".json";
  std::ifstream in(side);
  if (!in) throw FormatError("missing field metadata " + side.string());
  json meta;
  try {
    meta = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed field metadata: ") + e.what());
  }
  GroupingField field;
  FieldConfig& c = field.config;
  c.feature_dim = meta.at("feature_dim").get<int>();
  c.margin = meta.at("margin").get<double>();
  c.epsilon = meta.at("epsilon").get<double>();
  c.use_skip = meta.at("use_skip").get<bool>();
  c.scale_frequencies = meta.at("scale_encoding").at("n_frequencies").get<int>();
  c.position_encoding.n_frequencies = meta.at("position_encoding").at("n_frequencies").get<int>();
  c.position_encoding.include_input = meta.at("position_encoding").at("include_input").get<bool>();
  auto tensors = load_checkpoint(path);
  field.head = mlp_from_tensors(tensors, "head");
  c.head_layers = static_cast<int>(field.head.num_layers());
  c.head_hidden = field.head.widths.size() > 2 ? field.head.widths[1] : c.feature_dim;
  if (c.use_skip) {
    field.skip = mlp_from_tensors(tensors, "skip");
    c.skip_layers = static_cast<int>(field.skip.num_layers());
    c.skip_hidden = field.skip.widths.size() > 2 ? field.skip.widths[1] : c.feature_dim;
    if (field.skip.out_dim() != c.feature_dim) throw FormatError("field checkpoint: skip output dimension mismatch");
  }
  if (field.head.out_dim() != c.feature_dim) throw FormatError("field checkpoint: head output dimension mismatch");
  return field;
}

}  // namespace sp3d
