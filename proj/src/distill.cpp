#include "sp3d/distill.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "sp3d/error.hpp"

namespace sp3d {

std::vector<std::span<float>> Backbone::parameters() {
  auto out = stem.parameters();
  for (auto* m : {&mid, &trunk})
    for (auto s : m->parameters()) out.push_back(s);
  return out;
}

Backbone backbone_init(const BackboneConfig& config, std::uint64_t seed) {
  const int h = config.hidden;
  Backbone net;
  net.config = config;
  net.stem = mlp_init({9, h, h}, seed * 3 + 1);
  net.mid = mlp_init({2 * h, h, h}, seed * 3 + 2);
  net.trunk = mlp_init({2 * h, h, config.out_dim}, seed * 3 + 3);
  return net;
}

Neighborhoods build_neighborhoods(const SampledCloud& cloud, const BackboneConfig& config) {
  const std::size_t n = cloud.size();
  Neighborhoods nb;
  nb.k_local = static_cast<int>(std::min<std::size_t>(config.k_local, n));
  nb.k_global = static_cast<int>(std::min<std::size_t>(config.k_global, n));
  KdTree tree(cloud.points);
  nb.local.reserve(n * nb.k_local);
  nb.global.reserve(n * nb.k_global);
  for (std::size_t i = 0; i < n; ++i) {
    auto ids = tree.knn(cloud.points[i], static_cast<std::size_t>(std::max(nb.k_global, nb.k_local)));
    // (distance, index) ordering makes the local list a prefix of the global one.
    std::vector<std::uint32_t> local(ids.begin(), ids.begin() + nb.k_local);
    // Duplicated points can tie at distance zero; keep the point itself first.
    for (auto* list : {&ids, &local}) {
      auto self = std::find(list->begin(), list->end(), static_cast<std::uint32_t>(i));
      if (self != list->end()) std::rotate(list->begin(), self, self + 1);
    }
    nb.global.insert(nb.global.end(), ids.begin(), ids.begin() + nb.k_global);
    nb.local.insert(nb.local.end(), local.begin(), local.end());
  }
  return nb;
}

Matrix point_inputs(const SampledCloud& cloud) {
  Matrix x(static_cast<Eigen::Index>(cloud.size()), 9);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    auto r = static_cast<Eigen::Index>(i);
    for (int c = 0; c < 3; ++c) {
      x(r, c) = cloud.points[i][c];
      x(r, 3 + c) = cloud.normals[i][c];
      x(r, 6 + c) = cloud.colors[i][c];
    }
  }
  return x;
}

namespace {

Matrix pool_mean(const Matrix& h, const std::vector<std::uint32_t>& table, int k) {
  Matrix out = Matrix::Zero(h.rows(), h.cols());
  const double inv = 1.0 / k;
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    const std::uint32_t* nb = table.data() + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < k; ++j) out.row(i) += h.row(nb[j]);
    out.row(i) *= inv;
  }
  return out;
}

// Adjoint of pool_mean.
void unpool_add(const Matrix& grad_pooled, const std::vector<std::uint32_t>& table, int k, Matrix& grad_h) {
  const double inv = 1.0 / k;
  for (Eigen::Index i = 0; i < grad_pooled.rows(); ++i) {
    const std::uint32_t* nb = table.data() + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < k; ++j) grad_h.row(nb[j]) += inv * grad_pooled.row(i);
  }
}

Matrix concat_cols(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a, b;
  return out;
}

}  // namespace

Matrix backbone_forward(const Backbone& net, const Matrix& inputs, const Neighborhoods& nbrs, BackboneTape* tape) {
  BackboneTape local;
  BackboneTape& t = tape ? *tape : local;
  Matrix h1 = mlp_forward(net.stem, inputs, t.stem);
  Matrix h2 = mlp_forward(net.mid, concat_cols(h1, pool_mean(h1, nbrs.local, nbrs.k_local)), t.mid);
  return mlp_forward(net.trunk, concat_cols(h2, pool_mean(h2, nbrs.global, nbrs.k_global)), t.trunk);
}

BackboneGrads BackboneGrads::zeros_like(const Backbone& net) {
  return {MlpGrads::zeros_like(net.stem), MlpGrads::zeros_like(net.mid), MlpGrads::zeros_like(net.trunk)};
}

std::vector<std::span<const double>> BackboneGrads::gradients() const {
  auto out = stem.gradients();
  for (const auto* g : {&mid, &trunk})
    for (auto s : g->gradients()) out.push_back(s);
  return out;
}

void backbone_backward(const Backbone& net, const Neighborhoods& nbrs, const BackboneTape& tape, const Matrix& out_grad,
                       BackboneGrads& grads) {
  const Eigen::Index h = net.config.hidden;
  Matrix dz3 = mlp_backward(net.trunk, tape.trunk, out_grad, grads.trunk);
  Matrix dh2 = dz3.leftCols(h);
  unpool_add(dz3.rightCols(h), nbrs.global, nbrs.k_global, dh2);
  Matrix dz2 = mlp_backward(net.mid, tape.mid, dh2, grads.mid);
  Matrix dh1 = dz2.leftCols(h);
  unpool_add(dz2.rightCols(h), nbrs.local, nbrs.k_local, dh1);
  mlp_backward(net.stem, tape.stem, dh1, grads.stem);
}

Matrix encode_points(const Backbone& net, const SampledCloud& cloud) {
  return backbone_forward(net, point_inputs(cloud), build_neighborhoods(cloud, net.config));
}

void save_backbone(const std::filesystem::path& path, const Backbone& net) {
  std::vector<NamedTensor> tensors;
  append_mlp(tensors, "stem", net.stem);
  append_mlp(tensors, "mid", net.mid);
  append_mlp(tensors, "trunk", net.trunk);
  tensors.push_back({"config.knn",
                     {{2}, {static_cast<float>(net.config.k_local), static_cast<float>(net.config.k_global)}}});
  save_checkpoint(path, tensors);
}

Backbone load_backbone(const std::filesystem::path& path) {
  auto tensors = load_checkpoint(path);
  Backbone net;
  net.stem = mlp_from_tensors(tensors, "stem");
  net.mid = mlp_from_tensors(tensors, "mid");
  net.trunk = mlp_from_tensors(tensors, "trunk");
  net.config.hidden = net.stem.out_dim();
  net.config.out_dim = net.trunk.out_dim();
  auto knn = std::find_if(tensors.begin(), tensors.end(), [](const NamedTensor& t) { return t.name == "config.knn"; });
  if (knn == tensors.end() || knn->tensor.data.size() != 2) throw FormatError("backbone checkpoint lacks config.knn");
  net.config.k_local = static_cast<int>(knn->tensor.data[0]);
  net.config.k_global = static_cast<int>(knn->tensor.data[1]);
  if (net.stem.in_dim() != 9 || net.mid.in_dim() != 2 * net.config.hidden || net.trunk.in_dim() != 2 * net.mid.out_dim())
    throw FormatError("backbone checkpoint has inconsistent layer shapes");
  return net;
}

// ---------------------------------------------------------------------------

void sample_bilinear(const FeatureMap& map, double u, double v, std::span<double> out) {
  double fx = std::clamp(u - 0.5, 0.0, static_cast<double>(map.width - 1));
  double fy = std::clamp(v - 0.5, 0.0, static_cast<double>(map.height - 1));
  int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
  int x1 = std::min(x0 + 1, map.width - 1), y1 = std::min(y0 + 1, map.height - 1);
  double ax = fx - x0, ay = fy - y0;
  const float* p00 = map.pixel(x0, y0);
  const float* p10 = map.pixel(x1, y0);
  const float* p01 = map.pixel(x0, y1);
  const float* p11 = map.pixel(x1, y1);
  for (int c = 0; c < map.channels; ++c)
    out[c] = (1 - ay) * ((1 - ax) * p00[c] + ax * p10[c]) + ay * ((1 - ax) * p01[c] + ax * p11[c]);
}

LiftedView lift_view(const ViewRender& render, const FeatureMap& features, const Matrix& f3d) {
  if (render.width != features.width || render.height != features.height)
    throw InvalidArgument("lift_view: render and feature map resolutions differ");
  if (f3d.rows() != static_cast<Eigen::Index>(render.pixel_of_point.size()) || f3d.cols() != features.channels)
    throw InvalidArgument("lift_view: F3D shape does not match cloud size and feature channels");
  LiftedView out{f3d, std::vector<bool>(render.pixel_of_point.size(), true)};
  std::vector<double> buf(static_cast<std::size_t>(features.channels));
  for (std::size_t i = 0; i < render.pixel_of_point.size(); ++i) {
    const PixelRef& ref = render.pixel_of_point[i];
    if (!ref.visible) continue;
    sample_bilinear(features, ref.u, ref.v, buf);
    for (int c = 0; c < features.channels; ++c) out.features(static_cast<Eigen::Index>(i), c) = buf[c];
    out.fallback[i] = false;
  }
  return out;
}

Matrix average_views(const std::vector<LiftedView>& lifted, bool visible_only) {
  if (lifted.empty()) throw InvalidArgument("average_views: need at least one view");
  const Matrix& first = lifted.front().features;
  for (const auto& l : lifted)
    if (l.features.rows() != first.rows() || l.features.cols() != first.cols())
      throw InvalidArgument("average_views: views disagree on shape");
  if (!visible_only) {
    Matrix sum = Matrix::Zero(first.rows(), first.cols());
    for (const auto& l : lifted) sum += l.features;
    return sum / static_cast<double>(lifted.size());
  }
  Matrix sum = Matrix::Zero(first.rows(), first.cols());
  std::vector<int> seen(static_cast<std::size_t>(first.rows()), 0);
  for (const auto& l : lifted)
    for (Eigen::Index i = 0; i < first.rows(); ++i)
      if (!l.fallback[static_cast<std::size_t>(i)]) {
        sum.row(i) += l.features.row(i);
        ++seen[static_cast<std::size_t>(i)];
      }
  for (Eigen::Index i = 0; i < first.rows(); ++i) {
    int n = seen[static_cast<std::size_t>(i)];
    sum.row(i) = n > 0 ? Eigen::RowVectorXd(sum.row(i) / n) : Eigen::RowVectorXd(first.row(i));
  }
  return sum;
}

VisibleFeatures gather_visible(const ViewRender& render, const Camera& camera, const FeatureMap& features) {
  VisibleFeatures out;
  out.canonical = camera.is_axis_aligned();
  for (std::size_t i = 0; i < render.pixel_of_point.size(); ++i)
    if (render.pixel_of_point[i].visible) out.points.push_back(static_cast<std::uint32_t>(i));
  out.features.resize(static_cast<Eigen::Index>(out.points.size()), features.channels);
  std::vector<double> buf(static_cast<std::size_t>(features.channels));
  for (std::size_t j = 0; j < out.points.size(); ++j) {
    const PixelRef& ref = render.pixel_of_point[out.points[j]];
    sample_bilinear(features, ref.u, ref.v, buf);
    for (int c = 0; c < features.channels; ++c) out.features(static_cast<Eigen::Index>(j), c) = buf[c];
  }
  return out;
}

PretrainResult pretrain(const std::vector<DistillObject>& dataset, const PretrainConfig& config,
                        const std::function<void(const PretrainStats&)>& on_step) {
  if (dataset.empty()) throw InvalidArgument("pretrain: empty dataset");
  const int channels = config.backbone.out_dim;
  for (const auto& obj : dataset) {
    if (obj.views.empty()) throw InvalidArgument("pretrain: object without views");
    for (const auto& v : obj.views)
      if (v.features.cols() != channels)
        throw InvalidArgument("pretrain: feature dimension " + std::to_string(v.features.cols()) +
                              " does not match backbone output " + std::to_string(channels));
  }

  std::vector<Matrix> inputs;
  std::vector<Neighborhoods> nbrs;
  for (const auto& obj : dataset) {
    inputs.push_back(point_inputs(obj.cloud));
    nbrs.push_back(build_neighborhoods(obj.cloud, config.backbone));
  }

  PretrainResult result{backbone_init(config.backbone, config.seed), {}};
  Backbone& net = result.backbone;
  Adam adam({.lr = config.lr});
  std::mt19937_64 rng(config.seed ^ 0xD1B54A32D192ED03ull);
  auto grads = BackboneGrads::zeros_like(net);
  auto t0 = std::chrono::steady_clock::now();

  for (int step = 0; step < config.steps; ++step) {
    const std::size_t o = static_cast<std::size_t>(step) % dataset.size();
    const DistillObject& obj = dataset[o];

    // View subset: every canonical view up to the quota plus a few random ones.
    std::vector<std::size_t> canonical, others, chosen;
    for (std::size_t k = 0; k < obj.views.size(); ++k) (obj.views[k].canonical ? canonical : others).push_back(k);
    std::shuffle(others.begin(), others.end(), rng);
    for (std::size_t i = 0; i < canonical.size() && static_cast<int>(i) < config.fixed_views_per_step; ++i)
      chosen.push_back(canonical[i]);
    std::size_t want_random = static_cast<std::size_t>(config.random_views_per_step) +
                              (config.fixed_views_per_step - std::min<std::size_t>(canonical.size(), config.fixed_views_per_step));
    for (std::size_t i = 0; i < others.size() && i < want_random; ++i) chosen.push_back(others[i]);

    BackboneTape tape;
    Matrix f3d = backbone_forward(net, inputs[o], nbrs[o], &tape);
    const Eigen::Index n = f3d.rows();
    Matrix sum = Matrix::Zero(n, channels);
    Eigen::VectorXd seen = Eigen::VectorXd::Zero(n);
    for (std::size_t k : chosen) {
      const VisibleFeatures& v = obj.views[k];
      for (std::size_t j = 0; j < v.points.size(); ++j) {
        sum.row(v.points[j]) += v.features.row(static_cast<Eigen::Index>(j));
        seen[v.points[j]] += 1.0;
      }
    }
    // The fallback rows hold the current prediction but are treated as constants.
    const double views = static_cast<double>(chosen.size());
    Matrix target(n, channels);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (config.visible_only_average)
        target.row(i) = seen[i] > 0 ? Eigen::RowVectorXd(sum.row(i) / seen[i]) : Eigen::RowVectorXd(f3d.row(i));
      else
        target.row(i) = (sum.row(i) + (views - seen[i]) * f3d.row(i)) / views;
    }
    Matrix diff = f3d - target;
    const double denom = static_cast<double>(n) * channels;
    double loss = diff.squaredNorm() / denom;
    if (!std::isfinite(loss))
      throw ComputeError("pretrain: non-finite loss at step " + std::to_string(step) + " (object " + std::to_string(o) +
                         ", lr " + std::to_string(config.lr) + ")");

    grads.stem.set_zero();
    grads.mid.set_zero();
    grads.trunk.set_zero();
    backbone_backward(net, nbrs[o], tape, (2.0 / denom) * diff, grads);
    adam.step(net.parameters(), grads.gradients());

    PretrainStats stats{step, loss,
                        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()};
    result.curve.push_back(stats);
    if (on_step) on_step(stats);
  }
  return result;
}

}  // namespace sp3d
