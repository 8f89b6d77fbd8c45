#include "sp3d/segment.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <future>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include "binary_io.hpp"
#include "json.hpp"
#include "sp3d/error.hpp"

namespace sp3d {

using nlohmann::json;

std::size_t default_min_cluster_size(std::size_t n) { return std::max<std::size_t>(20, n / 200); }

namespace {

constexpr double kLambdaCap = 1e12;
constexpr double kInf = std::numeric_limits<double>::infinity();

Eigen::VectorXd squared_distances(const Matrix& x, Eigen::Index i) {
  return (x.rowwise() - x.row(i)).rowwise().squaredNorm();
}

// Distance to the k-th nearest row, the row itself counted as the first.
std::vector<double> core_distances(const Matrix& x, std::size_t k) {
  const auto n = static_cast<std::size_t>(x.rows());
  std::vector<double> core(n);
  std::vector<double> row(n);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::VectorXd d2 = squared_distances(x, static_cast<Eigen::Index>(i));
    std::copy(d2.data(), d2.data() + n, row.begin());
    row[i] = 0.0;
    std::nth_element(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(k - 1), row.end());
    core[i] = std::sqrt(row[k - 1]);
  }
  return core;
}

struct Edge {
  std::uint32_t a, b;
  double w;
};

// Prim on the dense mutual-reachability graph, ties to the lower vertex.
std::vector<Edge> mutual_reachability_mst(const Matrix& x, const std::vector<double>& core) {
  const auto n = static_cast<std::size_t>(x.rows());
  std::vector<bool> in_tree(n, false);
  std::vector<double> best(n, kInf);
  std::vector<std::uint32_t> from(n, 0);
  std::vector<Edge> edges;
  edges.reserve(n - 1);
  std::size_t cur = 0;
  in_tree[0] = true;
  for (std::size_t step = 1; step < n; ++step) {
    Eigen::VectorXd d2 = squared_distances(x, static_cast<Eigen::Index>(cur));
    std::size_t next = n;
    double next_w = kInf;
    for (std::size_t j = 0; j < n; ++j) {
      if (in_tree[j]) continue;
      double mr = std::max({core[cur], core[j], std::sqrt(d2[static_cast<Eigen::Index>(j)])});
      if (mr < best[j]) {
        best[j] = mr;
        from[j] = static_cast<std::uint32_t>(cur);
      }
      if (next == n || best[j] < next_w) {
        next = j;
        next_w = best[j];
      }
    }
    edges.push_back({from[next], static_cast<std::uint32_t>(next), next_w});
    in_tree[next] = true;
    cur = next;
  }
  std::stable_sort(edges.begin(), edges.end(), [](const Edge& l, const Edge& r) { return l.w < r.w; });
  return edges;
}

struct Merge {
  std::uint32_t left, right;
  double dist;
  std::size_t size;
};

std::vector<Merge> single_linkage(const std::vector<Edge>& edges, std::size_t n) {
  std::vector<std::uint32_t> parent(2 * n - 1);
  std::vector<std::size_t> size(2 * n - 1, 1);
  std::iota(parent.begin(), parent.end(), 0u);
  auto find = [&](std::uint32_t v) {
    std::uint32_t r = v;
    while (parent[r] != r) r = parent[r];
    while (parent[v] != r) {
      std::uint32_t nx = parent[v];
      parent[v] = r;
      v = nx;
    }
    return r;
  };
  std::vector<Merge> tree;
  tree.reserve(n - 1);
  auto next = static_cast<std::uint32_t>(n);
  for (const Edge& e : edges) {
    std::uint32_t ra = find(e.a), rb = find(e.b);
    tree.push_back({ra, rb, e.w, size[ra] + size[rb]});
    parent[ra] = parent[rb] = next;
    size[next] = size[ra] + size[rb];
    ++next;
  }
  return tree;
}

struct Condensed {
  std::uint32_t parent, child;
  double lambda;
  std::size_t size;
};

std::vector<Condensed> condense_tree(const std::vector<Merge>& tree, std::size_t n, std::size_t min_size) {
  const std::uint32_t root = static_cast<std::uint32_t>(2 * n - 2);
  auto node_size = [&](std::uint32_t v) { return v < n ? std::size_t{1} : tree[v - n].size; };
  auto leaves_of = [&](std::uint32_t start, auto&& visit) {
    std::vector<std::uint32_t> stack{start};
    while (!stack.empty()) {
      std::uint32_t v = stack.back();
      stack.pop_back();
      if (v < n) {
        visit(v);
      } else {
        stack.push_back(tree[v - n].right);
        stack.push_back(tree[v - n].left);
      }
    }
  };

  std::vector<std::uint32_t> relabel(2 * n - 1, 0);
  std::vector<bool> ignore(2 * n - 1, false);
  relabel[root] = static_cast<std::uint32_t>(n);
  auto next_label = static_cast<std::uint32_t>(n + 1);
  std::vector<Condensed> out;

  std::deque<std::uint32_t> queue{root};
  while (!queue.empty()) {
    std::uint32_t node = queue.front();
    queue.pop_front();
    if (node < n) continue;
    if (ignore[node]) continue;
    const Merge& m = tree[node - n];
    queue.push_back(m.left);
    queue.push_back(m.right);
    double lambda = m.dist > 0.0 ? std::min(1.0 / m.dist, kLambdaCap) : kLambdaCap;
    std::size_t lc = node_size(m.left), rc = node_size(m.right);
    auto drop = [&](std::uint32_t sub) {
      if (sub >= n) ignore[sub] = true;
      leaves_of(sub, [&](std::uint32_t leaf) { out.push_back({relabel[node], leaf, lambda, 1}); });
      // inner nodes below a dropped subtree are never split again
      std::vector<std::uint32_t> stack{sub};
      while (!stack.empty()) {
        std::uint32_t v = stack.back();
        stack.pop_back();
        if (v < n) continue;
        ignore[v] = true;
        stack.push_back(tree[v - n].left);
        stack.push_back(tree[v - n].right);
      }
    };
    if (lc >= min_size && rc >= min_size) {
      relabel[m.left] = next_label++;
      out.push_back({relabel[node], relabel[m.left], lambda, lc});
      relabel[m.right] = next_label++;
      out.push_back({relabel[node], relabel[m.right], lambda, rc});
    } else if (lc < min_size && rc < min_size) {
      drop(m.left);
      drop(m.right);
    } else if (lc < min_size) {
      relabel[m.right] = relabel[node];
      drop(m.left);
    } else {
      relabel[m.left] = relabel[node];
      drop(m.right);
    }
  }
  return out;
}

// Excess-of-mass selection; the root may be selected. Selected clusters that
// split off below `epsilon` are replaced by their nearest ancestor born at or
// above it. Returns labels per point.
std::vector<int> extract_clusters(const std::vector<Condensed>& ct, std::size_t n, double epsilon) {
  std::uint32_t max_label = static_cast<std::uint32_t>(n);
  for (const auto& e : ct) max_label = std::max({max_label, e.parent, e.size > 1 ? e.child : 0u});
  const std::size_t nc = max_label - n + 1;
  std::vector<double> birth(nc, 0.0), stability(nc, 0.0);
  std::vector<std::int64_t> cluster_parent(nc, -1);
  std::vector<std::vector<std::uint32_t>> children(nc);
  for (const auto& e : ct)
    if (e.size > 1) {
      birth[e.child - n] = e.lambda;
      cluster_parent[e.child - n] = e.parent;
      children[e.parent - n].push_back(e.child);
    }
  for (const auto& e : ct) stability[e.parent - n] += (e.lambda - birth[e.parent - n]) * static_cast<double>(e.size);

  std::vector<bool> selected(nc, true);
  for (std::size_t c = nc; c-- > 0;) {
    double subtree = 0.0;
    for (auto ch : children[c]) subtree += stability[ch - n];
    if (!children[c].empty() && subtree > stability[c]) {
      selected[c] = false;
      stability[c] = subtree;
    } else {
      std::vector<std::uint32_t> stack(children[c].begin(), children[c].end());
      while (!stack.empty()) {
        std::uint32_t v = stack.back();
        stack.pop_back();
        selected[v - n] = false;
        for (auto ch : children[v - n]) stack.push_back(ch);
      }
    }
  }
  if (epsilon > 0.0) {
    auto birth_distance = [&](std::size_t c) { return birth[c] > 0.0 ? 1.0 / birth[c] : kInf; };
    std::vector<bool> lifted(nc, false);
    for (std::size_t c = 0; c < nc; ++c) {
      if (!selected[c]) continue;
      std::size_t a = c;
      while (birth_distance(a) < epsilon && cluster_parent[a] >= 0) a = static_cast<std::size_t>(cluster_parent[a]) - n;
      lifted[a] = true;
    }
    for (std::size_t c = 0; c < nc; ++c) {
      bool covered = false;
      for (auto p = cluster_parent[c]; p >= 0 && !covered; p = cluster_parent[static_cast<std::size_t>(p) - n])
        covered = lifted[static_cast<std::size_t>(p) - n];
      selected[c] = lifted[c] && !covered;
    }
  }
  std::vector<int> id_of(nc, kNoise);
  int next = 0;
  for (std::size_t c = 0; c < nc; ++c)
    if (selected[c]) id_of[c] = next++;

  std::vector<int> labels(n, kNoise);
  for (const auto& e : ct) {
    if (e.size != 1 || e.child >= n) continue;
    std::int64_t c = e.parent;
    while (c >= 0 && id_of[static_cast<std::size_t>(c) - n] == kNoise) c = cluster_parent[static_cast<std::size_t>(c) - n];
    if (c >= 0) labels[e.child] = id_of[static_cast<std::size_t>(c) - n];
  }
  return labels;
}

void check_features(const Matrix& x, std::size_t min_size) {
  if (x.rows() == 0) throw InvalidArgument("cluster: empty feature matrix");
  if (min_size < 2) throw InvalidArgument("cluster: min_cluster_size must be >= 2");
  if (static_cast<std::size_t>(x.rows()) < min_size)
    throw InvalidArgument("cluster: fewer points than min_cluster_size");
  if (!x.allFinite()) throw InvalidArgument("cluster: non-finite features");
}

}  // namespace

std::vector<int> hdbscan(const Matrix& features, std::size_t min_cluster_size, double selection_epsilon) {
  check_features(features, min_cluster_size);
  const auto n = static_cast<std::size_t>(features.rows());
  auto core = core_distances(features, min_cluster_size);
  auto tree = single_linkage(mutual_reachability_mst(features, core), n);
  return extract_clusters(condense_tree(tree, n, min_cluster_size), n, selection_epsilon);
}

double knee_epsilon(const Matrix& features, std::size_t k) {
  check_features(features, k);
  auto kd = core_distances(features, k);
  std::sort(kd.begin(), kd.end());
  const std::size_t n = kd.size();
  if (n < 3 || kd.back() == kd.front()) return kd.back();
  // chord from (0, kd[0]) to (n-1, kd[n-1]); coordinates scaled to the unit square
  double best = -1.0;
  std::size_t arg = n - 1;
  const double span = kd.back() - kd.front();
  for (std::size_t i = 0; i < n; ++i) {
    double xi = static_cast<double>(i) / static_cast<double>(n - 1);
    double yi = (kd[i] - kd.front()) / span;
    double gap = xi - yi;  // below the chord for a convex curve
    if (gap > best) {
      best = gap;
      arg = i;
    }
  }
  return kd[arg];
}

std::vector<int> dbscan(const Matrix& features, std::size_t min_points) {
  double eps = knee_epsilon(features, min_points);
  const auto n = static_cast<std::size_t>(features.rows());
  const double eps2 = eps * eps;
  std::vector<std::vector<std::uint32_t>> nbrs(n);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::VectorXd d2 = squared_distances(features, static_cast<Eigen::Index>(i));
    for (std::size_t j = 0; j < n; ++j)
      if (d2[static_cast<Eigen::Index>(j)] <= eps2) nbrs[i].push_back(static_cast<std::uint32_t>(j));
  }
  std::vector<int> labels(n, kNoise);
  int next = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != kNoise || nbrs[i].size() < min_points) continue;
    std::deque<std::uint32_t> queue{static_cast<std::uint32_t>(i)};
    labels[i] = next;
    while (!queue.empty()) {
      std::uint32_t v = queue.front();
      queue.pop_front();
      if (nbrs[v].size() < min_points) continue;
      for (auto w : nbrs[v])
        if (labels[w] == kNoise) {
          labels[w] = next;
          queue.push_back(w);
        }
    }
    ++next;
  }
  return labels;
}

std::vector<int> cluster(const Matrix& features, const ClusterOptions& options) {
  std::size_t m = options.min_cluster_size ? options.min_cluster_size
                                           : default_min_cluster_size(static_cast<std::size_t>(features.rows()));
  auto labels = options.dbscan ? dbscan(features, m) : hdbscan(features, m, options.selection_epsilon);
  if (std::all_of(labels.begin(), labels.end(), [](int l) { return l == kNoise; }))
    throw ComputeError("no clusters at this scale");
  return labels;
}

std::vector<int> assign_noise(std::span<const int> labels, const Matrix& features) {
  if (labels.size() != static_cast<std::size_t>(features.rows()))
    throw InvalidArgument("assign_noise: label count does not match features");
  std::map<int, std::pair<Eigen::RowVectorXd, std::size_t>> sums;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    auto [it, fresh] = sums.try_emplace(labels[i], Eigen::RowVectorXd::Zero(features.cols()), 0);
    it->second.first += features.row(static_cast<Eigen::Index>(i));
    ++it->second.second;
  }
  if (sums.empty()) throw InvalidArgument("assign_noise: no clustered points");
  std::vector<int> ids;
  Matrix centroids(static_cast<Eigen::Index>(sums.size()), features.cols());
  for (auto& [id, acc] : sums) {
    centroids.row(static_cast<Eigen::Index>(ids.size())) = acc.first / static_cast<double>(acc.second);
    ids.push_back(id);
  }
  std::vector<int> out(labels.begin(), labels.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] >= 0) continue;
    Eigen::VectorXd d2 = (centroids.rowwise() - features.row(static_cast<Eigen::Index>(i))).rowwise().squaredNorm();
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < d2.size(); ++c)
      if (d2[c] < d2[best]) best = c;
    out[i] = ids[static_cast<std::size_t>(best)];
  }
  return out;
}

std::vector<std::uint32_t> Segmentation::part_points(int part) const {
  std::vector<std::uint32_t> pts;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == part) pts.push_back(static_cast<std::uint32_t>(i));
  return pts;
}

Segmentation make_segmentation(std::span<const int> labels, double scale) {
  Segmentation seg;
  seg.scale = scale;
  seg.labels.resize(labels.size());
  std::map<int, int> remap;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) throw InvalidArgument("make_segmentation: unassigned point");
    auto [it, fresh] = remap.try_emplace(labels[i], static_cast<int>(remap.size()));
    if (fresh) seg.counts.push_back(0);
    seg.labels[i] = it->second;
    ++seg.counts[static_cast<std::size_t>(it->second)];
  }
  for (auto c : seg.counts) seg.confidence.push_back(static_cast<double>(c) / static_cast<double>(labels.size()));
  return seg;
}

Segmentation segment_features(const Matrix& features, double scale, const ClusterOptions& options) {
  auto labels = cluster(features, options);
  return make_segmentation(assign_noise(labels, features), scale);
}

Segmentation segment_at_scale(const GroupingField& field, const FieldInputs& inputs, double scale,
                              const ClusterOptions& options) {
  return segment_features(grouping_features(field, inputs, scale), scale, options);
}

std::vector<SweepEntry> segment_sweep(const GroupingField& field, const FieldInputs& inputs,
                                      const std::vector<double>& scales, const ClusterOptions& options) {
  std::vector<std::future<Segmentation>> jobs;
  for (double s : scales)
    jobs.push_back(std::async(std::launch::async, [&, s] { return segment_at_scale(field, inputs, s, options); }));
  std::vector<SweepEntry> out;
  for (std::size_t k = 0; k < scales.size(); ++k) {
    SweepEntry e;
    e.scale = scales[k];
    try {
      e.segmentation = jobs[k].get();
    } catch (const std::exception& ex) {
      e.error = ex.what();
    }
    out.push_back(std::move(e));
  }
  return out;
}

MeshSegmentation vote_mesh(const Segmentation& seg, const SampledCloud& cloud, const TriangleMesh& mesh) {
  if (seg.labels.size() != cloud.size()) throw InvalidArgument("vote_mesh: segmentation does not match cloud");
  const std::size_t nf = mesh.num_faces();
  std::vector<std::map<int, std::size_t>> votes(nf);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (cloud.face_of[i] >= nf) throw InvalidArgument("vote_mesh: cloud was not sampled from this mesh");
    ++votes[cloud.face_of[i]][seg.labels[i]];
  }
  MeshSegmentation out;
  out.labels.assign(nf, kNoise);
  out.filled.assign(nf, false);
  std::vector<std::uint32_t> voted;
  std::vector<Vec3> centroids;
  for (std::size_t f = 0; f < nf; ++f) {
    if (votes[f].empty()) continue;
    std::size_t best = 0;
    for (auto [label, count] : votes[f])
      if (count > best) {
        best = count;
        out.labels[f] = label;
      }
    voted.push_back(static_cast<std::uint32_t>(f));
    centroids.push_back(mesh.face_centroid(f));
  }
  if (voted.empty()) throw InvalidArgument("vote_mesh: no face has a sampled point");
  if (voted.size() == nf) return out;
  KdTree tree(std::move(centroids));
  for (std::size_t f = 0; f < nf; ++f) {
    if (!votes[f].empty()) continue;
    out.labels[f] = out.labels[voted[tree.knn(mesh.face_centroid(f), 1)[0]]];
    out.filled[f] = true;
  }
  return out;
}

std::uint32_t resolve_click(const Click& click, const SampledCloud& cloud, const TriangleMesh& mesh) {
  if (cloud.size() == 0) throw InvalidArgument("click: empty cloud");
  Vec3 target;
  if (click.point) {
    target = *click.point;
  } else {
    if (norm(click.direction) == 0.0) throw InvalidArgument("click: zero ray direction");
    auto hit = intersect_ray(mesh, click.origin, normalized(click.direction));
    if (!hit) throw InvalidArgument("ray misses object");
    target = hit->point;
  }
  std::uint32_t best = 0;
  double best_d = kInf;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    double d = norm2(cloud.points[i] - target);
    if (d < best_d) {
      best_d = d;
      best = static_cast<std::uint32_t>(i);
    }
  }
  return best;
}

ClickResult click_segment(const Segmentation& seg, std::uint32_t point) {
  if (point >= seg.labels.size()) throw InvalidArgument("click: point index out of range");
  ClickResult r;
  r.point = point;
  r.part = seg.labels[point];
  r.points = seg.part_points(r.part);
  return r;
}

ClickResult click_segment(const GroupingField& field, const FieldInputs& inputs, const SampledCloud& cloud,
                          const TriangleMesh& mesh, const Click& click, double scale, const ClusterOptions& options) {
  std::uint32_t p = resolve_click(click, cloud, mesh);
  return click_segment(segment_at_scale(field, inputs, scale, options), p);
}

MaskSegmentResult segment_from_masks(const GroupingField& field, const FieldInputs& inputs, const SampledCloud& cloud,
                                     const ViewSet& views, const std::vector<UserMask>& masks,
                                     const MaskSegmentConfig& config) {
  if (masks.empty()) throw InvalidArgument("segment_from_masks: no user masks");
  MaskImageOptions opts{field.config.epsilon, 1};
  std::vector<MaskImage> images;
  MaskSegmentResult result;
  result.visible.assign(cloud.size(), false);
  for (const UserMask& um : masks) {
    if (um.view >= views.size()) throw InvalidArgument("segment_from_masks: unknown view " + std::to_string(um.view));
    const ViewRender& render = views.renders[um.view];
    std::set<std::uint16_t> ids;
    for (auto id : um.masks.ids)
      if (id) ids.insert(id);
    if (ids.empty()) throw InvalidArgument("user mask covers zero points");
    MaskImage img = prepare_mask_image(um.view, render, um.masks, cloud, opts);
    if (img.masks.size() != ids.size()) throw InvalidArgument("user mask covers zero points");
    for (const auto& m : img.masks) result.mask_scales.push_back(m.scale);
    for (std::size_t i = 0; i < cloud.size(); ++i)
      if (render.pixel_of_point[i].visible) result.visible[i] = true;
    images.push_back(std::move(img));
  }
  result.scale = std::accumulate(result.mask_scales.begin(), result.mask_scales.end(), 0.0) /
                 static_cast<double>(result.mask_scales.size());

  GroupingField tuned = fine_tune(field, inputs, images, config.fit).field;
  Matrix all = grouping_features(tuned, inputs, result.scale);
  std::vector<Eigen::Index> vis;
  for (std::size_t i = 0; i < cloud.size(); ++i)
    if (result.visible[i]) vis.push_back(static_cast<Eigen::Index>(i));
  Matrix vis_features = all(vis, Eigen::all);
  auto vis_labels = cluster(vis_features, config.cluster);
  std::vector<int> labels(cloud.size(), kNoise);
  for (std::size_t k = 0; k < vis.size(); ++k) labels[static_cast<std::size_t>(vis[k])] = vis_labels[k];
  result.segmentation = make_segmentation(assign_noise(labels, all), result.scale);
  return result;
}

// ---------------------------------------------------------------------------

namespace {

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  auto p = stem;
  p += suffix;
  return p;
}

void write_labels(const std::filesystem::path& path, std::span<const int> labels) {
  std::vector<std::uint16_t> raw(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] > 0xFFFF) throw InvalidArgument("label out of u16 range");
    raw[i] = static_cast<std::uint16_t>(labels[i]);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  detail::put_span<std::uint16_t>(out, raw);
}

std::vector<int> read_labels(const std::filesystem::path& path, std::size_t n) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  std::vector<std::uint16_t> raw(n);
  detail::get_span<std::uint16_t>(in, raw, "label file");
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes in label file");
  return {raw.begin(), raw.end()};
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace

void save_segmentation(const std::filesystem::path& stem, const Segmentation& seg) {
  json j{{"version", 1},
         {"scale", seg.scale},
         {"num_points", seg.labels.size()},
         {"num_parts", seg.num_parts()},
         {"counts", seg.counts},
         {"confidences", seg.confidence}};
  std::ofstream(with_suffix(stem, ".json")) << j.dump(2) << '\n';
  write_labels(with_suffix(stem, ".labels"), seg.labels);
}

Segmentation load_segmentation(const std::filesystem::path& stem) {
  json j = read_json(with_suffix(stem, ".json"));
  try {
    auto labels = read_labels(with_suffix(stem, ".labels"), j.at("num_points").get<std::size_t>());
    Segmentation seg = make_segmentation(labels, j.at("scale").get<double>());
    if (seg.labels != labels) throw FormatError("segmentation labels are not in first-occurrence order");
    return seg;
  } catch (const json::exception& e) {
    throw FormatError(std::string("segmentation header: ") + e.what());
  }
}

void save_mesh_segmentation(const std::filesystem::path& stem, const MeshSegmentation& seg) {
  std::vector<std::size_t> filled;
  for (std::size_t f = 0; f < seg.filled.size(); ++f)
    if (seg.filled[f]) filled.push_back(f);
  int parts = seg.labels.empty() ? 0 : *std::max_element(seg.labels.begin(), seg.labels.end()) + 1;
  json j{{"version", 1}, {"num_faces", seg.labels.size()}, {"num_parts", parts}, {"filled_faces", filled}};
  std::ofstream(with_suffix(stem, ".json")) << j.dump(2) << '\n';
  write_labels(with_suffix(stem, ".labels"), seg.labels);
}

MeshSegmentation load_mesh_segmentation(const std::filesystem::path& stem) {
  json j = read_json(with_suffix(stem, ".json"));
  try {
    MeshSegmentation seg;
    std::size_t nf = j.at("num_faces").get<std::size_t>();
    seg.labels = read_labels(with_suffix(stem, ".labels"), nf);
    seg.filled.assign(nf, false);
    for (auto f : j.at("filled_faces").get<std::vector<std::size_t>>()) {
      if (f >= nf) throw FormatError("filled face index out of range");
      seg.filled[f] = true;
    }
    return seg;
  } catch (const json::exception& e) {
    throw FormatError(std::string("mesh segmentation header: ") + e.what());
  }
}

std::array<std::uint8_t, 3> part_color(int part) {
  if (part < 0) return {128, 128, 128};
  double h = std::fmod(0.11 + 0.618033988749895 * part, 1.0) * 6.0;
  double s = 0.65, v = 0.95;
  int i = static_cast<int>(h);
  double f = h - i, p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r, g, b;
  switch (i % 6) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
  auto c = [](double x) { return static_cast<std::uint8_t>(std::lround(x * 255.0)); };
  return {c(r), c(g), c(b)};
}

void save_colored_cloud(const std::filesystem::path& path, const SampledCloud& cloud, std::span<const int> labels) {
  if (labels.size() != cloud.size()) throw InvalidArgument("save_colored_cloud: label count mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "ply\nformat binary_little_endian 1.0\nelement vertex " << cloud.size()
      << "\nproperty float x\nproperty float y\nproperty float z\n"
         "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (int a = 0; a < 3; ++a) detail::put(out, static_cast<float>(cloud.points[i][a]));
    for (auto ch : part_color(labels[i])) detail::put(out, ch);
  }
}

}  // namespace sp3d
