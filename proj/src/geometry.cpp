#include "sp3d/geometry.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <queue>
#include <random>
#include <sstream>
#include <string>

#include "sp3d/error.hpp"

namespace sp3d {

double TriangleMesh::face_area(std::size_t f) const {
  const Face& t = faces[f];
  return 0.5 * norm(cross(vertices[t[1]] - vertices[t[0]], vertices[t[2]] - vertices[t[0]]));
}

Vec3 TriangleMesh::face_centroid(std::size_t f) const {
  const Face& t = faces[f];
  return (vertices[t[0]] + vertices[t[1]] + vertices[t[2]]) / 3.0;
}

Vec3 TriangleMesh::face_color(std::size_t f) const {
  const Face& t = faces[f];
  return (vertex_colors[t[0]] + vertex_colors[t[1]] + vertex_colors[t[2]]) / 3.0;
}

void TriangleMesh::finalize() {
  if (faces.empty()) throw FormatError("zero faces");
  for (const Face& t : faces)
    for (auto v : t)
      if (v >= vertices.size()) throw FormatError("face index out of range");
  if (vertex_colors.size() != vertices.size()) vertex_colors.assign(vertices.size(), {0.5, 0.5, 0.5});
  face_normals.resize(faces.size());
  for (std::size_t f = 0; f < faces.size(); ++f) {
    const Face& t = faces[f];
    Vec3 n = cross(vertices[t[1]] - vertices[t[0]], vertices[t[2]] - vertices[t[0]]);
    double len = norm(n);
    // Degenerate faces carry zero area and are never sampled; any unit vector will do.
    face_normals[f] = len > 0.0 ? n / len : Vec3{0.0, 0.0, 1.0};
  }
}

namespace {

void add_polygon(TriangleMesh& mesh, const std::vector<long long>& poly) {
  if (poly.size() < 3) throw FormatError("face with fewer than 3 vertices");
  for (std::size_t i = 1; i + 1 < poly.size(); ++i) {
    for (auto idx : {poly[0], poly[i], poly[i + 1]})
      if (idx < 0) throw FormatError("negative face index");
    mesh.faces.push_back({static_cast<std::uint32_t>(poly[0]), static_cast<std::uint32_t>(poly[i]),
                          static_cast<std::uint32_t>(poly[i + 1])});
  }
}

TriangleMesh load_obj(std::istream& in) {
  TriangleMesh mesh;
  std::vector<Vec3> colors;
  bool any_color = false;
  std::string line;
  std::vector<long long> poly;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag)) continue;
    if (tag == "v") {
      Vec3 p, c{0.5, 0.5, 0.5};
      if (!(ls >> p.x >> p.y >> p.z)) throw FormatError("malformed vertex line: " + line);
      if (ls >> c.x >> c.y >> c.z) any_color = true;
      mesh.vertices.push_back(p);
      colors.push_back(c);
    } else if (tag == "f") {
      poly.clear();
      std::string tok;
      while (ls >> tok) {
        long long idx = std::stoll(tok.substr(0, tok.find('/')));
        // OBJ indices are 1-based; negative ones are relative to the end.
        idx = idx < 0 ? static_cast<long long>(mesh.vertices.size()) + idx : idx - 1;
        poly.push_back(idx);
      }
      add_polygon(mesh, poly);
    }
  }
  if (any_color) mesh.vertex_colors = std::move(colors);
  return mesh;
}

enum class PlyType { i8, u8, i16, u16, i32, u32, f32, f64 };

PlyType parse_ply_type(const std::string& s) {
  if (s == "char" || s == "int8") return PlyType::i8;
  if (s == "uchar" || s == "uint8") return PlyType::u8;
  if (s == "short" || s == "int16") return PlyType::i16;
  if (s == "ushort" || s == "uint16") return PlyType::u16;
  if (s == "int" || s == "int32") return PlyType::i32;
  if (s == "uint" || s == "uint32") return PlyType::u32;
  if (s == "float" || s == "float32") return PlyType::f32;
  if (s == "double" || s == "float64") return PlyType::f64;
  throw FormatError("unknown PLY type: " + s);
}

struct PlyProperty {
  std::string name;
  PlyType type;
  bool is_list = false;
  PlyType count_type = PlyType::u8;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> props;
};

template <typename T>
T read_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) throw FormatError("truncated PLY payload");
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

double read_binary_value(std::istream& in, PlyType t) {
  switch (t) {
    case PlyType::i8: return read_le<std::int8_t>(in);
    case PlyType::u8: return read_le<std::uint8_t>(in);
    case PlyType::i16: return read_le<std::int16_t>(in);
    case PlyType::u16: return read_le<std::uint16_t>(in);
    case PlyType::i32: return read_le<std::int32_t>(in);
    case PlyType::u32: return read_le<std::uint32_t>(in);
    case PlyType::f32: return read_le<float>(in);
    case PlyType::f64: return read_le<double>(in);
  }
  return 0.0;
}

bool is_integer_type(PlyType t) { return t != PlyType::f32 && t != PlyType::f64; }

TriangleMesh load_ply(std::istream& in) {
  std::string line;
  std::getline(in, line);
  if (line.rfind("ply", 0) != 0) throw FormatError("missing PLY magic");
  bool binary = false;
  std::vector<PlyElement> elements;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt == "binary_little_endian") binary = true;
      else if (fmt != "ascii") throw FormatError("unsupported PLY format: " + fmt);
    } else if (tag == "element") {
      PlyElement e;
      ls >> e.name >> e.count;
      elements.push_back(e);
    } else if (tag == "property") {
      if (elements.empty()) throw FormatError("PLY property before element");
      PlyProperty p;
      std::string type;
      ls >> type;
      if (type == "list") {
        std::string ct, it;
        ls >> ct >> it >> p.name;
        p.is_list = true;
        p.count_type = parse_ply_type(ct);
        p.type = parse_ply_type(it);
      } else {
        p.type = parse_ply_type(type);
        ls >> p.name;
      }
      elements.back().props.push_back(p);
    } else if (tag == "end_header") {
      break;
    }
  }

  TriangleMesh mesh;
  std::vector<Vec3> colors;
  bool any_color = false;
  std::vector<long long> poly;
  std::vector<double> values;
  for (const PlyElement& e : elements) {
    for (std::size_t i = 0; i < e.count; ++i) {
      Vec3 p, c{0.5, 0.5, 0.5};
      std::istringstream ls;
      if (!binary) {
        if (!std::getline(in, line)) throw FormatError("truncated PLY payload");
        ls.str(line);
      }
      auto next = [&](PlyType t) {
        if (binary) return read_binary_value(in, t);
        double v;
        if (!(ls >> v)) throw FormatError("truncated PLY element line");
        return v;
      };
      for (const PlyProperty& prop : e.props) {
        if (prop.is_list) {
          auto n = static_cast<std::size_t>(next(prop.count_type));
          values.resize(n);
          for (auto& v : values) v = next(prop.type);
          if (e.name == "face" && (prop.name == "vertex_indices" || prop.name == "vertex_index")) {
            poly.assign(values.begin(), values.end());
            add_polygon(mesh, poly);
          }
          continue;
        }
        double v = next(prop.type);
        if (e.name != "vertex") continue;
        double color_scale = is_integer_type(prop.type) ? 1.0 / 255.0 : 1.0;
        if (prop.name == "x") p.x = v;
        else if (prop.name == "y") p.y = v;
        else if (prop.name == "z") p.z = v;
        else if (prop.name == "red") { c.x = v * color_scale; any_color = true; }
        else if (prop.name == "green") { c.y = v * color_scale; any_color = true; }
        else if (prop.name == "blue") { c.z = v * color_scale; any_color = true; }
      }
      if (e.name == "vertex") {
        mesh.vertices.push_back(p);
        colors.push_back(c);
      }
    }
  }
  if (any_color) mesh.vertex_colors = std::move(colors);
  return mesh;
}

}  // namespace

TriangleMesh load_mesh(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open mesh file: " + path.string());
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  TriangleMesh mesh;
  if (ext == ".ply") mesh = load_ply(in);
  else if (ext == ".obj") mesh = load_obj(in);
  else throw FormatError("unsupported mesh extension: " + ext);
  mesh.finalize();
  return mesh;
}

void save_ply(const TriangleMesh& mesh, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "ply\nformat binary_little_endian 1.0\n"
      << "element vertex " << mesh.vertices.size() << "\n"
      << "property float x\nproperty float y\nproperty float z\n"
      << "property uchar red\nproperty uchar green\nproperty uchar blue\n"
      << "element face " << mesh.faces.size() << "\n"
      << "property list uchar int vertex_indices\nend_header\n";
  auto put = [&](auto v) {
    static_assert(std::endian::native == std::endian::little);
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
  };
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const Vec3& p = mesh.vertices[i];
    put(static_cast<float>(p.x));
    put(static_cast<float>(p.y));
    put(static_cast<float>(p.z));
    Vec3 c = i < mesh.vertex_colors.size() ? mesh.vertex_colors[i] : Vec3{0.5, 0.5, 0.5};
    for (double ch : {c.x, c.y, c.z})
      put(static_cast<std::uint8_t>(std::lround(std::clamp(ch, 0.0, 1.0) * 255.0)));
  }
  for (const Face& f : mesh.faces) {
    put(std::uint8_t{3});
    for (auto v : f) put(static_cast<std::int32_t>(v));
  }
}

void save_obj(const TriangleMesh& mesh, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out.precision(9);
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const Vec3& p = mesh.vertices[i];
    out << "v " << p.x << ' ' << p.y << ' ' << p.z;
    if (i < mesh.vertex_colors.size()) {
      const Vec3& c = mesh.vertex_colors[i];
      out << ' ' << c.x << ' ' << c.y << ' ' << c.z;
    }
    out << '\n';
  }
  for (const Face& f : mesh.faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
}

std::pair<TriangleMesh, NormalizationTransform> normalize_unit(const TriangleMesh& mesh) {
  if (mesh.vertices.empty() || mesh.faces.empty()) throw InvalidArgument("normalize_unit: empty mesh");
  Vec3 lo = mesh.vertices[0], hi = mesh.vertices[0];
  for (const Vec3& v : mesh.vertices) {
    lo = cwise_min(lo, v);
    hi = cwise_max(hi, v);
  }
  Vec3 extent = hi - lo;
  double longest = std::max({extent.x, extent.y, extent.z});
  if (!(longest > 0.0)) throw InvalidArgument("normalize_unit: mesh has zero extent on all axes");
  NormalizationTransform xf{-((lo + hi) * 0.5), 1.0 / longest};
  TriangleMesh out = mesh;
  for (Vec3& v : out.vertices) v = xf.apply(v);
  out.finalize();
  return {std::move(out), xf};
}

SampledCloud sample_surface(const TriangleMesh& mesh, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw InvalidArgument("sample_surface: n must be >= 1");
  std::vector<double> cumulative(mesh.faces.size());
  double total = 0.0;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    total += mesh.face_area(f);
    cumulative[f] = total;
  }
  if (!(total > 0.0)) throw InvalidArgument("sample_surface: mesh has zero total area");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SampledCloud cloud;
  cloud.points.reserve(n);
  cloud.normals.reserve(n);
  cloud.colors.reserve(n);
  cloud.face_of.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = unit(rng) * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), s);
    auto f = static_cast<std::size_t>(std::min<std::ptrdiff_t>(it - cumulative.begin(),
                                                                static_cast<std::ptrdiff_t>(cumulative.size()) - 1));
    // Skip zero-area faces that upper_bound can land on when s hits a plateau.
    while (mesh.face_area(f) <= 0.0 && f + 1 < cumulative.size()) ++f;
    double r1 = std::sqrt(unit(rng)), r2 = unit(rng);
    double a = 1.0 - r1, b = r1 * (1.0 - r2), c = r1 * r2;
    const Face& t = mesh.faces[f];
    cloud.points.push_back(a * mesh.vertices[t[0]] + b * mesh.vertices[t[1]] + c * mesh.vertices[t[2]]);
    cloud.normals.push_back(mesh.face_normals[f]);
    cloud.colors.push_back(a * mesh.vertex_colors[t[0]] + b * mesh.vertex_colors[t[1]] +
                           c * mesh.vertex_colors[t[2]]);
    cloud.face_of.push_back(static_cast<std::uint32_t>(f));
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// KdTree

KdTree::KdTree(std::vector<Vec3> points) : points_(std::move(points)) {
  order_.resize(points_.size());
  std::iota(order_.begin(), order_.end(), 0u);
  if (!points_.empty()) {
    nodes_.reserve(2 * points_.size() / 8 + 1);
    build(0, static_cast<std::uint32_t>(points_.size()));
  }
}

std::int32_t KdTree::build(std::uint32_t begin, std::uint32_t end) {
  constexpr std::uint32_t kLeafSize = 8;
  auto id = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back(Node{begin, end});
  if (end - begin <= kLeafSize) return id;
  Vec3 lo = points_[order_[begin]], hi = lo;
  for (std::uint32_t i = begin; i < end; ++i) {
    lo = cwise_min(lo, points_[order_[i]]);
    hi = cwise_max(hi, points_[order_[i]]);
  }
  Vec3 ext = hi - lo;
  std::uint8_t axis = ext.x >= ext.y && ext.x >= ext.z ? 0 : (ext.y >= ext.z ? 1 : 2);
  std::uint32_t mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](std::uint32_t a, std::uint32_t b) {
                     double pa = points_[a][axis], pb = points_[b][axis];
                     return pa < pb || (pa == pb && a < b);
                   });
  double split = points_[order_[mid]][axis];
  std::int32_t left = build(begin, mid);
  std::int32_t right = build(mid, end);
  nodes_[id].axis = axis;
  nodes_[id].split = split;
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

std::vector<std::uint32_t> KdTree::knn(const Vec3& query, std::size_t k) const {
  if (points_.empty()) throw InvalidArgument("knn: empty point set");
  k = std::min(k, points_.size());
  using Entry = std::pair<double, std::uint32_t>;
  // Max-heap on (distance, index): the top is the current worst candidate.
  std::priority_queue<Entry> heap;
  auto visit = [&](auto&& self, std::int32_t id) -> void {
    const Node& node = nodes_[id];
    if (node.left < 0) {
      for (std::uint32_t i = node.begin; i < node.end; ++i) {
        Entry e{norm2(points_[order_[i]] - query), order_[i]};
        if (heap.size() < k) heap.push(e);
        else if (e < heap.top()) {
          heap.pop();
          heap.push(e);
        }
      }
      return;
    }
    double diff = query[node.axis] - node.split;
    std::int32_t near = diff < 0.0 ? node.left : node.right;
    std::int32_t far = diff < 0.0 ? node.right : node.left;
    self(self, near);
    // Equal distance may still hide a lower index, so only prune strictly.
    if (heap.size() < k || diff * diff <= heap.top().first) self(self, far);
  };
  visit(visit, 0);
  std::vector<std::uint32_t> out(heap.size());
  for (std::size_t i = out.size(); i-- > 0;) {
    out[i] = heap.top().second;
    heap.pop();
  }
  return out;
}

std::vector<std::uint32_t> knn(const SampledCloud& cloud, const Vec3& query, std::size_t k) {
  if (cloud.size() == 0) throw InvalidArgument("knn: empty cloud");
  if (k > cloud.size()) throw InvalidArgument("knn: k exceeds cloud size");
  return KdTree(cloud.points).knn(query, k);
}

std::vector<std::vector<std::uint32_t>> knn_table(std::span<const Vec3> points, std::size_t k) {
  KdTree tree(std::vector<Vec3>(points.begin(), points.end()));
  std::vector<std::vector<std::uint32_t>> table(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) table[i] = tree.knn(points[i], k);
  return table;
}

std::optional<RayHit> intersect_ray(const TriangleMesh& mesh, const Vec3& origin, const Vec3& direction) {
  std::optional<RayHit> best;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const Face& t = mesh.faces[f];
    const Vec3& a = mesh.vertices[t[0]];
    Vec3 e1 = mesh.vertices[t[1]] - a, e2 = mesh.vertices[t[2]] - a;
    Vec3 p = cross(direction, e2);
    double det = dot(e1, p);
    if (std::abs(det) < 1e-15) continue;
    double inv = 1.0 / det;
    Vec3 s = origin - a;
    double u = dot(s, p) * inv;
    if (u < 0.0 || u > 1.0) continue;
    Vec3 q = cross(s, e1);
    double v = dot(direction, q) * inv;
    if (v < 0.0 || u + v > 1.0) continue;
    double tt = dot(e2, q) * inv;
    if (tt <= 0.0) continue;
    if (!best || tt < best->t) best = RayHit{tt, static_cast<std::uint32_t>(f), origin + tt * direction};
  }
  return best;
}

}  // namespace sp3d
