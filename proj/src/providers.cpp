#include "sp3d/providers.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "json.hpp"

#include "binary_io.hpp"
#include "sp3d/error.hpp"

namespace sp3d {

using nlohmann::json;

namespace {
constexpr char kFeatureMagic[9] = "SP3DFEAT";
constexpr char kMaskMagic[9] = "SP3DMASK";
constexpr double kPi = 3.14159265358979323846;
}  // namespace

void MaskMap::recount() {
  counts.clear();
  for (auto id : ids)
    if (id != 0) ++counts[id];
}

void write_feature_map(const std::filesystem::path& path, const FeatureMap& map) {
  if (map.data.size() != static_cast<std::size_t>(map.width) * map.height * map.channels)
    throw InvalidArgument("feature map payload size does not match its shape");
  for (float v : map.data)
    if (!std::isfinite(v)) throw InvalidArgument("feature map contains non-finite values");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(kFeatureMagic, 8);
  detail::put<std::uint32_t>(out, kFeatureFormatVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(map.height));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(map.width));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(map.channels));
  detail::put_span<float>(out, map.data);
}

FeatureMap read_feature_map(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  detail::expect_magic(in, kFeatureMagic);
  if (auto v = detail::get<std::uint32_t>(in, "feature header"); v != kFeatureFormatVersion)
    throw FormatError("feature map version mismatch: " + std::to_string(v));
  FeatureMap map;
  map.height = static_cast<int>(detail::get<std::uint32_t>(in, "feature header"));
  map.width = static_cast<int>(detail::get<std::uint32_t>(in, "feature header"));
  map.channels = static_cast<int>(detail::get<std::uint32_t>(in, "feature header"));
  map.data.resize(static_cast<std::size_t>(map.width) * map.height * map.channels);
  detail::get_span<float>(in, map.data, "feature payload");
  return map;
}

std::filesystem::path mask_sidecar_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".json";
  return p;
}

void write_mask_map(const std::filesystem::path& path, const MaskMap& map) {
  if (map.ids.size() != static_cast<std::size_t>(map.width) * map.height)
    throw InvalidArgument("mask map payload size does not match its shape");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(kMaskMagic, 8);
  detail::put<std::uint32_t>(out, kMaskFormatVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(map.height));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(map.width));
  detail::put_span<std::uint16_t>(out, map.ids);

  MaskMap recounted = map;
  recounted.recount();
  json counts = json::object();
  for (auto [id, n] : recounted.counts) counts[std::to_string(id)] = n;
  std::ofstream side(mask_sidecar_path(path));
  side << json{{"version", kMaskFormatVersion}, {"counts", counts}}.dump(2) << '\n';
}

MaskMap read_mask_map(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  detail::expect_magic(in, kMaskMagic);
  if (auto v = detail::get<std::uint32_t>(in, "mask header"); v != kMaskFormatVersion)
    throw FormatError("mask map version mismatch: " + std::to_string(v));
  MaskMap map;
  map.height = static_cast<int>(detail::get<std::uint32_t>(in, "mask header"));
  map.width = static_cast<int>(detail::get<std::uint32_t>(in, "mask header"));
  map.ids.resize(static_cast<std::size_t>(map.width) * map.height);
  detail::get_span<std::uint16_t>(in, map.ids, "mask payload");

  std::ifstream side(mask_sidecar_path(path));
  if (!side) throw FormatError("missing mask sidecar " + mask_sidecar_path(path).string());
  json meta;
  try {
    meta = json::parse(side);
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed mask sidecar: ") + e.what());
  }
  for (auto& [key, value] : meta.at("counts").items())
    map.counts[static_cast<std::uint16_t>(std::stoul(key))] = value.get<std::uint32_t>();

  MaskMap actual = map;
  actual.recount();
  for (auto [id, n] : actual.counts) {
    auto it = map.counts.find(id);
    if (it == map.counts.end()) throw FormatError("mask id " + std::to_string(id) + " missing from sidecar");
    if (it->second != n) throw FormatError("mask id " + std::to_string(id) + " pixel count mismatch");
  }
  if (map.counts.size() != actual.counts.size()) throw FormatError("sidecar lists mask ids absent from pixels");
  return map;
}

// ---------------------------------------------------------------------------
// Toy objects

double Primitive::signed_distance(const Vec3& p) const {
  Vec3 q = p - center;
  switch (kind) {
    case PrimitiveKind::Sphere:
      return norm(q) - size.x;
    case PrimitiveKind::Box: {
      Vec3 d{std::abs(q.x) - size.x, std::abs(q.y) - size.y, std::abs(q.z) - size.z};
      Vec3 outside = cwise_max(d, Vec3{});
      return norm(outside) + std::min(std::max({d.x, d.y, d.z}), 0.0);
    }
    case PrimitiveKind::Cylinder: {
      double dr = std::hypot(q.x, q.y) - size.x, dz = std::abs(q.z) - size.z;
      return std::hypot(std::max(dr, 0.0), std::max(dz, 0.0)) + std::min(std::max(dr, dz), 0.0);
    }
  }
  return 0.0;
}

namespace {

TriangleMesh primitive_mesh(const Primitive& p) {
  switch (p.kind) {
    case PrimitiveKind::Sphere: return make_sphere_mesh(p.center, p.size.x, 32, 16);
    case PrimitiveKind::Box: return make_box_mesh(p.center, p.size);
    case PrimitiveKind::Cylinder: return make_cylinder_mesh(p.center, p.size.x, p.size.z, 32);
  }
  return {};
}

}  // namespace

void ToyObjectSpec::validate() const {
  if (parts.empty()) throw InvalidArgument("toy spec '" + name + "' has no parts");
  for (const Primitive& p : parts)
    if (p.group < 0 || p.group >= static_cast<int>(group_names.size()))
      throw InvalidArgument("toy spec '" + name + "': part '" + p.name + "' has no coarse group");
  for (std::size_t a = 0; a < parts.size(); ++a) {
    TriangleMesh m = primitive_mesh(parts[a]);
    for (std::size_t b = 0; b < parts.size(); ++b) {
      if (a == b) continue;
      for (const Vec3& v : m.vertices)
        if (parts[b].signed_distance(v) < -overlap_tolerance)
          throw InvalidArgument("toy spec '" + name + "': parts '" + parts[a].name + "' and '" + parts[b].name +
                                "' overlap beyond tolerance");
    }
  }
}

ToyObjectSpec toy_spec(const std::string& name) {
  using K = PrimitiveKind;
  ToyObjectSpec s;
  s.name = name;
  if (name == "snowman") {
    s.group_names = {"snowman"};
    s.parts = {
        {K::Sphere, {0, 0, -0.25}, {0.25, 0, 0}, {0.92, 0.92, 0.92}, "base", 0},
        {K::Sphere, {0, 0, 0.15}, {0.16, 0, 0}, {0.55, 0.7, 0.95}, "body", 0},
        {K::Sphere, {0, 0, 0.40}, {0.1, 0, 0}, {0.95, 0.75, 0.55}, "head", 0},
    };
  } else if (name == "table") {
    s.group_names = {"tabletop", "legs"};
    s.parts = {{K::Box, {0, 0, 0.2}, {0.3, 0.22, 0.03}, {0.62, 0.42, 0.2}, "top", 0}};
    const double lx = 0.25, ly = 0.17;
    for (auto [sx, sy] : {std::pair{1, 1}, {-1, 1}, {-1, -1}, {1, -1}})
      s.parts.push_back({K::Box, {sx * lx, sy * ly, -0.06}, {0.03, 0.03, 0.23}, {0.3, 0.2, 0.12}, "leg", 1});
  } else if (name == "lamp") {
    s.group_names = {"stand", "lampshade"};
    s.parts = {
        {K::Cylinder, {0, 0, -0.42}, {0.2, 0, 0.04}, {0.25, 0.25, 0.28}, "lamp base", 0},
        {K::Cylinder, {0, 0, -0.08}, {0.025, 0, 0.3}, {0.75, 0.75, 0.8}, "pole", 0},
        {K::Cylinder, {0, 0, 0.32}, {0.17, 0, 0.1}, {0.95, 0.9, 0.5}, "shade", 1},
    };
  } else if (name == "mushroom") {
    s.group_names = {"mushroom"};
    s.parts = {
        {K::Cylinder, {0, 0, -0.16}, {0.08, 0, 0.2}, {0.9, 0.85, 0.75}, "stem", 0},
        {K::Sphere, {0, 0, 0.22}, {0.18, 0, 0}, {0.8, 0.15, 0.12}, "cap", 0},
    };
  } else {
    throw InvalidArgument("unknown toy spec: " + name);
  }
  return s;
}

std::vector<std::string> toy_spec_names() { return {"snowman", "table", "lamp", "mushroom"}; }

ToyObject make_toy_object(const ToyObjectSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double yaw = 2.0 * kPi * unit(rng);
  double c = std::cos(yaw), s = std::sin(yaw);
  auto rotate = [&](const Vec3& p) { return Vec3{c * p.x - s * p.y, s * p.x + c * p.y, p.z}; };

  ToyObject obj;
  obj.coarse_names = spec.group_names;
  for (std::size_t i = 0; i < spec.parts.size(); ++i) {
    const Primitive& p = spec.parts[i];
    Vec3 color = p.color;
    for (std::size_t ch = 0; ch < 3; ++ch) color[ch] = std::clamp(color[ch] + 0.06 * (unit(rng) - 0.5), 0.0, 1.0);
    TriangleMesh part = primitive_mesh(p);
    auto base = static_cast<std::uint32_t>(obj.mesh.vertices.size());
    for (const Vec3& v : part.vertices) {
      obj.mesh.vertices.push_back(rotate(v));
      obj.mesh.vertex_colors.push_back(color);
    }
    for (const Face& f : part.faces) {
      obj.mesh.faces.push_back({f[0] + base, f[1] + base, f[2] + base});
      obj.fine_of_face.push_back(static_cast<int>(i));
      obj.coarse_of_face.push_back(p.group);
    }
    obj.fine_names.push_back(p.name);
  }
  obj.mesh.finalize();
  return obj;
}

TriangleMesh make_sphere_mesh(const Vec3& center, double radius, int slices, int stacks) {
  TriangleMesh m;
  m.vertices.push_back(center + Vec3{0, 0, radius});
  for (int i = 1; i < stacks; ++i) {
    double phi = kPi * i / stacks;
    for (int j = 0; j < slices; ++j) {
      double theta = 2.0 * kPi * j / slices;
      m.vertices.push_back(center + radius * Vec3{std::sin(phi) * std::cos(theta), std::sin(phi) * std::sin(theta),
                                                  std::cos(phi)});
    }
  }
  m.vertices.push_back(center - Vec3{0, 0, radius});
  auto ring = [&](int i, int j) { return static_cast<std::uint32_t>(1 + (i - 1) * slices + (j % slices)); };
  const auto south = static_cast<std::uint32_t>(m.vertices.size() - 1);
  for (int j = 0; j < slices; ++j) m.faces.push_back({0, ring(1, j), ring(1, j + 1)});
  for (int i = 1; i + 1 < stacks; ++i) {
    for (int j = 0; j < slices; ++j) {
      m.faces.push_back({ring(i, j), ring(i + 1, j), ring(i + 1, j + 1)});
      m.faces.push_back({ring(i, j), ring(i + 1, j + 1), ring(i, j + 1)});
    }
  }
  for (int j = 0; j < slices; ++j) m.faces.push_back({ring(stacks - 1, j), south, ring(stacks - 1, j + 1)});
  m.finalize();
  return m;
}

TriangleMesh make_box_mesh(const Vec3& center, const Vec3& h) {
  TriangleMesh m;
  for (int i = 0; i < 8; ++i)
    m.vertices.push_back(center + Vec3{(i & 1) ? h.x : -h.x, (i & 2) ? h.y : -h.y, (i & 4) ? h.z : -h.z});
  // Outward-facing quads, split into two triangles each.
  const std::uint32_t quads[6][4] = {{0, 2, 3, 1}, {4, 5, 7, 6}, {0, 1, 5, 4}, {2, 6, 7, 3}, {0, 4, 6, 2}, {1, 3, 7, 5}};
  for (const auto& q : quads) {
    m.faces.push_back({q[0], q[1], q[2]});
    m.faces.push_back({q[0], q[2], q[3]});
  }
  m.finalize();
  return m;
}

TriangleMesh make_cylinder_mesh(const Vec3& center, double radius, double half_height, int slices) {
  TriangleMesh m;
  for (int k = 0; k < 2; ++k) {
    double z = k == 0 ? -half_height : half_height;
    for (int j = 0; j < slices; ++j) {
      double theta = 2.0 * kPi * j / slices;
      m.vertices.push_back(center + Vec3{radius * std::cos(theta), radius * std::sin(theta), z});
    }
  }
  const auto bottom = static_cast<std::uint32_t>(m.vertices.size());
  m.vertices.push_back(center - Vec3{0, 0, half_height});
  const auto top = static_cast<std::uint32_t>(m.vertices.size());
  m.vertices.push_back(center + Vec3{0, 0, half_height});
  auto s = static_cast<std::uint32_t>(slices);
  for (std::uint32_t j = 0; j < s; ++j) {
    std::uint32_t a = j, b = (j + 1) % s, a2 = a + s, b2 = b + s;
    m.faces.push_back({a, b, b2});
    m.faces.push_back({a, b2, a2});
    m.faces.push_back({bottom, b, a});
    m.faces.push_back({top, a2, b2});
  }
  m.finalize();
  return m;
}

std::vector<float> part_code(const std::string& name, int channels) {
  std::uint64_t h = 14695981039346656037ull;  // FNV-1a
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::mt19937_64 rng(h);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(channels));
  double n2 = 0.0;
  for (auto& x : v) {
    x = gauss(rng);
    n2 += x * x;
  }
  std::vector<float> code(v.size());
  double inv = 1.0 / std::sqrt(n2);
  for (std::size_t i = 0; i < v.size(); ++i) code[i] = static_cast<float>(v[i] * inv);
  return code;
}

std::vector<SyntheticView> synthesize_views(const ToyObject& object, const ViewSet& views, Granularity level,
                                            const SynthesisOptions& options) {
  if (object.fine_of_face.size() != object.mesh.num_faces() || object.coarse_of_face.size() != object.mesh.num_faces())
    throw InvalidArgument("synthesize_views: labels must cover all faces");
  std::vector<std::vector<float>> codes;
  for (const auto& name : object.fine_names) codes.push_back(part_code(name, options.channels));
  const auto& labels = level == Granularity::Fine ? object.fine_of_face : object.coarse_of_face;

  std::vector<SyntheticView> out;
  out.reserve(views.size());
  for (std::size_t k = 0; k < views.size(); ++k) {
    const DepthMap& depth = views.renders[k].depth;
    SyntheticView view{FeatureMap(depth.width, depth.height, options.channels), MaskMap(depth.width, depth.height)};
    std::mt19937_64 rng(options.seed * 0x9E3779B97F4A7C15ull + k);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int y = 0; y < depth.height; ++y) {
      for (int x = 0; x < depth.width; ++x) {
        std::int32_t face = depth.face_id[static_cast<std::size_t>(y) * depth.width + x];
        if (face < 0) continue;
        const auto& code = codes[static_cast<std::size_t>(object.fine_of_face[face])];
        float* f = view.features.pixel(x, y);
        for (int c = 0; c < options.channels; ++c)
          f[c] = code[c] + (options.feature_noise > 0.0 ? static_cast<float>(options.feature_noise * gauss(rng)) : 0.0f);
        view.masks.ids[static_cast<std::size_t>(y) * depth.width + x] = static_cast<std::uint16_t>(labels[face] + 1);
      }
    }
    view.masks.recount();
    out.push_back(std::move(view));
  }
  return out;
}

}  // namespace sp3d
