#include "sp3d/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <future>
#include <numeric>
#include <set>
#include <sstream>

#include "sp3d/error.hpp"
#include "sp3d/geometry.hpp"

namespace sp3d {

namespace fs = std::filesystem;
using nlohmann::json;

Instance make_instance(std::vector<std::uint32_t> elements, std::string label, double confidence) {
  std::sort(elements.begin(), elements.end());
  elements.erase(std::unique(elements.begin(), elements.end()), elements.end());
  return {std::move(elements), std::move(label), confidence};
}

namespace {

std::size_t intersection_size(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b) {
  std::size_t n = 0;
  auto i = a.begin(), j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i < *j) {
      ++i;
    } else if (*j < *i) {
      ++j;
    } else {
      ++n, ++i, ++j;
    }
  }
  return n;
}

void check_universe(const std::vector<Instance>& parts, std::size_t universe, const char* what) {
  for (const auto& p : parts)
    if (!p.elements.empty() && p.elements.back() >= universe)
      throw InvalidArgument(std::string(what) + ": element id outside the universe");
}

}  // namespace

double iou(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b) {
  std::size_t inter = intersection_size(a, b);
  std::size_t uni = a.size() + b.size() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double class_agnostic_miou(const std::vector<Instance>& gt, const std::vector<Instance>& pred, std::size_t universe) {
  if (universe == 0) throw InvalidArgument("class_agnostic_miou: empty universe");
  if (gt.empty()) throw InvalidArgument("class_agnostic_miou: no ground-truth parts");
  check_universe(gt, universe, "ground truth");
  check_universe(pred, universe, "prediction");
  double sum = 0.0;
  for (const auto& g : gt) {
    double best = 0.0;
    for (const auto& p : pred) best = std::max(best, iou(g.elements, p.elements));
    sum += best;
  }
  return sum / static_cast<double>(gt.size());
}

std::string fold_label(const std::string& label) {
  auto b = label.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  auto e = label.find_last_not_of(" \t\r\n");
  std::string out = label.substr(b, e - b + 1);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

SemanticScore semantic_miou(const std::vector<Instance>& gt, const std::vector<Instance>& pred, std::size_t universe) {
  if (universe == 0) throw InvalidArgument("semantic_miou: empty universe");
  check_universe(gt, universe, "ground truth");
  check_universe(pred, universe, "prediction");
  auto unions = [](const std::vector<Instance>& parts) {
    std::map<std::string, std::set<std::uint32_t>> out;
    for (const auto& p : parts) out[fold_label(p.label)].insert(p.elements.begin(), p.elements.end());
    return out;
  };
  auto g = unions(gt);
  auto p = unions(pred);
  std::vector<bool> predicted(universe, false);
  for (const auto& inst : pred)
    for (auto e : inst.elements) predicted[e] = true;
  for (std::size_t e = 0; e < universe; ++e)
    if (!predicted[e]) p["others"].insert(static_cast<std::uint32_t>(e));

  SemanticScore score;
  for (const auto& [label, elems] : g) {
    std::vector<std::uint32_t> a(elems.begin(), elems.end());
    std::vector<std::uint32_t> b;
    if (auto it = p.find(label); it != p.end()) b.assign(it->second.begin(), it->second.end());
    score.per_label[label] = iou(a, b);
  }
  if (!score.per_label.empty()) {
    double sum = 0.0;
    for (const auto& [label, v] : score.per_label) sum += v;
    score.miou = sum / static_cast<double>(score.per_label.size());
  }
  return score;
}

double map50(const std::vector<Instance>& gt, const std::vector<Instance>& pred) {
  if (gt.empty()) throw InvalidArgument("map50: no ground-truth parts");
  std::vector<std::size_t> order(pred.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return pred[a].confidence > pred[b].confidence; });
  std::vector<bool> matched(gt.size(), false);
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    const auto& p = pred[order[r]];
    double best = 0.0;
    std::size_t arg = gt.size();
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (matched[g]) continue;
      double v = iou(gt[g].elements, p.elements);
      if (v > best) {
        best = v;
        arg = g;
      }
    }
    if (arg < gt.size() && best >= 0.5) {
      matched[arg] = true;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(r + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(gt.size()));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev = 0.0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev) * precision[i];
    prev = recall[i];
  }
  return ap;
}

std::vector<Instance> instances_from_labels(const std::vector<int>& labels) {
  std::map<int, std::vector<std::uint32_t>> parts;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= 0) parts[labels[i]].push_back(static_cast<std::uint32_t>(i));
  std::vector<Instance> out;
  for (auto& [id, elems] : parts) out.push_back({std::move(elems), std::to_string(id), 1.0});
  return out;
}

// ---------------------------------------------------------------------------

PartFile read_part_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  try {
    json j = json::parse(in);
    PartFile f;
    f.category = j.value("category", std::string{});
    f.num_elements = j.value("num_elements", std::size_t{0});
    for (const auto& p : j.at("parts")) {
      auto elems = p.at("elements").get<std::vector<std::uint32_t>>();
      if (elems.empty()) throw FormatError("part with no elements");
      f.parts.push_back(make_instance(std::move(elems), p.value("label", std::string{}), p.value("confidence", 1.0)));
    }
    return f;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_part_file(const fs::path& path, const PartFile& file) {
  json parts = json::array();
  for (const auto& p : file.parts)
    parts.push_back({{"label", p.label}, {"elements", p.elements}, {"confidence", p.confidence}});
  json j{{"category", file.category}, {"num_elements", file.num_elements}, {"parts", parts}};
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << j.dump() << '\n';
}

namespace {

ObjectScore score_object(const fs::path& dir) {
  ObjectScore s;
  s.name = dir.filename().string();
  fs::path mesh_path = dir / "mesh.obj";
  if (!fs::exists(mesh_path)) mesh_path = dir / "mesh.ply";
  if (!fs::exists(mesh_path)) throw FormatError("missing mesh.obj / mesh.ply");
  const std::size_t universe = load_mesh(mesh_path).num_faces();
  PartFile sem = read_part_file(dir / "gt_semantic.json");
  PartFile ins = read_part_file(dir / "gt_instance.json");
  for (const PartFile* f : {&sem, &ins})
    if (f->num_elements != 0 && f->num_elements != universe)
      throw FormatError("num_elements does not match the mesh face count");
  if (ins.parts.empty()) throw FormatError("gt_instance.json has no parts");
  s.category = ins.category.empty() ? sem.category : ins.category;
  if (s.category.empty()) s.category = "uncategorized";

  std::vector<fs::path> preds;
  if (fs::is_directory(dir / "pred"))
    for (const auto& e : fs::directory_iterator(dir / "pred"))
      if (e.path().extension() == ".json") preds.push_back(e.path());
  std::sort(preds.begin(), preds.end());
  if (preds.empty()) throw FormatError("no prediction files");

  PartFile best;
  double best_ca = -1.0;
  for (const auto& p : preds) {
    PartFile f = read_part_file(p);
    double ca = class_agnostic_miou(ins.parts, f.parts, universe);
    if (ca > best_ca) {
      best_ca = ca;
      best = std::move(f);
      s.prediction = p.filename().string();
    }
  }
  s.class_agnostic = best_ca;
  s.semantic = semantic_miou(sem.parts, best.parts, universe).miou;
  s.map50 = map50(ins.parts, best.parts);
  return s;
}

}  // namespace

EvalReport evaluate_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw InvalidArgument("dataset root is not a directory: " + root.string());
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());

  std::vector<std::future<ObjectScore>> jobs;
  for (const auto& d : dirs) jobs.push_back(std::async(std::launch::async, score_object, d));

  EvalReport report;
  for (std::size_t k = 0; k < dirs.size(); ++k) {
    try {
      report.objects.push_back(jobs[k].get());
    } catch (const std::exception& e) {
      report.skipped.emplace_back(dirs[k].filename().string(), e.what());
    }
  }
  for (const auto& o : report.objects) {
    auto& c = report.categories[o.category];
    ++c.objects;
    c.class_agnostic += o.class_agnostic;
    c.semantic += o.semantic;
    c.map50 += o.map50;
  }
  for (auto& [name, c] : report.categories) {
    auto n = static_cast<double>(c.objects);
    c.class_agnostic /= n;
    c.semantic /= n;
    c.map50 /= n;
    report.overall.class_agnostic += c.class_agnostic;
    report.overall.semantic += c.semantic;
    report.overall.map50 += c.map50;
  }
  report.overall.objects = report.objects.size();
  if (!report.categories.empty()) {
    auto n = static_cast<double>(report.categories.size());
    report.overall.class_agnostic /= n;
    report.overall.semantic /= n;
    report.overall.map50 /= n;
  }
  return report;
}

json EvalReport::to_json() const {
  auto scores = [](const auto& s) {
    return json{{"class_agnostic_miou", s.class_agnostic}, {"semantic_miou", s.semantic}, {"map50", s.map50}};
  };
  json objs = json::array();
  for (const auto& o : objects) {
    json j = scores(o);
    j["object"] = o.name;
    j["category"] = o.category;
    j["prediction"] = o.prediction;
    objs.push_back(j);
  }
  json cats = json::object();
  for (const auto& [name, c] : categories) {
    cats[name] = scores(c);
    cats[name]["objects"] = c.objects;
  }
  json skip = json::array();
  for (const auto& [name, why] : skipped) skip.push_back({{"object", name}, {"reason", why}});
  json all = scores(overall);
  all["objects"] = overall.objects;
  return {{"objects", objs}, {"categories", cats}, {"overall", all}, {"skipped", skip}};
}

std::string EvalReport::to_table() const {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-24s %8s %10s %8s %8s\n", "category", "objects", "agnostic", "semantic", "mAP50");
  out << line;
  auto row = [&](const std::string& name, const CategoryScore& c) {
    std::snprintf(line, sizeof line, "%-24s %8zu %10.1f %8.1f %8.1f\n", name.c_str(), c.objects,
                  100.0 * c.class_agnostic, 100.0 * c.semantic, 100.0 * c.map50);
    out << line;
  };
  for (const auto& [name, c] : categories) row(name, c);
  row("overall", overall);
  for (const auto& [name, why] : skipped) out << "skipped " << name << ": " << why << '\n';
  return out.str();
}

}  // namespace sp3d
