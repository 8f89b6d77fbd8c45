#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

namespace sp3d {

/// A part as a set of element ids (faces or points) with an optional label.
struct Instance {
  std::vector<std::uint32_t> elements;  // sorted, unique
  std::string label;
  double confidence = 1.0;
};

Instance make_instance(std::vector<std::uint32_t> elements, std::string label = {}, double confidence = 1.0);

double iou(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b);

// Mean over GT parts of the best IoU against any prediction.
double class_agnostic_miou(const std::vector<Instance>& gt, const std::vector<Instance>& pred, std::size_t universe);

struct SemanticScore {
  std::map<std::string, double> per_label;  // case-folded GT labels
  double miou = 0.0;
};

// Elements of [0, universe) without a prediction count as "others".
SemanticScore semantic_miou(const std::vector<Instance>& gt, const std::vector<Instance>& pred, std::size_t universe);

// Greedy one-to-one matching at IoU >= 0.5 in confidence order, all-point interpolated AP.
double map50(const std::vector<Instance>& gt, const std::vector<Instance>& pred);

std::string fold_label(const std::string& label);

// Per-point instances from a label array; negative labels are skipped.
std::vector<Instance> instances_from_labels(const std::vector<int>& labels);

// --- dataset harness ---------------------------------------------------------

struct ObjectScore {
  std::string name;
  std::string category;
  std::string prediction;  // chosen pred file name
  double class_agnostic = 0.0;
  double semantic = 0.0;
  double map50 = 0.0;
};

struct CategoryScore {
  std::size_t objects = 0;
  double class_agnostic = 0.0;
  double semantic = 0.0;
  double map50 = 0.0;
};

struct EvalReport {
  std::vector<ObjectScore> objects;
  std::map<std::string, CategoryScore> categories;
  CategoryScore overall;  // mean of category means; `objects` = object count
  std::vector<std::pair<std::string, std::string>> skipped;  // object, reason

  nlohmann::json to_json() const;
  std::string to_table() const;
};

// Part file: {"category", "num_elements", "parts": [{"label", "elements", "confidence"?}]}
struct PartFile {
  std::string category;
  std::size_t num_elements = 0;
  std::vector<Instance> parts;
};

PartFile read_part_file(const std::filesystem::path& path);
void write_part_file(const std::filesystem::path& path, const PartFile& file);

// <root>/<object>/{mesh.(obj|ply), gt_semantic.json, gt_instance.json, pred/*.json}.
// With several predictions the one with the best class-agnostic mIoU is scored.
EvalReport evaluate_dataset(const std::filesystem::path& root);

}  // namespace sp3d
