#pragma once

// Slow reference implementations of the evaluation metrics, written against
// membership arrays instead of sorted element lists.

#include <algorithm>
#include <cctype>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "sp3d/metrics.hpp"

namespace oracle {

using Members = std::vector<char>;

inline Members members(const sp3d::Instance& inst, std::size_t universe) {
  Members m(universe, 0);
  for (auto e : inst.elements) m[e] = 1;
  return m;
}

inline double iou(const Members& a, const Members& b) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t e = 0; e < a.size(); ++e) {
    inter += a[e] && b[e];
    uni += a[e] || b[e];
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

inline double class_agnostic(const std::vector<sp3d::Instance>& gt, const std::vector<sp3d::Instance>& pred,
                             std::size_t universe) {
  double total = 0.0;
  for (const auto& g : gt) {
    double best = 0.0;
    for (const auto& p : pred) best = std::max(best, iou(members(g, universe), members(p, universe)));
    total += best;
  }
  return total / static_cast<double>(gt.size());
}

inline std::string lower(std::string s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.erase(s.begin());
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline double semantic(const std::vector<sp3d::Instance>& gt, const std::vector<sp3d::Instance>& pred,
                       std::size_t universe) {
  std::map<std::string, Members> g, p;
  Members covered(universe, 0);
  for (const auto& inst : gt) {
    auto& m = g.try_emplace(lower(inst.label), Members(universe, 0)).first->second;
    for (auto e : inst.elements) m[e] = 1;
  }
  for (const auto& inst : pred) {
    auto& m = p.try_emplace(lower(inst.label), Members(universe, 0)).first->second;
    for (auto e : inst.elements) m[e] = 1, covered[e] = 1;
  }
  auto& others = p.try_emplace("others", Members(universe, 0)).first->second;
  for (std::size_t e = 0; e < universe; ++e)
    if (!covered[e]) others[e] = 1;
  if (g.empty()) return 0.0;
  double total = 0.0;
  for (const auto& [label, m] : g) total += p.count(label) ? iou(m, p.at(label)) : 0.0;
  return total / static_cast<double>(g.size());
}

inline double ap50(const std::vector<sp3d::Instance>& gt, const std::vector<sp3d::Instance>& pred,
                   std::size_t universe) {
  // rank by confidence, earlier index first on ties
  std::vector<std::size_t> rank;
  std::vector<char> used(pred.size(), 0);
  for (std::size_t r = 0; r < pred.size(); ++r) {
    std::size_t pick = pred.size();
    for (std::size_t i = 0; i < pred.size(); ++i)
      if (!used[i] && (pick == pred.size() || pred[i].confidence > pred[pick].confidence)) pick = i;
    used[pick] = 1;
    rank.push_back(pick);
  }
  std::vector<char> taken(gt.size(), 0);
  std::vector<double> prec, rec;
  int tp = 0;
  for (std::size_t r = 0; r < rank.size(); ++r) {
    auto pm = members(pred[rank[r]], universe);
    int best = -1;
    double bv = 0.0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (taken[g]) continue;
      double v = iou(members(gt[g], universe), pm);
      if (v > bv) bv = v, best = static_cast<int>(g);
    }
    if (best >= 0 && bv >= 0.5) taken[static_cast<std::size_t>(best)] = 1, ++tp;
    prec.push_back(tp / static_cast<double>(r + 1));
    rec.push_back(tp / static_cast<double>(gt.size()));
  }
  double ap = 0.0;
  for (std::size_t k = 0; k < prec.size(); ++k) {
    double envelope = *std::max_element(prec.begin() + static_cast<std::ptrdiff_t>(k), prec.end());
    ap += (rec[k] - (k ? rec[k - 1] : 0.0)) * envelope;
  }
  return ap;
}

struct RandomCase {
  std::size_t universe = 0;
  std::vector<sp3d::Instance> gt, pred;
};

// GT is a random partition with repeated labels; predictions are random
// possibly overlapping subsets that may leave elements uncovered.
inline RandomCase random_case(std::mt19937_64& rng) {
  static const std::vector<std::string> vocab = {"leg", "Top", "seat", "arm", "top "};
  RandomCase c;
  c.universe = 4 + rng() % 28;
  std::size_t parts = 1 + rng() % 5;
  std::vector<std::vector<std::uint32_t>> groups(parts);
  for (std::uint32_t e = 0; e < c.universe; ++e) groups[rng() % parts].push_back(e);
  for (auto& g : groups)
    if (!g.empty()) c.gt.push_back(sp3d::make_instance(g, vocab[rng() % vocab.size()]));
  std::size_t preds = rng() % 7;
  std::uniform_real_distribution<double> conf(0.0, 1.0);
  for (std::size_t k = 0; k < preds; ++k) {
    std::vector<std::uint32_t> elems;
    double keep = 0.1 + 0.8 * conf(rng);
    for (std::uint32_t e = 0; e < c.universe; ++e)
      if (conf(rng) < keep) elems.push_back(e);
    if (elems.empty()) elems.push_back(static_cast<std::uint32_t>(rng() % c.universe));
    // a few exact confidence ties exercise the rank order
    double cf = rng() % 4 == 0 ? 0.5 : conf(rng);
    c.pred.push_back(sp3d::make_instance(elems, vocab[rng() % vocab.size()], cf));
  }
  return c;
}

}  // namespace oracle
