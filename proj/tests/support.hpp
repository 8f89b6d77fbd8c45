#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "sp3d/geometry.hpp"
#include "sp3d/numerics.hpp"

namespace testing {

// Scratch directory removed on scope exit.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("sp3d_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// Axis-aligned cube [lo, hi]^3, outward winding.
inline sp3d::TriangleMesh cube_mesh(double lo = -0.5, double hi = 0.5) {
  sp3d::TriangleMesh m;
  for (int i = 0; i < 8; ++i) m.vertices.push_back({i & 1 ? hi : lo, i & 2 ? hi : lo, i & 4 ? hi : lo});
  m.faces = {{0, 2, 1}, {1, 2, 3}, {4, 5, 6}, {5, 7, 6}, {0, 1, 4}, {1, 5, 4},
             {2, 6, 3}, {3, 6, 7}, {0, 4, 2}, {2, 4, 6}, {1, 3, 5}, {3, 7, 5}};
  m.finalize();
  return m;
}

inline sp3d::Vec3 random_vec(std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  return {u(rng), u(rng), u(rng)};
}

}  // namespace testing


namespace testing {

struct GradError {
  double params = 0.0;
  double inputs = 0.0;
  int skipped = 0;  // coordinates whose +-h step flips a ReLU
};

// Worst relative error of mlp_backward against central differences on
// loss = sum(out .* R). The denominator uses the perturbation that survives
// rounding to f32. Steps that change the ReLU pattern straddle a kink and are
// skipped.
inline GradError mlp_gradient_error(const std::vector<int>& widths, std::uint64_t seed, int batch = 4,
                                    double h = 1e-3) {
  auto mlp = sp3d::mlp_init(widths, seed);
  std::mt19937_64 rng(seed + 101);
  std::normal_distribution<double> g(0.0, 1.0);
  for (auto& b : mlp.biases)
    for (int i = 0; i < b.size(); ++i) b[i] = static_cast<float>(0.1 * g(rng));
  sp3d::Matrix x(batch, widths.front()), r(batch, widths.back());
  for (int i = 0; i < x.size(); ++i) x.data()[i] = g(rng);
  for (int i = 0; i < r.size(); ++i) r.data()[i] = g(rng);

  auto pattern = [&](const sp3d::Matrix& in) {
    sp3d::MlpTape t;
    sp3d::mlp_forward(mlp, in, t);
    std::vector<bool> on;
    for (std::size_t l = 1; l < t.inputs.size(); ++l)
      for (int i = 0; i < t.inputs[l].size(); ++i) on.push_back(t.inputs[l].data()[i] > 0.0);
    return on;
  };
  auto loss = [&](const sp3d::Matrix& in) { return (sp3d::mlp_forward(mlp, in).array() * r.array()).sum(); };

  sp3d::MlpTape tape;
  sp3d::mlp_forward(mlp, x, tape);
  auto grads = sp3d::MlpGrads::zeros_like(mlp);
  sp3d::Matrix gx = sp3d::mlp_backward(mlp, tape, r, grads);
  const auto base = pattern(x);

  auto rel = [](double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-2}); };
  GradError err;
  auto params = mlp.parameters();
  auto analytic = grads.gradients();
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (std::size_t i = 0; i < params[t].size(); ++i) {
      float keep = params[t][i];
      params[t][i] = static_cast<float>(keep + h);
      double up = params[t][i], lp = loss(x);
      bool smooth = pattern(x) == base;
      params[t][i] = static_cast<float>(keep - h);
      double down = params[t][i], lm = loss(x);
      smooth = smooth && pattern(x) == base;
      params[t][i] = keep;
      if (!smooth) {
        ++err.skipped;
        continue;
      }
      err.params = std::max(err.params, rel(analytic[t][i], (lp - lm) / (up - down)));
    }
  }
  for (int i = 0; i < x.size(); ++i) {
    sp3d::Matrix xp = x, xm = x;
    xp.data()[i] += h;
    xm.data()[i] -= h;
    if (pattern(xp) != base || pattern(xm) != base) {
      ++err.skipped;
      continue;
    }
    err.inputs = std::max(err.inputs, rel(gx.data()[i], (loss(xp) - loss(xm)) / (2 * h)));
  }
  return err;
}

}  // namespace testing
