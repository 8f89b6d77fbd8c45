#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace sp3d {

// Row-major batches: one sample per row.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Fully connected ReLU network; the output layer is linear. Parameters are
/// stored in f32 and every forward/backward pass runs in f64.
struct Mlp {
  std::vector<int> widths;
  std::vector<MatrixF> weights;          // [layer] out x in
  std::vector<Eigen::VectorXf> biases;   // [layer] out

  std::size_t num_layers() const { return weights.size(); }
  int in_dim() const { return widths.front(); }
  int out_dim() const { return widths.back(); }
  std::size_t parameter_count() const;

  // Weight then bias for each layer, in layer order.
  std::vector<std::span<float>> parameters();
  std::vector<std::span<const float>> parameters() const;
};

Mlp mlp_init(const std::vector<int>& widths, std::uint64_t seed);

// Activations kept by the forward pass for backprop.
struct MlpTape {
  std::vector<Matrix> inputs;  // input to each layer (post-activation of the previous one)
  Matrix output;
};

struct MlpGrads {
  std::vector<Matrix> weights;
  std::vector<Eigen::VectorXd> biases;

  static MlpGrads zeros_like(const Mlp& mlp);
  void set_zero();
  std::vector<std::span<const double>> gradients() const;
};

Matrix mlp_forward(const Mlp& mlp, const Matrix& batch);
Matrix mlp_forward(const Mlp& mlp, const Matrix& batch, MlpTape& tape);

// Accumulates parameter gradients into `grads` and returns d(loss)/d(input).
Matrix mlp_backward(const Mlp& mlp, const MlpTape& tape, const Matrix& out_grad, MlpGrads& grads);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  // Parameter and gradient lists must keep the same shapes across calls.
  void step(const std::vector<std::span<float>>& params, const std::vector<std::span<const double>>& grads);

  std::uint64_t steps() const { return step_; }
  const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }

 private:
  AdamConfig config_;
  std::uint64_t step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct PosEnc {
  int n_frequencies = 6;
  bool include_input = true;

  int output_dim(int input_dim) const { return input_dim * (2 * n_frequencies + (include_input ? 1 : 0)); }
};

// Per component: [x?, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)].
void posenc(std::span<const double> x, const PosEnc& cfg, std::span<double> out);
std::vector<double> posenc(std::span<const double> x, const PosEnc& cfg);

// ---------------------------------------------------------------------------
// Checkpoints

struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

// "<prefix>.<layer>.weight" / "<prefix>.<layer>.bias"
void append_mlp(std::vector<NamedTensor>& tensors, const std::string& prefix, const Mlp& mlp);
Mlp mlp_from_tensors(const std::vector<NamedTensor>& tensors, const std::string& prefix);

}  // namespace sp3d
