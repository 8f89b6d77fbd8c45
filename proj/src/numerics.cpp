#include "sp3d/numerics.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "binary_io.hpp"
#include "sp3d/error.hpp"

namespace sp3d {

namespace {
constexpr char kCheckpointMagic[9] = "SP3DCKPT";
constexpr double kPi = 3.14159265358979323846;
}  // namespace

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
  return n;
}

std::vector<std::span<float>> Mlp::parameters() {
  std::vector<std::span<float>> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.emplace_back(weights[l].data(), static_cast<std::size_t>(weights[l].size()));
    out.emplace_back(biases[l].data(), static_cast<std::size_t>(biases[l].size()));
  }
  return out;
}

std::vector<std::span<const float>> Mlp::parameters() const {
  std::vector<std::span<const float>> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.emplace_back(weights[l].data(), static_cast<std::size_t>(weights[l].size()));
    out.emplace_back(biases[l].data(), static_cast<std::size_t>(biases[l].size()));
  }
  return out;
}

Mlp mlp_init(const std::vector<int>& widths, std::uint64_t seed) {
  if (widths.size() < 2) throw InvalidArgument("mlp_init: need at least two layer widths");
  for (int w : widths)
    if (w <= 0) throw InvalidArgument("mlp_init: layer widths must be positive");
  Mlp mlp;
  mlp.widths = widths;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const int in = widths[l], out = widths[l + 1];
    double stddev = std::sqrt(2.0 / in);
    MatrixF w(out, in);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<float>(stddev * gauss(rng));
    mlp.weights.push_back(std::move(w));
    mlp.biases.push_back(Eigen::VectorXf::Zero(out));
  }
  return mlp;
}

MlpGrads MlpGrads::zeros_like(const Mlp& mlp) {
  MlpGrads g;
  for (std::size_t l = 0; l < mlp.num_layers(); ++l) {
    g.weights.push_back(Matrix::Zero(mlp.weights[l].rows(), mlp.weights[l].cols()));
    g.biases.push_back(Eigen::VectorXd::Zero(mlp.biases[l].size()));
  }
  return g;
}

void MlpGrads::set_zero() {
  for (auto& w : weights) w.setZero();
  for (auto& b : biases) b.setZero();
}

std::vector<std::span<const double>> MlpGrads::gradients() const {
  std::vector<std::span<const double>> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.emplace_back(weights[l].data(), static_cast<std::size_t>(weights[l].size()));
    out.emplace_back(biases[l].data(), static_cast<std::size_t>(biases[l].size()));
  }
  return out;
}

namespace {

void check_input(const Mlp& mlp, const Matrix& batch) {
  if (batch.cols() != mlp.in_dim())
    throw InvalidArgument("mlp: input has " + std::to_string(batch.cols()) + " columns, expected " +
                          std::to_string(mlp.in_dim()));
  if (!batch.allFinite()) throw InvalidArgument("mlp: non-finite input");
}

}  // namespace

Matrix mlp_forward(const Mlp& mlp, const Matrix& batch, MlpTape& tape) {
  check_input(mlp, batch);
  tape.inputs.resize(mlp.num_layers());
  Matrix h = batch;
  for (std::size_t l = 0; l < mlp.num_layers(); ++l) {
    tape.inputs[l] = h;
    Matrix w = mlp.weights[l].cast<double>();
    Eigen::RowVectorXd b = mlp.biases[l].cast<double>().transpose();
    // coefficient-wise product: each row's result does not depend on the rest of the batch
    h.noalias() = tape.inputs[l].lazyProduct(w.transpose());
    h.rowwise() += b;
    if (l + 1 < mlp.num_layers()) h = h.cwiseMax(0.0);
  }
  tape.output = h;
  return h;
}

Matrix mlp_forward(const Mlp& mlp, const Matrix& batch) {
  MlpTape tape;
  return mlp_forward(mlp, batch, tape);
}

Matrix mlp_backward(const Mlp& mlp, const MlpTape& tape, const Matrix& out_grad, MlpGrads& grads) {
  if (out_grad.cols() != mlp.out_dim() || out_grad.rows() != tape.output.rows())
    throw InvalidArgument("mlp_backward: output gradient shape mismatch");
  Matrix delta = out_grad;
  for (std::size_t l = mlp.num_layers(); l-- > 0;) {
    if (l + 1 < mlp.num_layers()) {
      // ReLU derivative: the next layer's input is this layer's activation.
      const Matrix& act = tape.inputs[l + 1];
      delta = (act.array() > 0.0).select(delta, 0.0);
    }
    grads.weights[l].noalias() += delta.transpose() * tape.inputs[l];
    grads.biases[l] += delta.colwise().sum().transpose();
    Matrix w = mlp.weights[l].cast<double>();
    delta = delta * w;
  }
  return delta;
}

void Adam::step(const std::vector<std::span<float>>& params, const std::vector<std::span<const double>>& grads) {
  if (params.size() != grads.size()) throw InvalidArgument("adam: parameter/gradient list mismatch");
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw InvalidArgument("adam: parameter list changed between steps");
  ++step_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (std::size_t b = 0; b < params.size(); ++b) {
    if (params[b].size() != grads[b].size() || params[b].size() != m_[b].size())
      throw InvalidArgument("adam: shape mismatch");
    for (std::size_t i = 0; i < params[b].size(); ++i) {
      double g = grads[b][i];
      double& m = m_[b][i];
      double& v = v_[b][i];
      m = config_.beta1 * m + (1.0 - config_.beta1) * g;
      v = config_.beta2 * v + (1.0 - config_.beta2) * g * g;
      double update = config_.lr * (m / c1) / (std::sqrt(v / c2) + config_.eps);
      params[b][i] = static_cast<float>(params[b][i] - update);
    }
  }
}

void posenc(std::span<const double> x, const PosEnc& cfg, std::span<double> out) {
  if (out.size() != static_cast<std::size_t>(cfg.output_dim(static_cast<int>(x.size()))))
    throw InvalidArgument("posenc: output buffer has the wrong size");
  std::size_t k = 0;
  for (double xi : x) {
    if (cfg.include_input) out[k++] = xi;
    double freq = kPi;
    for (int l = 0; l < cfg.n_frequencies; ++l, freq *= 2.0) {
      out[k++] = std::sin(freq * xi);
      out[k++] = std::cos(freq * xi);
    }
  }
}

std::vector<double> posenc(std::span<const double> x, const PosEnc& cfg) {
  std::vector<double> out(static_cast<std::size_t>(cfg.output_dim(static_cast<int>(x.size()))));
  posenc(x, cfg, out);
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  std::set<std::string> seen;
  for (const auto& t : tensors) {
    if (!seen.insert(t.name).second) throw InvalidArgument("checkpoint: duplicate tensor name '" + t.name + "'");
    std::size_t numel = 1;
    for (auto d : t.tensor.dims) numel *= d;
    if (numel != t.tensor.data.size()) throw InvalidArgument("checkpoint: tensor '" + t.name + "' shape mismatch");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(kCheckpointMagic, 8);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.tensor.dims.size()));
    detail::put_span<std::uint32_t>(out, t.tensor.dims);
    detail::put_span<float>(out, t.tensor.data);
  }
  if (!out) throw FormatError("failed writing " + path.string());
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  detail::expect_magic(in, kCheckpointMagic);
  if (auto v = detail::get<std::uint32_t>(in, "checkpoint header"); v != kCheckpointVersion)
    throw FormatError("checkpoint version mismatch: " + std::to_string(v));
  auto count = detail::get<std::uint32_t>(in, "checkpoint header");
  std::vector<NamedTensor> tensors;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name.resize(detail::get<std::uint32_t>(in, "tensor name length"));
    if (!in.read(t.name.data(), static_cast<std::streamsize>(t.name.size()))) throw FormatError("truncated tensor name");
    if (!seen.insert(t.name).second) throw FormatError("checkpoint: duplicate tensor name '" + t.name + "'");
    t.tensor.dims.resize(detail::get<std::uint32_t>(in, "tensor rank"));
    detail::get_span<std::uint32_t>(in, t.tensor.dims, "tensor dims");
    std::size_t numel = 1;
    for (auto d : t.tensor.dims) numel *= d;
    t.tensor.data.resize(numel);
    detail::get_span<float>(in, t.tensor.data, "tensor data");
    tensors.push_back(std::move(t));
  }
  return tensors;
}

void append_mlp(std::vector<NamedTensor>& tensors, const std::string& prefix, const Mlp& mlp) {
  for (std::size_t l = 0; l < mlp.num_layers(); ++l) {
    const auto& w = mlp.weights[l];
    const auto& b = mlp.biases[l];
    std::string base = prefix + "." + std::to_string(l);
    tensors.push_back({base + ".weight",
                       {{static_cast<std::uint32_t>(w.rows()), static_cast<std::uint32_t>(w.cols())},
                        std::vector<float>(w.data(), w.data() + w.size())}});
    tensors.push_back({base + ".bias",
                       {{static_cast<std::uint32_t>(b.size())}, std::vector<float>(b.data(), b.data() + b.size())}});
  }
}

Mlp mlp_from_tensors(const std::vector<NamedTensor>& tensors, const std::string& prefix) {
  auto find = [&](const std::string& name) -> const Tensor* {
    for (const auto& t : tensors)
      if (t.name == name) return &t.tensor;
    return nullptr;
  };
  Mlp mlp;
  for (std::size_t l = 0;; ++l) {
    std::string base = prefix + "." + std::to_string(l);
    const Tensor* w = find(base + ".weight");
    const Tensor* b = find(base + ".bias");
    if (!w) break;
    if (!b || w->dims.size() != 2 || b->dims.size() != 1 || b->dims[0] != w->dims[0])
      throw FormatError("checkpoint: malformed layer " + base);
    int out = static_cast<int>(w->dims[0]), in = static_cast<int>(w->dims[1]);
    if (mlp.widths.empty()) mlp.widths.push_back(in);
    else if (mlp.widths.back() != in) throw FormatError("checkpoint: layer shapes do not chain at " + base);
    mlp.widths.push_back(out);
    mlp.weights.push_back(Eigen::Map<const MatrixF>(w->data.data(), out, in));
    mlp.biases.push_back(Eigen::Map<const Eigen::VectorXf>(b->data.data(), out));
  }
  if (mlp.weights.empty()) throw FormatError("checkpoint: no tensors with prefix '" + prefix + "'");
  return mlp;
}

}  // namespace sp3d
