#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ntkmeta/linalg.hpp"

namespace ntkmeta {

/// Flat network parameters, layer-major, weights then bias per layer.
using ParamVector = std::vector<double>;

enum class LayerKind { dense, conv1d };

/// One affine layer. For conv1d, fan_in/fan_out are channel counts and the
/// spatial length is the network input dimension (circular padding, stride 1).
struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
  std::size_t kernel_width = 0;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Architecture: ReLU after every layer except the last, which is linear.
class NetworkSpec {
 public:
  NetworkSpec() = default;
  NetworkSpec(std::size_t input_dim, std::size_t output_dim, std::vector<LayerSpec> layers,
              bool bias = true, bool allow_linear = false);

  static NetworkSpec mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                         std::size_t output_dim, bool bias = true);
  /// Conv front of `channels.size()` conv1d layers followed by dense layers.
  static NetworkSpec conv(std::size_t input_dim, const std::vector<std::size_t>& channels,
                          std::size_t kernel_width, const std::vector<std::size_t>& dense_hidden,
                          std::size_t output_dim, bool bias = true);
  /// Single linear layer (no hidden layer). Only for closed-form checks.
  static NetworkSpec linear(std::size_t input_dim, std::size_t output_dim, bool bias = false);

  std::size_t input_dim() const noexcept { return input_dim_; }
  std::size_t output_dim() const noexcept { return output_dim_; }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  std::size_t hidden_layers() const noexcept { return layers_.empty() ? 0 : layers_.size() - 1; }
  bool has_bias() const noexcept { return bias_; }
  bool is_linear() const noexcept { return allow_linear_ && layers_.size() == 1; }

  std::size_t param_count() const noexcept { return offsets_.empty() ? 0 : offsets_.back(); }
  /// Offset of layer `i`'s weights within the flat vector.
  std::size_t layer_offset(std::size_t i) const { return offsets_.at(i); }
  std::size_t weight_count(std::size_t i) const;
  std::size_t bias_count(std::size_t i) const;
  /// Activation width produced by layer `i`.
  std::size_t units(std::size_t i) const;

  void validate() const;
  std::string describe() const;

  friend bool operator==(const NetworkSpec& a, const NetworkSpec& b) {
    return a.input_dim_ == b.input_dim_ && a.output_dim_ == b.output_dim_ &&
           a.layers_ == b.layers_ && a.bias_ == b.bias_ && a.allow_linear_ == b.allow_linear_;
  }

 private:
  std::size_t input_dim_ = 0;
  std::size_t output_dim_ = 0;
  std::vector<LayerSpec> layers_;
  bool bias_ = true;
  bool allow_linear_ = false;
  std::vector<std::size_t> offsets_;
};

/// Per-layer inputs and pre-activations of one batch.
struct ForwardTrace {
  std::vector<Matrix> inputs;
  std::vector<Matrix> pre;
};

struct ForwardResult {
  Matrix outputs;
  ForwardTrace trace;
};

/// Inputs and targets; rows are samples.
struct Dataset {
  Matrix x;
  Matrix y;

  std::size_t size() const noexcept { return x.rows(); }
};

Dataset concat(const Dataset& a, const Dataset& b);

enum class LossKind { squared, cross_entropy };

std::string_view to_string(LossKind kind);
LossKind loss_kind_from_string(std::string_view name);

/// Layer-structured view of a parameter vector. Conv weights are stored as
/// fan_out × (fan_in · kernel_width).
struct LayerParams {
  Matrix weights;
  Vector bias;
};

std::vector<LayerParams> unflatten(const NetworkSpec& spec, std::span<const double> theta);
ParamVector flatten(const NetworkSpec& spec, const std::vector<LayerParams>& layers);

/// He initialization: weights ~ N(0, 2 / fan_in), biases 0.
ParamVector init_params(const NetworkSpec& spec, std::uint64_t seed);

ForwardResult forward(const NetworkSpec& spec, std::span<const double> theta, const Matrix& x);
Matrix predict(const NetworkSpec& spec, std::span<const double> theta, const Matrix& x);

/// Σ_b cotangent_bᵀ ∂f(x_b)/∂θ.
Vector param_vjp(const NetworkSpec& spec, std::span<const double> theta, const ForwardTrace& trace,
                 const Matrix& cotangent);
/// Row b is cotangent_bᵀ ∂f(x_b)/∂x_b.
Matrix input_vjp(const NetworkSpec& spec, std::span<const double> theta, const ForwardTrace& trace,
                 const Matrix& cotangent);

/// Squared loss uses 1/(2n) Σ ‖f − y‖²; cross-entropy is the mean negative
/// log-likelihood of softmax(f) against target distributions y.
double loss_value(const Matrix& outputs, const Matrix& targets, LossKind kind);
/// ∂L/∂f(x_i) for every sample, 1/n included.
Matrix loss_output_grad(const Matrix& outputs, const Matrix& targets, LossKind kind);

double loss(const NetworkSpec& spec, std::span<const double> theta, const Dataset& data,
            LossKind kind);
Vector grad_loss(const NetworkSpec& spec, std::span<const double> theta, const Dataset& data,
                 LossKind kind);
std::pair<double, Vector> loss_and_grad(const NetworkSpec& spec, std::span<const double> theta,
                                        const Dataset& data, LossKind kind);

/// d_y × P Jacobian of f at a single input.
Matrix jacobian(const NetworkSpec& spec, std::span<const double> theta, std::span<const double> x);
std::vector<Matrix> batch_jacobians(const NetworkSpec& spec, std::span<const double> theta,
                                    const Matrix& x);

/// s_1..s_{L+1}: spectral norm for dense layers, √d_x·‖w‖₂ for conv layers.
std::vector<double> spectral_norms(const NetworkSpec& spec, std::span<const double> theta);

}  // namespace ntkmeta
