#include "ntkmeta/network.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ntkmeta/error.hpp"
#include "ntkmeta/rng.hpp"

namespace ntkmeta {

namespace {

std::size_t effective_fan_in(const LayerSpec& l) {
  return l.kind == LayerKind::conv1d ? l.fan_in * l.kernel_width : l.fan_in;
}

void dense_forward(const LayerSpec& l, const double* w, const double* b, const Matrix& in,
                   Matrix& out) {
  out = Matrix(in.rows(), l.fan_out);
  for (std::size_t s = 0; s < in.rows(); ++s) {
    const double* x = in.row(s).data();
    double* y = out.row(s).data();
    for (std::size_t o = 0; o < l.fan_out; ++o) {
      const double* wo = w + o * l.fan_in;
      double acc = b ? b[o] : 0.0;
      for (std::size_t i = 0; i < l.fan_in; ++i) acc += wo[i] * x[i];
      y[o] = acc;
    }
  }
}

void dense_backward(const LayerSpec& l, const double* w, const Matrix& in, const Matrix& dout,
                    double* dw, double* db, Matrix* din) {
  if (din) *din = Matrix(in.rows(), l.fan_in);
  for (std::size_t s = 0; s < in.rows(); ++s) {
    const double* x = in.row(s).data();
    const double* g = dout.row(s).data();
    double* dx = din ? din->row(s).data() : nullptr;
    for (std::size_t o = 0; o < l.fan_out; ++o) {
      const double go = g[o];
      if (go == 0.0) continue;
      if (dw) {
        double* dwo = dw + o * l.fan_in;
        for (std::size_t i = 0; i < l.fan_in; ++i) dwo[i] += go * x[i];
      }
      if (db) db[o] += go;
      if (dx) {
        const double* wo = w + o * l.fan_in;
        for (std::size_t i = 0; i < l.fan_in; ++i) dx[i] += go * wo[i];
      }
    }
  }
}

void conv_forward(const LayerSpec& l, std::size_t len, const double* w, const double* b,
                  const Matrix& in, Matrix& out) {
  const std::size_t width = l.kernel_width;
  const std::size_t half = width / 2;
  out = Matrix(in.rows(), l.fan_out * len);
  for (std::size_t s = 0; s < in.rows(); ++s) {
    const double* x = in.row(s).data();
    double* y = out.row(s).data();
    for (std::size_t o = 0; o < l.fan_out; ++o) {
      for (std::size_t p = 0; p < len; ++p) {
        double acc = b ? b[o] : 0.0;
        for (std::size_t c = 0; c < l.fan_in; ++c) {
          const double* wk = w + (o * l.fan_in + c) * width;
          const double* xc = x + c * len;
          for (std::size_t k = 0; k < width; ++k) acc += wk[k] * xc[(p + k + len - half) % len];
        }
        y[o * len + p] = acc;
      }
    }
  }
}

void conv_backward(const LayerSpec& l, std::size_t len, const double* w, const Matrix& in,
                   const Matrix& dout, double* dw, double* db, Matrix* din) {
  const std::size_t width = l.kernel_width;
  const std::size_t half = width / 2;
  if (din) *din = Matrix(in.rows(), l.fan_in * len);
  for (std::size_t s = 0; s < in.rows(); ++s) {
    const double* x = in.row(s).data();
    const double* g = dout.row(s).data();
    double* dx = din ? din->row(s).data() : nullptr;
    for (std::size_t o = 0; o < l.fan_out; ++o) {
      for (std::size_t p = 0; p < len; ++p) {
        const double go = g[o * len + p];
        if (go == 0.0) continue;
        if (db) db[o] += go;
        for (std::size_t c = 0; c < l.fan_in; ++c) {
          const std::size_t wi = (o * l.fan_in + c) * width;
          for (std::size_t k = 0; k < width; ++k) {
            const std::size_t q = c * len + (p + k + len - half) % len;
            if (dw) dw[wi + k] += go * x[q];
            if (dx) dx[q] += go * w[wi + k];
          }
        }
      }
    }
  }
}

void require_theta(const NetworkSpec& spec, std::span<const double> theta) {
  if (theta.size() != spec.param_count()) {
    throw Error(ErrorCode::dimension_mismatch,
                "parameter vector has length " + std::to_string(theta.size()) + ", network " +
                    spec.describe() + " expects " + std::to_string(spec.param_count()));
  }
}

/// Shared reverse pass; either output may be null.
void backward(const NetworkSpec& spec, std::span<const double> theta, const ForwardTrace& trace,
              const Matrix& cotangent, Vector* param_grad, Matrix* input_grad) {
  require_theta(spec, theta);
  const auto& layers = spec.layers();
  if (trace.pre.size() != layers.size() || trace.inputs.size() != layers.size()) {
    throw Error(ErrorCode::dimension_mismatch, "forward trace does not match network layers");
  }
  const Matrix& out = trace.pre.back();
  if (cotangent.rows() != out.rows() || cotangent.cols() != out.cols()) {
    throw Error(ErrorCode::dimension_mismatch, "cotangent shape " + cotangent.shape_string() +
                                                   " does not match outputs " +
                                                   out.shape_string());
  }
  if (param_grad) param_grad->assign(spec.param_count(), 0.0);

  Matrix delta = cotangent;
  for (std::size_t h = layers.size(); h-- > 0;) {
    const LayerSpec& l = layers[h];
    if (h + 1 < layers.size()) {
      const Matrix& pre = trace.pre[h];
      for (std::size_t i = 0; i < delta.size(); ++i)
        if (!(pre.data()[i] > 0.0)) delta.data()[i] = 0.0;
    }
    const std::size_t off = spec.layer_offset(h);
    const double* w = theta.data() + off;
    double* dw = param_grad ? param_grad->data() + off : nullptr;
    double* db = (param_grad && spec.has_bias()) ? dw + spec.weight_count(h) : nullptr;
    const bool need_din = h > 0 || input_grad != nullptr;
    Matrix din;
    if (l.kind == LayerKind::dense) {
      dense_backward(l, w, trace.inputs[h], delta, dw, db, need_din ? &din : nullptr);
    } else {
      conv_backward(l, spec.input_dim(), w, trace.inputs[h], delta, dw, db,
                    need_din ? &din : nullptr);
    }
    if (need_din) delta = std::move(din);
  }
  if (input_grad) *input_grad = std::move(delta);
}

}  // namespace

NetworkSpec::NetworkSpec(std::size_t input_dim, std::size_t output_dim,
                         std::vector<LayerSpec> layers, bool bias, bool allow_linear)
    : input_dim_(input_dim),
      output_dim_(output_dim),
      layers_(std::move(layers)),
      bias_(bias),
      allow_linear_(allow_linear) {
  validate();
  offsets_.resize(layers_.size() + 1, 0);
  for (std::size_t i = 0; i < layers_.size(); ++i)
    offsets_[i + 1] = offsets_[i] + weight_count(i) + bias_count(i);
}

NetworkSpec NetworkSpec::mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                             std::size_t output_dim, bool bias) {
  std::vector<LayerSpec> layers;
  std::size_t prev = input_dim;
  for (std::size_t h : hidden) {
    layers.push_back({LayerKind::dense, prev, h, 0});
    prev = h;
  }
  layers.push_back({LayerKind::dense, prev, output_dim, 0});
  return NetworkSpec(input_dim, output_dim, std::move(layers), bias);
}

NetworkSpec NetworkSpec::conv(std::size_t input_dim, const std::vector<std::size_t>& channels,
                              std::size_t kernel_width, const std::vector<std::size_t>& dense_hidden,
                              std::size_t output_dim, bool bias) {
  std::vector<LayerSpec> layers;
  std::size_t prev_channels = 1;
  for (std::size_t c : channels) {
    layers.push_back({LayerKind::conv1d, prev_channels, c, kernel_width});
    prev_channels = c;
  }
  std::size_t prev = prev_channels * input_dim;
  for (std::size_t h : dense_hidden) {
    layers.push_back({LayerKind::dense, prev, h, 0});
    prev = h;
  }
  layers.push_back({LayerKind::dense, prev, output_dim, 0});
  return NetworkSpec(input_dim, output_dim, std::move(layers), bias);
}

NetworkSpec NetworkSpec::linear(std::size_t input_dim, std::size_t output_dim, bool bias) {
  return NetworkSpec(input_dim, output_dim, {{LayerKind::dense, input_dim, output_dim, 0}}, bias,
                     true);
}

std::size_t NetworkSpec::weight_count(std::size_t i) const {
  const LayerSpec& l = layers_.at(i);
  return l.fan_out * effective_fan_in(l);
}

std::size_t NetworkSpec::bias_count(std::size_t i) const {
  return bias_ ? layers_.at(i).fan_out : 0;
}

std::size_t NetworkSpec::units(std::size_t i) const {
  const LayerSpec& l = layers_.at(i);
  return l.kind == LayerKind::conv1d ? l.fan_out * input_dim_ : l.fan_out;
}

void NetworkSpec::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::invalid_argument, msg); };
  if (input_dim_ == 0 || output_dim_ == 0) fail("network dims must be positive");
  if (layers_.empty()) fail("network needs at least one layer");
  if (layers_.size() < 2 && !allow_linear_) fail("network needs at least one hidden layer");
  bool seen_dense = false;
  std::size_t prev_units = input_dim_;
  std::size_t prev_channels = 1;
  bool prev_conv = false;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& l = layers_[i];
    const std::string where = "layer " + std::to_string(i) + ": ";
    if (l.fan_out == 0) fail(where + "fan_out must be positive");
    if (l.kind == LayerKind::conv1d) {
      if (seen_dense) fail(where + "conv layers must precede dense layers");
      if (l.kernel_width == 0 || l.kernel_width > input_dim_)
        fail(where + "kernel_width must be in [1, input_dim]");
      const std::size_t expect = i == 0 ? 1 : prev_channels;
      if (l.fan_in != expect) fail(where + "conv fan_in must equal incoming channels");
      prev_channels = l.fan_out;
      prev_units = l.fan_out * input_dim_;
      prev_conv = true;
    } else {
      seen_dense = true;
      if (l.fan_in != prev_units)
        fail(where + "fan_in " + std::to_string(l.fan_in) + " does not match incoming width " +
             std::to_string(prev_units));
      prev_units = l.fan_out;
      prev_conv = false;
    }
  }
  if (prev_conv) fail("last layer must be dense");
  if (prev_units != output_dim_) fail("last layer fan_out must equal output_dim");
}

std::string NetworkSpec::describe() const {
  std::ostringstream os;
  os << input_dim_;
  for (const auto& l : layers_) {
    os << (l.kind == LayerKind::conv1d ? "-c" : "-") << l.fan_out;
    if (l.kind == LayerKind::conv1d) os << 'w' << l.kernel_width;
  }
  if (!bias_) os << " (no bias)";
  return os.str();
}

Dataset concat(const Dataset& a, const Dataset& b) { return {vstack(a.x, b.x), vstack(a.y, b.y)}; }

std::string_view to_string(LossKind kind) {
  return kind == LossKind::squared ? "squared" : "cross_entropy";
}

LossKind loss_kind_from_string(std::string_view name) {
  if (name == "squared") return LossKind::squared;
  if (name == "cross_entropy" || name == "cross-entropy") return LossKind::cross_entropy;
  throw Error(ErrorCode::invalid_argument, "unknown loss kind '" + std::string(name) + "'");
}

std::vector<LayerParams> unflatten(const NetworkSpec& spec, std::span<const double> theta) {
  require_theta(spec, theta);
  std::vector<LayerParams> out;
  for (std::size_t i = 0; i < spec.layers().size(); ++i) {
    const LayerSpec& l = spec.layers()[i];
    const std::size_t off = spec.layer_offset(i);
    const std::size_t nw = spec.weight_count(i);
    LayerParams p;
    p.weights = Matrix(l.fan_out, effective_fan_in(l),
                       std::vector<double>(theta.begin() + off, theta.begin() + off + nw));
    p.bias.assign(theta.begin() + off + nw, theta.begin() + off + nw + spec.bias_count(i));
    out.push_back(std::move(p));
  }
  return out;
}

ParamVector flatten(const NetworkSpec& spec, const std::vector<LayerParams>& layers) {
  if (layers.size() != spec.layers().size()) {
    throw Error(ErrorCode::dimension_mismatch, "layer count mismatch in flatten");
  }
  ParamVector theta;
  theta.reserve(spec.param_count());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].weights.size() != spec.weight_count(i) ||
        layers[i].bias.size() != spec.bias_count(i)) {
      throw Error(ErrorCode::dimension_mismatch,
                  "layer " + std::to_string(i) + " parameter shape mismatch in flatten");
    }
    theta.insert(theta.end(), layers[i].weights.values().begin(), layers[i].weights.values().end());
    theta.insert(theta.end(), layers[i].bias.begin(), layers[i].bias.end());
  }
  return theta;
}

ParamVector init_params(const NetworkSpec& spec, std::uint64_t seed) {
  ParamVector theta(spec.param_count(), 0.0);
  for (std::size_t i = 0; i < spec.layers().size(); ++i) {
    CounterRng rng(seed, {0x1a7e5ULL, i});
    const double stddev = std::sqrt(2.0 / static_cast<double>(effective_fan_in(spec.layers()[i])));
    const std::size_t off = spec.layer_offset(i);
    for (std::size_t k = 0; k < spec.weight_count(i); ++k) theta[off + k] = rng.normal(0.0, stddev);
  }
  return theta;
}

ForwardResult forward(const NetworkSpec& spec, std::span<const double> theta, const Matrix& x) {
  require_theta(spec, theta);
  if (x.cols() != spec.input_dim()) {
    throw Error(ErrorCode::dimension_mismatch, "input batch " + x.shape_string() +
                                                   " does not match input_dim " +
                                                   std::to_string(spec.input_dim()));
  }
  const auto& layers = spec.layers();
  ForwardResult r;
  r.trace.inputs.reserve(layers.size());
  r.trace.pre.reserve(layers.size());
  Matrix act = x;
  for (std::size_t h = 0; h < layers.size(); ++h) {
    const LayerSpec& l = layers[h];
    const std::size_t off = spec.layer_offset(h);
    const double* w = theta.data() + off;
    const double* b = spec.has_bias() ? w + spec.weight_count(h) : nullptr;
    Matrix pre;
    if (l.kind == LayerKind::dense) {
      dense_forward(l, w, b, act, pre);
    } else {
      conv_forward(l, spec.input_dim(), w, b, act, pre);
    }
    r.trace.inputs.push_back(std::move(act));
    if (h + 1 < layers.size()) {
      act = pre;
      for (double& v : act.data()) v = v > 0.0 ? v : 0.0;
    }
    r.trace.pre.push_back(std::move(pre));
  }
  r.outputs = r.trace.pre.back();
  return r;
}

Matrix predict(const NetworkSpec& spec, std::span<const double> theta, const Matrix& x) {
  return forward(spec, theta, x).outputs;
}

Vector param_vjp(const NetworkSpec& spec, std::span<const double> theta, const ForwardTrace& trace,
                 const Matrix& cotangent) {
  Vector g;
  backward(spec, theta, trace, cotangent, &g, nullptr);
  return g;
}

Matrix input_vjp(const NetworkSpec& spec, std::span<const double> theta, const ForwardTrace& trace,
                 const Matrix& cotangent) {
  Matrix g;
  backward(spec, theta, trace, cotangent, nullptr, &g);
  return g;
}

double loss_value(const Matrix& outputs, const Matrix& targets, LossKind kind) {
  if (outputs.rows() != targets.rows() || outputs.cols() != targets.cols()) {
    throw Error(ErrorCode::dimension_mismatch, "loss: outputs " + outputs.shape_string() +
                                                   " vs targets " + targets.shape_string());
  }
  const std::size_t n = outputs.rows();
  if (n == 0) throw Error(ErrorCode::invalid_argument, "loss: empty batch");
  double total = 0.0;
  if (kind == LossKind::squared) {
    for (std::size_t i = 0; i < outputs.size(); ++i) {
      const double r = outputs.data()[i] - targets.data()[i];
      total += r * r;
    }
    return total / (2.0 * static_cast<double>(n));
  }
  if (outputs.cols() < 2) {
    throw Error(ErrorCode::invalid_argument, "cross-entropy loss needs output_dim >= 2");
  }
  for (std::size_t s = 0; s < n; ++s) {
    const auto f = outputs.row(s);
    const auto y = targets.row(s);
    const double m = *std::max_element(f.begin(), f.end());
    double z = 0.0;
    for (double v : f) z += std::exp(v - m);
    const double lse = m + std::log(z);
    for (std::size_t c = 0; c < f.size(); ++c) total += y[c] * (lse - f[c]);
  }
  return total / static_cast<double>(n);
}

Matrix loss_output_grad(const Matrix& outputs, const Matrix& targets, LossKind kind) {
  if (outputs.rows() != targets.rows() || outputs.cols() != targets.cols()) {
    throw Error(ErrorCode::dimension_mismatch, "loss: outputs " + outputs.shape_string() +
                                                   " vs targets " + targets.shape_string());
  }
  const std::size_t n = outputs.rows();
  if (n == 0) throw Error(ErrorCode::invalid_argument, "loss: empty batch");
  const double inv_n = 1.0 / static_cast<double>(n);
  Matrix g(outputs.rows(), outputs.cols());
  if (kind == LossKind::squared) {
    for (std::size_t i = 0; i < g.size(); ++i)
      g.data()[i] = (outputs.data()[i] - targets.data()[i]) * inv_n;
    return g;
  }
  if (outputs.cols() < 2) {
    throw Error(ErrorCode::invalid_argument, "cross-entropy loss needs output_dim >= 2");
  }
  for (std::size_t s = 0; s < n; ++s) {
    const auto f = outputs.row(s);
    const auto y = targets.row(s);
    const double m = *std::max_element(f.begin(), f.end());
    double z = 0.0;
    for (double v : f) z += std::exp(v - m);
    double ysum = 0.0;
    for (double v : y) ysum += v;
    for (std::size_t c = 0; c < f.size(); ++c)
      g(s, c) = (ysum * std::exp(f[c] - m) / z - y[c]) * inv_n;
  }
  return g;
}

double loss(const NetworkSpec& spec, std::span<const double> theta, const Dataset& data,
            LossKind kind) {
  return loss_value(predict(spec, theta, data.x), data.y, kind);
}

Vector grad_loss(const NetworkSpec& spec, std::span<const double> theta, const Dataset& data,
                 LossKind kind) {
  return loss_and_grad(spec, theta, data, kind).second;
}

std::pair<double, Vector> loss_and_grad(const NetworkSpec& spec, std::span<const double> theta,
                                        const Dataset& data, LossKind kind) {
  ForwardResult fr = forward(spec, theta, data.x);
  const double value = loss_value(fr.outputs, data.y, kind);
  Matrix cot = loss_output_grad(fr.outputs, data.y, kind);
  return {value, param_vjp(spec, theta, fr.trace, cot)};
}

Matrix jacobian(const NetworkSpec& spec, std::span<const double> theta,
                std::span<const double> x) {
  ForwardResult fr = forward(spec, theta, Matrix::row_vector(x));
  const std::size_t dy = spec.output_dim();
  Matrix jac(dy, spec.param_count());
  Matrix cot(1, dy);
  for (std::size_t j = 0; j < dy; ++j) {
    std::fill(cot.data().begin(), cot.data().end(), 0.0);
    cot(0, j) = 1.0;
    Vector g = param_vjp(spec, theta, fr.trace, cot);
    std::copy(g.begin(), g.end(), jac.row(j).begin());
  }
  return jac;
}

std::vector<Matrix> batch_jacobians(const NetworkSpec& spec, std::span<const double> theta,
                                    const Matrix& x) {
  std::vector<Matrix> out;
  out.reserve(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) out.push_back(jacobian(spec, theta, x.row(i)));
  return out;
}

std::vector<double> spectral_norms(const NetworkSpec& spec, std::span<const double> theta) {
  const auto layers = unflatten(spec, theta);
  std::vector<double> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (spec.layers()[i].kind == LayerKind::conv1d) {
      out.push_back(std::sqrt(static_cast<double>(spec.input_dim())) *
                    norm2(layers[i].weights.data()));
    } else {
      out.push_back(spectral_norm(layers[i].weights, 50, 1e-8));
    }
  }
  return out;
}

}  // namespace ntkmeta
