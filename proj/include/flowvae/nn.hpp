// Dense network kernel: forward passes with a recorded tape, exact reverse
// mode gradients to parameters and inputs, diagonal Gaussian latent helpers
// and the Adam optimizer. Templated on the scalar so the same code runs in
// float for training and in double for finite-difference checks.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "flowvae/error.hpp"

namespace flowvae::nn {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

enum class Activation : std::uint8_t { Linear = 0, ReLU = 1 };

template <class T>
struct DenseLayer {
  Matrix<T> weights;  // out x in
  Vector<T> bias;     // out
  Activation activation = Activation::Linear;

  DenseLayer() = default;
  DenseLayer(std::size_t in, std::size_t out, Activation act)
      : weights(Matrix<T>::Zero(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in))),
        bias(Vector<T>::Zero(static_cast<Eigen::Index>(out))),
        activation(act) {}

  std::size_t in() const { return static_cast<std::size_t>(weights.cols()); }
  std::size_t out() const { return static_cast<std::size_t>(weights.rows()); }
};

template <class T>
struct DenseGrad {
  Matrix<T> weights;
  Vector<T> bias;
};

template <class T>
inline void apply_activation(Activation act, Matrix<T>& z) {
  if (act == Activation::ReLU) z = z.cwiseMax(T(0));
}

/// Pre-activation Wx + b for a batch of column vectors.
template <class T>
Matrix<T> dense_affine(const DenseLayer<T>& layer, const Matrix<T>& input) {
  if (static_cast<std::size_t>(input.rows()) != layer.in())
    raise(ErrorCode::DimensionMismatch, "layer expects width " + std::to_string(layer.in()) + ", got " +
                                            std::to_string(input.rows()));
  Matrix<T> z = layer.weights * input;
  z.colwise() += layer.bias;
  return z;
}

template <class T>
Matrix<T> dense_forward(const DenseLayer<T>& layer, const Matrix<T>& input) {
  Matrix<T> z = dense_affine(layer, input);
  apply_activation(layer.activation, z);
  return z;
}

template <class T>
Vector<T> dense_forward(const DenseLayer<T>& layer, const Vector<T>& input) {
  return dense_forward(layer, Matrix<T>(input)).col(0);
}

/// Backpropagates `upstream` (d loss / d output) through one layer given its
/// recorded input and pre-activation. Returns d loss / d input.
template <class T>
Matrix<T> dense_backward(const DenseLayer<T>& layer, const Matrix<T>& input, const Matrix<T>& pre,
                         const Matrix<T>& upstream, DenseGrad<T>& grad) {
  Matrix<T> dz = upstream;
  if (layer.activation == Activation::ReLU) dz = (pre.array() > T(0)).select(upstream, T(0));
  grad.weights.noalias() = dz * input.transpose();
  grad.bias = dz.rowwise().sum();
  return layer.weights.transpose() * dz;
}

// ---------------------------------------------------------------------------
// Multi-layer perceptron
// ---------------------------------------------------------------------------

/// Forward intermediates of one pass. Valid only while the owning network's
/// parameters are unchanged.
template <class T>
struct MlpTape {
  const void* owner = nullptr;
  std::uint64_t revision = 0;
  std::vector<Matrix<T>> inputs;  // input to each layer
  std::vector<Matrix<T>> pre;     // pre-activation of each layer
};

template <class T>
struct MlpGrads {
  std::vector<DenseGrad<T>> layers;
  Matrix<T> input;
};

template <class T>
class Mlp {
 public:
  Mlp() = default;
  explicit Mlp(std::vector<DenseLayer<T>> layers) : layers_(std::move(layers)) { check_widths(); }

  /// widths = {in, h1, ..., out}; hidden layers use `hidden`, the last one
  /// uses `output`.
  static Mlp make(const std::vector<std::size_t>& widths, Activation hidden, Activation output) {
    std::vector<DenseLayer<T>> layers;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i)
      layers.emplace_back(widths[i], widths[i + 1], i + 2 == widths.size() ? output : hidden);
    return Mlp(std::move(layers));
  }

  const std::vector<DenseLayer<T>>& layers() const { return layers_; }
  std::vector<DenseLayer<T>>& mutable_layers() {
    ++revision_;
    return layers_;
  }
  std::uint64_t revision() const { return revision_; }
  void touch() { ++revision_; }

  std::size_t in() const { return layers_.empty() ? 0 : layers_.front().in(); }
  std::size_t out() const { return layers_.empty() ? 0 : layers_.back().out(); }

  Matrix<T> forward(const Matrix<T>& x, MlpTape<T>* tape = nullptr) const {
    if (tape) {
      tape->owner = this;
      tape->revision = revision_;
      tape->inputs.clear();
      tape->pre.clear();
    }
    Matrix<T> h = x;
    for (const auto& layer : layers_) {
      Matrix<T> z = dense_affine(layer, h);
      if (tape) {
        tape->inputs.push_back(std::move(h));
        tape->pre.push_back(z);
      }
      apply_activation(layer.activation, z);
      h = std::move(z);
    }
    return h;
  }

  MlpGrads<T> backward(const MlpTape<T>& tape, const Matrix<T>& upstream) const {
    if (tape.owner != this || tape.revision != revision_ || tape.inputs.size() != layers_.size())
      raise(ErrorCode::StaleTape, "tape does not match the current network state");
    MlpGrads<T> g;
    g.layers.resize(layers_.size());
    Matrix<T> d = upstream;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      d = dense_backward(layers_[i], tape.inputs[i], tape.pre[i], d, g.layers[i]);
    }
    g.input = std::move(d);
    return g;
  }

  /// Parameter spans in the canonical order (per layer: weights, bias).
  /// Handing out mutable views invalidates existing tapes.
  std::vector<std::span<T>> parameter_spans() {
    ++revision_;
    std::vector<std::span<T>> out;
    for (auto& l : layers_) {
      out.emplace_back(l.weights.data(), static_cast<std::size_t>(l.weights.size()));
      out.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
    }
    return out;
  }

  static void append_grad_spans(std::vector<DenseGrad<T>>& grads, std::vector<std::span<const T>>& out) {
    for (auto& g : grads) {
      out.emplace_back(g.weights.data(), static_cast<std::size_t>(g.weights.size()));
      out.emplace_back(g.bias.data(), static_cast<std::size_t>(g.bias.size()));
    }
  }

 private:
  void check_widths() const {
    for (std::size_t i = 1; i < layers_.size(); ++i)
      if (layers_[i].in() != layers_[i - 1].out())
        raise(ErrorCode::DimensionMismatch, "layer " + std::to_string(i) + " input width mismatch");
  }

  std::vector<DenseLayer<T>> layers_;
  std::uint64_t revision_ = 0;
};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Glorot-uniform weights, zero biases.
template <class T>
void init_glorot(DenseLayer<T>& layer, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(layer.in() + layer.out()));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (Eigen::Index i = 0; i < layer.weights.size(); ++i) layer.weights.data()[i] = static_cast<T>(dist(rng));
  layer.bias.setZero();
}

template <class T>
void init_glorot(Mlp<T>& net, std::mt19937_64& rng) {
  for (auto& layer : net.mutable_layers()) init_glorot(layer, rng);
}

// ---------------------------------------------------------------------------
// Gaussian latent helpers
// ---------------------------------------------------------------------------

/// KL[N(mu, diag(exp(logvar))) || N(0, I)].
template <class T>
T gaussian_kl(const Vector<T>& mu, const Vector<T>& logvar) {
  if (mu.size() != logvar.size()) raise(ErrorCode::DimensionMismatch, "mu and logvar differ in length");
  return T(0.5) * (mu.array().square() + logvar.array().exp() - T(1) - logvar.array()).sum();
}

/// Column-wise KL for a batch.
template <class T>
Vector<T> gaussian_kl_batch(const Matrix<T>& mu, const Matrix<T>& logvar) {
  return (T(0.5) * (mu.array().square() + logvar.array().exp() - T(1) - logvar.array())).colwise().sum().transpose();
}

/// z = mu + exp(logvar / 2) * noise, with noise supplied by the caller.
template <class Derived>
auto reparameterize(const Eigen::MatrixBase<Derived>& mu, const Eigen::MatrixBase<Derived>& logvar,
                    const Eigen::MatrixBase<Derived>& noise) {
  using T = typename Derived::Scalar;
  if (mu.rows() != logvar.rows() || mu.rows() != noise.rows() || mu.cols() != logvar.cols() ||
      mu.cols() != noise.cols())
    raise(ErrorCode::DimensionMismatch, "reparameterize operands differ in shape");
  using Out = Eigen::Matrix<T, Derived::RowsAtCompileTime, Derived::ColsAtCompileTime>;
  Out z = mu + ((logvar.array() * T(0.5)).exp() * noise.array()).matrix();
  return z;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

template <class T>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> first;
  std::vector<std::vector<T>> second;
};

/// One Adam update with bias correction. Weight decay is decoupled:
/// p <- p - lr * wd * p is applied before the moment-based delta.
template <class T>
void adam_step(AdamState<T>& state, std::span<const std::span<T>> params, std::span<const std::span<const T>> grads) {
  if (params.size() != grads.size()) raise(ErrorCode::ShapeMismatch, "parameter and gradient counts differ");
  if (state.first.empty()) {
    state.first.resize(params.size());
    state.second.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.first[i].assign(params[i].size(), T(0));
      state.second[i].assign(params[i].size(), T(0));
    }
  }
  if (state.first.size() != params.size()) raise(ErrorCode::ShapeMismatch, "optimizer state tensor count differs");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size() || state.first[i].size() != params[i].size())
      raise(ErrorCode::ShapeMismatch, "tensor " + std::to_string(i) + " shape mismatch");
    for (T g : grads[i])
      if (!std::isfinite(static_cast<double>(g)))
        raise(ErrorCode::NonFiniteGradient, "non-finite gradient in tensor " + std::to_string(i));
  }

  const auto& c = state.config;
  const std::uint64_t t = ++state.step;
  const T b1 = static_cast<T>(c.beta1);
  const T b2 = static_cast<T>(c.beta2);
  const T correction1 = static_cast<T>(1.0 - std::pow(c.beta1, static_cast<double>(t)));
  const T correction2 = static_cast<T>(1.0 - std::pow(c.beta2, static_cast<double>(t)));
  const T lr = static_cast<T>(c.learning_rate);
  const T decay = static_cast<T>(c.learning_rate * c.weight_decay);
  const T eps = static_cast<T>(c.epsilon);

  for (std::size_t i = 0; i < params.size(); ++i) {
    T* p = params[i].data();
    const T* g = grads[i].data();
    T* m = state.first[i].data();
    T* v = state.second[i].data();
    const std::size_t n = params[i].size();
    for (std::size_t k = 0; k < n; ++k) {
      m[k] = b1 * m[k] + (T(1) - b1) * g[k];
      v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
      const T m_hat = m[k] / correction1;
      const T v_hat = v[k] / correction2;
      p[k] -= decay * p[k];
      p[k] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

template <class T>
void adam_step(AdamState<T>& state, const std::vector<std::span<T>>& params,
               const std::vector<std::span<const T>>& grads) {
  adam_step(state, std::span<const std::span<T>>(params), std::span<const std::span<const T>>(grads));
}

}  // namespace flowvae::nn
