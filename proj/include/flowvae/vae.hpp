// Variational autoencoder network: Gaussian encoder head, decoder, the
// negative variational lower bound and its exact gradient.
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "flowvae/nn.hpp"

namespace flowvae::nn {

struct VaeArchitecture {
  std::size_t input = 53;
  std::vector<std::size_t> hidden = {512, 512, 1024};  // encoder; the decoder mirrors it
  std::size_t latent = 100;

  bool operator==(const VaeArchitecture&) const = default;
};

template <class T>
struct GaussianHead {
  DenseLayer<T> mu;
  DenseLayer<T> logvar;
};

template <class T>
struct VaeTape {
  const void* owner = nullptr;
  std::uint64_t revision = 0;
  Matrix<T> x;
  MlpTape<T> encoder;
  Matrix<T> hidden;  // encoder output
  Matrix<T> mu;
  Matrix<T> logvar;
  Matrix<T> sigma;
  Matrix<T> noise;
  Matrix<T> z;
  MlpTape<T> decoder;
  Matrix<T> xhat;
  Vector<T> reconstruction;  // per column: 0.5 * ||x - xhat||^2
  Vector<T> kl;              // per column
};

template <class T>
struct VaeGrads {
  std::vector<DenseGrad<T>> encoder;
  DenseGrad<T> mu;
  DenseGrad<T> logvar;
  std::vector<DenseGrad<T>> decoder;
  Matrix<T> input;

  std::vector<std::span<const T>> spans() {
    std::vector<std::span<const T>> out;
    Mlp<T>::append_grad_spans(encoder, out);
    for (auto* g : {&mu, &logvar}) {
      out.emplace_back(g->weights.data(), static_cast<std::size_t>(g->weights.size()));
      out.emplace_back(g->bias.data(), static_cast<std::size_t>(g->bias.size()));
    }
    Mlp<T>::append_grad_spans(decoder, out);
    return out;
  }
};

/// Encoder [input -> hidden...] (ReLU), Gaussian head [-> latent] (linear
/// mu and log-variance), decoder [latent -> reversed hidden...] (ReLU) with a
/// linear output layer back to the input width.
template <class T>
class VaeNet {
 public:
  VaeNet() : VaeNet(VaeArchitecture{}) {}

  explicit VaeNet(const VaeArchitecture& arch) : arch_(arch) {
    std::vector<std::size_t> enc = {arch.input};
    enc.insert(enc.end(), arch.hidden.begin(), arch.hidden.end());
    encoder_ = Mlp<T>::make(enc, Activation::ReLU, Activation::ReLU);
    const std::size_t top = enc.back();
    head_.mu = DenseLayer<T>(top, arch.latent, Activation::Linear);
    head_.logvar = DenseLayer<T>(top, arch.latent, Activation::Linear);
    std::vector<std::size_t> dec = {arch.latent};
    dec.insert(dec.end(), arch.hidden.rbegin(), arch.hidden.rend());
    dec.push_back(arch.input);
    decoder_ = Mlp<T>::make(dec, Activation::ReLU, Activation::Linear);
  }

  const VaeArchitecture& architecture() const { return arch_; }
  const Mlp<T>& encoder() const { return encoder_; }
  const GaussianHead<T>& head() const { return head_; }
  const Mlp<T>& decoder() const { return decoder_; }

  /// Mutable access invalidates outstanding tapes.
  Mlp<T>& mutable_encoder() {
    ++revision_;
    return encoder_;
  }
  GaussianHead<T>& mutable_head() {
    ++revision_;
    return head_;
  }
  Mlp<T>& mutable_decoder() {
    ++revision_;
    return decoder_;
  }

  void init(std::mt19937_64& rng) {
    init_glorot(mutable_encoder(), rng);
    init_glorot(mutable_head().mu, rng);
    init_glorot(mutable_head().logvar, rng);
    init_glorot(mutable_decoder(), rng);
  }

  /// All layers in canonical order: encoder, mu, logvar, decoder.
  std::vector<const DenseLayer<T>*> all_layers() const {
    std::vector<const DenseLayer<T>*> out;
    for (auto& l : encoder_.layers()) out.push_back(&l);
    out.push_back(&head_.mu);
    out.push_back(&head_.logvar);
    for (auto& l : decoder_.layers()) out.push_back(&l);
    return out;
  }

  std::vector<std::span<T>> parameter_spans() {
    ++revision_;
    auto out = encoder_.parameter_spans();
    for (auto* l : {&head_.mu, &head_.logvar}) {
      out.emplace_back(l->weights.data(), static_cast<std::size_t>(l->weights.size()));
      out.emplace_back(l->bias.data(), static_cast<std::size_t>(l->bias.size()));
    }
    auto dec = decoder_.parameter_spans();
    out.insert(out.end(), dec.begin(), dec.end());
    return out;
  }

  std::pair<Matrix<T>, Matrix<T>> encode(const Matrix<T>& x) const {
    Matrix<T> h = encoder_.forward(x);
    return {dense_forward(head_.mu, h), dense_forward(head_.logvar, h)};
  }

  Matrix<T> decode(const Matrix<T>& z) const { return decoder_.forward(z); }

  /// Deterministic reconstruction through the latent mean.
  Matrix<T> reconstruct_mean(const Matrix<T>& x) const { return decode(encode(x).first); }

  /// Runs the stochastic forward pass for a batch (columns) with injected
  /// standard-normal noise and records everything needed by backward().
  void forward(const Matrix<T>& x, const Matrix<T>& noise, VaeTape<T>& tape) const {
    if (static_cast<std::size_t>(x.rows()) != arch_.input)
      raise(ErrorCode::DimensionMismatch, "input width " + std::to_string(x.rows()) + " != " +
                                              std::to_string(arch_.input));
    if (static_cast<std::size_t>(noise.rows()) != arch_.latent || noise.cols() != x.cols())
      raise(ErrorCode::DimensionMismatch, "noise shape does not match latent width and batch size");
    tape.owner = this;
    tape.revision = revision_;
    tape.x = x;
    tape.hidden = encoder_.forward(x, &tape.encoder);
    tape.mu = dense_forward(head_.mu, tape.hidden);
    tape.logvar = dense_forward(head_.logvar, tape.hidden);
    tape.sigma = (tape.logvar.array() * T(0.5)).exp().matrix();
    tape.noise = noise;
    tape.z = tape.mu + (tape.sigma.array() * noise.array()).matrix();
    tape.xhat = decoder_.forward(tape.z, &tape.decoder);
    tape.reconstruction = (T(0.5) * (x - tape.xhat).array().square()).colwise().sum().transpose();
    tape.kl = gaussian_kl_batch(tape.mu, tape.logvar);
  }

  /// Gradient of weight * sum_columns(reconstruction + kl) with respect to
  /// every parameter and to the input batch.
  VaeGrads<T> backward(const VaeTape<T>& tape, T weight) const {
    if (tape.owner != this || tape.revision != revision_)
      raise(ErrorCode::StaleTape, "tape does not match the current network state");
    VaeGrads<T> g;
    const Matrix<T> dxhat = weight * (tape.xhat - tape.x);
    MlpGrads<T> dec = decoder_.backward(tape.decoder, dxhat);
    g.decoder = std::move(dec.layers);
    const Matrix<T>& dz = dec.input;
    const Matrix<T> dmu = dz + weight * tape.mu;
    const Matrix<T> dlogvar =
        (dz.array() * tape.noise.array() * tape.sigma.array() * T(0.5) +
         weight * T(0.5) * (tape.sigma.array().square() - T(1)))
            .matrix();
    Matrix<T> dh = dense_backward(head_.mu, tape.hidden, tape.mu, dmu, g.mu);
    dh += dense_backward(head_.logvar, tape.hidden, tape.logvar, dlogvar, g.logvar);
    MlpGrads<T> enc = encoder_.backward(tape.encoder, dh);
    g.encoder = std::move(enc.layers);
    g.input = enc.input - dxhat;
    return g;
  }

  std::uint64_t revision() const { return revision_; }

 private:
  VaeArchitecture arch_;
  Mlp<T> encoder_;
  GaussianHead<T> head_;
  Mlp<T> decoder_;
  std::uint64_t revision_ = 0;
};

/// Negative variational lower bound for one point (up to an additive
/// constant): 0.5 * ||x - xhat(z)||^2 + KL, z = mu + sigma * noise.
template <class T>
T vae_loss(const VaeNet<T>& net, const Vector<T>& x, const Vector<T>& noise) {
  VaeTape<T> tape;
  net.forward(Matrix<T>(x), Matrix<T>(noise), tape);
  const T loss = tape.reconstruction(0) + tape.kl(0);
  if (!std::isfinite(static_cast<double>(loss))) raise(ErrorCode::NonFiniteActivation, "non-finite VAE loss");
  return loss;
}

/// Plain autoencoder with the VAE's widths and a deterministic linear latent
/// layer.
template <class T>
Mlp<T> make_autoencoder(const VaeArchitecture& arch) {
  std::vector<std::size_t> widths = {arch.input};
  widths.insert(widths.end(), arch.hidden.begin(), arch.hidden.end());
  widths.push_back(arch.latent);
  widths.insert(widths.end(), arch.hidden.rbegin(), arch.hidden.rend());
  widths.push_back(arch.input);
  Mlp<T> net = Mlp<T>::make(widths, Activation::ReLU, Activation::Linear);
  net.mutable_layers()[arch.hidden.size()].activation = Activation::Linear;
  return net;
}

}  // namespace flowvae::nn
