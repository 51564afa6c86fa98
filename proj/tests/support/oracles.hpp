// Independent reference computations shared by the unit and acceptance
// suites. Nothing here calls into the code paths it checks.
#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "flowvae/vae.hpp"

namespace oracle {

using flowvae::nn::Matrix;
using flowvae::nn::Vector;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-7});
}

/// Loss 0.5*||x - decode(mu + sigma*noise)||^2 + KL evaluated with plain
/// loops over the layer weights (no Eigen expressions, no tape).
inline double vae_loss_naive(const flowvae::nn::VaeNet<double>& net, const std::vector<double>& x,
                             const std::vector<double>& noise) {
  auto dense = [](const flowvae::nn::DenseLayer<double>& l, const std::vector<double>& in) {
    std::vector<double> out(l.out());
    for (std::size_t o = 0; o < l.out(); ++o) {
      double s = l.bias(static_cast<Eigen::Index>(o));
      for (std::size_t i = 0; i < l.in(); ++i) s += l.weights(static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(i)) * in[i];
      out[o] = (l.activation == flowvae::nn::Activation::ReLU && s < 0) ? 0.0 : s;
    }
    return out;
  };
  std::vector<double> h = x;
  for (const auto& l : net.encoder().layers()) h = dense(l, h);
  const auto mu = dense(net.head().mu, h);
  const auto lv = dense(net.head().logvar, h);
  std::vector<double> z(mu.size());
  double kl = 0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    z[i] = mu[i] + std::exp(0.5 * lv[i]) * noise[i];
    kl += 0.5 * (mu[i] * mu[i] + std::exp(lv[i]) - 1.0 - lv[i]);
  }
  std::vector<double> y = z;
  for (const auto& l : net.decoder().layers()) y = dense(l, y);
  double rec = 0;
  for (std::size_t i = 0; i < x.size(); ++i) rec += 0.5 * (x[i] - y[i]) * (x[i] - y[i]);
  return rec + kl;
}

struct GradCheck {
  double max_rel_error = 0;
  std::size_t checked = 0;
};

/// Compares the analytic parameter and input gradients of one VAE point
/// against central differences of vae_loss_naive.
inline GradCheck check_vae_gradients(flowvae::nn::VaeNet<double>& net, const std::vector<double>& x,
                                     const std::vector<double>& noise, double h = 1e-6) {
  Matrix<double> X(static_cast<Eigen::Index>(x.size()), 1), N(static_cast<Eigen::Index>(noise.size()), 1);
  for (std::size_t i = 0; i < x.size(); ++i) X(static_cast<Eigen::Index>(i), 0) = x[i];
  for (std::size_t i = 0; i < noise.size(); ++i) N(static_cast<Eigen::Index>(i), 0) = noise[i];
  flowvae::nn::VaeTape<double> tape;
  net.forward(X, N, tape);
  auto grads = net.backward(tape, 1.0);
  const auto gspans = grads.spans();
  std::vector<std::vector<double>> analytic;
  for (auto s : gspans) analytic.emplace_back(s.begin(), s.end());

  GradCheck out;
  auto params = net.parameter_spans();
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (std::size_t k = 0; k < params[t].size(); ++k) {
      const double saved = params[t][k];
      params[t][k] = saved + h;
      const double up = vae_loss_naive(net, x, noise);
      params[t][k] = saved - h;
      const double down = vae_loss_naive(net, x, noise);
      params[t][k] = saved;
      out.max_rel_error = std::max(out.max_rel_error, relative_error(analytic[t][k], (up - down) / (2 * h)));
      ++out.checked;
    }
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double numeric = (vae_loss_naive(net, xp, noise) - vae_loss_naive(net, xm, noise)) / (2 * h);
    out.max_rel_error = std::max(out.max_rel_error, relative_error(grads.input(static_cast<Eigen::Index>(i), 0), numeric));
    ++out.checked;
  }
  return out;
}

/// Random small VAE with non-trivial weights and biases.
inline flowvae::nn::VaeNet<double> random_small_vae(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> width(2, 7), depth(1, 2), latent(1, 4);
  flowvae::nn::VaeArchitecture arch;
  arch.input = static_cast<std::size_t>(width(rng));
  arch.hidden.clear();
  for (int d = depth(rng); d > 0; --d) arch.hidden.push_back(static_cast<std::size_t>(width(rng)));
  arch.latent = static_cast<std::size_t>(latent(rng));
  flowvae::nn::VaeNet<double> net(arch);
  std::normal_distribution<double> w(0.0, 0.6);
  for (auto s : net.parameter_spans())
    for (auto& v : s) v = w(rng);
  return net;
}

/// Tie-adjusted Mann-Whitney statistic: fraction of (positive, negative)
/// pairs ranked correctly, ties counted one half.
inline double pairwise_auc(const std::vector<double>& scores, const std::vector<bool>& labels) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!labels[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j]) continue;
      pairs += 1;
      if (scores[i] > scores[j]) wins += 1;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

}  // namespace oracle
