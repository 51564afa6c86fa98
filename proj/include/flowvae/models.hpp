// The three detectors: VAE, plain autoencoder baseline and Gaussian-based
// thresholding (GBT), with training loops and scoring.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "flowvae/error.hpp"
#include "flowvae/features.hpp"
#include "flowvae/nn.hpp"
#include "flowvae/vae.hpp"

namespace flowvae {

enum class ModelKind : std::uint8_t { Vae = 1, Ae = 2, Gbt = 3 };

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::Vae: return "vae";
    case ModelKind::Ae: return "ae";
    case ModelKind::Gbt: return "gbt";
  }
  return "unknown";
}

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "vae") return ModelKind::Vae;
  if (s == "ae") return ModelKind::Ae;
  if (s == "gbt") return ModelKind::Gbt;
  raise(ErrorCode::InvalidConfig, "unknown model kind '" + s + "' (expected vae, ae or gbt)");
}

struct TrainConfig {
  std::uint64_t epochs = 50;
  std::uint64_t minibatch = 300;  // 256 is the AE default
  double weight_decay = 0.01;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  bool shuffle = true;
  std::uint64_t mc_samples = 1;

  static TrainConfig for_kind(ModelKind kind) {
    TrainConfig c;
    if (kind == ModelKind::Ae) c.minibatch = 256;
    return c;
  }

  void validate() const {
    if (minibatch == 0) raise(ErrorCode::InvalidConfig, "minibatch must be positive");
    if (mc_samples == 0) raise(ErrorCode::InvalidConfig, "mc_samples must be positive");
    if (!(learning_rate > 0) || !std::isfinite(learning_rate))
      raise(ErrorCode::InvalidConfig, "learning rate must be positive");
    if (!(weight_decay >= 0) || !std::isfinite(weight_decay))
      raise(ErrorCode::InvalidConfig, "weight decay must be non-negative");
  }

  nlohmann::json to_json() const {
    return {{"epochs", epochs},           {"minibatch", minibatch}, {"weight_decay", weight_decay},
            {"learning_rate", learning_rate}, {"seed", seed},       {"shuffle", shuffle},
            {"mc_samples", mc_samples}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.at("epochs").get<std::uint64_t>();
    c.minibatch = j.at("minibatch").get<std::uint64_t>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.shuffle = j.at("shuffle").get<bool>();
    c.mc_samples = j.value("mc_samples", std::uint64_t{1});
    return c;
  }

  bool operator==(const TrainConfig&) const = default;
};

/// Normalized training rows plus the hash of the feature list they follow.
struct Dataset {
  std::vector<std::vector<double>> rows;
  std::uint64_t feature_hash = 0;

  std::size_t size() const { return rows.size(); }
  std::size_t width() const { return rows.empty() ? 0 : rows.front().size(); }
};

inline void check_feature_hash(std::uint64_t model_hash, std::uint64_t data_hash) {
  if (model_hash != data_hash) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "model feature list %016llx, data feature list %016llx",
                  static_cast<unsigned long long>(model_hash), static_cast<unsigned long long>(data_hash));
    raise(ErrorCode::FeatureListMismatch, buf);
  }
}

namespace detail {

template <class T>
nn::Matrix<T> to_matrix(std::span<const std::vector<double>> rows, std::span<const std::size_t> order) {
  const auto d = static_cast<Eigen::Index>(rows.front().size());
  nn::Matrix<T> m(d, static_cast<Eigen::Index>(order.size()));
  for (std::size_t c = 0; c < order.size(); ++c) {
    const auto& r = rows[order[c]];
    for (Eigen::Index i = 0; i < d; ++i) m(i, static_cast<Eigen::Index>(c)) = static_cast<T>(r[static_cast<std::size_t>(i)]);
  }
  return m;
}

template <class T>
nn::Matrix<T> to_matrix(std::span<const std::vector<double>> rows) {
  std::vector<std::size_t> order(rows.size());
  std::iota(order.begin(), order.end(), 0);
  return to_matrix<T>(rows, order);
}

inline void check_dataset(const Dataset& data, std::size_t width) {
  if (data.rows.empty()) raise(ErrorCode::EmptyDataset, "training dataset is empty");
  for (const auto& r : data.rows) {
    if (r.size() != width) raise(ErrorCode::DimensionMismatch, "row width differs from model input width");
    for (double v : r)
      if (!std::isfinite(v)) raise(ErrorCode::InvalidConfig, "non-finite value in training data");
  }
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Epoch permutation, reproducible from (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, const TrainConfig& cfg, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (cfg.shuffle) {
    std::mt19937_64 rng(mix_seed(cfg.seed, 1000 + epoch));
    std::shuffle(order.begin(), order.end(), rng);
  }
  return order;
}

/// Runs `fn(begin, end)` over contiguous chunks on up to `workers` threads.
inline void parallel_chunks(std::size_t n, std::size_t workers, const std::function<void(std::size_t, std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> threads;
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t b = w * chunk, e = std::min(n, b + chunk);
    if (b >= e) break;
    threads.emplace_back(fn, b, e);
  }
  for (auto& t : threads) t.join();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

struct VaeModel {
  nn::VaeNet<float> net;
  Normalizer normalizer;
  std::uint64_t feature_hash = 0;
  TrainConfig config;
  std::vector<double> loss_history;  // mean loss per epoch
  std::uint64_t optimizer_steps = 0;
  double threshold = std::numeric_limits<double>::quiet_NaN();  // training-score threshold, if set
};

struct AeModel {
  nn::VaeArchitecture architecture;
  nn::Mlp<float> net;
  Normalizer normalizer;
  std::uint64_t feature_hash = 0;
  TrainConfig config = TrainConfig::for_kind(ModelKind::Ae);
  std::vector<double> loss_history;
  std::uint64_t optimizer_steps = 0;
  double threshold = std::numeric_limits<double>::quiet_NaN();
};

struct GbtModel {
  std::vector<double> mean;
  std::vector<double> stddev;
  Normalizer normalizer;
  std::uint64_t feature_hash = 0;
  double threshold = std::numeric_limits<double>::quiet_NaN();
};

// ---------------------------------------------------------------------------
// VAE
// ---------------------------------------------------------------------------

struct TrainObserver {
  std::function<void(std::uint64_t epoch, double mean_loss)> on_epoch;
};

/// Trains a VAE on normalized rows. Runs epochs * ceil(N / minibatch) Adam
/// steps on the mean minibatch loss with one (or mc_samples) noise draws per
/// point. Deterministic for a given seed.
inline VaeModel train_vae(const Dataset& data, const TrainConfig& config, const nn::VaeArchitecture& arch = {},
                          const TrainObserver& observer = {}) {
  config.validate();
  detail::check_dataset(data, arch.input);
  VaeModel model;
  model.net = nn::VaeNet<float>(arch);
  model.feature_hash = data.feature_hash;
  model.config = config;
  std::mt19937_64 init_rng(detail::mix_seed(config.seed, 0));
  model.net.init(init_rng);

  nn::AdamState<float> adam;
  adam.config.weight_decay = config.weight_decay;
  adam.config.learning_rate = config.learning_rate;
  std::mt19937_64 noise_rng(detail::mix_seed(config.seed, 1));
  std::normal_distribution<double> normal(0.0, 1.0);

  const std::size_t n = data.size();
  const std::size_t batch = std::min<std::size_t>(config.minibatch, n);
  for (std::uint64_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = detail::epoch_order(n, config, epoch);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t end = std::min(n, start + batch);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      nn::Matrix<float> x = detail::to_matrix<float>(data.rows, idx);
      const auto cols = x.cols();
      nn::Matrix<float> xs(x.rows(), cols * static_cast<Eigen::Index>(config.mc_samples));
      for (std::uint64_t s = 0; s < config.mc_samples; ++s) xs.middleCols(static_cast<Eigen::Index>(s) * cols, cols) = x;
      nn::Matrix<float> noise(static_cast<Eigen::Index>(arch.latent), xs.cols());
      for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = static_cast<float>(normal(noise_rng));

      nn::VaeTape<float> tape;
      model.net.forward(xs, noise, tape);
      const double batch_loss = static_cast<double>((tape.reconstruction + tape.kl).sum());
      if (!std::isfinite(batch_loss))
        raise(ErrorCode::NonFiniteLoss, "non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                            std::to_string(model.optimizer_steps));
      epoch_loss += batch_loss / static_cast<double>(config.mc_samples);
      auto grads = model.net.backward(tape, 1.0f / static_cast<float>(xs.cols()));
      auto params = model.net.parameter_spans();
      nn::adam_step(adam, params, grads.spans());
      ++model.optimizer_steps;
    }
    model.loss_history.push_back(epoch_loss / static_cast<double>(n));
    if (observer.on_epoch) observer.on_epoch(epoch, model.loss_history.back());
  }
  return model;
}

/// Noise-free VAE objective at each row (0.5 * ||x - decode(mu)||^2 + KL).
inline std::vector<double> vae_objective(const nn::VaeNet<float>& net, std::span<const std::vector<double>> rows) {
  if (rows.empty()) return {};
  nn::Matrix<float> x = detail::to_matrix<float>(rows);
  nn::VaeTape<float> tape;
  net.forward(x, nn::Matrix<float>::Zero(static_cast<Eigen::Index>(net.architecture().latent), x.cols()), tape);
  std::vector<double> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    out[i] = static_cast<double>(tape.reconstruction(static_cast<Eigen::Index>(i)) + tape.kl(static_cast<Eigen::Index>(i)));
  return out;
}

namespace detail {

template <class Reconstruct>
std::vector<double> mean_square_errors(std::span<const std::vector<double>> rows, std::size_t workers,
                                       Reconstruct&& reconstruct) {
  std::vector<double> out(rows.size());
  if (rows.empty()) return out;
  constexpr std::size_t kBlock = 512;
  const std::size_t blocks = (rows.size() + kBlock - 1) / kBlock;
  parallel_chunks(blocks, workers, [&](std::size_t b0, std::size_t b1) {
    for (std::size_t b = b0; b < b1; ++b) {
      const std::size_t s = b * kBlock, e = std::min(rows.size(), s + kBlock);
      nn::Matrix<float> x = to_matrix<float>(rows.subspan(s, e - s));
      nn::Matrix<float> xhat = reconstruct(x);
      const auto err = (x - xhat).array().square().colwise().sum();
      for (std::size_t i = s; i < e; ++i)
        out[i] = static_cast<double>(err(static_cast<Eigen::Index>(i - s))) / static_cast<double>(x.rows());
    }
  });
  return out;
}

}  // namespace detail

/// (1/d) * ||x - xhat||^2 with xhat decoded from the latent mean.
inline std::vector<double> reconstruction_errors(const VaeModel& model, std::span<const std::vector<double>> rows,
                                                 std::size_t workers = 1) {
  return detail::mean_square_errors(rows, workers,
                                    [&](const nn::Matrix<float>& x) { return model.net.reconstruct_mean(x); });
}

inline double reconstruction_error(const VaeModel& model, std::span<const double> x) {
  std::vector<std::vector<double>> rows{{x.begin(), x.end()}};
  return reconstruction_errors(model, rows).front();
}

// ---------------------------------------------------------------------------
// Autoencoder baseline
// ---------------------------------------------------------------------------

/// Trains the plain autoencoder on mean square reconstruction error.
inline AeModel train_ae(const Dataset& data, const TrainConfig& config, const nn::VaeArchitecture& arch = {},
                        const TrainObserver& observer = {}) {
  config.validate();
  detail::check_dataset(data, arch.input);
  AeModel model;
  model.architecture = arch;
  model.net = nn::make_autoencoder<float>(arch);
  model.feature_hash = data.feature_hash;
  model.config = config;
  std::mt19937_64 init_rng(detail::mix_seed(config.seed, 0));
  nn::init_glorot(model.net, init_rng);

  nn::AdamState<float> adam;
  adam.config.weight_decay = config.weight_decay;
  adam.config.learning_rate = config.learning_rate;
  const std::size_t n = data.size();
  const std::size_t batch = std::min<std::size_t>(config.minibatch, n);
  const float width = static_cast<float>(arch.input);
  for (std::uint64_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = detail::epoch_order(n, config, epoch);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t end = std::min(n, start + batch);
      nn::Matrix<float> x = detail::to_matrix<float>(data.rows, std::span<const std::size_t>(order.data() + start, end - start));
      nn::MlpTape<float> tape;
      nn::Matrix<float> xhat = model.net.forward(x, &tape);
      const nn::Matrix<float> diff = xhat - x;
      const double batch_loss = static_cast<double>(diff.squaredNorm()) / width;
      if (!std::isfinite(batch_loss)) raise(ErrorCode::NonFiniteLoss, "non-finite AE loss at epoch " + std::to_string(epoch));
      epoch_loss += batch_loss;
      auto g = model.net.backward(tape, (2.0f / (width * static_cast<float>(x.cols()))) * diff);
      std::vector<std::span<const float>> grads;
      nn::Mlp<float>::append_grad_spans(g.layers, grads);
      auto params = model.net.parameter_spans();
      nn::adam_step(adam, params, grads);
      ++model.optimizer_steps;
    }
    model.loss_history.push_back(epoch_loss / static_cast<double>(n));
    if (observer.on_epoch) observer.on_epoch(epoch, model.loss_history.back());
  }
  return model;
}

inline std::vector<double> reconstruction_errors(const AeModel& model, std::span<const std::vector<double>> rows,
                                                 std::size_t workers = 1) {
  return detail::mean_square_errors(rows, workers, [&](const nn::Matrix<float>& x) { return model.net.forward(x); });
}

inline double reconstruction_error(const AeModel& model, std::span<const double> x) {
  std::vector<std::vector<double>> rows{{x.begin(), x.end()}};
  return reconstruction_errors(model, rows).front();
}

// ---------------------------------------------------------------------------
// Gaussian-based thresholding
// ---------------------------------------------------------------------------

/// Per-feature population mean and std (floored at kStdFloor).
inline GbtModel gbt_fit(const Dataset& data) {
  if (data.rows.empty()) raise(ErrorCode::EmptyDataset, "GBT needs at least one row");
  const std::size_t d = data.width();
  GbtModel m;
  m.feature_hash = data.feature_hash;
  m.mean.assign(d, 0.0);
  m.stddev.assign(d, 0.0);
  const double n = static_cast<double>(data.size());
  for (const auto& r : data.rows) {
    if (r.size() != d) raise(ErrorCode::DimensionMismatch, "ragged dataset");
    for (std::size_t j = 0; j < d; ++j) m.mean[j] += r[j];
  }
  for (auto& v : m.mean) v /= n;
  for (const auto& r : data.rows)
    for (std::size_t j = 0; j < d; ++j) m.stddev[j] += (r[j] - m.mean[j]) * (r[j] - m.mean[j]);
  for (auto& v : m.stddev) v = std::max(std::sqrt(v / n), kStdFloor);
  return m;
}

/// mean(z) * std(z) * max(z) over z_j = |x_j - mu_j| / sigma_j. Zero whenever
/// all |z| are equal, since the std factor vanishes.
inline double gbt_score(const GbtModel& model, std::span<const double> x) {
  if (x.size() != model.mean.size()) raise(ErrorCode::DimensionMismatch, "GBT input width mismatch");
  const std::size_t d = x.size();
  std::vector<double> z(d);
  double sum = 0, mx = 0;
  for (std::size_t j = 0; j < d; ++j) {
    z[j] = std::abs(x[j] - model.mean[j]) / model.stddev[j];
    sum += z[j];
    mx = std::max(mx, z[j]);
  }
  const double mean = sum / static_cast<double>(d);
  double ss = 0;
  for (double v : z) ss += (v - mean) * (v - mean);
  return mean * std::sqrt(ss / static_cast<double>(d)) * mx;
}

inline std::vector<double> gbt_scores(const GbtModel& model, std::span<const std::vector<double>> rows) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(gbt_score(model, r));
  return out;
}

}  // namespace flowvae
