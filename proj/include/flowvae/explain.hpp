// Gradient explanations of VAE detections: input gradients of the noise-free
// objective, per-attack fingerprints, fingerprint distances, and k-means
// clustering of normalized gradients.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "flowvae/error.hpp"
#include "flowvae/features.hpp"
#include "flowvae/models.hpp"
#include "flowvae/vae.hpp"

namespace flowvae {

struct GradientExplanation {
  WindowKey key;
  std::vector<double> grad;  // d loss / d feature, model feature order
  double loss_at_point = 0.0;
};

struct InputGradient {
  std::vector<double> grad;
  double loss = 0.0;
};

/// Gradient of the noise-free objective 0.5*||x - decode(mu(x))||^2 + KL with
/// respect to each row, parameters held fixed. Rows are independent, so a
/// whole block is differentiated in one pass.
template <class T>
std::vector<InputGradient> input_gradients(const nn::VaeNet<T>& net, std::span<const std::vector<double>> rows,
                                           std::size_t workers = 1) {
  std::vector<InputGradient> out(rows.size());
  if (rows.empty()) return out;
  constexpr std::size_t kBlock = 256;
  const std::size_t blocks = (rows.size() + kBlock - 1) / kBlock;
  detail::parallel_chunks(blocks, workers, [&](std::size_t b0, std::size_t b1) {
    for (std::size_t b = b0; b < b1; ++b) {
      const std::size_t s = b * kBlock, e = std::min(rows.size(), s + kBlock);
      nn::Matrix<T> x = detail::to_matrix<T>(rows.subspan(s, e - s));
      nn::VaeTape<T> tape;
      net.forward(x, nn::Matrix<T>::Zero(static_cast<Eigen::Index>(net.architecture().latent), x.cols()), tape);
      const auto g = net.backward(tape, T(1));
      for (std::size_t i = s; i < e; ++i) {
        const auto c = static_cast<Eigen::Index>(i - s);
        auto& r = out[i];
        r.grad.resize(static_cast<std::size_t>(x.rows()));
        for (Eigen::Index j = 0; j < x.rows(); ++j) r.grad[static_cast<std::size_t>(j)] = static_cast<double>(g.input(j, c));
        r.loss = static_cast<double>(tape.reconstruction(c) + tape.kl(c));
      }
    }
  });
  return out;
}

template <class T>
InputGradient input_gradient(const nn::VaeNet<T>& net, std::span<const double> x) {
  std::vector<std::vector<double>> rows{{x.begin(), x.end()}};
  return input_gradients(net, std::span<const std::vector<double>>(rows)).front();
}

inline double l2_norm(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Fingerprints
// ---------------------------------------------------------------------------

struct Fingerprint {
  std::string attack_class;
  std::vector<double> mean_normalized_grad;  // unit L2 norm
  std::vector<double> standard_error;        // per feature, over normalized gradients
  std::uint64_t support_count = 0;
  std::uint64_t skipped_zero = 0;
  std::uint64_t feature_hash = 0;
};

/// Averages unit-normalized gradients (zero gradients skipped and counted)
/// and renormalizes the mean. Per-feature sums run over sorted values, so the
/// result is independent of input order.
inline Fingerprint build_fingerprint(std::span<const std::vector<double>> grads, const std::string& attack_class) {
  if (grads.empty()) raise(ErrorCode::EmptyInput, "no gradients for class '" + attack_class + "'");
  const std::size_t d = grads.front().size();
  Fingerprint fp;
  fp.attack_class = attack_class;
  std::vector<std::vector<double>> columns(d);
  for (const auto& g : grads) {
    if (g.size() != d) raise(ErrorCode::DimensionMismatch, "gradients differ in width");
    const double norm = l2_norm(g);
    if (!(norm > 0) || !std::isfinite(norm)) {
      ++fp.skipped_zero;
      continue;
    }
    for (std::size_t j = 0; j < d; ++j) columns[j].push_back(g[j] / norm);
    ++fp.support_count;
  }
  if (fp.support_count == 0) raise(ErrorCode::AllZeroGradients, "every gradient for '" + attack_class + "' is zero");
  const double m = static_cast<double>(fp.support_count);
  std::vector<double> mean(d);
  fp.standard_error.assign(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    auto& col = columns[j];
    std::sort(col.begin(), col.end());
    double s = 0;
    for (double v : col) s += v;
    mean[j] = s / m;
    if (fp.support_count > 1) {
      std::vector<double> dev(col.size());
      for (std::size_t i = 0; i < col.size(); ++i) dev[i] = (col[i] - mean[j]) * (col[i] - mean[j]);
      std::sort(dev.begin(), dev.end());
      double ss = 0;
      for (double v : dev) ss += v;
      fp.standard_error[j] = std::sqrt(ss / (m - 1)) / std::sqrt(m);
    }
  }
  const double norm = l2_norm(mean);
  if (!(norm > 0)) raise(ErrorCode::AllZeroGradients, "normalized gradients for '" + attack_class + "' cancel out");
  fp.mean_normalized_grad.resize(d);
  for (std::size_t j = 0; j < d; ++j) fp.mean_normalized_grad[j] = mean[j] / norm;
  return fp;
}

enum class DistanceMode { L2, L2n };

inline DistanceMode distance_mode_from_string(const std::string& s) {
  if (s == "l2" || s == "L2") return DistanceMode::L2;
  if (s == "l2n" || s == "L2n") return DistanceMode::L2n;
  raise(ErrorCode::InvalidConfig, "fingerprint mode must be 'l2' or 'l2n'");
}

/// L2: ||fp - g||. L2n: ||fp - g/||g||||. Smaller means more attack-like.
inline double fingerprint_distance(const Fingerprint& fp, std::span<const double> grad, DistanceMode mode = DistanceMode::L2n) {
  const auto& f = fp.mean_normalized_grad;
  if (grad.size() != f.size()) raise(ErrorCode::DimensionMismatch, "gradient width differs from fingerprint");
  double scale = 1.0;
  if (mode == DistanceMode::L2n) {
    const double norm = l2_norm(grad);
    if (!(norm > 0) || !std::isfinite(norm)) raise(ErrorCode::ZeroGradient, "cannot normalize a zero gradient");
    scale = 1.0 / norm;
  }
  double s = 0;
  for (std::size_t j = 0; j < f.size(); ++j) {
    const double diff = f[j] - grad[j] * scale;
    s += diff * diff;
  }
  return std::sqrt(s);
}

inline void write_fingerprint(const Fingerprint& fp, std::ostream& out, const std::vector<std::string>& names) {
  if (names.size() != fp.mean_normalized_grad.size())
    raise(ErrorCode::DimensionMismatch, "feature names do not match fingerprint width");
  char hash[24];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(fp.feature_hash));
  out << "# flowvae fingerprint v1\n";
  out << "class\t" << fp.attack_class << "\n";
  out << "support\t" << fp.support_count << "\n";
  out << "skipped_zero\t" << fp.skipped_zero << "\n";
  out << "feature_hash\t" << hash << "\n";
  out << "feature\tvalue\tstderr\n";
  for (std::size_t j = 0; j < names.size(); ++j)
    out << names[j] << '\t' << format_real(fp.mean_normalized_grad[j]) << '\t' << format_real(fp.standard_error[j])
        << '\n';
}

inline Fingerprint read_fingerprint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("# flowvae fingerprint", 0) != 0)
    raise(ErrorCode::CorruptFile, "not a fingerprint file");
  if (line != "# flowvae fingerprint v1") raise(ErrorCode::VersionMismatch, "unsupported fingerprint version: " + line);
  Fingerprint fp;
  auto field = [&](const std::string& key) {
    if (!std::getline(in, line)) raise(ErrorCode::CorruptFile, "fingerprint truncated before '" + key + "'");
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.substr(0, tab) != key)
      raise(ErrorCode::CorruptFile, "expected fingerprint field '" + key + "'");
    return line.substr(tab + 1);
  };
  try {
    fp.attack_class = field("class");
    fp.support_count = std::stoull(field("support"));
    fp.skipped_zero = std::stoull(field("skipped_zero"));
    fp.feature_hash = std::stoull(field("feature_hash"), nullptr, 16);
  } catch (const std::logic_error&) {
    raise(ErrorCode::CorruptFile, "bad fingerprint header value");
  }
  if (!std::getline(in, line) || line != "feature\tvalue\tstderr") raise(ErrorCode::CorruptFile, "missing fingerprint table header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string name, value, se;
    if (!std::getline(ss, name, '\t') || !std::getline(ss, value, '\t') || !std::getline(ss, se, '\t'))
      raise(ErrorCode::CorruptFile, "bad fingerprint row: " + line);
    double v = 0, e = 0;
    if (!detail::parse_real(value, v) || !detail::parse_real(se, e)) raise(ErrorCode::CorruptFile, "bad fingerprint number: " + line);
    fp.mean_normalized_grad.push_back(v);
    fp.standard_error.push_back(e);
  }
  if (fp.mean_normalized_grad.empty()) raise(ErrorCode::CorruptFile, "fingerprint has no feature rows");
  return fp;
}

// ---------------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------------

struct Clustering {
  std::size_t k = 0;
  std::size_t dim = 0;
  std::vector<std::vector<double>> centroids;
  std::vector<std::size_t> assignments;
  double inertia = 0.0;
  std::uint64_t seed = 0;
  std::vector<double> inertia_trace;  // after each assignment step
  std::size_t iterations = 0;
  bool converged = false;
};

namespace detail {

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double d = a[j] - b[j];
    s += d * d;
  }
  return s;
}

/// Nearest centroid, lowest index on ties.
inline std::pair<std::size_t, double> nearest(std::span<const double> p, const std::vector<std::vector<double>>& centroids) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    const double d = squared_distance(p, centroids[c]);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return {best, best_d};
}

}  // namespace detail

/// Lloyd's algorithm. Initial centroids are k distinct points sampled with
/// the seed; stops when assignments no longer change or after max_iter
/// updates. A cluster that empties is reseeded with the point farthest from
/// its centroid.
inline Clustering kmeans(std::span<const std::vector<double>> points, std::size_t k, std::uint64_t seed,
                         std::size_t max_iter = 300) {
  if (k == 0) raise(ErrorCode::InvalidConfig, "k must be positive");
  if (points.size() < k)
    raise(ErrorCode::TooFewPoints, std::to_string(points.size()) + " points for k=" + std::to_string(k));
  const std::size_t n = points.size();
  const std::size_t d = points.front().size();
  for (const auto& p : points)
    if (p.size() != d) raise(ErrorCode::DimensionMismatch, "points differ in width");

  Clustering cl;
  cl.k = k;
  cl.dim = d;
  cl.seed = seed;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  for (std::size_t i = 0; i < k; ++i) cl.centroids.push_back(points[idx[i]]);

  std::vector<double> dist(n);
  auto assign = [&](std::vector<std::size_t>& out) {
    double inertia = 0;
    for (std::size_t i = 0; i < n; ++i) {
      auto [c, dd] = detail::nearest(points[i], cl.centroids);
      out[i] = c;
      dist[i] = dd;
      inertia += dd;
    }
    return inertia;
  };

  cl.assignments.assign(n, 0);
  cl.inertia = assign(cl.assignments);
  cl.inertia_trace.push_back(cl.inertia);
  std::vector<std::size_t> next(n);
  while (cl.iterations < max_iter) {
    ++cl.iterations;
    // Update step, reseeding empty clusters from the farthest points.
    std::vector<std::size_t> counts(k, 0);
    for (auto a : cl.assignments) ++counts[a];
    std::vector<std::size_t> owner = cl.assignments;
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      std::size_t far = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[owner[i]] <= 1) continue;
        if (far == n || dist[i] > dist[far]) far = i;
      }
      if (far == n) continue;
      --counts[owner[far]];
      owner[far] = c;
      counts[c] = 1;
      dist[far] = 0;
    }
    std::vector<std::vector<double>> sums(k, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) sums[owner[i]][j] += points[i][j];
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t j = 0; j < d; ++j) cl.centroids[c][j] = sums[c][j] / static_cast<double>(counts[c]);
    }
    const double inertia = assign(next);
    cl.inertia_trace.push_back(inertia);
    cl.inertia = inertia;
    const bool changed = next != cl.assignments;
    cl.assignments.swap(next);
    if (!changed) {
      cl.converged = true;
      break;
    }
  }
  return cl;
}

/// Sum of squared distances under the current assignment, recomputed.
inline double clustering_inertia(const Clustering& cl, std::span<const std::vector<double>> points) {
  double s = 0;
  for (std::size_t i = 0; i < points.size(); ++i) s += detail::squared_distance(points[i], cl.centroids[cl.assignments[i]]);
  return s;
}

struct ClusterShare {
  std::size_t cluster = 0;
  double share = 0.0;
  std::uint64_t count = 0;
};

/// For each label, the clusters holding its points by descending share.
inline std::map<std::string, std::vector<ClusterShare>> cluster_report(const Clustering& cl,
                                                                       std::span<const std::string> labels) {
  if (labels.size() != cl.assignments.size())
    raise(ErrorCode::LengthMismatch, std::to_string(labels.size()) + " labels for " +
                                         std::to_string(cl.assignments.size()) + " points");
  std::map<std::string, std::map<std::size_t, std::uint64_t>> counts;
  for (std::size_t i = 0; i < labels.size(); ++i) ++counts[labels[i]][cl.assignments[i]];
  std::map<std::string, std::vector<ClusterShare>> out;
  for (auto& [label, per_cluster] : counts) {
    std::uint64_t total = 0;
    for (auto& [c, n] : per_cluster) total += n;
    auto& rows = out[label];
    for (auto& [c, n] : per_cluster)
      rows.push_back({c, static_cast<double>(n) / static_cast<double>(total), n});
    std::sort(rows.begin(), rows.end(), [](const ClusterShare& a, const ClusterShare& b) {
      return a.count != b.count ? a.count > b.count : a.cluster < b.cluster;
    });
  }
  return out;
}

inline std::vector<double> unit_normalized(std::span<const double> g) {
  const double norm = l2_norm(g);
  std::vector<double> out(g.begin(), g.end());
  if (norm > 0)
    for (auto& v : out) v /= norm;
  return out;
}

}  // namespace flowvae
