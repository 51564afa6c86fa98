#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <sstream>

#include "flowvae/explain.hpp"
#include "support/oracles.hpp"

using namespace flowvae;

namespace {

using Rows = std::vector<std::vector<double>>;

std::span<const std::vector<double>> view(const Rows& r) { return std::span<const std::vector<double>>(r); }

std::optional<ErrorCode> code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

// Smallest within-cluster sum of squares over every 2-partition.
double brute_force_two_means(const Rows& pts) {
  const std::size_t n = pts.size(), d = pts.front().size();
  double best = std::numeric_limits<double>::infinity();
  for (std::uint64_t mask = 1; mask + 1 < (1ULL << n); ++mask) {
    if (mask & 1ULL) continue;  // each partition once
    double total = 0;
    for (int side = 0; side < 2; ++side) {
      std::vector<double> c(d, 0.0);
      std::size_t m = 0;
      for (std::size_t i = 0; i < n; ++i)
        if (((mask >> i) & 1ULL) == static_cast<std::uint64_t>(side)) {
          ++m;
          for (std::size_t j = 0; j < d; ++j) c[j] += pts[i][j];
        }
      for (auto& v : c) v /= static_cast<double>(m);
      for (std::size_t i = 0; i < n; ++i)
        if (((mask >> i) & 1ULL) == static_cast<std::uint64_t>(side))
          for (std::size_t j = 0; j < d; ++j) total += (pts[i][j] - c[j]) * (pts[i][j] - c[j]);
    }
    best = std::min(best, total);
  }
  return best;
}

}  // namespace

TEST(InputGradient, ZeroModelGradientIsInput) {
  nn::VaeNet<double> net(nn::VaeArchitecture{5, {4}, 2});
  const std::vector<double> x = {1.0, -2.0, 0.5, 0.0, 3.25};
  const auto g = input_gradient(net, std::span<const double>(x));
  EXPECT_EQ(g.grad, x);
  EXPECT_DOUBLE_EQ(g.loss, 0.5 * (1 + 4 + 0.25 + 0 + 10.5625));
}

TEST(InputGradient, MatchesCentralDifferences) {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 25; ++trial) {
    auto net = oracle::random_small_vae(rng);
    const std::size_t d = net.architecture().input;
    std::vector<double> x(d), zero(net.architecture().latent, 0.0);
    for (auto& v : x) v = g(rng);
    const auto got = input_gradient(net, std::span<const double>(x));
    EXPECT_NEAR(got.loss, oracle::vae_loss_naive(net, x, zero), 1e-12);
    const double h = 1e-6;
    for (std::size_t i = 0; i < d; ++i) {
      auto xp = x, xm = x;
      xp[i] += h;
      xm[i] -= h;
      const double numeric = (oracle::vae_loss_naive(net, xp, zero) - oracle::vae_loss_naive(net, xm, zero)) / (2 * h);
      EXPECT_LT(oracle::relative_error(got.grad[i], numeric), 1e-4) << "trial " << trial << " feature " << i;
    }
  }
}

TEST(InputGradient, BatchedMatchesSingleAndWorkerCount) {
  std::mt19937_64 rng(5);
  auto net = oracle::random_small_vae(rng);
  std::normal_distribution<double> g(0.0, 1.0);
  Rows rows(600, std::vector<double>(net.architecture().input));
  for (auto& r : rows)
    for (auto& v : r) v = g(rng);
  const auto one = input_gradients(net, view(rows), 1);
  const auto four = input_gradients(net, view(rows), 4);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(one[i].grad, four[i].grad);
    if (i % 97 == 0) {
      const auto s = input_gradient(net, std::span<const double>(rows[i]));
      for (std::size_t j = 0; j < s.grad.size(); ++j) EXPECT_NEAR(s.grad[j], one[i].grad[j], 1e-12);
    }
  }
}

TEST(Fingerprint, SingleGradientIsItsDirection) {
  const Rows g = {{3.0, 0.0, -4.0}};
  const auto fp = build_fingerprint(view(g), "dos");
  EXPECT_EQ(fp.support_count, 1u);
  EXPECT_NEAR(fp.mean_normalized_grad[0], 0.6, 1e-15);
  EXPECT_NEAR(fp.mean_normalized_grad[2], -0.8, 1e-15);
  EXPECT_NEAR(fingerprint_distance(fp, std::span<const double>(g[0])), 0.0, 1e-15);
}

TEST(Fingerprint, ScaledCopiesGiveSameFingerprint) {
  const Rows once = {{1.0, 2.0, 2.0}};
  const Rows twice = {{1.0, 2.0, 2.0}, {2.0, 4.0, 4.0}};
  const auto a = build_fingerprint(view(once), "scan");
  const auto b = build_fingerprint(view(twice), "scan");
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(a.mean_normalized_grad[j], b.mean_normalized_grad[j], 1e-15);
  EXPECT_EQ(b.support_count, 2u);
}

TEST(Fingerprint, OrthogonalGradientsAverage) {
  const Rows g = {{5.0, 0.0}, {0.0, 0.1}};
  const auto fp = build_fingerprint(view(g), "spam");
  EXPECT_EQ(fp.support_count, 2u);
  EXPECT_NEAR(fp.mean_normalized_grad[0], 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(fp.mean_normalized_grad[1], 1.0 / std::sqrt(2.0), 1e-15);
}

TEST(Fingerprint, ZeroGradientsAreSkippedAndCounted) {
  const Rows g = {{0.0, 0.0}, {1.0, 1.0}};
  const auto fp = build_fingerprint(view(g), "dos");
  EXPECT_EQ(fp.support_count, 1u);
  EXPECT_EQ(fp.skipped_zero, 1u);
  const Rows zeros = {{0.0, 0.0}, {0.0, 0.0}};
  EXPECT_EQ(code_of([&] { build_fingerprint(view(zeros), "dos"); }), ErrorCode::AllZeroGradients);
  const Rows none;
  EXPECT_EQ(code_of([&] { build_fingerprint(view(none), "dos"); }), ErrorCode::EmptyInput);
}

TEST(Fingerprint, L2nDistanceExamples) {
  const Rows e1 = {{1.0, 0.0}};
  const auto fp = build_fingerprint(view(e1), "x");
  const std::vector<double> same = {7.0, 0.0}, ortho = {0.0, 0.3}, opposite = {-2.0, 0.0}, zero = {0.0, 0.0};
  EXPECT_NEAR(fingerprint_distance(fp, std::span<const double>(same)), 0.0, 1e-15);
  EXPECT_NEAR(fingerprint_distance(fp, std::span<const double>(ortho)), std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(fingerprint_distance(fp, std::span<const double>(opposite)), 2.0, 1e-15);
  EXPECT_NEAR(fingerprint_distance(fp, std::span<const double>(same), DistanceMode::L2), 6.0, 1e-15);
  EXPECT_EQ(code_of([&] { fingerprint_distance(fp, std::span<const double>(zero)); }), ErrorCode::ZeroGradient);
  EXPECT_EQ(code_of([] { distance_mode_from_string("cosine"); }), ErrorCode::InvalidConfig);
}

TEST(Fingerprint, FileRoundTrip) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g(0.0, 1.0);
  Rows grads(30, std::vector<double>(kFeatureCount));
  for (auto& r : grads)
    for (auto& v : r) v = g(rng);
  auto fp = build_fingerprint(view(grads), "scan");
  fp.feature_hash = feature_list_hash();
  std::stringstream ss;
  write_fingerprint(fp, ss, feature_names());
  const auto back = read_fingerprint(ss);
  EXPECT_EQ(back.attack_class, "scan");
  EXPECT_EQ(back.support_count, 30u);
  EXPECT_EQ(back.feature_hash, fp.feature_hash);
  EXPECT_EQ(back.mean_normalized_grad, fp.mean_normalized_grad);
  EXPECT_EQ(back.standard_error, fp.standard_error);

  std::stringstream junk("hello\n");
  EXPECT_EQ(code_of([&] { read_fingerprint(junk); }), ErrorCode::CorruptFile);
  std::stringstream future("# flowvae fingerprint v9\n");
  EXPECT_EQ(code_of([&] { read_fingerprint(future); }), ErrorCode::VersionMismatch);
}

TEST(Kmeans, SingleClusterIsTheMean) {
  const Rows pts = {{0.0, 0.0}, {2.0, 0.0}, {1.0, 3.0}};
  const auto cl = kmeans(view(pts), 1, 4);
  EXPECT_NEAR(cl.centroids[0][0], 1.0, 1e-15);
  EXPECT_NEAR(cl.centroids[0][1], 1.0, 1e-15);
  EXPECT_TRUE(cl.converged);
}

TEST(Kmeans, OneClusterPerDistinctPointHasZeroInertia) {
  const Rows pts = {{0.0, 0.0}, {5.0, 5.0}, {5.0, 5.0}, {-3.0, 1.0}, {0.0, 0.0}};
  const auto cl = kmeans(view(pts), 3, 11);
  EXPECT_EQ(cl.inertia, 0.0);
  EXPECT_EQ(cl.assignments[0], cl.assignments[4]);
  EXPECT_EQ(cl.assignments[1], cl.assignments[2]);
}

TEST(Kmeans, TwoBlobsMatchBruteForce) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 0.4);
  Rows pts;
  for (int i = 0; i < 20; ++i) pts.push_back({(i % 2 ? 4.0 : -4.0) + g(rng), g(rng)});
  const auto cl = kmeans(view(pts), 2, 9);
  EXPECT_NEAR(cl.inertia, brute_force_two_means(pts), 1e-9);
  EXPECT_NEAR(cl.inertia, clustering_inertia(cl, view(pts)), 1e-9);
  for (std::size_t i = 2; i < pts.size(); ++i) EXPECT_EQ(cl.assignments[i], cl.assignments[i % 2]);
}

TEST(Kmeans, InertiaNeverIncreasesAndIsSeeded) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> g(0.0, 1.0);
  Rows pts(500, std::vector<double>(6));
  for (auto& p : pts)
    for (auto& v : p) v = g(rng);
  const auto cl = kmeans(view(pts), 20, 1);
  ASSERT_GE(cl.inertia_trace.size(), 2u);
  for (std::size_t i = 1; i < cl.inertia_trace.size(); ++i)
    EXPECT_LE(cl.inertia_trace[i], cl.inertia_trace[i - 1] * (1 + 1e-12));
  const auto again = kmeans(view(pts), 20, 1);
  EXPECT_EQ(again.assignments, cl.assignments);
}

TEST(Kmeans, InvalidArguments) {
  const Rows pts = {{0.0}, {1.0}};
  EXPECT_EQ(code_of([&] { kmeans(view(pts), 3, 1); }), ErrorCode::TooFewPoints);
  EXPECT_EQ(code_of([&] { kmeans(view(pts), 0, 1); }), ErrorCode::InvalidConfig);
}

TEST(ClusterReport, SharesPerLabel) {
  Clustering cl;
  cl.assignments = {0, 0, 1, 2, 2, 2};
  const std::vector<std::string> labels = {"dos", "dos", "dos", "scan", "scan", "background"};
  const auto rep = cluster_report(cl, std::span<const std::string>(labels));
  ASSERT_EQ(rep.at("dos").size(), 2u);
  EXPECT_EQ(rep.at("dos")[0].cluster, 0u);
  EXPECT_NEAR(rep.at("dos")[0].share, 2.0 / 3.0, 1e-15);
  EXPECT_EQ(rep.at("scan")[0].share, 1.0);
  EXPECT_EQ(rep.at("background")[0].cluster, 2u);
  const std::vector<std::string> short_labels = {"dos"};
  EXPECT_EQ(code_of([&] { cluster_report(cl, std::span<const std::string>(short_labels)); }), ErrorCode::LengthMismatch);
}

TEST(UnitNormalized, ZeroStaysZero) {
  const std::vector<double> z = {0.0, 0.0}, v = {3.0, 4.0};
  EXPECT_EQ(unit_normalized(std::span<const double>(z)), z);
  EXPECT_EQ(unit_normalized(std::span<const double>(v)), (std::vector<double>{0.6, 0.8}));
}
