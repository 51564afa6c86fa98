#include <gtest/gtest.h>

#include <random>

#include "flowvae/eval.hpp"
#include "support/oracles.hpp"

using namespace flowvae;

TEST(LabelWindow, StrictMajority) {
  EXPECT_EQ(label_window({{"dos", 6}, {"background", 4}}, 10).label, "dos");
  const auto half = label_window({{"dos", 5}, {"background", 5}}, 10);
  EXPECT_EQ(half.label, kBackgroundLabel);
  EXPECT_DOUBLE_EQ(half.attack_flow_share, 0.5);
  EXPECT_EQ(label_window({{"background", 10}}, 10).label, kBackgroundLabel);
  EXPECT_EQ(label_window({}, 0).label, kBackgroundLabel);
  EXPECT_EQ(label_window({{"dos", 3}, {"scan", 4}, {"background", 1}}, 8).label, kBackgroundLabel);
}

TEST(Roc, SeparableScoresGiveOne) {
  const std::vector<double> s = {0.1, 0.2, 0.3, 0.8, 0.9};
  const std::vector<bool> y = {false, false, false, true, true};
  const auto roc = roc_curve(s, y);
  EXPECT_EQ(roc.auc, 1.0);
  EXPECT_EQ(roc.positives, 2u);
  EXPECT_EQ(roc.negatives, 3u);
  EXPECT_EQ(roc.points.front().fpr, 0.0);
  EXPECT_EQ(roc.points.back().tpr, 1.0);
  EXPECT_EQ(roc_curve(s, y, false).auc, 0.0);
}

TEST(Roc, AllEqualScoresGiveHalf) {
  const std::vector<double> s(7, 3.0);
  const std::vector<bool> y = {true, false, true, false, false, true, false};
  EXPECT_EQ(roc_curve(s, y).auc, 0.5);
}

TEST(Roc, MatchesPairwiseCountWithTies) {
  std::mt19937_64 rng(44);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + rng() % 20;
    std::vector<double> s(n);
    std::vector<bool> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng() % 6);
      y[i] = rng() % 2;
    }
    y[0] = true;
    y[1] = false;
    EXPECT_NEAR(roc_curve(s, y).auc, oracle::pairwise_auc(s, y), 1e-12);
    std::vector<double> neg(n);
    for (std::size_t i = 0; i < n; ++i) neg[i] = -s[i];
    EXPECT_NEAR(roc_curve(neg, y, false).auc, oracle::pairwise_auc(s, y), 1e-12);
  }
}

TEST(Roc, Errors) {
  const std::vector<double> s = {1.0, 2.0};
  EXPECT_THROW(roc_curve(s, {true, true}), Error);
  EXPECT_THROW(roc_curve(s, {true}), Error);
}

TEST(Percentile, TopFivePercentOfHundred) {
  std::vector<double> s(100);
  for (int i = 0; i < 100; ++i) s[static_cast<std::size_t>(i)] = 100 - i;
  const double t = threshold_at_percentile(s, 0.05);
  EXPECT_EQ(t, 95.0);
  EXPECT_EQ(std::count_if(s.begin(), s.end(), [&](double v) { return v > t; }), 5);
  EXPECT_EQ(threshold_at_percentile(std::vector<double>{1, 2, 3}, 0.5), 2.0);
  EXPECT_THROW(threshold_at_percentile(std::vector<double>{}, 0.05), Error);
  EXPECT_THROW(threshold_at_percentile(s, 0.0), Error);
}

TEST(Percentile, FlaggedFractionNeverExceedsP) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(10 + rng() % 500);
    for (auto& v : s) v = g(rng);
    const double p = 0.01 + 0.3 * static_cast<double>(rng() % 1000) / 1000.0;
    const double t = threshold_at_percentile(s, p);
    const auto above = static_cast<double>(std::count_if(s.begin(), s.end(), [&](double v) { return v > t; }));
    EXPECT_LE(above, p * static_cast<double>(s.size()) + 1e-9);
    EXPECT_GT(above + 1, p * static_cast<double>(s.size()) - 1e-9);
  }
}

TEST(PerClass, OtherAttacksAreLeftOut) {
  const std::vector<double> s = {0.1, 0.2, 0.9, 0.05, 0.8};
  const std::vector<std::string> labels = {"background", "background", "dos", "scan", "scan"};
  const auto ev = evaluate_per_class(s, std::span<const std::string>(labels));
  ASSERT_EQ(ev.size(), 2u);
  EXPECT_EQ(ev[0].attack, "dos");
  EXPECT_EQ(ev[0].roc.auc, 1.0);
  EXPECT_EQ(ev[0].roc.negatives, 2u);
  EXPECT_EQ(ev[1].attack, "scan");
  EXPECT_EQ(ev[1].roc.auc, 0.5);
}

TEST(PerClass, NoBackgroundMeansNoCurves) {
  const std::vector<double> s = {0.1, 0.2};
  const std::vector<std::string> labels = {"dos", "dos"};
  EXPECT_TRUE(evaluate_per_class(s, std::span<const std::string>(labels)).empty());
}
