// Ground-truth window labels, ROC/AUC and threshold selection.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "flowvae/error.hpp"

namespace flowvae {

inline const std::string kBackgroundLabel = "background";

struct WindowLabel {
  std::string label = kBackgroundLabel;
  double attack_flow_share = 0.0;  // share of the most frequent attack label
};

/// A window belongs to an attack class iff strictly more than half of its
/// flows carry that label; otherwise it is background.
inline WindowLabel label_window(const std::map<std::string, std::uint64_t>& label_counts, std::uint64_t flow_count) {
  WindowLabel out;
  if (flow_count == 0) return out;
  std::string best;
  std::uint64_t best_count = 0;
  for (const auto& [label, count] : label_counts) {
    if (label == kBackgroundLabel || label.empty()) continue;
    if (count > best_count) {
      best = label;
      best_count = count;
    }
  }
  out.attack_flow_share = static_cast<double>(best_count) / static_cast<double>(flow_count);
  if (best_count * 2 > flow_count) out.label = best;
  return out;
}

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;  // score at which this point is reached
};

struct RocCurve {
  std::vector<RocPoint> points;  // from (0,0) to (1,1)
  double auc = 0.0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

/// Sweeps every distinct score as a threshold (tied scores form one step)
/// and integrates with the trapezoidal rule.
inline RocCurve roc_curve(std::span<const double> scores, const std::vector<bool>& labels, bool higher_is_anomalous = true) {
  if (scores.size() != labels.size()) raise(ErrorCode::LengthMismatch, "scores and labels differ in length");
  RocCurve roc;
  for (bool l : labels) (l ? roc.positives : roc.negatives)++;
  if (roc.positives == 0 || roc.negatives == 0) raise(ErrorCode::SingleClass, "ROC needs both classes");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  auto key = [&](std::size_t i) { return higher_is_anomalous ? scores[i] : -scores[i]; };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key(a) > key(b); });

  const double P = static_cast<double>(roc.positives), N = static_cast<double>(roc.negatives);
  std::size_t tp = 0, fp = 0;
  roc.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  double area = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = key(order[i]);
    std::size_t j = i;
    const std::size_t tp0 = tp, fp0 = fp;
    while (j < order.size() && key(order[j]) == s) {
      (labels[order[j]] ? tp : fp)++;
      ++j;
    }
    area += static_cast<double>(fp - fp0) * static_cast<double>(tp + tp0) / 2.0;
    roc.points.push_back({static_cast<double>(fp) / N, static_cast<double>(tp) / P, scores[order[i]]});
    i = j;
  }
  roc.auc = area / (P * N);
  return roc;
}

/// Nearest-rank (1 - p) quantile: scores strictly above it are about a
/// fraction p of the input.
inline double threshold_at_percentile(std::span<const double> scores, double p) {
  if (scores.empty()) raise(ErrorCode::EmptyScores, "no scores to threshold");
  if (!(p > 0.0 && p < 1.0)) raise(ErrorCode::InvalidConfig, "percentile must lie in (0, 1)");
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  auto rank = static_cast<std::size_t>(std::ceil((1.0 - p) * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

struct ClassEvaluation {
  std::string attack;
  RocCurve roc;
};

/// One binary problem per attack class: that class's windows are positives,
/// background windows negatives, other attacks are left out. Classes with
/// no positives are skipped.
inline std::vector<ClassEvaluation> evaluate_per_class(std::span<const double> scores, std::span<const std::string> labels,
                                                       bool higher_is_anomalous = true) {
  if (scores.size() != labels.size()) raise(ErrorCode::LengthMismatch, "scores and labels differ in length");
  std::set<std::string> classes;
  for (const auto& l : labels)
    if (l != kBackgroundLabel) classes.insert(l);
  std::vector<ClassEvaluation> out;
  for (const auto& cls : classes) {
    std::vector<double> s;
    std::vector<bool> y;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == cls || labels[i] == kBackgroundLabel) {
        s.push_back(scores[i]);
        y.push_back(labels[i] == cls);
      }
    }
    if (std::find(y.begin(), y.end(), false) == y.end()) continue;
    out.push_back({cls, roc_curve(s, y, higher_is_anomalous)});
  }
  return out;
}

}  // namespace flowvae
