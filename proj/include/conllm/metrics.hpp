#pragma once

// Detection scoring. Convention: a higher score means "more likely
// manipulated"; a detector fires at threshold t when score >= t.

#include "conllm/dataio.hpp"
#include "conllm/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

namespace conllm {

struct ScoredLabel {
  double score;
  Label label;

  friend bool operator==(const ScoredLabel&, const ScoredLabel&) = default;
};

using ScoreSet = std::vector<ScoredLabel>;

inline ScoreSet make_score_set(std::span<const double> scores, std::span<const Label> labels) {
  if (scores.size() != labels.size()) throw DimensionError("score set: scores and labels differ in length");
  ScoreSet s;
  s.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) s.push_back({scores[i], labels[i]});
  return s;
}

inline ScoreSet make_score_set(std::span<const double> scores, const EmbeddingBundle& bundle) {
  std::vector<Label> labels;
  for (const Sample& s : bundle.samples) labels.push_back(s.label);
  return make_score_set(scores, labels);
}

// Operating point at one threshold, as raw counts.
struct RateCounts {
  double threshold;          // fires when score >= threshold
  std::size_t false_pos;     // authentic scored >= threshold
  std::size_t true_pos;      // manipulated scored >= threshold
};

namespace detail {

struct ClassTotals {
  std::size_t authentic = 0;
  std::size_t manipulated = 0;
};

inline ClassTotals require_both(const ScoreSet& s, const char* what) {
  ClassTotals t;
  for (const auto& e : s) {
    if (!std::isfinite(e.score)) throw MetricError(std::string(what) + ": non-finite score");
    (e.label == Label::manipulated ? t.manipulated : t.authentic)++;
  }
  if (t.authentic == 0 || t.manipulated == 0)
    throw MetricError(std::string(what) + ": both authentic and manipulated samples are required");
  return t;
}

// Counts at every distinct score, thresholds descending, preceded by the
// +inf threshold at which nothing fires.
inline std::vector<RateCounts> sweep(const ScoreSet& s) {
  ScoreSet sorted = s;
  std::sort(sorted.begin(), sorted.end(),
            [](const ScoredLabel& a, const ScoredLabel& b) { return a.score > b.score; });
  std::vector<RateCounts> out{{std::numeric_limits<double>::infinity(), 0, 0}};
  std::size_t fp = 0, tp = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    const double t = sorted[i].score;
    for (; i < sorted.size() && sorted[i].score == t; ++i)
      (sorted[i].label == Label::manipulated ? tp : fp)++;
    out.push_back({t, fp, tp});
  }
  return out;
}

}  // namespace detail

// Equal error rate. FPR(t) = authentic >= t / authentic, FNR(t) =
// manipulated < t / manipulated, over every distinct score plus +inf. The
// first threshold (ascending) where FNR >= FPR marks the crossing; when the
// rates are not equal there, the EER is linearly interpolated with the
// preceding threshold on the FNR - FPR gap.
inline double eer(const ScoreSet& s) {
  const auto totals = detail::require_both(s, "eer");
  const double na = static_cast<double>(totals.authentic);
  const double nm = static_cast<double>(totals.manipulated);
  auto pts = detail::sweep(s);
  std::reverse(pts.begin(), pts.end());  // ascending thresholds, +inf last
  double prev_fpr = 0.0, prev_gap = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double fpr = static_cast<double>(pts[i].false_pos) / na;
    const double fnr = static_cast<double>(totals.manipulated - pts[i].true_pos) / nm;
    const double gap = fnr - fpr;
    if (gap >= 0.0) {
      if (gap == 0.0 || i == 0) return fpr;
      const double alpha = prev_gap / (prev_gap - gap);
      return prev_fpr + alpha * (fpr - prev_fpr);
    }
    prev_fpr = fpr;
    prev_gap = gap;
  }
  return 1.0;  // unreachable: at +inf FNR = 1 >= FPR = 0
}

// Probability that a random manipulated sample outscores a random authentic
// one, ties counting one half.
inline double auc(const ScoreSet& s) {
  const auto totals = detail::require_both(s, "auc");
  ScoreSet sorted = s;
  std::sort(sorted.begin(), sorted.end(),
            [](const ScoredLabel& a, const ScoredLabel& b) { return a.score < b.score; });
  double wins = 0.0;
  std::size_t authentic_below = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    const double t = sorted[i].score;
    std::size_t a = 0, m = 0;
    for (; i < sorted.size() && sorted[i].score == t; ++i)
      (sorted[i].label == Label::manipulated ? m : a)++;
    wins += static_cast<double>(m) * static_cast<double>(authentic_below) +
            0.5 * static_cast<double>(m) * static_cast<double>(a);
    authentic_below += a;
  }
  return wins / (static_cast<double>(totals.authentic) * static_cast<double>(totals.manipulated));
}

inline double accuracy(const ScoreSet& s, double threshold = 0.5) {
  if (s.empty()) throw MetricError("accuracy: empty score set");
  std::size_t correct = 0;
  for (const auto& e : s) correct += (e.score >= threshold) == (e.label == Label::manipulated);
  return static_cast<double>(correct) / static_cast<double>(s.size());
}

struct CurvePoint {
  double threshold;
  double x;
  double y;
};

// (FPR, TPR) from (0, 0) at +inf through one point per distinct score,
// ending at (1, 1).
inline std::vector<CurvePoint> roc_points(const ScoreSet& s) {
  const auto totals = detail::require_both(s, "roc_points");
  std::vector<CurvePoint> out;
  for (const auto& c : detail::sweep(s))
    out.push_back({c.threshold, static_cast<double>(c.false_pos) / static_cast<double>(totals.authentic),
                   static_cast<double>(c.true_pos) / static_cast<double>(totals.manipulated)});
  return out;
}

// (FPR, FNR) at the same thresholds as roc_points.
inline std::vector<CurvePoint> det_points(const ScoreSet& s) {
  const auto totals = detail::require_both(s, "det_points");
  std::vector<CurvePoint> out;
  for (const auto& c : detail::sweep(s))
    out.push_back({c.threshold, static_cast<double>(c.false_pos) / static_cast<double>(totals.authentic),
                   static_cast<double>(totals.manipulated - c.true_pos) /
                       static_cast<double>(totals.manipulated)});
  return out;
}

inline double trapezoid_area(std::span<const CurvePoint> pts) {
  double area = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    area += (pts[i].x - pts[i - 1].x) * (pts[i].y + pts[i - 1].y) * 0.5;
  return area;
}

struct DetectionMetrics {
  double eer = 0.0;
  double auc = 0.0;
  double acc = 0.0;
  std::size_t n_real = 0;
  std::size_t n_fake = 0;

  friend bool operator==(const DetectionMetrics&, const DetectionMetrics&) = default;
};

inline DetectionMetrics evaluate_scores(const ScoreSet& s) {
  DetectionMetrics m;
  m.eer = eer(s);
  m.auc = auc(s);
  m.acc = accuracy(s);
  for (const auto& e : s) (e.label == Label::manipulated ? m.n_fake : m.n_real)++;
  return m;
}

}  // namespace conllm
