#pragma once

// Detection scoring and run statistics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "pudet/box.hpp"
#include "pudet/detector.hpp"
#include "pudet/errors.hpp"
#include "pudet/synth.hpp"

namespace pudet {

enum class MatchCriterion {
  Iou,         // IoU >= threshold
  CenterInBox  // detection center inside the ground-truth box
};

struct ClassCounts {
  long tp = 0;
  long fp = 0;
  long fn = 0;
};

struct MatchReport {
  std::map<int, ClassCounts> per_class;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (detection, ground truth)

  /// Accumulates counts of another image; pairs are not carried over.
  void merge(const MatchReport& other) {
    for (const auto& [c, k] : other.per_class) {
      auto& mine = per_class[c];
      mine.tp += k.tp;
      mine.fp += k.fp;
      mine.fn += k.fn;
    }
  }
};

/// Greedy one-to-one matching. Detections are visited by descending score
/// (ties: lower index) and take the best unmatched same-class ground truth.
inline MatchReport match(const std::vector<Detection>& dets, const std::vector<GroundTruthBox>& gt,
                         double iou_threshold = 0.5, MatchCriterion criterion = MatchCriterion::Iou) {
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) throw UsageError("match: threshold must lie in (0,1)");
  MatchReport rep;
  for (const auto& g : gt) rep.per_class[g.class_id];
  for (const auto& d : dets) rep.per_class[d.class_id];

  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<bool> taken(gt.size(), false);
  for (std::size_t di : order) {
    const auto& d = dets[di];
    std::size_t best = gt.size();
    double best_quality = -std::numeric_limits<double>::infinity();
    for (std::size_t gi = 0; gi < gt.size(); ++gi) {
      if (taken[gi] || gt[gi].class_id != d.class_id) continue;
      double quality;
      if (criterion == MatchCriterion::Iou) {
        quality = iou(d.box, gt[gi].box());
        if (quality < iou_threshold) continue;
      } else {
        const Box g = gt[gi].box();
        if (!contains_point(g, d.box.cx(), d.box.cy())) continue;
        quality = -std::hypot(d.box.cx() - g.cx(), d.box.cy() - g.cy());
      }
      if (quality > best_quality) {
        best_quality = quality;
        best = gi;
      }
    }
    auto& k = rep.per_class[d.class_id];
    if (best < gt.size()) {
      taken[best] = true;
      ++k.tp;
      rep.pairs.emplace_back(di, best);
    } else {
      ++k.fp;
    }
  }
  for (std::size_t gi = 0; gi < gt.size(); ++gi)
    if (!taken[gi]) ++rep.per_class[gt[gi].class_id].fn;
  return rep;
}

struct PrfScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline double f1_score(double precision, double recall) {
  return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

inline PrfScores prf(const ClassCounts& k) {
  PrfScores s;
  s.precision = k.tp + k.fp > 0 ? static_cast<double>(k.tp) / static_cast<double>(k.tp + k.fp) : 0.0;
  s.recall = k.tp + k.fn > 0 ? static_cast<double>(k.tp) / static_cast<double>(k.tp + k.fn) : 0.0;
  s.f1 = f1_score(s.precision, s.recall);
  return s;
}

struct MetricSummary {
  std::map<int, PrfScores> per_class;
  PrfScores macro;  // unweighted mean over classes
};

inline MetricSummary metrics(const MatchReport& report) {
  MetricSummary out;
  for (const auto& [c, k] : report.per_class) out.per_class[c] = prf(k);
  if (!out.per_class.empty()) {
    for (const auto& [c, s] : out.per_class) {
      out.macro.precision += s.precision;
      out.macro.recall += s.recall;
      out.macro.f1 += s.f1;
    }
    const double n = static_cast<double>(out.per_class.size());
    out.macro.precision /= n;
    out.macro.recall /= n;
    out.macro.f1 /= n;
  }
  return out;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

/// Mean and sample standard deviation (n-1); std is 0 for a single value.
inline MeanStd mean_std(std::span<const double> xs) {
  if (xs.empty()) throw UsageError("aggregate: no runs");
  MeanStd r;
  r.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return r;
}

struct AggregateSummary {
  MeanStd recall, precision, f1;
};

inline AggregateSummary aggregate(const std::vector<MetricSummary>& runs) {
  if (runs.empty()) throw UsageError("aggregate: no runs");
  std::vector<double> r, p, f;
  for (const auto& s : runs) {
    r.push_back(s.macro.recall);
    p.push_back(s.macro.precision);
    f.push_back(s.macro.f1);
  }
  return {mean_std(r), mean_std(p), mean_std(f)};
}

// ---------------------------------------------------------------------------
// Student's t via the regularized incomplete beta function.

namespace detail {

/// Continued fraction for I_x(a, b), modified Lentz.
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-15;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace detail

inline double regularized_incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

/// Two-sided tail probability P(|T| >= |t|) with df degrees of freedom.
inline double student_t_two_sided_p(double t, double df) {
  if (std::isinf(t)) return 0.0;
  return regularized_incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
}

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  double df = 0.0;
};

/// Paired Student's t-test on a - b.
inline TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw UsageError("paired_t_test: need equal lengths >= 2");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  TTestResult r;
  r.df = static_cast<double>(d.size() - 1);
  if (std::all_of(d.begin(), d.end(), [](double v) { return v == 0.0; })) return r;
  const MeanStd ms = mean_std(d);
  if (ms.std == 0.0) {
    r.t = ms.mean > 0.0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    r.p = 0.0;
    return r;
  }
  r.t = ms.mean / (ms.std / std::sqrt(static_cast<double>(d.size())));
  r.p = student_t_two_sided_p(r.t, r.df);
  return r;
}

/// Benjamini-Hochberg step-up adjustment, returned in input order.
inline std::vector<double> benjamini_hochberg(std::span<const double> p) {
  for (double v : p)
    if (!(v >= 0.0 && v <= 1.0)) throw UsageError("benjamini_hochberg: p-values must lie in [0,1]");
  const std::size_t m = p.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
  std::vector<double> out(m);
  double running = 1.0;
  for (std::size_t r = m; r-- > 0;) {
    const double scaled = p[order[r]] * (static_cast<double>(m) / static_cast<double>(r + 1));
    running = std::min(running, scaled);
    out[order[r]] = std::min(running, 1.0);
  }
  return out;
}

}  // namespace pudet
