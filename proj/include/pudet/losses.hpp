#pragma once

// Classification and localization losses for detection with incomplete
// annotations.
//
// Everything is expressed over per-sample cross-entropy values ("risks"):
//   h(c, z) = -log c_z  (categorical)   or   -z log c - (1-z) log(1-c)  (binary)
// The *_risk functions take those values directly; the probability-based
// wrappers compute them first. Both paths stay differentiable.

#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pudet/autodiff.hpp"
#include "pudet/detector.hpp"
#include "pudet/errors.hpp"

namespace pudet {

inline constexpr double kProbEps = 1e-12;

struct ClassPriors {
  std::vector<double> values;  // pi_1 .. pi_{M-1}

  double operator[](std::size_t m) const { return values.at(m - 1); }  // 1-based class id
  std::size_t size() const { return values.size(); }

  void validate() const {
    double total = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!(values[i] > 0.0 && values[i] < 1.0))
        throw ConfigError("class prior pi_" + std::to_string(i + 1) + " = " + std::to_string(values[i]) +
                          " is outside (0,1)");
      total += values[i];
    }
    if (!(total < 1.0)) throw ConfigError("class priors sum to " + std::to_string(total) + ", need < 1");
  }
};

// ---------------------------------------------------------------------------
// Per-sample cross entropies

inline double clip_prob(double c) { return std::clamp(c, kProbEps, 1.0 - kProbEps); }

inline double ce(double c, int z) {
  const double p = clip_prob(c);
  return z == 1 ? -std::log(p) : -std::log(1.0 - p);
}

inline double categorical_ce(std::span<const double> c, std::size_t z) {
  if (z >= c.size()) throw UsageError("categorical_ce: class index out of range");
  return -std::log(clip_prob(c[z]));
}

inline double weighted_ce(double c, int z, double w) {
  if (!(w > 0.0)) throw UsageError("weighted_ce: weight must be positive");
  const double p = clip_prob(c);
  return z == 1 ? -w * std::log(p) : -std::log(1.0 - p);
}

inline double focal(double c, int z, double alpha = 0.25, double gamma = 2.0) {
  if (!(alpha > 0.0 && alpha < 1.0) || gamma < 0.0)
    throw UsageError("focal: need alpha in (0,1) and gamma >= 0");
  const double p = clip_prob(c);
  return z == 1 ? -alpha * std::pow(1.0 - p, gamma) * std::log(p)
                : -(1.0 - alpha) * std::pow(p, gamma) * std::log(1.0 - p);
}

/// Elementwise binary cross entropy against a fixed label.
inline Tensor ce(const Tensor& c, int z) {
  const Tensor p = clip(c, kProbEps, 1.0 - kProbEps);
  return z == 1 ? neg(log(p)) : neg(log(add_scalar(neg(p), 1.0)));
}

/// -log c[:, z] for a matrix of probability rows.
inline Tensor categorical_ce(const Tensor& probs, std::size_t z) {
  return neg(log(clip(column(probs, z), kProbEps, 1.0 - kProbEps)));
}

/// -alpha_z (1 - c_z)^gamma log c_z, with alpha_0 = 1 - alpha for background.
inline Tensor categorical_focal(const Tensor& probs, std::size_t z, double alpha, double gamma) {
  const Tensor p = clip(column(probs, z), kProbEps, 1.0 - kProbEps);
  const double a = z == 0 ? 1.0 - alpha : alpha;
  const Tensor modulating = pow_scalar(add_scalar(neg(p), 1.0), gamma);
  return mul_scalar(mul(modulating, log(p)), -a);
}

// ---------------------------------------------------------------------------
// Risk estimators over cross-entropy values

namespace detail {

inline Tensor empty_vector() { return Tensor::vector({}); }

inline Tensor sum_or_zero(const Tensor& t) { return t.numel() == 0 ? Tensor::scalar(0.0) : sum(t); }

}  // namespace detail

/// Fully supervised risk: mean of H(c_n,0) and H(c_p,1) over all samples.
inline Tensor pn_risk(const Tensor& h_neg, const Tensor& h_pos) {
  const std::size_t n = h_neg.numel() + h_pos.numel();
  if (n == 0) throw UsageError("classification loss undefined: no negative or positive samples");
  return mul_scalar(add(detail::sum_or_zero(h_neg), detail::sum_or_zero(h_pos)), 1.0 / static_cast<double>(n));
}

/// E_x[H(c,0)] estimated from unlabeled and labeled positives together.
inline Tensor approx_mean_risk_combined(const Tensor& h_unlabeled0, const Tensor& h_pos0) {
  const std::size_t n = h_unlabeled0.numel() + h_pos0.numel();
  if (n == 0) throw UsageError("combined mean risk undefined: no unlabeled or positive samples");
  return mul_scalar(add(detail::sum_or_zero(h_unlabeled0), detail::sum_or_zero(h_pos0)),
                    1.0 / static_cast<double>(n));
}

/// E_x[H(c,0)] estimated from unlabeled samples only.
inline Tensor approx_mean_risk_naive(const Tensor& h_unlabeled0) {
  if (h_unlabeled0.numel() == 0) throw UsageError("naive mean risk undefined: no unlabeled samples");
  return mean(h_unlabeled0);
}

enum class PuMode { Combined, Naive };

struct PuLoss {
  Tensor value;
  bool clamp_active = false;
  double unclamped_negative_term = 0.0;
  bool no_positives = false;  // positive-dependent terms were dropped
};

/// Binary non-negative PU risk:
///   max{0, R_x - (pi/N_p) sum H(c_p,0)} + (pi/N_p) sum H(c_p,1)
/// where R_x is the combined or naive estimate of E_x[H(c,0)].
inline PuLoss pu_risk_binary(const Tensor& h_u0, const Tensor& h_p0, const Tensor& h_p1, double prior,
                             PuMode mode = PuMode::Combined) {
  if (!(prior > 0.0 && prior < 1.0))
    throw ConfigError("PU loss: prior " + std::to_string(prior) + " is outside (0,1)");
  if (h_p0.numel() != h_p1.numel()) throw DimensionError("PU loss: positive risk vectors differ in length");
  const std::size_t np = h_p0.numel();
  Tensor rx;
  if (mode == PuMode::Combined) {
    rx = approx_mean_risk_combined(h_u0, h_p0);
  } else {
    rx = h_u0.numel() == 0 && np > 0 ? Tensor::scalar(0.0) : approx_mean_risk_naive(h_u0);
  }
  PuLoss out;
  if (np == 0) {
    out.no_positives = true;
    out.unclamped_negative_term = rx.item();
    out.clamp_active = out.unclamped_negative_term < 0.0;
    out.value = clamp_min_zero(rx);
    return out;
  }
  const double k = prior / static_cast<double>(np);
  const Tensor negative = sub(rx, mul_scalar(sum(h_p0), k));
  out.unclamped_negative_term = negative.item();
  out.clamp_active = out.unclamped_negative_term < 0.0;
  out.value = add(clamp_min_zero(negative), mul_scalar(sum(h_p1), k));
  return out;
}

/// Binary PU loss from positive-class probabilities.
inline PuLoss cls_loss_pu_binary(const Tensor& c_unlabeled, const Tensor& c_pos, double prior,
                                 PuMode mode = PuMode::Combined) {
  return pu_risk_binary(ce(c_unlabeled, 0), ce(c_pos, 0), ce(c_pos, 1), prior, mode);
}

/// Per-class cross entropies of the labeled positives of one class m.
struct ClassRisks {
  Tensor h0;  // H(c, 0)
  Tensor hm;  // H(c, m)
};

/// Multi-class non-negative PU risk. Classes with no labeled samples in the
/// batch contribute no terms.
inline PuLoss pu_risk_multiclass(const Tensor& h_u0, const std::map<int, ClassRisks>& positives,
                                 const ClassPriors& priors) {
  priors.validate();
  std::vector<Tensor> all0{h_u0};
  for (const auto& [m, r] : positives) {
    if (m < 1 || static_cast<std::size_t>(m) > priors.size())
      throw ConfigError("PU loss: class " + std::to_string(m) + " has no prior");
    if (r.h0.numel() != r.hm.numel()) throw DimensionError("PU loss: class risk vectors differ in length");
    all0.push_back(r.h0);
  }
  const Tensor h_all0 = concat(all0);
  const Tensor rx = approx_mean_risk_combined(h_all0, detail::empty_vector());
  Tensor negative = rx;
  Tensor positive_term = Tensor::scalar(0.0);
  bool any_positive = false;
  for (const auto& [m, r] : positives) {
    if (r.h0.numel() == 0) continue;
    any_positive = true;
    const double k = priors[static_cast<std::size_t>(m)] / static_cast<double>(r.h0.numel());
    negative = sub(negative, mul_scalar(sum(r.h0), k));
    positive_term = add(positive_term, mul_scalar(sum(r.hm), k));
  }
  PuLoss out;
  out.no_positives = !any_positive;
  out.unclamped_negative_term = negative.item();
  out.clamp_active = out.unclamped_negative_term < 0.0;
  out.value = add(clamp_min_zero(negative), positive_term);
  return out;
}

/// Multi-class PU loss from probability rows; c_pos_by_class maps class id to
/// an [N_p^m x M] matrix.
inline PuLoss cls_loss_pu_multiclass(const Tensor& c_unlabeled, const std::map<int, Tensor>& c_pos_by_class,
                                     const ClassPriors& priors) {
  std::map<int, ClassRisks> risks;
  for (const auto& [m, c] : c_pos_by_class) {
    if (c.numel() == 0) continue;
    risks[m] = {categorical_ce(c, 0), categorical_ce(c, static_cast<std::size_t>(m))};
  }
  const Tensor h_u0 = c_unlabeled.numel() == 0 ? detail::empty_vector() : categorical_ce(c_unlabeled, 0);
  return pu_risk_multiclass(h_u0, risks, priors);
}

/// Supervised binary loss: unlabeled/negative samples against 0, positives against 1.
inline Tensor cls_loss_pn(const Tensor& c_neg, const Tensor& c_pos) {
  return pn_risk(c_neg.numel() ? ce(c_neg, 0) : detail::empty_vector(),
                 c_pos.numel() ? ce(c_pos, 1) : detail::empty_vector());
}

/// Sum over coordinates of smooth L1, averaged over rows; zero rows give 0.
inline Tensor smooth_l1(const Tensor& predicted, const Tensor& target) {
  if (predicted.shape() != target.shape())
    throw DimensionError("smooth_l1: shape mismatch " + shape_str(predicted.shape()) + " vs " +
                         shape_str(target.shape()));
  if (predicted.numel() == 0) return Tensor::scalar(0.0);
  return mul_scalar(sum(smooth_l1_elementwise(sub(predicted, target))), 1.0 / static_cast<double>(predicted.rows()));
}

// ---------------------------------------------------------------------------
// Total detection loss

enum class LossKind { PnBaseline, PuBinary, PuNaive, PuMulticlass, WceBaseline, FocalBaseline };

inline LossKind parse_loss_kind(std::string_view s) {
  if (s == "pn_baseline") return LossKind::PnBaseline;
  if (s == "pu_binary") return LossKind::PuBinary;
  if (s == "pu_naive") return LossKind::PuNaive;
  if (s == "pu_multiclass") return LossKind::PuMulticlass;
  if (s == "wce_baseline") return LossKind::WceBaseline;
  if (s == "focal_baseline") return LossKind::FocalBaseline;
  throw ConfigError("unknown loss kind '" + std::string(s) + "'");
}

inline std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::PnBaseline: return "pn_baseline";
    case LossKind::PuBinary: return "pu_binary";
    case LossKind::PuNaive: return "pu_naive";
    case LossKind::PuMulticlass: return "pu_multiclass";
    case LossKind::WceBaseline: return "wce_baseline";
    case LossKind::FocalBaseline: return "focal_baseline";
  }
  return "?";
}

inline bool is_pu(LossKind k) {
  return k == LossKind::PuBinary || k == LossKind::PuNaive || k == LossKind::PuMulticlass;
}

struct LossOptions {
  LossKind kind = LossKind::PnBaseline;
  double loc_weight = 1.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
};

struct LossBreakdown {
  Tensor total;  // differentiable, == cls + loc
  double cls = 0.0;
  double loc = 0.0;  // already multiplied by loc_weight
  bool clamp_active = false;
  double unclamped_negative_term = 0.0;
  bool no_positives = false;
};

/// Classification term selected by options.kind plus smooth-L1 localization
/// over Positive anchors. Ignored anchors never contribute; the baselines
/// treat Unlabeled anchors as negatives. `targets` holds encoded box deltas
/// per anchor (rows of non-positive anchors are not read).
inline LossBreakdown total_loss(const std::vector<SampleAssignment>& assignments, const Tensor& probs,
                                const Tensor& deltas, std::span<const double> targets,
                                const ClassPriors& priors, const LossOptions& options) {
  const std::size_t n = assignments.size();
  if (probs.rows() != n || deltas.rows() != n || targets.size() != 4 * n)
    throw DimensionError("total_loss: " + std::to_string(n) + " assignments but probs " +
                         shape_str(probs.shape()) + ", deltas " + shape_str(deltas.shape()) + ", " +
                         std::to_string(targets.size()) + " target values");
  const std::size_t num_classes = probs.cols();

  std::vector<std::size_t> unlabeled, positive;
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& a = assignments[i];
    if (a.state == AssignState::Unlabeled) {
      unlabeled.push_back(i);
    } else if (a.state == AssignState::Positive) {
      if (a.class_id < 1 || static_cast<std::size_t>(a.class_id) >= num_classes)
        throw DimensionError("total_loss: positive class " + std::to_string(a.class_id) + " outside model range");
      positive.push_back(i);
      by_class[a.class_id].push_back(i);
    }
  }

  const auto rows = [&](const std::vector<std::size_t>& idx) { return gather_rows(probs, idx); };
  const bool binary_only = options.kind == LossKind::PuBinary || options.kind == LossKind::PuNaive;
  if (binary_only && num_classes != 2)
    throw ConfigError(std::string(to_string(options.kind)) + " needs M = 2, model has M = " +
                      std::to_string(num_classes));

  LossBreakdown out;
  Tensor cls;
  switch (options.kind) {
    case LossKind::PnBaseline: {
      std::vector<Tensor> pos_terms;
      for (const auto& [m, idx] : by_class) pos_terms.push_back(categorical_ce(rows(idx), static_cast<std::size_t>(m)));
      cls = pn_risk(unlabeled.empty() ? detail::empty_vector() : categorical_ce(rows(unlabeled), 0),
                    concat(pos_terms));
      break;
    }
    case LossKind::PuBinary:
    case LossKind::PuNaive: {
      if (priors.size() != 1) throw ConfigError("binary PU loss needs exactly one prior");
      const Tensor c_u = unlabeled.empty() ? detail::empty_vector() : column(rows(unlabeled), 1);
      const Tensor c_p = positive.empty() ? detail::empty_vector() : column(rows(positive), 1);
      const PuMode mode = options.kind == LossKind::PuBinary ? PuMode::Combined : PuMode::Naive;
      auto r = pu_risk_binary(c_u.numel() ? ce(c_u, 0) : c_u, c_p.numel() ? ce(c_p, 0) : c_p,
                              c_p.numel() ? ce(c_p, 1) : c_p, priors.values[0], mode);
      cls = r.value;
      out.clamp_active = r.clamp_active;
      out.unclamped_negative_term = r.unclamped_negative_term;
      out.no_positives = r.no_positives;
      break;
    }
    case LossKind::PuMulticlass: {
      if (priors.size() + 1 != num_classes)
        throw ConfigError("multi-class PU loss needs M-1 = " + std::to_string(num_classes - 1) + " priors");
      std::map<int, Tensor> c_pos;
      for (const auto& [m, idx] : by_class) c_pos[m] = rows(idx);
      const Tensor c_u = unlabeled.empty() ? Tensor::matrix(0, num_classes, {}) : rows(unlabeled);
      auto r = cls_loss_pu_multiclass(c_u, c_pos, priors);
      cls = r.value;
      out.clamp_active = r.clamp_active;
      out.unclamped_negative_term = r.unclamped_negative_term;
      out.no_positives = r.no_positives;
      break;
    }
    case LossKind::WceBaseline: {
      if (priors.size() + 1 != num_classes)
        throw ConfigError("weighted CE needs M-1 = " + std::to_string(num_classes - 1) + " priors");
      priors.validate();
      std::vector<Tensor> pos_terms;
      for (const auto& [m, idx] : by_class) {
        const double w = 1.0 / priors[static_cast<std::size_t>(m)];
        pos_terms.push_back(mul_scalar(categorical_ce(rows(idx), static_cast<std::size_t>(m)), w));
      }
      cls = pn_risk(unlabeled.empty() ? detail::empty_vector() : categorical_ce(rows(unlabeled), 0),
                    concat(pos_terms));
      break;
    }
    case LossKind::FocalBaseline: {
      const double a = options.focal_alpha, g = options.focal_gamma;
      if (!(a > 0.0 && a < 1.0) || g < 0.0) throw ConfigError("focal loss: need alpha in (0,1), gamma >= 0");
      std::vector<Tensor> pos_terms;
      for (const auto& [m, idx] : by_class)
        pos_terms.push_back(categorical_focal(rows(idx), static_cast<std::size_t>(m), a, g));
      cls = pn_risk(unlabeled.empty() ? detail::empty_vector() : categorical_focal(rows(unlabeled), 0, a, g),
                    concat(pos_terms));
      break;
    }
  }

  Tensor loc = Tensor::scalar(0.0);
  if (!positive.empty()) {
    std::vector<double> tgt;
    tgt.reserve(positive.size() * 4);
    for (std::size_t i : positive) tgt.insert(tgt.end(), targets.begin() + 4 * i, targets.begin() + 4 * i + 4);
    loc = mul_scalar(smooth_l1(gather_rows(deltas, positive), Tensor::matrix(positive.size(), 4, std::move(tgt))),
                     options.loc_weight);
  }
  out.cls = cls.item();
  out.loc = loc.item();
  out.total = add(cls, loc);
  return out;
}

}  // namespace pudet
