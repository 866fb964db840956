#pragma once

// Class-prior selection by validation recall and the per-batch multi-class
// prior update.

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "pudet/errors.hpp"
#include "pudet/losses.hpp"

namespace pudet {

struct PriorGrid {
  double start = 0.0;
  double stop = 0.0;
  double step = 0.0;

  void validate() const {
    if (!(start > 0.0 && start <= stop && stop < 1.0 && step > 0.0))
      throw ConfigError("prior grid needs 0 < start <= stop < 1 and step > 0");
  }
};

/// Inclusive arithmetic sequence start, start+step, ..., stop, rounded to 12
/// decimals.
inline std::vector<double> candidates(const PriorGrid& grid) {
  grid.validate();
  std::vector<double> out;
  // Half-step slack absorbs float drift in (stop - start) / step.
  const auto n = static_cast<long long>(std::floor((grid.stop - grid.start) / grid.step + 1e-9));
  for (long long i = 0; i <= n; ++i) {
    const double v = grid.start + static_cast<double>(i) * grid.step;
    out.push_back(std::round(v * 1e12) / 1e12);
  }
  return out;
}

struct PriorSelection {
  double best = 0.0;
  std::vector<std::pair<double, double>> table;  // (prior, validation recall)
};

/// Trains one model per candidate prior and keeps the one with the highest
/// validation recall; ties go to the smaller prior.
///
/// `train_fn(prior)` returns a model; `recall_fn(model)` scores it.
template <class TrainFn, class RecallFn>
PriorSelection select_prior(TrainFn&& train_fn, RecallFn&& recall_fn, const std::vector<double>& priors) {
  if (priors.empty()) throw UsageError("select_prior: empty candidate list");
  PriorSelection sel;
  double best_recall = -1.0;
  for (double p : priors) {
    auto model = train_fn(p);
    const double r = recall_fn(model);
    sel.table.emplace_back(p, r);
    if (r > best_recall || (r == best_recall && p < sel.best)) {
      best_recall = r;
      sel.best = p;
    }
  }
  return sel;
}

inline constexpr double kPriorFloor = 1e-4;
// Largest admissible total prior mass after capping.
inline constexpr double kPriorMassCap = 1.0 - 1e-3;

/// pi_m = pi_1 * N_m / N_1 for m != 1. `counts` holds N_1..N_{M-1}.
/// N_1 == 0 leaves `previous` untouched; zero counts are floored; if the total
/// reaches 1 the priors of the other classes are scaled down together.
inline ClassPriors update_multiclass_priors(double pi1, std::span<const double> counts,
                                            const ClassPriors& previous) {
  if (!(pi1 > 0.0 && pi1 < 1.0)) throw ConfigError("update_multiclass_priors: pi_1 must lie in (0,1)");
  if (counts.empty()) throw UsageError("update_multiclass_priors: need at least one class count");
  for (double c : counts)
    if (c < 0.0) throw UsageError("update_multiclass_priors: counts must be non-negative");
  if (counts[0] == 0.0) return previous;
  ClassPriors out;
  out.values.resize(counts.size());
  out.values[0] = pi1;
  double others = 0.0;
  for (std::size_t m = 1; m < counts.size(); ++m) {
    out.values[m] = std::max(kPriorFloor, pi1 * (counts[m] / counts[0]));
    others += out.values[m];
  }
  if (pi1 + others >= kPriorMassCap && others > 0.0) {
    const double scale = (kPriorMassCap - pi1) / others;
    for (std::size_t m = 1; m < counts.size(); ++m) out.values[m] *= scale;
  }
  return out;
}

inline ClassPriors update_multiclass_priors(double pi1, std::span<const double> counts) {
  ClassPriors prev;
  prev.values.assign(counts.size(), kPriorFloor);
  prev.values[0] = pi1;
  return update_multiclass_priors(pi1, counts, prev);
}

}  // namespace pudet
