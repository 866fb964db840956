#pragma once

// Random batches and probability vectors shared by the loss tests and the
// acceptance binary.

#include <cstddef>
#include <map>
#include <vector>

#include "grad_check.hpp"
#include "pudet/detector.hpp"
#include "pudet/losses.hpp"
#include "pudet/random.hpp"

namespace pudet::testing {

inline std::vector<double> random_probs(Rng& rng, std::size_t n, double lo = 0.01, double hi = 0.99) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

/// n rows of M-class probabilities (normalized positive draws).
inline Tensor random_prob_rows(Rng& rng, std::size_t n, std::size_t m) {
  std::vector<double> v(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += v[i * m + j] = rng.uniform(0.05, 1.0);
    for (std::size_t j = 0; j < m; ++j) v[i * m + j] /= s;
  }
  return Tensor::matrix(n, m, std::move(v));
}

struct RandomBatch {
  std::vector<SampleAssignment> assignments;
  std::vector<double> targets;  // 4 per row
  Tensor features;
};

/// Every positive class and the unlabeled state appear at least once; a few
/// rows are Ignored.
inline RandomBatch random_batch(Rng& rng, std::size_t rows, int num_classes, std::size_t input_dim) {
  RandomBatch b;
  b.assignments.resize(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    auto& a = b.assignments[i];
    a.anchor_index = i;
    if (i < static_cast<std::size_t>(num_classes - 1)) {
      a.state = AssignState::Positive;
      a.class_id = static_cast<int>(i) + 1;
    } else if (i == static_cast<std::size_t>(num_classes - 1)) {
      a.state = AssignState::Unlabeled;
    } else {
      const double u = rng.uniform();
      if (u < 0.3) {
        a.state = AssignState::Positive;
        a.class_id = static_cast<int>(rng.integer(1, num_classes - 1));
      } else if (u < 0.85) {
        a.state = AssignState::Unlabeled;
      } else {
        a.state = AssignState::Ignored;
      }
    }
  }
  b.targets.resize(rows * 4);
  for (auto& t : b.targets) t = rng.uniform(-1.5, 1.5);
  std::vector<double> f(rows * input_dim);
  for (auto& x : f) x = rng.uniform(-1.0, 1.0);
  b.features = Tensor::matrix(rows, input_dim, std::move(f));
  return b;
}

inline DetectorConfig tiny_detector(int num_classes) {
  DetectorConfig c;
  c.num_classes = num_classes;
  c.feature_size = 4;
  c.pool = 2;
  c.hidden = 6;
  return c;
}

/// Central-difference check of total_loss through every model parameter.
inline GradCheck check_model_gradients(LossKind kind, std::uint64_t seed) {
  const int m = kind == LossKind::PuBinary || kind == LossKind::PuNaive ? 2 : 3;
  const DetectorConfig cfg = tiny_detector(m);
  Rng rng(seed);
  DetectorModel model = DetectorModel::create(cfg, derive_seed(seed, 7));
  // Non-zero biases so every parameter is exercised away from its init.
  for (Tensor* p : model.parameters())
    for (auto& v : p->mutable_data()) v += rng.uniform(-0.1, 0.1);
  const RandomBatch batch = random_batch(rng, 16, m, cfg.input_dim());
  ClassPriors priors;
  if (m == 2) {
    priors.values = {rng.uniform(0.05, 0.6)};
  } else {
    priors.values = {rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.4)};
  }
  LossOptions opts;
  opts.kind = kind;
  auto f = [&] {
    const ModelOutput out = forward_features(model, batch.features);
    return total_loss(batch.assignments, out.probs, out.deltas, batch.targets, priors, opts).total;
  };
  return check_gradients(f, model.parameters());
}

}  // namespace pudet::testing
