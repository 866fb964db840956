#pragma once

// Training loop: batching with seeded shuffles, flip augmentation, per-batch
// multi-class prior updates, Adam with a constant learning rate, last-iteration
// model selection.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pudet/autodiff.hpp"
#include "pudet/detector.hpp"
#include "pudet/errors.hpp"
#include "pudet/losses.hpp"
#include "pudet/preprocess.hpp"
#include "pudet/priors.hpp"
#include "pudet/random.hpp"
#include "pudet/synth.hpp"

namespace pudet {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<std::vector<double>> m;  // first moments, one per parameter tensor
  std::vector<std::vector<double>> v;  // second moments
};

/// One bias-corrected Adam update using each parameter's accumulated grad.
/// Parameters without a grad are treated as having a zero gradient.
inline void adam_step(const std::vector<Tensor*>& params, AdamState& state, double lr, long iteration = -1) {
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->numel(), 0.0);
      state.v.emplace_back(p->numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adam_step: state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i]->numel())
      throw DimensionError("adam_step: moment shape does not match parameter " + std::to_string(i));
    if (params[i]->has_grad()) {
      for (double g : params[i]->grad()) {
        if (!std::isfinite(g))
          throw TrainingError("non-finite gradient at iteration " + std::to_string(iteration));
      }
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    auto data = p.mutable_data();
    const bool has = p.has_grad();
    auto grad = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double g = has ? grad[k] : 0.0;
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g;
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g * g;
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      data[k] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

struct TrainConfig {
  LossKind loss_kind = LossKind::PnBaseline;
  double learning_rate = 1e-3;
  int batch_size = 8;
  int iterations = 2580;
  std::uint64_t seed = 0;
  // Binary PU / wCE: the prior. Multi-class PU: the fixed pi_1.
  std::optional<double> prior;
  bool augment = true;
  double loc_weight = 1.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  DetectorConfig detector;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be positive");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (iterations < 1) throw ConfigError("train: iterations must be >= 1");
    if (!(loc_weight >= 0.0)) throw ConfigError("train: loc_weight must be >= 0");
    const bool needs_prior = is_pu(loss_kind) || loss_kind == LossKind::WceBaseline;
    if (needs_prior && !prior) throw ConfigError(std::string(to_string(loss_kind)) + " needs a class prior");
    if (prior && !(*prior > 0.0 && *prior < 1.0)) throw ConfigError("train: prior must lie in (0,1)");
    detector.validate();
  }
};

struct LogEntry {
  int iteration = 0;
  double total = 0.0;
  double cls = 0.0;
  double loc = 0.0;
  bool clamp_active = false;
  std::vector<double> priors;
};

struct TrainingLog {
  std::vector<LogEntry> entries;
  int batches_without_positives = 0;
};

struct TrainResult {
  DetectorModel model;
  TrainingLog log;
};

/// Model inputs of one (possibly flipped) image.
struct PreparedImage {
  std::vector<double> features;  // anchors x input_dim
  std::vector<SampleAssignment> assignments;
  std::vector<double> targets;  // 4 per anchor; zero unless Positive
};

inline PreparedImage prepare_image(const DetectorConfig& cfg, const AnnotatedImage& img) {
  PreparedImage p;
  const auto anchors = anchor_grid(img.width, img.height, cfg.anchor_stride, cfg.anchor_sizes);
  p.features = anchor_features(cfg, normalize(img), anchors);
  p.assignments = assign_samples(anchors, img.boxes, cfg.lo_iou, cfg.hi_iou);
  p.targets.assign(anchors.size() * 4, 0.0);
  for (const auto& a : p.assignments) {
    if (a.state != AssignState::Positive) continue;
    const BoxDelta d = encode(img.boxes[a.box_index].box(), anchors[a.anchor_index].box);
    std::copy_n(std::array<double, 4>{d.dx, d.dy, d.dw, d.dh}.begin(), 4, p.targets.begin() + 4 * a.anchor_index);
  }
  return p;
}

/// Stacked inputs of one batch.
struct Batch {
  std::vector<double> features;
  std::vector<SampleAssignment> assignments;
  std::vector<double> targets;
  std::vector<std::size_t> image_indices;

  void append(const PreparedImage& p) {
    features.insert(features.end(), p.features.begin(), p.features.end());
    targets.insert(targets.end(), p.targets.begin(), p.targets.end());
    for (auto a : p.assignments) {
      a.anchor_index = assignments.size();
      assignments.push_back(a);
    }
  }
};

inline Batch build_batch(const DetectorConfig& cfg, const std::vector<AnnotatedImage>& images,
                         const std::vector<std::size_t>& indices, const std::vector<bool>& flips) {
  Batch b;
  b.image_indices = indices;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const AnnotatedImage& src = images[indices[k]];
    b.append(prepare_image(cfg, flips[k] ? flip_horizontal(src) : src));
  }
  return b;
}

/// Per positive class, anchors whose most probable positive class clears the
/// score threshold (before NMS).
inline std::vector<double> detected_counts(const Tensor& probs, double score_threshold) {
  const std::size_t m = probs.cols();
  std::vector<double> counts(m - 1, 0.0);
  auto p = probs.data();
  for (std::size_t a = 0; a < probs.rows(); ++a) {
    std::size_t best = 1;
    for (std::size_t c = 2; c < m; ++c)
      if (p[a * m + c] > p[a * m + best]) best = c;
    if (p[a * m + best] >= score_threshold) counts[best - 1] += 1.0;
  }
  return counts;
}

/// Trains from a seeded initialization and returns the last-iteration model.
inline TrainResult train(const std::vector<AnnotatedImage>& train_set, const TrainConfig& config) {
  config.validate();
  if (train_set.empty()) throw UsageError("train: empty training set");
  const DetectorConfig& dcfg = config.detector;
  const std::size_t num_classes = static_cast<std::size_t>(dcfg.num_classes);
  for (const auto& img : train_set)
    for (const auto& b : img.boxes)
      if (b.class_id < 1 || static_cast<std::size_t>(b.class_id) >= num_classes)
        throw ConfigError("train: dataset class " + std::to_string(b.class_id) + " exceeds model M = " +
                          std::to_string(num_classes));

  TrainResult result{DetectorModel::create(dcfg, derive_seed(config.seed, 0)), {}};
  Rng order_rng(derive_seed(config.seed, 1));
  Rng flip_rng(derive_seed(config.seed, 2));
  AdamState adam;
  auto params = result.model.parameters();

  ClassPriors priors;
  if (config.loss_kind == LossKind::PuMulticlass) {
    priors = update_multiclass_priors(*config.prior, std::vector<double>(num_classes - 1, 1.0));
  } else if (config.prior) {
    priors.values.assign(num_classes - 1, *config.prior);
  }
  LossOptions loss_opts;
  loss_opts.kind = config.loss_kind;
  loss_opts.loc_weight = config.loc_weight;
  loss_opts.focal_alpha = config.focal_alpha;
  loss_opts.focal_gamma = config.focal_gamma;

  // Inputs depend only on (image, flip); built on first use.
  std::vector<std::array<std::optional<PreparedImage>, 2>> prepared(train_set.size());

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  order_rng.shuffle(order);
  std::size_t cursor = 0;

  const std::size_t batch = static_cast<std::size_t>(config.batch_size);
  for (int it = 1; it <= config.iterations; ++it) {
    std::vector<std::size_t> idx;
    for (std::size_t k = 0; k < batch; ++k) {
      if (cursor == order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    std::sort(idx.begin(), idx.end());
    std::vector<bool> flips(idx.size(), false);
    for (std::size_t k = 0; k < idx.size(); ++k) flips[k] = config.augment && flip_rng.bernoulli(0.5);

    Batch b;
    b.image_indices = idx;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      auto& slot = prepared[idx[k]][flips[k] ? 1 : 0];
      if (!slot) slot = prepare_image(dcfg, flips[k] ? flip_horizontal(train_set[idx[k]]) : train_set[idx[k]]);
      b.append(*slot);
    }
    const std::size_t rows = b.assignments.size();
    const ModelOutput out =
        forward_features(result.model, Tensor::matrix(rows, dcfg.input_dim(), b.features));

    if (config.loss_kind == LossKind::PuMulticlass) {
      const auto counts = detected_counts(out.probs, dcfg.score_threshold);
      priors = update_multiclass_priors(*config.prior, counts, priors);
    }
    const LossBreakdown loss = total_loss(b.assignments, out.probs, out.deltas, b.targets, priors, loss_opts);
    if (!std::isfinite(loss.total.item()))
      throw TrainingError("non-finite loss at iteration " + std::to_string(it) + " (cls " +
                          std::to_string(loss.cls) + ", loc " + std::to_string(loss.loc) + ")");
    if (loss.no_positives) ++result.log.batches_without_positives;

    for (Tensor* p : params) p->zero_grad();
    backward(loss.total);
    adam_step(params, adam, config.learning_rate, it);
    for (Tensor* p : params) p->zero_grad();

    result.log.entries.push_back({it, loss.total.item(), loss.cls, loss.loc, loss.clamp_active, priors.values});
  }
  return result;
}

inline void write_training_log(const TrainingLog& log, int num_classes, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << "iter,total,cls,loc,clamp";
  for (int m = 1; m < num_classes; ++m) f << ",pi_" << m;
  f << '\n';
  for (const auto& e : log.entries) {
    f << e.iteration << ',' << format_double(e.total) << ',' << format_double(e.cls) << ','
      << format_double(e.loc) << ',' << (e.clamp_active ? 1 : 0);
    for (int m = 1; m < num_classes; ++m) {
      const std::size_t i = static_cast<std::size_t>(m - 1);
      f << ',' << (i < e.priors.size() ? format_double(e.priors[i]) : std::string());
    }
    f << '\n';
  }
}

}  // namespace pudet
