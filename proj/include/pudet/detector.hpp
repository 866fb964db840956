#pragma once

// Anchor-grid detector: anchors, IoU assignment, patch-feature MLP with class
// and box heads, NMS and tiled inference.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pudet/autodiff.hpp"
#include "pudet/box.hpp"
#include "pudet/errors.hpp"
#include "pudet/json_util.hpp"
#include "pudet/preprocess.hpp"
#include "pudet/random.hpp"
#include "pudet/synth.hpp"

namespace pudet {

struct AnchorSize {
  double w = 0.0;
  double h = 0.0;
  friend bool operator==(const AnchorSize&, const AnchorSize&) = default;
};

struct Anchor {
  Box box;             // clipped to the image
  double cx = 0.0;     // grid point the anchor is centered on
  double cy = 0.0;
  int size_index = 0;  // into the anchor size list
};

/// One anchor per grid point per size, clipped to the image. Grid points sit at
/// (i + 1/2) * stride; points past the far edge are pulled back onto it.
inline std::vector<Anchor> anchor_grid(int width, int height, int stride,
                                       const std::vector<AnchorSize>& sizes) {
  if (stride <= 0) throw UsageError("anchor_grid: stride must be positive");
  if (sizes.empty()) throw UsageError("anchor_grid: need at least one anchor size");
  const int nx = (width + stride - 1) / stride;
  const int ny = (height + stride - 1) / stride;
  std::vector<Anchor> out;
  out.reserve(static_cast<std::size_t>(nx) * ny * sizes.size());
  for (int gy = 0; gy < ny; ++gy) {
    for (int gx = 0; gx < nx; ++gx) {
      const double cx = std::min((gx + 0.5) * stride, static_cast<double>(width));
      const double cy = std::min((gy + 0.5) * stride, static_cast<double>(height));
      for (std::size_t s = 0; s < sizes.size(); ++s) {
        const double x0 = std::max(0.0, cx - 0.5 * sizes[s].w);
        const double y0 = std::max(0.0, cy - 0.5 * sizes[s].h);
        const double x1 = std::min(static_cast<double>(width), cx + 0.5 * sizes[s].w);
        const double y1 = std::min(static_cast<double>(height), cy + 0.5 * sizes[s].h);
        out.push_back({{x0, y0, x1 - x0, y1 - y0}, cx, cy, static_cast<int>(s)});
      }
    }
  }
  return out;
}

enum class AssignState { Positive, Unlabeled, Ignored };

struct SampleAssignment {
  std::size_t anchor_index = 0;
  AssignState state = AssignState::Unlabeled;
  int class_id = 0;            // valid when Positive
  std::size_t box_index = 0;   // argmax box, valid when Positive
  double max_iou = 0.0;
};

/// max IoU > hi -> Positive, < lo -> Unlabeled, otherwise Ignored.
inline std::vector<SampleAssignment> assign_samples(const std::vector<Anchor>& anchors,
                                                    const std::vector<GroundTruthBox>& boxes,
                                                    double lo = 0.3, double hi = 0.7) {
  if (!(lo >= 0.0 && lo < hi && hi <= 1.0))
    throw UsageError("assign_samples: need 0 <= lo < hi <= 1");
  std::vector<SampleAssignment> out(anchors.size());
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    auto& s = out[a];
    s.anchor_index = a;
    for (std::size_t b = 0; b < boxes.size(); ++b) {
      const double v = iou(anchors[a].box, boxes[b].box());
      if (v > s.max_iou) {
        s.max_iou = v;
        s.box_index = b;
      }
    }
    if (s.max_iou > hi) {
      s.state = AssignState::Positive;
      s.class_id = boxes[s.box_index].class_id;
    } else if (s.max_iou < lo) {
      s.state = AssignState::Unlabeled;
    } else {
      s.state = AssignState::Ignored;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model

struct DetectorConfig {
  int num_classes = 2;  // M, background included
  int anchor_stride = 2;
  std::vector<AnchorSize> anchor_sizes{{11.0, 11.0}};
  int feature_size = 12;  // side of the pixel window around each anchor center
  int pool = 2;           // average-pooling factor applied to the window
  int hidden = 32;
  double lo_iou = 0.3;
  double hi_iou = 0.7;
  double score_threshold = 0.5;
  double nms_threshold = 0.3;

  std::size_t pooled_side() const { return static_cast<std::size_t>(feature_size / pool); }
  std::size_t input_dim() const {
    return pooled_side() * pooled_side() + (anchor_sizes.size() > 1 ? anchor_sizes.size() : 0);
  }

  void validate() const {
    if (num_classes < 2) throw ConfigError("detector: num_classes must be >= 2");
    if (anchor_stride <= 0) throw ConfigError("detector: anchor_stride must be positive");
    if (anchor_sizes.empty()) throw ConfigError("detector: need at least one anchor size");
    for (const auto& s : anchor_sizes)
      if (!(s.w > 0.0 && s.h > 0.0)) throw ConfigError("detector: anchor sizes must be positive");
    if (pool <= 0 || feature_size <= 0 || feature_size % pool != 0)
      throw ConfigError("detector: feature_size must be a positive multiple of pool");
    if (hidden <= 0) throw ConfigError("detector: hidden must be positive");
    if (!(lo_iou >= 0.0 && lo_iou < hi_iou && hi_iou <= 1.0))
      throw ConfigError("detector: need 0 <= lo_iou < hi_iou <= 1");
    if (!(score_threshold > 0.0 && score_threshold < 1.0))
      throw ConfigError("detector: score_threshold must lie in (0,1)");
    if (!(nms_threshold > 0.0 && nms_threshold < 1.0))
      throw ConfigError("detector: nms_threshold must lie in (0,1)");
  }
};

/// Pooled pixel window + anchor-size one-hot -> two ReLU layers -> heads.
struct DetectorModel {
  DetectorConfig config;
  Tensor w1, b1, w2, b2;  // shared trunk
  Tensor wc, bc;          // class logits, M outputs
  Tensor wr, br;          // box deltas, 4 outputs

  std::vector<std::pair<std::string, Tensor*>> named_parameters() {
    return {{"w1", &w1}, {"b1", &b1}, {"w2", &w2}, {"b2", &b2},
            {"wc", &wc}, {"bc", &bc}, {"wr", &wr}, {"br", &br}};
  }
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  /// Uniform(+-sqrt(6/fan_in)) for the trunk, Glorot-uniform for the heads, zero biases.
  static DetectorModel create(const DetectorConfig& cfg, std::uint64_t seed, bool zero_heads = false) {
    cfg.validate();
    Rng rng(seed);
    const std::size_t d = cfg.input_dim(), h = static_cast<std::size_t>(cfg.hidden),
                      m = static_cast<std::size_t>(cfg.num_classes);
    auto uniform = [&](std::size_t rows, std::size_t cols, double limit) {
      std::vector<double> v(rows * cols);
      for (auto& x : v) x = limit == 0.0 ? 0.0 : rng.uniform(-limit, limit);
      return Tensor::matrix(rows, cols, std::move(v), true);
    };
    DetectorModel model;
    model.config = cfg;
    model.w1 = uniform(d, h, std::sqrt(6.0 / static_cast<double>(d)));
    model.b1 = Tensor::zeros({h}, true);
    model.w2 = uniform(h, h, std::sqrt(6.0 / static_cast<double>(h)));
    model.b2 = Tensor::zeros({h}, true);
    model.wc = uniform(h, m, zero_heads ? 0.0 : std::sqrt(6.0 / static_cast<double>(h + m)));
    model.bc = Tensor::zeros({m}, true);
    model.wr = uniform(h, 4, zero_heads ? 0.0 : std::sqrt(6.0 / static_cast<double>(h + 4)));
    model.br = Tensor::zeros({4}, true);
    return model;
  }
};

/// Feature rows for every anchor; window pixels outside the image read as 0.
inline std::vector<double> anchor_features(const DetectorConfig& cfg, const NormalizedImage& img,
                                           const std::vector<Anchor>& anchors) {
  const std::size_t dim = cfg.input_dim();
  const std::size_t side = cfg.pooled_side();
  const int fs = cfg.feature_size;
  const double inv = 1.0 / static_cast<double>(cfg.pool * cfg.pool);
  std::vector<double> out(anchors.size() * dim, 0.0);
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    double* row = out.data() + a * dim;
    const int x0 = static_cast<int>(std::lround(anchors[a].cx - 0.5 * fs));
    const int y0 = static_cast<int>(std::lround(anchors[a].cy - 0.5 * fs));
    for (int py = 0; py < fs; ++py) {
      const int y = y0 + py;
      if (y < 0 || y >= img.height) continue;
      for (int px = 0; px < fs; ++px) {
        const int x = x0 + px;
        if (x < 0 || x >= img.width) continue;
        row[static_cast<std::size_t>(py / cfg.pool) * side + static_cast<std::size_t>(px / cfg.pool)] +=
            img.at(x, y) * inv;
      }
    }
    if (cfg.anchor_sizes.size() > 1) row[side * side + static_cast<std::size_t>(anchors[a].size_index)] = 1.0;
  }
  return out;
}

struct ModelOutput {
  Tensor probs;   // [N x M], rows are softmax distributions
  Tensor deltas;  // [N x 4], (dx, dy, dw, dh)
};

inline ModelOutput forward_features(const DetectorModel& model, const Tensor& features) {
  if (features.cols() != model.config.input_dim()) {
    throw DimensionError("forward: feature width " + std::to_string(features.cols()) +
                         " does not match model input " + std::to_string(model.config.input_dim()));
  }
  const Tensor h1 = relu(add_row(matmul(features, model.w1), model.b1));
  const Tensor h2 = relu(add_row(matmul(h1, model.w2), model.b2));
  return {softmax(add_row(matmul(h2, model.wc), model.bc)), add_row(matmul(h2, model.wr), model.br)};
}

inline ModelOutput forward(const DetectorModel& model, const NormalizedImage& img,
                           const std::vector<Anchor>& anchors) {
  auto feats = anchor_features(model.config, img, anchors);
  return forward_features(model, Tensor::matrix(anchors.size(), model.config.input_dim(), std::move(feats)));
}

// ---------------------------------------------------------------------------
// Checkpoints

inline nlohmann::json detector_config_to_json(const DetectorConfig& c) {
  nlohmann::json sizes = nlohmann::json::array();
  for (const auto& s : c.anchor_sizes) sizes.push_back({s.w, s.h});
  return {{"num_classes", c.num_classes}, {"anchor_stride", c.anchor_stride},
          {"anchor_sizes", sizes},        {"feature_size", c.feature_size},
          {"pool", c.pool},               {"hidden", c.hidden},
          {"lo_iou", c.lo_iou},           {"hi_iou", c.hi_iou},
          {"score_threshold", c.score_threshold}, {"nms_threshold", c.nms_threshold}};
}

inline void save_model(DetectorModel& model, const std::filesystem::path& path) {
  nlohmann::json j;
  j["format"] = "pudet-model";
  j["version"] = 1;
  j["config"] = detector_config_to_json(model.config);
  for (auto& [name, t] : model.named_parameters()) {
    j["params"][name] = {{"shape", t->shape()},
                         {"data", std::vector<double>(t->data().begin(), t->data().end())}};
  }
  std::ofstream f(path);
  if (!f) throw DataError("cannot write checkpoint " + path.string());
  f << j.dump() << '\n';
}

inline DetectorConfig detector_config_from_json(const nlohmann::json& j) {
  const std::string ctx = "detector";
  require_keys_subset(j,
                      {"num_classes", "anchor_stride", "anchor_sizes", "feature_size", "pool", "hidden",
                       "lo_iou", "hi_iou", "score_threshold", "nms_threshold"},
                      ctx);
  DetectorConfig c;
  read_opt(j, "num_classes", c.num_classes, ctx);
  read_opt(j, "anchor_stride", c.anchor_stride, ctx);
  if (j.contains("anchor_sizes")) {
    std::vector<std::vector<double>> sizes;
    read_opt(j, "anchor_sizes", sizes, ctx);
    c.anchor_sizes.clear();
    for (const auto& s : sizes) {
      if (s.size() != 2) throw ConfigError("detector.anchor_sizes: each entry must be [w, h]");
      c.anchor_sizes.push_back({s[0], s[1]});
    }
  }
  read_opt(j, "feature_size", c.feature_size, ctx);
  read_opt(j, "pool", c.pool, ctx);
  read_opt(j, "hidden", c.hidden, ctx);
  read_opt(j, "lo_iou", c.lo_iou, ctx);
  read_opt(j, "hi_iou", c.hi_iou, ctx);
  read_opt(j, "score_threshold", c.score_threshold, ctx);
  read_opt(j, "nms_threshold", c.nms_threshold, ctx);
  c.validate();
  return c;
}

inline DetectorModel load_model(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read checkpoint " + path.string());
  try {
    const auto j = nlohmann::json::parse(f);
    if (j.at("format") != "pudet-model" || j.at("version") != 1)
      throw DataError(path.string() + ": not a version-1 pudet model");
    DetectorModel model;
    model.config = detector_config_from_json(j.at("config"));
    auto ref = DetectorModel::create(model.config, 0);
    auto ref_params = ref.named_parameters();
    auto params = model.named_parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& entry = j.at("params").at(params[i].first);
      auto shape = entry.at("shape").get<Shape>();
      auto data = entry.at("data").get<std::vector<double>>();
      if (shape != ref_params[i].second->shape())
        throw DataError(path.string() + ": parameter " + params[i].first + " has shape " +
                        shape_str(shape) + ", expected " + shape_str(ref_params[i].second->shape()));
      *params[i].second = Tensor(std::move(shape), std::move(data), true);
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Post-processing

struct Detection {
  Box box;
  int class_id = 1;
  double score = 0.0;
};

struct DetectionResult {
  std::vector<Detection> boxes;
};

/// Greedy per-class NMS. Candidates are visited by descending score; ties are
/// broken by class and coordinates so the result does not depend on input order.
inline DetectionResult nms(const std::vector<Detection>& dets, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw UsageError("nms: threshold must lie in (0,1)");
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto key = [&](std::size_t i) {
    const auto& d = dets[i];
    return std::make_tuple(-d.score, d.class_id, d.box.x, d.box.y, d.box.w, d.box.h, i);
  };
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
  DetectionResult out;
  for (std::size_t i : order) {
    const auto& d = dets[i];
    const bool suppressed = std::any_of(out.boxes.begin(), out.boxes.end(), [&](const Detection& k) {
      return k.class_id == d.class_id && iou(k.box, d.box) >= threshold;
    });
    if (!suppressed) out.boxes.push_back(d);
  }
  return out;
}

/// Decoded, score-filtered candidates before NMS. The label is the most
/// probable positive class.
inline std::vector<Detection> candidates(const DetectorModel& model, const AnnotatedImage& img,
                                         double score_threshold, double offset_x = 0.0,
                                         double offset_y = 0.0) {
  const auto& cfg = model.config;
  const auto anchors = anchor_grid(img.width, img.height, cfg.anchor_stride, cfg.anchor_sizes);
  const auto out = forward(model, normalize(img), anchors);
  const std::size_t m = static_cast<std::size_t>(cfg.num_classes);
  auto probs = out.probs.data();
  auto deltas = out.deltas.data();
  std::vector<Detection> dets;
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    std::size_t best = 1;
    for (std::size_t c = 2; c < m; ++c)
      if (probs[a * m + c] > probs[a * m + best]) best = c;
    const double score = probs[a * m + best];
    if (score < score_threshold) continue;
    const BoxDelta d{deltas[a * 4], deltas[a * 4 + 1], deltas[a * 4 + 2], deltas[a * 4 + 3]};
    Box b = decode(d, anchors[a].box);
    b.x += offset_x;
    b.y += offset_y;
    dets.push_back({b, static_cast<int>(best), score});
  }
  return dets;
}

inline DetectionResult detect(const DetectorModel& model, const AnnotatedImage& img,
                              double score_threshold, double nms_threshold) {
  return nms(candidates(model, img, score_threshold), nms_threshold);
}

/// Per-patch candidates mapped back to image coordinates, then one global NMS.
inline DetectionResult detect_tiled(const DetectorModel& model, const AnnotatedImage& img, int patch,
                                    int overlap, double score_threshold, double nms_threshold) {
  std::vector<Detection> all;
  for (const auto& p : tile(img, patch, overlap)) {
    auto dets = candidates(model, p.image, score_threshold, p.offset_x, p.offset_y);
    all.insert(all.end(), dets.begin(), dets.end());
  }
  return nms(all, nms_threshold);
}

}  // namespace pudet
