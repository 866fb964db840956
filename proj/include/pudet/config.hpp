#pragma once

// Experiment configuration: one JSON document describing data generation,
// annotation degradation, the detector, training, evaluation and run counts.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pudet/detector.hpp"
#include "pudet/errors.hpp"
#include "pudet/eval.hpp"
#include "pudet/json_util.hpp"
#include "pudet/priors.hpp"
#include "pudet/synth.hpp"

namespace pudet {

enum class DegradeStrategy { None, Random, Agreement };

struct DegradationConfig {
  DegradeStrategy strategy = DegradeStrategy::Random;
  int keep_n = 1;
};

struct TrainSettings {
  double learning_rate = 1e-3;
  int batch_size = 8;
  int iterations = 2580;
  bool augment = true;
  double loc_weight = 1.0;
  std::optional<double> prior;
  std::optional<PriorGrid> prior_grid;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
};

struct EvalSettings {
  double iou_threshold = 0.5;
  MatchCriterion criterion = MatchCriterion::Iou;
  int patch = 0;  // 0 disables tiling
  int overlap = 0;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  GeneratorConfig generator;
  int images = 60;
  std::array<double, 3> split{4.0, 1.0, 1.0};  // train : val : test
  DegradationConfig degradation;
  DetectorConfig detector;
  TrainSettings train;
  EvalSettings eval;
  int runs = 1;
  std::filesystem::path out = "out";
  nlohmann::json source = nlohmann::json::object();  // the document as read

  /// Image counts per split; rounding error goes to the test split.
  std::array<int, 3> split_counts() const {
    const double total = split[0] + split[1] + split[2];
    const int train = static_cast<int>(std::lround(images * split[0] / total));
    const int val = static_cast<int>(std::lround(images * split[1] / total));
    return {train, val, images - train - val};
  }
};

namespace detail {

inline void read_range_int(const nlohmann::json& j, const char* key, Range<int>& r, const std::string& ctx) {
  if (!j.contains(key)) return;
  std::vector<int> v;
  read_opt(j, key, v, ctx);
  if (v.size() != 2) throw ConfigError(ctx + "." + key + ": expected [lo, hi]");
  r = {v[0], v[1]};
}

inline void read_range_double(const nlohmann::json& j, const char* key, Range<double>& r, const std::string& ctx) {
  if (!j.contains(key)) return;
  std::vector<double> v;
  read_opt(j, key, v, ctx);
  if (v.size() != 2) throw ConfigError(ctx + "." + key + ": expected [lo, hi]");
  r = {v[0], v[1]};
}

inline BlobAppearance parse_blob(const nlohmann::json& j, BlobAppearance b, const std::string& ctx) {
  require_keys_subset(j, {"count", "radius", "intensity", "eccentricity"}, ctx);
  read_range_int(j, "count", b.count, ctx);
  read_range_int(j, "radius", b.radius, ctx);
  read_range_double(j, "intensity", b.intensity, ctx);
  read_opt(j, "eccentricity", b.eccentricity, ctx);
  return b;
}

inline GeneratorConfig parse_generator(const nlohmann::json& j) {
  const std::string ctx = "generator";
  require_keys_subset(j, {"width", "height", "classes", "background", "noise", "distractors", "min_gap", "max_retries"},
                      ctx);
  GeneratorConfig g;
  read_opt(j, "width", g.width, ctx);
  read_opt(j, "height", g.height, ctx);
  read_opt(j, "background", g.background, ctx);
  read_opt(j, "noise", g.noise, ctx);
  read_opt(j, "min_gap", g.min_gap, ctx);
  read_opt(j, "max_retries", g.max_retries, ctx);
  if (!j.contains("classes") || !j.at("classes").is_array())
    throw ConfigError("generator.classes: expected a list with one entry per positive class");
  for (std::size_t m = 0; m < j.at("classes").size(); ++m)
    g.classes.push_back(parse_blob(j.at("classes")[m], {}, "generator.classes[" + std::to_string(m) + "]"));
  if (j.contains("distractors")) g.distractors = parse_blob(j.at("distractors"), g.distractors, "generator.distractors");
  return g;
}

inline TrainSettings parse_train(const nlohmann::json& j) {
  const std::string ctx = "train";
  require_keys_subset(j,
                      {"learning_rate", "batch_size", "iterations", "augment", "loc_weight", "prior", "prior_grid",
                       "focal_alpha", "focal_gamma"},
                      ctx);
  TrainSettings t;
  read_opt(j, "learning_rate", t.learning_rate, ctx);
  read_opt(j, "batch_size", t.batch_size, ctx);
  read_opt(j, "iterations", t.iterations, ctx);
  read_opt(j, "augment", t.augment, ctx);
  read_opt(j, "loc_weight", t.loc_weight, ctx);
  read_opt(j, "focal_alpha", t.focal_alpha, ctx);
  read_opt(j, "focal_gamma", t.focal_gamma, ctx);
  if (j.contains("prior") && !j.at("prior").is_null()) {
    double p = 0.0;
    read_opt(j, "prior", p, ctx);
    t.prior = p;
  }
  if (j.contains("prior_grid")) {
    const auto& g = j.at("prior_grid");
    require_keys_subset(g, {"start", "stop", "step"}, "train.prior_grid");
    PriorGrid grid;
    read_opt(g, "start", grid.start, "train.prior_grid");
    read_opt(g, "stop", grid.stop, "train.prior_grid");
    read_opt(g, "step", grid.step, "train.prior_grid");
    grid.validate();
    t.prior_grid = grid;
  }
  if (!(t.learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
  if (t.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (t.iterations < 1) throw ConfigError("train.iterations must be >= 1");
  if (t.prior && !(*t.prior > 0.0 && *t.prior < 1.0)) throw ConfigError("train.prior must lie in (0,1)");
  return t;
}

inline EvalSettings parse_eval(const nlohmann::json& j) {
  const std::string ctx = "eval";
  require_keys_subset(j, {"iou_threshold", "criterion", "patch", "overlap"}, ctx);
  EvalSettings e;
  read_opt(j, "iou_threshold", e.iou_threshold, ctx);
  read_opt(j, "patch", e.patch, ctx);
  read_opt(j, "overlap", e.overlap, ctx);
  std::string crit = "iou";
  read_opt(j, "criterion", crit, ctx);
  if (crit == "iou") {
    e.criterion = MatchCriterion::Iou;
  } else if (crit == "center") {
    e.criterion = MatchCriterion::CenterInBox;
  } else {
    throw ConfigError("eval.criterion: expected 'iou' or 'center', got '" + crit + "'");
  }
  if (!(e.iou_threshold > 0.0 && e.iou_threshold < 1.0)) throw ConfigError("eval.iou_threshold must lie in (0,1)");
  if (e.patch < 0 || (e.patch > 0 && !(e.overlap >= 0 && e.overlap < e.patch)))
    throw ConfigError("eval: need patch >= 0 and 0 <= overlap < patch");
  return e;
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  require_keys_subset(j,
                      {"seed", "generator", "images", "split", "degradation", "detector", "train", "eval", "runs", "out"},
                      "config");
  ExperimentConfig c;
  c.source = j;
  read_opt(j, "seed", c.seed, "config");
  if (!j.contains("generator")) throw ConfigError("config: missing 'generator'");
  c.generator = detail::parse_generator(j.at("generator"));
  c.generator.seed = c.seed;
  c.generator.validate();
  read_opt(j, "images", c.images, "config");
  if (j.contains("split")) {
    std::vector<double> s;
    read_opt(j, "split", s, "config");
    if (s.size() != 3) throw ConfigError("config.split: expected [train, val, test]");
    c.split = {s[0], s[1], s[2]};
  }
  for (double r : c.split)
    if (!(r > 0.0)) throw ConfigError("config.split: ratios must be positive");
  if (j.contains("degradation")) {
    const auto& d = j.at("degradation");
    require_keys_subset(d, {"strategy", "keep_n"}, "degradation");
    std::string s = "random";
    read_opt(d, "strategy", s, "degradation");
    if (s == "random") {
      c.degradation.strategy = DegradeStrategy::Random;
    } else if (s == "agreement") {
      c.degradation.strategy = DegradeStrategy::Agreement;
    } else if (s == "none") {
      c.degradation.strategy = DegradeStrategy::None;
    } else {
      throw ConfigError("degradation.strategy: expected random, agreement or none, got '" + s + "'");
    }
    read_opt(d, "keep_n", c.degradation.keep_n, "degradation");
    if (c.degradation.keep_n < 1) throw ConfigError("degradation.keep_n must be >= 1");
  }
  if (j.contains("detector")) c.detector = detector_config_from_json(j.at("detector"));
  if (c.detector.num_classes != c.generator.num_classes())
    throw ConfigError("detector.num_classes = " + std::to_string(c.detector.num_classes) + " but the generator has " +
                      std::to_string(c.generator.num_classes()) + " classes including background");
  if (j.contains("train")) c.train = detail::parse_train(j.at("train"));
  if (j.contains("eval")) c.eval = detail::parse_eval(j.at("eval"));
  read_opt(j, "runs", c.runs, "config");
  if (c.runs < 1) throw ConfigError("config.runs must be >= 1");
  std::string out = c.out.string();
  read_opt(j, "out", out, "config");
  c.out = out;
  const auto counts = c.split_counts();
  for (int n : counts)
    if (n < 1) throw ConfigError("config: " + std::to_string(c.images) + " images leave an empty split");
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_experiment_config(j);
}

}  // namespace pudet
