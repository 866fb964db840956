#pragma once

// Experiment commands behind the `pudet` executable. Output layout under
// config.out:
//
//   data/{train,val,test}            degraded train/val, complete test
//   data/complete/{train,val}        complete annotations for the upper bound
//   runs/<method>/run_<k>/           model.json, log.csv, run.json, timing.log
//   sweep/<method>/                  sweep.csv, summary.json
//   eval/                            summary.csv, summary.json, compare.csv,
//                                    <method>/run_<k>/{metrics.json,detections/}

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pudet/config.hpp"
#include "pudet/detector.hpp"
#include "pudet/errors.hpp"
#include "pudet/eval.hpp"
#include "pudet/priors.hpp"
#include "pudet/synth.hpp"
#include "pudet/train.hpp"

namespace pudet::cli {

namespace fs = std::filesystem;

enum class Method { Baseline, Pu, PuNaive, PuMulti, Wce, Focal, Upper };

inline Method parse_method(const std::string& s) {
  if (s == "baseline") return Method::Baseline;
  if (s == "pu") return Method::Pu;
  if (s == "pu-naive") return Method::PuNaive;
  if (s == "pu-multi") return Method::PuMulti;
  if (s == "wce") return Method::Wce;
  if (s == "focal") return Method::Focal;
  if (s == "upper") return Method::Upper;
  throw ConfigError("unknown method '" + s + "' (expected baseline, pu, pu-naive, pu-multi, wce, focal, upper)");
}

inline std::string method_name(Method m) {
  switch (m) {
    case Method::Baseline: return "baseline";
    case Method::Pu: return "pu";
    case Method::PuNaive: return "pu-naive";
    case Method::PuMulti: return "pu-multi";
    case Method::Wce: return "wce";
    case Method::Focal: return "focal";
    case Method::Upper: return "upper";
  }
  return "?";
}

inline LossKind loss_kind(Method m) {
  switch (m) {
    case Method::Pu: return LossKind::PuBinary;
    case Method::PuNaive: return LossKind::PuNaive;
    case Method::PuMulti: return LossKind::PuMulticlass;
    case Method::Wce: return LossKind::WceBaseline;
    case Method::Focal: return LossKind::FocalBaseline;
    case Method::Baseline:
    case Method::Upper: return LossKind::PnBaseline;
  }
  return LossKind::PnBaseline;
}

inline bool needs_prior(Method m) {
  return m == Method::Pu || m == Method::PuNaive || m == Method::PuMulti || m == Method::Wce;
}

/// Command-line values that take precedence over the config file.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<double> prior;
  std::optional<int> runs;
  std::optional<fs::path> out;
};

inline void apply(ExperimentConfig& cfg, const Overrides& o) {
  if (o.seed) {
    cfg.seed = *o.seed;
    cfg.generator.seed = *o.seed;
  }
  if (o.prior) {
    if (!(*o.prior > 0.0 && *o.prior < 1.0)) throw ConfigError("--prior must lie in (0,1)");
    cfg.train.prior = *o.prior;
  }
  if (o.runs) {
    if (*o.runs < 1) throw ConfigError("--runs must be >= 1");
    cfg.runs = *o.runs;
  }
  if (o.out) cfg.out = *o.out;
}

inline fs::path data_dir(const ExperimentConfig& cfg) { return cfg.out / "data"; }
inline fs::path run_dir(const ExperimentConfig& cfg, Method m, int k) {
  return cfg.out / "runs" / method_name(m) / ("run_" + std::to_string(k));
}

inline Dataset load_split(const ExperimentConfig& cfg, const std::string& split) {
  const fs::path dir = data_dir(cfg) / split;
  if (!fs::exists(dir / "manifest.json"))
    throw DataError("dataset split " + dir.string() + " not found; run `pudet generate` first");
  return load_dataset(dir);
}

// ---------------------------------------------------------------------------
// generate

inline AnnotatedImage degrade(const ExperimentConfig& cfg, const AnnotatedImage& img, std::size_t index) {
  switch (cfg.degradation.strategy) {
    case DegradeStrategy::None: {
      AnnotatedImage out = img;
      out.complete = false;
      return out;
    }
    case DegradeStrategy::Random:
      return degrade_random(img, cfg.degradation.keep_n, derive_seed(derive_seed(cfg.seed, 0x64656772), index));
    case DegradeStrategy::Agreement: return degrade_by_agreement(img, cfg.degradation.keep_n);
  }
  return img;
}

/// Generates, splits and degrades the dataset. Test keeps complete annotations.
inline void cmd_generate(const ExperimentConfig& cfg) {
  const auto images = generate(cfg.generator, cfg.images);
  const auto counts = cfg.split_counts();
  const std::array<std::string, 3> names{"train", "val", "test"};
  std::size_t next = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    Dataset degraded, complete;
    degraded.num_classes = complete.num_classes = cfg.generator.num_classes();
    degraded.config = complete.config = cfg.source;
    for (int i = 0; i < counts[s]; ++i, ++next) {
      complete.images.push_back(images[next]);
      degraded.images.push_back(s == 2 ? images[next] : degrade(cfg, images[next], next));
    }
    const fs::path dir = data_dir(cfg) / names[s];
    fs::remove_all(dir);
    save_dataset(degraded, dir);
    if (s < 2) {
      fs::remove_all(data_dir(cfg) / "complete" / names[s]);
      save_dataset(complete, data_dir(cfg) / "complete" / names[s]);
    }
  }
}

// ---------------------------------------------------------------------------
// Scoring helpers

inline DetectionResult run_detector(const DetectorModel& model, const AnnotatedImage& img, const EvalSettings& e) {
  const auto& c = model.config;
  if (e.patch > 0) return detect_tiled(model, img, e.patch, e.overlap, c.score_threshold, c.nms_threshold);
  return detect(model, img, c.score_threshold, c.nms_threshold);
}

/// Matches detections against each image's annotations and pools the counts.
inline MatchReport score_images(const DetectorModel& model, const std::vector<AnnotatedImage>& images,
                                const EvalSettings& e, std::vector<DetectionResult>* detections = nullptr) {
  MatchReport total;
  for (const auto& img : images) {
    auto det = run_detector(model, img, e);
    total.merge(match(det.boxes, img.boxes, e.iou_threshold, e.criterion));
    if (detections) detections->push_back(std::move(det));
  }
  return total;
}

/// Validation recall for prior selection: a validation annotation counts as
/// recalled when a same-class detection reaches IoU >= 0.5.
inline double validation_recall(const DetectorModel& model, const std::vector<AnnotatedImage>& val,
                                const EvalSettings& e) {
  EvalSettings iou_half = e;
  iou_half.iou_threshold = 0.5;
  iou_half.criterion = MatchCriterion::Iou;
  return metrics(score_images(model, val, iou_half)).macro.recall;
}

// ---------------------------------------------------------------------------
// train

inline TrainConfig make_train_config(const ExperimentConfig& cfg, Method m, std::uint64_t seed,
                                     std::optional<double> prior) {
  TrainConfig t;
  t.loss_kind = loss_kind(m);
  t.learning_rate = cfg.train.learning_rate;
  t.batch_size = cfg.train.batch_size;
  t.iterations = cfg.train.iterations;
  t.seed = seed;
  t.augment = cfg.train.augment;
  t.loc_weight = cfg.train.loc_weight;
  t.focal_alpha = cfg.train.focal_alpha;
  t.focal_gamma = cfg.train.focal_gamma;
  t.detector = cfg.detector;
  if (needs_prior(m)) t.prior = prior;
  return t;
}

inline std::vector<AnnotatedImage> training_images(const ExperimentConfig& cfg, Method m, const std::string& split) {
  const Dataset ds = load_split(cfg, m == Method::Upper ? "complete/" + split : split);
  if (ds.num_classes != cfg.detector.num_classes)
    throw ConfigError("dataset has M = " + std::to_string(ds.num_classes) + " but detector.num_classes = " +
                      std::to_string(cfg.detector.num_classes));
  return ds.images;
}

/// One training per grid candidate with the base seed; returns the table of
/// validation recalls and the selected prior.
inline PriorSelection select_prior_on_validation(const ExperimentConfig& cfg, Method m,
                                                 const std::vector<AnnotatedImage>& train_set,
                                                 const std::vector<AnnotatedImage>& val_set,
                                                 std::vector<DetectorModel>* models = nullptr) {
  if (!cfg.train.prior_grid) throw UsageError("prior selection needs train.prior_grid in the config");
  const auto grid = candidates(*cfg.train.prior_grid);
  return select_prior(
      [&](double p) {
        std::clog << "sweep " << method_name(m) << ": pi = " << p << '\n';
        auto model = train(train_set, make_train_config(cfg, m, cfg.seed, p)).model;
        if (models) models->push_back(model);
        return model;
      },
      [&](const DetectorModel& model) { return validation_recall(model, val_set, cfg.eval); }, grid);
}

/// Fixed prior from --prior or the config, else selection on the validation split.
inline std::optional<double> resolve_prior(const ExperimentConfig& cfg, Method m,
                                           const std::vector<AnnotatedImage>& train_set) {
  if (!needs_prior(m)) return std::nullopt;
  if (cfg.train.prior) return cfg.train.prior;
  if (!cfg.train.prior_grid)
    throw ConfigError(method_name(m) + " needs a class prior: pass --prior, set train.prior or train.prior_grid");
  const auto val = training_images(cfg, m, "val");
  return select_prior_on_validation(cfg, m, train_set, val).best;
}

struct TrainRun {
  fs::path dir;
  std::uint64_t seed = 0;
  std::optional<double> prior;
  TrainResult result;
};

/// cfg.runs independent trainings with seeds seed + k.
inline std::vector<TrainRun> cmd_train(const ExperimentConfig& cfg, Method m) {
  const auto train_set = training_images(cfg, m, "train");
  const auto prior = resolve_prior(cfg, m, train_set);
  std::vector<TrainRun> runs;
  for (int k = 0; k < cfg.runs; ++k) {
    TrainRun run;
    run.dir = run_dir(cfg, m, k);
    run.seed = cfg.seed + static_cast<std::uint64_t>(k);
    run.prior = prior;
    const auto t0 = std::chrono::steady_clock::now();
    run.result = train(train_set, make_train_config(cfg, m, run.seed, prior));
    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - t0;

    fs::create_directories(run.dir);
    save_model(run.result.model, run.dir / "model.json");
    write_training_log(run.result.log, cfg.detector.num_classes, run.dir / "log.csv");
    nlohmann::json info{{"method", method_name(m)},
                        {"seed", run.seed},
                        {"iterations", cfg.train.iterations},
                        {"batches_without_positives", run.result.log.batches_without_positives}};
    info["prior"] = prior ? nlohmann::json(*prior) : nlohmann::json(nullptr);
    std::ofstream(run.dir / "run.json") << info.dump(2) << '\n';
    std::ofstream(run.dir / "timing.log") << "seconds " << elapsed.count() << '\n';
    std::clog << method_name(m) << " run " << k + 1 << "/" << cfg.runs << " seed " << run.seed << ": final loss "
              << run.result.log.entries.back().total << " (" << elapsed.count() << " s)\n";
    runs.push_back(std::move(run));
  }
  return runs;
}

// ---------------------------------------------------------------------------
// sweep-prior

struct SweepRow {
  double prior = 0.0;
  double val_recall = 0.0;
  double test_f1 = 0.0;
};

struct SweepReport {
  std::vector<SweepRow> rows;
  double selected = 0.0;
};

/// Trains per candidate, selects by validation recall and reports test F1 for
/// the sensitivity table.
inline SweepReport cmd_sweep_prior(const ExperimentConfig& cfg, Method m) {
  if (!needs_prior(m)) throw ConfigError("sweep-prior: method " + method_name(m) + " takes no prior");
  if (!cfg.train.prior_grid) throw UsageError("sweep-prior: config has no train.prior_grid");
  const auto train_set = training_images(cfg, m, "train");
  const auto val_set = training_images(cfg, m, "val");
  const Dataset test = load_split(cfg, "test");
  std::vector<DetectorModel> models;
  const PriorSelection sel = select_prior_on_validation(cfg, m, train_set, val_set, &models);

  SweepReport rep;
  rep.selected = sel.best;
  for (std::size_t i = 0; i < sel.table.size(); ++i) {
    const double f1 = metrics(score_images(models[i], test.images, cfg.eval)).macro.f1;
    rep.rows.push_back({sel.table[i].first, sel.table[i].second, f1});
  }

  const fs::path dir = cfg.out / "sweep" / method_name(m);
  fs::create_directories(dir);
  std::ofstream csv(dir / "sweep.csv");
  csv << "pi,val_recall,test_f1\n";
  for (const auto& r : rep.rows)
    csv << format_double(r.prior) << ',' << format_double(r.val_recall) << ',' << format_double(r.test_f1) << '\n';

  std::vector<SweepRow> by_f1 = rep.rows;
  std::stable_sort(by_f1.begin(), by_f1.end(), [](const auto& a, const auto& b) { return a.test_f1 > b.test_f1; });
  nlohmann::json summary{{"method", method_name(m)}, {"selected_prior", rep.selected}};
  for (const auto& r : rep.rows)
    if (r.prior == rep.selected) summary["selected_test_f1"] = r.test_f1;
  summary["best_prior"] = by_f1[0].prior;
  summary["best_test_f1"] = by_f1[0].test_f1;
  if (by_f1.size() > 1) {
    summary["runner_up_prior"] = by_f1[1].prior;
    summary["runner_up_test_f1"] = by_f1[1].test_f1;
    summary["delta_f1"] = by_f1[0].test_f1 - by_f1[1].test_f1;
  }
  std::ofstream(dir / "summary.json") << summary.dump(2) << '\n';
  return rep;
}

// ---------------------------------------------------------------------------
// evaluate

struct Comparison {
  std::string a, b;
  double mean_diff = 0.0;
  TTestResult test;
  double p_adjusted = 1.0;
};

struct EvaluationReport {
  std::map<std::string, std::vector<MetricSummary>> runs;  // per method, one entry per run
  std::vector<Comparison> comparisons;
};

inline nlohmann::json to_json(const PrfScores& s) {
  return {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}};
}

inline void write_detections(const fs::path& path, const DetectionResult& det) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << "x,y,w,h,class_id,score\n";
  for (const auto& d : det.boxes)
    f << format_double(d.box.x) << ',' << format_double(d.box.y) << ',' << format_double(d.box.w) << ','
      << format_double(d.box.h) << ',' << d.class_id << ',' << format_double(d.score) << '\n';
}

/// Scores every run of every method on the complete test split; with
/// `compare`, paired t-tests on per-run F1 for every method pair, BH-adjusted.
inline EvaluationReport cmd_evaluate(const ExperimentConfig& cfg, const std::vector<Method>& methods, bool compare) {
  const Dataset test = load_split(cfg, "test");
  const fs::path out = cfg.out / "eval";
  fs::create_directories(out);
  EvaluationReport rep;
  std::ofstream summary_csv(out / "summary.csv");
  summary_csv << "method,fold,recall,precision,f1\n";
  nlohmann::json summary_json = nlohmann::json::object();

  for (Method m : methods) {
    const std::string name = method_name(m);
    auto& runs = rep.runs[name];
    for (int k = 0; k < cfg.runs; ++k) {
      const fs::path model_path = run_dir(cfg, m, k) / "model.json";
      if (!fs::exists(model_path)) throw DataError("missing checkpoint " + model_path.string());
      const DetectorModel model = load_model(model_path);
      if (model.config.num_classes != test.num_classes)
        throw ConfigError(model_path.string() + " predicts M = " + std::to_string(model.config.num_classes) +
                          " classes but the test set has M = " + std::to_string(test.num_classes));
      std::vector<DetectionResult> dets;
      const MatchReport report = score_images(model, test.images, cfg.eval, &dets);
      const MetricSummary ms = metrics(report);
      runs.push_back(ms);

      const fs::path dir = out / name / ("run_" + std::to_string(k));
      fs::create_directories(dir / "detections");
      for (std::size_t i = 0; i < dets.size(); ++i)
        write_detections(dir / "detections" / (detail::image_name(i) + ".csv"), dets[i]);
      nlohmann::json mj{{"method", name}, {"run", k}, {"macro", to_json(ms.macro)}};
      for (const auto& [c, s] : ms.per_class) {
        const auto& k_counts = report.per_class.at(c);
        auto entry = to_json(s);
        entry["tp"] = k_counts.tp;
        entry["fp"] = k_counts.fp;
        entry["fn"] = k_counts.fn;
        mj["per_class"][std::to_string(c)] = entry;
      }
      std::ofstream(dir / "metrics.json") << mj.dump(2) << '\n';
      summary_csv << name << ',' << k << ',' << format_double(ms.macro.recall) << ','
                  << format_double(ms.macro.precision) << ',' << format_double(ms.macro.f1) << '\n';
    }
    const AggregateSummary agg = aggregate(runs);
    summary_json[name] = {{"runs", cfg.runs},
                          {"recall", {{"mean", agg.recall.mean}, {"std", agg.recall.std}}},
                          {"precision", {{"mean", agg.precision.mean}, {"std", agg.precision.std}}},
                          {"f1", {{"mean", agg.f1.mean}, {"std", agg.f1.std}}}};
  }
  std::ofstream(out / "summary.json") << summary_json.dump(2) << '\n';

  if (compare) {
    if (methods.size() < 2) throw UsageError("--compare needs at least two methods");
    if (cfg.runs < 2) throw UsageError("--compare needs at least two runs per method");
    std::vector<double> raw;
    for (std::size_t i = 0; i < methods.size(); ++i) {
      for (std::size_t j = i + 1; j < methods.size(); ++j) {
        Comparison c;
        c.a = method_name(methods[i]);
        c.b = method_name(methods[j]);
        std::vector<double> fa, fb;
        for (const auto& s : rep.runs[c.a]) fa.push_back(s.macro.f1);
        for (const auto& s : rep.runs[c.b]) fb.push_back(s.macro.f1);
        c.test = paired_t_test(fa, fb);
        c.mean_diff = mean_std(fa).mean - mean_std(fb).mean;
        raw.push_back(c.test.p);
        rep.comparisons.push_back(c);
      }
    }
    const auto adjusted = benjamini_hochberg(raw);
    std::ofstream csv(out / "compare.csv");
    csv << "method_a,method_b,mean_diff_f1,t,df,p,p_bh\n";
    for (std::size_t i = 0; i < rep.comparisons.size(); ++i) {
      auto& c = rep.comparisons[i];
      c.p_adjusted = adjusted[i];
      csv << c.a << ',' << c.b << ',' << format_double(c.mean_diff) << ',' << format_double(c.test.t) << ','
          << format_double(c.test.df) << ',' << format_double(c.test.p) << ',' << format_double(c.p_adjusted) << '\n';
    }
  }
  return rep;
}

}  // namespace pudet::cli
