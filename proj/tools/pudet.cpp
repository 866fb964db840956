// pudet: generate data, train detectors, sweep the class prior, evaluate.
//
// Exit codes: 0 success, 1 training failure, 2 configuration or usage error,
// 3 data error.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pudet/cli.hpp"

namespace {

struct Options {
  std::string config;
  std::vector<std::string> methods;
  std::optional<int> runs;
  std::optional<double> prior;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool compare = false;
};

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "override the config seed");
  cmd->add_option("--out", o.out, "override the output directory");
}

std::vector<pudet::cli::Method> parse_methods(const std::vector<std::string>& names) {
  std::vector<pudet::cli::Method> out;
  for (const auto& n : names) out.push_back(pudet::cli::parse_method(n));
  if (out.empty()) throw pudet::UsageError("no --method given");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PU-learning object detection experiments"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("generate", "generate, split and degrade the synthetic dataset");
  add_common(gen, o);

  auto* tr = app.add_subcommand("train", "train one or more methods");
  add_common(tr, o);
  tr->add_option("--method", o.methods, "baseline, pu, pu-naive, pu-multi, wce, focal, upper")
      ->required()
      ->delimiter(',');
  tr->add_option("--runs", o.runs, "independent runs per method (seeds seed..seed+runs-1)");
  tr->add_option("--prior", o.prior, "fixed class prior for pu, pu-naive, pu-multi, wce");

  auto* sw = app.add_subcommand("sweep-prior", "train per grid prior; report validation recall and test F1");
  add_common(sw, o);
  sw->add_option("--method", o.methods, "pu, pu-naive, pu-multi or wce")->delimiter(',');

  auto* ev = app.add_subcommand("evaluate", "score trained runs on the complete test split");
  add_common(ev, o);
  ev->add_option("--method", o.methods, "methods to score")->required()->delimiter(',');
  ev->add_option("--runs", o.runs, "runs per method");
  ev->add_flag("--compare", o.compare, "paired t-tests with Benjamini-Hochberg adjustment");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    pudet::ExperimentConfig cfg = pudet::load_experiment_config(o.config);
    pudet::cli::Overrides ov;
    ov.seed = o.seed;
    ov.prior = o.prior;
    ov.runs = o.runs;
    if (o.out) ov.out = *o.out;
    pudet::cli::apply(cfg, ov);

    if (gen->parsed()) {
      pudet::cli::cmd_generate(cfg);
      std::cout << "wrote " << pudet::cli::data_dir(cfg).string() << '\n';
    } else if (tr->parsed()) {
      for (auto m : parse_methods(o.methods)) pudet::cli::cmd_train(cfg, m);
    } else if (sw->parsed()) {
      if (o.methods.empty()) o.methods = {"pu"};
      for (auto m : parse_methods(o.methods)) {
        const auto rep = pudet::cli::cmd_sweep_prior(cfg, m);
        std::cout << pudet::cli::method_name(m) << ": selected pi = " << rep.selected << '\n';
      }
    } else if (ev->parsed()) {
      const auto rep = pudet::cli::cmd_evaluate(cfg, parse_methods(o.methods), o.compare);
      for (const auto& [name, runs] : rep.runs) {
        const auto agg = pudet::aggregate(runs);
        std::cout << name << ": F1 " << agg.f1.mean << " +- " << agg.f1.std << " (recall " << agg.recall.mean
                  << ", precision " << agg.precision.mean << ")\n";
      }
      for (const auto& c : rep.comparisons)
        std::cout << c.a << " vs " << c.b << ": dF1 " << c.mean_diff << ", p " << c.test.p << ", p_bh "
                  << c.p_adjusted << '\n';
    }
  } catch (const pudet::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const pudet::UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const pudet::GenerationError& e) {
    std::cerr << "generation error: " << e.what() << '\n';
    return 2;
  } catch (const pudet::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const pudet::TrainingError& e) {
    std::cerr << "training error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
