// rlvr: train, analyze, intervene, compare and report desk-scale runs.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "rlvr/experiment.hpp"

namespace fs = std::filesystem;

namespace {

constexpr const char* kOutputRootEnv = "RLVR_OUTPUT_ROOT";

int fail(const std::string& message, int code) {
  std::cerr << "rlvr: error: " << message << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Entropy and advantage-shaping lab for GRPO on synthetic verifiable tasks"};
  app.set_version_flag("--version", rlvr::kVersionTag);
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "Run GRPO training and write a run directory");
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> steps;
  std::optional<int> threads;
  std::string train_out;
  bool quiet = false;
  train->add_option("--config", config_path, "Experiment config (JSON); defaults apply when omitted")
      ->check(CLI::ExistingFile);
  train->add_option("--seed", seed, "Override the master seed");
  train->add_option("--steps", steps, "Override the number of training steps");
  train->add_option("--threads", threads, "Rollout threads (results do not depend on it)");
  train->add_option("--out", train_out,
                    std::string("Run directory; default is the config's output_dir, under $") + kOutputRootEnv +
                        " when set");
  train->add_flag("--quiet", quiet, "No progress lines");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "Write report.json, report.csv and report.txt for a run");
  std::string run_dir;
  std::string analyze_out;
  analyze->add_option("--run-dir", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  analyze->add_option("--out", analyze_out, "Output directory (default: the run directory)");

  // intervene
  auto* intervene = app.add_subcommand("intervene", "Token-substitution study stratified by PPL and position");
  rlvr::InterventionSpec spec;
  std::optional<int> k;
  std::optional<int> per_stratum;
  std::optional<std::int64_t> at_step;
  std::string intervene_out;
  intervene->add_option("--run-dir", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  intervene->add_option("--checkpoint", spec.checkpoint, "init, final, or a checkpoint file")
      ->capture_default_str();
  intervene->add_option("--step", at_step, "Dumped step to sample from (default: the last)");
  intervene->add_option("--k", k, "Continuations per side; 0 enumerates exactly (default from config)");
  intervene->add_option("--per-stratum", per_stratum, "Pairs per stratum (default from config)");
  intervene->add_option("--seed", seed, "Sampling seed (default: the run's seed)");
  intervene->add_option("--out", intervene_out, "Output directory (default: the run directory)");

  // compare
  auto* compare = app.add_subcommand("compare", "Pair a shaped run with its baseline step by step");
  std::string shaped_dir;
  std::string compare_out;
  compare->add_option("--run-dir", run_dir, "Baseline run directory")->required()->check(CLI::ExistingDirectory);
  compare->add_option("--shaped", shaped_dir, "Shaped run directory")->required()->check(CLI::ExistingDirectory);
  compare->add_option("--out", compare_out, "Output directory (default: the shaped run directory)");

  // report
  auto* report = app.add_subcommand("report", "Print a run's summary table");
  std::string report_out;
  report->add_option("--run-dir", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  report->add_option("--out", report_out, "Also write the report files here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      rlvr::ExperimentConfig config = config_path.empty() ? rlvr::ExperimentConfig{} : rlvr::load_config(config_path);
      if (seed) config.seed = *seed;
      if (steps) config.steps = *steps;
      if (threads) config.threads = *threads;
      rlvr::validate(config);
      const fs::path out = train_out.empty() ? rlvr::resolve_output_dir(config, std::getenv(kOutputRootEnv))
                                             : fs::path(train_out);
      auto result = rlvr::run_train(config, out, quiet ? nullptr : &std::cout);
      if (!quiet && !result.metrics.empty()) {
        const auto& first = result.metrics.front();
        const auto& last = result.metrics.back();
        std::cout << "accuracy " << first.accuracy << " -> " << last.accuracy << ", entropy "
                  << first.mean_entropy << " -> " << last.mean_entropy << '\n';
      }
      std::cout << "run written to " << out.string() << '\n';
    } else if (*analyze) {
      const fs::path out = analyze_out.empty() ? fs::path(run_dir) : fs::path(analyze_out);
      const auto r = rlvr::run_analyze(run_dir, out);
      std::cout << "analyzed " << r.steps << " steps, " << r.responses << " dumped responses";
      if (r.warnings) std::cout << " (" << r.warnings << " malformed lines skipped)";
      std::cout << "; report written to " << out.string() << '\n';
    } else if (*intervene) {
      const auto config = rlvr::load_run_config(run_dir);
      spec.k = k.value_or(config.metrics.intervention_k);
      spec.per_stratum = per_stratum.value_or(config.metrics.intervention_per_stratum);
      spec.step = at_step;
      spec.seed = seed;
      const fs::path out = intervene_out.empty() ? fs::path(run_dir) : fs::path(intervene_out);
      const auto s = rlvr::run_intervene(run_dir, spec, out);
      std::cout << "step " << s.step << ": " << s.results.size() << " interventions over " << s.strata.size()
                << " strata";
      if (s.empty_strata) std::cout << " (" << s.empty_strata << " empty)";
      std::cout << "; written to " << out.string() << '\n';
    } else if (*compare) {
      const fs::path out = compare_out.empty() ? fs::path(shaped_dir) : fs::path(compare_out);
      const auto c = rlvr::run_compare(run_dir, shaped_dir, out);
      std::cout << c.steps.size() << " aligned steps; final-window accuracy " << c.baseline_final_accuracy
                << " -> " << c.shaped_final_accuracy << "; metrics "
                << (c.metrics_identical ? "byte-identical" : "differ") << '\n';
    } else if (*report) {
      const auto config = rlvr::load_run_config(run_dir);
      rlvr::Task task(config.task);
      const auto r = report_out.empty() ? rlvr::analyze_run(run_dir) : rlvr::run_analyze(run_dir, report_out);
      std::cout << rlvr::report_text(r, task.vocabulary());
    }
  } catch (const rlvr::ConfigError& e) {
    return fail(e.what(), 2);
  } catch (const std::exception& e) {
    return fail(e.what(), 1);
  }
  return 0;
}
