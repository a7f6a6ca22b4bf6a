#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "rlvr/analysis.hpp"
#include "rlvr/grpo.hpp"
#include "rlvr/shaping.hpp"
#include "rlvr/task.hpp"
#include "rlvr/token_metrics.hpp"
#include "rlvr/warm_start.hpp"

namespace rlvr {

/// Bad config text, unknown keys, or values that break an invariant.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Failures of the run-level commands (missing logs, misaligned runs).
class RunError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PolicySetup {
  FeatureMapConfig features;
  double temperature = 1.0;
  double init_scale = 0.01;
  WarmStartConfig warm_start;
};

struct MetricOptions {
  int bins = 20;
  StageDetectorConfig stage;
  double shift_threshold = 0.06;
  int intervention_k = 8;
  int intervention_per_stratum = 4;
  int dump_every = 50;
  double drop_fraction = 0.2;
  double top_shift_fraction = 0.2;
  QualityRules quality;
  std::string lexicon;  // file path; empty selects the built-in lexicon
};

struct ExperimentConfig {
  std::uint64_t seed = 1234;
  std::int64_t steps = 300;
  std::string output_dir = "runs/desk";
  int threads = 1;
  TaskSpec task;
  PolicySetup policy;
  TrainerConfig trainer = default_trainer();
  SamplingConfig sampling;
  PplShapingConfig ppl;
  PositionShapingConfig position;
  MetricOptions metrics;

  /// The desk run trains with Adam; see README.
  static TrainerConfig default_trainer() {
    TrainerConfig t;
    t.optimizer.kind = OptimizerKind::kAdam;
    return t;
  }
};

/// Throws ConfigError naming the first broken invariant.
void validate(const ExperimentConfig& config);

/// Missing keys keep their defaults; unknown keys are rejected with their
/// full path. The result is validated.
ExperimentConfig parse_config(std::string_view json_text);
/// As parse_config. A relative lexicon path is resolved against the
/// directory holding the config file.
ExperimentConfig load_config(const std::filesystem::path& path);
/// Every field, plus the code version tag. parse_config accepts the output.
std::string config_to_json(const ExperimentConfig& config);
void save_config(const std::filesystem::path& path, const ExperimentConfig& config);

AnalysisOptions analysis_options(const MetricOptions& metrics);

// ---------------------------------------------------------------------------
// Step metrics

inline constexpr int kMetricsSchema = 1;

struct StepMetrics {
  std::int64_t step = 0;
  double mean_entropy = 0.0;
  std::optional<double> entropy_pos;
  std::optional<double> entropy_neg;
  double accuracy = 0.0;
  double mean_length = 0.0;
  double grad_norm_mean = 0.0;
  double grad_norm_max = 0.0;
  double small_shift_fraction = 1.0;
  Stage stage = Stage::kRising;
  std::vector<std::string> active_shapers;
  double wall_seconds = 0.0;  // goes to the timing log only
};

/// One metrics-log line without trailing newline. Wall-clock time is left
/// out so the log is reproducible.
std::string metrics_line(const StepMetrics& m);
/// Parses lines written by metrics_line; throws RunError on the first bad one.
std::vector<StepMetrics> read_metrics_log(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Checkpoints

/// Flat little-endian layout: magic "RLVRCKPT", u32 version, i64 step,
/// u64 feature seed, u64 V, u64 d, f64 temperature, then V*d f64 weights
/// row-major.
struct Checkpoint {
  std::int64_t step = 0;
  std::uint64_t feature_seed = 0;
  PolicyParameters params;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);
/// Readable dump of the same contents, for debugging.
std::string checkpoint_text(const Checkpoint& checkpoint);

// ---------------------------------------------------------------------------
// Commands

/// Task and warm-started policy exactly as run_train starts from them.
struct Setup {
  Task task;
  Policy policy;
  double warm_start_loglik = 0.0;
};
Setup make_setup(const ExperimentConfig& config);

/// Policy for a run directory's config with a checkpoint's weights.
Policy restore_policy(const ExperimentConfig& config, const Checkpoint& checkpoint);

/// File names inside a run directory.
namespace run_files {
inline constexpr const char* kConfig = "config.json";
inline constexpr const char* kMetrics = "metrics.jsonl";
inline constexpr const char* kTiming = "timing.jsonl";
inline constexpr const char* kRollouts = "rollouts.jsonl";
inline constexpr const char* kShifts = "shifts.jsonl";
inline constexpr const char* kLexicon = "lexicon.json";
inline constexpr const char* kCheckpointInit = "checkpoint_init.bin";
inline constexpr const char* kCheckpointFinal = "checkpoint_final.bin";
inline constexpr const char* kCheckpointFinalText = "checkpoint_final.txt";
}  // namespace run_files

struct TrainResult {
  std::vector<StepMetrics> metrics;
  double warm_start_loglik = 0.0;
};

/// Trains for config.steps and writes the run directory. Metrics are
/// computed from the batch sampled before each update; the position-shaping
/// schedule sees the stage label as of the previous step. On a failed step
/// the exception propagates after the log lines written so far are flushed.
TrainResult run_train(const ExperimentConfig& config, const std::filesystem::path& run_dir,
                      std::ostream* progress = nullptr);

ExperimentConfig load_run_config(const std::filesystem::path& run_dir);

/// Report for a run directory, computed in memory.
AnalysisReport analyze_run(const std::filesystem::path& run_dir);
/// Writes report.json, report.csv and report.txt into out_dir.
AnalysisReport run_analyze(const std::filesystem::path& run_dir, const std::filesystem::path& out_dir);

struct InterventionSpec {
  std::string checkpoint = "final";  // "init", "final", or a file path
  std::optional<std::int64_t> step;  // dumped step to sample from; default the last
  int per_stratum = 4;
  int k = 8;
  std::optional<std::uint64_t> seed;  // default: the run's seed
  int quintiles = 5;
};

struct StratumSummary {
  int ppl_quintile = 0;
  int position_quintile = 0;
  std::size_t available = 0;
  std::size_t sampled = 0;
  std::optional<double> mean_impact;
  std::optional<double> mean_abs_impact;
};

struct InterventionSummary {
  std::int64_t step = 0;
  std::vector<StratumSummary> strata;  // ppl-major
  std::size_t empty_strata = 0;
  std::vector<InterventionResult> results;
};

/// Samples (response, position) pairs from one dumped step, stratified by
/// the response's PPL quintile and the token's relative-position quintile,
/// and writes interventions.jsonl plus intervention_summary.json.
InterventionSummary run_intervene(const std::filesystem::path& run_dir, const InterventionSpec& spec,
                                  const std::filesystem::path& out_dir);

struct Comparison {
  std::vector<std::int64_t> steps;
  std::vector<double> baseline_accuracy;
  std::vector<double> shaped_accuracy;
  std::vector<double> baseline_entropy;
  std::vector<double> shaped_entropy;
  std::vector<double> accuracy_delta;  // shaped - baseline
  std::vector<double> entropy_delta;
  std::size_t final_window = 0;
  double baseline_final_accuracy = 0.0;
  double shaped_final_accuracy = 0.0;
  double baseline_final_entropy = 0.0;
  double shaped_final_entropy = 0.0;
  bool metrics_identical = false;  // byte-identical metrics logs
};

/// Pairs two runs step by step. Runs must log the same step indices.
Comparison compare_metrics(std::span<const StepMetrics> baseline, std::span<const StepMetrics> shaped,
                           std::size_t final_window = 25);
/// Writes comparison.json and comparison.csv into out_dir.
Comparison run_compare(const std::filesystem::path& baseline_dir, const std::filesystem::path& shaped_dir,
                       const std::filesystem::path& out_dir);

/// Output directory for a config: output_dir, placed under `root` when it
/// is relative and a root is given.
std::filesystem::path resolve_output_dir(const ExperimentConfig& config, const char* root);

}  // namespace rlvr
