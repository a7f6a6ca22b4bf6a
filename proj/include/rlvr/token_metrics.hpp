#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "rlvr/policy.hpp"
#include "rlvr/rollout.hpp"
#include "rlvr/task.hpp"

namespace rlvr {

// ---------------------------------------------------------------------------
// Probability shift

struct ShiftRecord {
  std::int64_t step = 0;
  std::size_t group = 0;
  std::size_t response = 0;
  int position = 0;
  TokenId token = 0;
  double delta = 0.0;  // pi_after(o_t) - pi_before(o_t)
  double ppl = 1.0;
  double rel_position = 0.0;
  double entropy = 0.0;
  double reward = 0.0;
};

double probability_shift(const TokenDistribution& before, const TokenDistribution& after, TokenId token);

/// Fraction of records with |delta| < threshold; 1 for an empty set.
double fraction_below(std::span<const ShiftRecord> shifts, double threshold);

// ---------------------------------------------------------------------------
// Token intervention

/// k value that requests exact enumeration of every continuation.
inline constexpr int kExhaustive = 0;

struct InterventionResult {
  int position = 0;
  TokenId original = 0;
  TokenId substitute = 0;
  double impact = 0.0;  // I_t
  int k = 0;
  double original_accuracy = 0.0;
  double substitute_accuracy = 0.0;
};

/// argmax over V \ {original}; ties resolve to the lowest id.
TokenId best_alternative(const TokenDistribution& dist, TokenId original);

/// Probability-weighted accuracy over all continuations of `prefix`.
/// Exponential in the remaining length; refuses trees above `max_leaves`.
double expected_accuracy(const Policy& policy, const Task& task, const Instance& instance, const PromptCode& code,
                         std::span<const TokenId> prefix, std::size_t max_leaves = 5'000'000);

/// Replace o_t by its best alternative and compare continuation accuracy.
/// With k == kExhaustive both sides are computed by exact enumeration.
InterventionResult intervene(const Policy& policy, const Task& task, const Instance& instance,
                             std::span<const TokenId> response, int position, int k, Rng& rng,
                             double top_p = 1.0);

// ---------------------------------------------------------------------------
// Stage detection

struct StageDetectorConfig {
  int window = 25;          // moving-average width W
  double threshold = 1e-3;  // slope tolerance tau, nats per step
  int patience = 10;        // P
};

struct StageState {
  Stage label = Stage::kRising;
  std::optional<std::int64_t> transition_step;
  std::vector<double> smoothed;  // moving average, defined from index W-1 on
};

/// Streaming detector. The slope at step t is MA(t) - MA(t-1), defined once
/// t >= W. Step t is labelled plateau when the slopes of the P preceding
/// steps all have magnitude below tau; the label then latches.
class StageDetector {
 public:
  explicit StageDetector(StageDetectorConfig config = {});

  /// Adds the entropy for the next step and returns the label for the step
  /// after it.
  Stage observe(double entropy);
  Stage stage() const { return state_.label; }
  const StageState& state() const { return state_; }

 private:
  StageDetectorConfig config_;
  StageState state_;
  std::vector<double> series_;
  int calm_run_ = 0;
};

StageState detect_stage(std::span<const double> entropy_series, StageDetectorConfig config = {});

// ---------------------------------------------------------------------------
// Positional entropy profile and positive/negative split

struct ProfileBin {
  std::size_t count = 0;
  std::optional<double> mean;  // absent for empty bins
};

/// Tokens go to bin floor(l * bins), with l = 1 in the last bin.
std::vector<ProfileBin> positional_entropy_profile(std::span<const ResponseRecord> responses, int bins);
std::vector<ProfileBin> positional_entropy_profile(std::span<const RolloutGroup> groups, int bins);

struct EntropySplit {
  std::optional<double> positive;
  std::optional<double> negative;
  std::size_t positive_tokens = 0;
  std::size_t negative_tokens = 0;
};

/// Token-weighted mean entropy over positive- and negative-reward responses.
EntropySplit entropy_split_pos_neg(std::span<const ResponseRecord> responses);
EntropySplit entropy_split_pos_neg(std::span<const RolloutGroup> groups);

// ---------------------------------------------------------------------------
// Entropy drop per token type

/// Per token type and step: mean entropy of its occurrences, plus which
/// reward sides it occurred on.
class TokenEntropyHistory {
 public:
  explicit TokenEntropyHistory(std::size_t vocab_size) : vocab_size_(vocab_size) {}

  /// Starts a new step column; subsequent observations land in it.
  void begin_step(std::int64_t step);
  void observe(TokenId token, double entropy, bool positive);
  void add_responses(std::int64_t step, std::span<const ResponseRecord> responses);

  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t steps() const { return columns_.size(); }
  std::int64_t step_label(std::size_t column) const { return columns_[column].step; }
  std::optional<double> mean(std::size_t column, TokenId token) const;

  struct Provenance {
    std::size_t positive_only = 0;
    std::size_t negative_only = 0;
    std::size_t both = 0;
  };
  /// Counted per step column in which the type occurs.
  Provenance provenance(TokenId token) const;

 private:
  struct Cell {
    double sum = 0.0;
    std::size_t count = 0;
    bool in_positive = false;
    bool in_negative = false;
  };
  struct Column {
    std::int64_t step;
    std::vector<Cell> cells;
  };
  std::size_t vocab_size_;
  std::vector<Column> columns_;
};

struct EntropyDrop {
  TokenId token = 0;
  double drop = 0.0;  // early-window mean - late-window mean
  std::size_t positive_only = 0;
  std::size_t negative_only = 0;
  std::size_t both = 0;
};

/// Column counts for the early and late windows; 0 picks a quarter of the
/// history (at least one column).
struct DropWindows {
  std::size_t early = 0;
  std::size_t late = 0;
};

/// Token types present in both windows, ranked by drop (descending, ties by
/// id); the top ceil(fraction * n) are returned.
std::vector<EntropyDrop> top_entropy_drop_tokens(const TokenEntropyHistory& history, double fraction,
                                                 DropWindows windows = {});

}  // namespace rlvr
