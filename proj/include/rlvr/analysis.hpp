#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rlvr/task.hpp"
#include "rlvr/token_metrics.hpp"
#include "rlvr/vocabulary.hpp"

namespace rlvr {

enum class TokenCategory { kFormalReasoning, kLogicalStructuring, kMetacognitive, kSemanticSupport };

inline constexpr std::size_t kCategoryCount = 4;
inline constexpr std::array<TokenCategory, kCategoryCount> kAllCategories{
    TokenCategory::kFormalReasoning, TokenCategory::kLogicalStructuring, TokenCategory::kMetacognitive,
    TokenCategory::kSemanticSupport};

const char* to_string(TokenCategory c);
TokenCategory parse_token_category(std::string_view name);

/// Four disjoint token sets over one vocabulary. Tokens not listed fall
/// into semantic support.
class TokenLexicon {
 public:
  struct Lists {
    std::vector<std::string> formal_reasoning;
    std::vector<std::string> logical_structuring;
    std::vector<std::string> metacognitive;
    std::vector<std::string> semantic_support;
  };

  /// Every listed text must be a vocabulary token and may appear in only
  /// one list.
  TokenLexicon(const Vocabulary& vocab, const Lists& lists);

  TokenCategory category(TokenId id) const;
  std::size_t vocab_size() const { return categories_.size(); }
  const Lists& lists() const { return lists_; }

 private:
  std::vector<TokenCategory> categories_;
  Lists lists_;
};

/// Lexicon shipped with the code for each task vocabulary.
TokenLexicon builtin_lexicon(const Task& task);

/// JSON lexicon file: {"formal_reasoning": [...], "logical_structuring":
/// [...], "metacognitive": [...], "semantic_support": [...]} plus optional
/// "task" and "version" fields.
TokenLexicon load_lexicon(const std::filesystem::path& path, const Vocabulary& vocab);
TokenLexicon parse_lexicon(std::string_view json_text, const Vocabulary& vocab);
std::string lexicon_to_json(const TokenLexicon& lexicon);

/// Throws ContractViolation for ids outside the lexicon's vocabulary.
TokenCategory categorize_token(TokenId id, const TokenLexicon& lexicon);

struct QualityRules {
  int window = 4;   // w: n-gram length
  int repeats = 3;  // rho: occurrences that count as repetition
};

struct QualityFlags {
  bool format_violation = false;
  bool repetition = false;
  bool out_of_alphabet = false;
  bool any() const { return format_violation || repetition || out_of_alphabet; }
};

/// Format: delimiter count != 1. Repetition: some length-w window occurs
/// at least rho times (occurrences may overlap). Out of alphabet: a token
/// id outside the vocabulary or without a response role.
QualityFlags detect_quality_issues(std::span<const TokenId> response, const Vocabulary& vocab,
                                   QualityRules rules = {});

struct AnalysisOptions {
  int bins = 20;
  QualityRules quality;
  StageDetectorConfig stage;
  double drop_fraction = 0.2;
  double shift_threshold = 0.06;
  double top_shift_fraction = 0.2;  // share of largest |dp| examined by PPL quintile
};

/// Quantities recomputed per dumped step.
struct CheckpointSummary {
  std::int64_t step = 0;
  std::size_t responses = 0;
  double mean_length = 0.0;
  double accuracy = 0.0;
  double format_rate = 0.0;
  double repetition_rate = 0.0;
  double out_of_alphabet_rate = 0.0;
  double issue_rate = 0.0;
  std::array<double, kCategoryCount> category_per_response{};
};

struct StepSeries {
  std::vector<std::int64_t> step;
  std::vector<double> accuracy;
  std::vector<double> mean_entropy;
  std::vector<std::optional<double>> entropy_positive;
  std::vector<std::optional<double>> entropy_negative;
  std::vector<double> mean_length;
  std::vector<double> small_shift_fraction;
};

struct ShiftQuintile {
  std::size_t tokens = 0;      // tokens of this PPL quintile
  std::size_t top_tokens = 0;  // of which among the largest |dp|
  double share = 0.0;          // top_tokens / all top tokens
};

struct AnalysisReport {
  std::size_t warnings = 0;  // malformed lines skipped
  std::size_t steps = 0;
  std::size_t responses = 0;
  std::size_t tokens = 0;
  std::optional<double> initial_accuracy;
  std::optional<double> final_accuracy;
  std::optional<double> mean_response_length;
  std::optional<double> issue_rate;
  std::array<double, kCategoryCount> category_per_response{};
  std::array<std::size_t, kCategoryCount> category_totals{};
  std::optional<std::int64_t> stage_transition_step;
  std::optional<double> mean_small_shift_fraction;
  StepSeries series;
  std::vector<CheckpointSummary> checkpoints;
  std::vector<ProfileBin> positional_profile;
  std::vector<EntropyDrop> top_drop_tokens;
  std::vector<ShiftQuintile> shift_by_ppl;
};

/// Builds the report from the text of a run's logs. Each argument holds
/// line-delimited JSON; lines that fail to parse or miss required fields
/// are skipped and counted in `warnings`. Empty inputs give an empty
/// report.
AnalysisReport summarize_run(std::string_view metrics_log, std::string_view rollout_dump,
                             std::string_view shift_log, const TokenLexicon& lexicon, const Vocabulary& vocab,
                             const AnalysisOptions& options = {});

/// One JSON object: scalars, named series, tables.
std::string report_to_json(const AnalysisReport& report, const Vocabulary& vocab);
/// Per-step series as comma-separated rows.
std::string report_series_csv(const AnalysisReport& report);
/// Human-readable summary.
std::string report_text(const AnalysisReport& report, const Vocabulary& vocab);

}  // namespace rlvr
