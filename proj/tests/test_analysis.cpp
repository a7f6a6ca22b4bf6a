#include <string>

#include "doctest.h"
#include "helpers.hpp"
#include "rlvr/analysis.hpp"

using namespace rlvr;

namespace {

std::vector<TokenId> tokens(const Vocabulary& v, std::initializer_list<const char*> texts) {
  std::vector<TokenId> out;
  for (const char* t : texts) out.push_back(v.at(t));
  return out;
}

std::string dump_line(std::int64_t step, const std::vector<TokenId>& toks, double reward, double ppl = 1.5) {
  std::string s = "{\"step\":" + std::to_string(step) + ",\"tokens\":[";
  std::string e = "\"entropies\":[";
  for (std::size_t i = 0; i < toks.size(); ++i) {
    s += (i ? "," : "") + std::to_string(toks[i]);
    e += (i ? "," : "") + std::to_string(0.1 * static_cast<double>(i + 1));
  }
  return s + "]," + e + "],\"reward\":" + std::to_string(reward) + ",\"ppl\":" + std::to_string(ppl) + "}\n";
}

}  // namespace

TEST_SUITE("analysis_report") {

TEST_CASE("token categories") {
  Task task{TaskSpec{}};
  const auto lex = builtin_lexicon(task);
  const auto& v = task.vocabulary();
  CHECK(categorize_token(v.at("+"), lex) == TokenCategory::kFormalReasoning);
  CHECK(categorize_token(v.at("however"), lex) == TokenCategory::kLogicalStructuring);
  CHECK(categorize_token(v.at("but"), lex) == TokenCategory::kLogicalStructuring);
  CHECK(categorize_token(v.at("wait"), lex) == TokenCategory::kMetacognitive);
  CHECK(categorize_token(v.at("the"), lex) == TokenCategory::kSemanticSupport);
  CHECK_THROWS_AS(categorize_token(99, lex), ContractViolation);
  CHECK_THROWS_AS(categorize_token(-1, lex), ContractViolation);

  // unlisted tokens default to semantic support
  const TokenLexicon sparse(v, TokenLexicon::Lists{{"+"}, {}, {}, {}});
  CHECK(sparse.category(v.at("+")) == TokenCategory::kFormalReasoning);
  CHECK(sparse.category(v.at("7")) == TokenCategory::kSemanticSupport);
  CHECK(sparse.category(v.at("however")) == TokenCategory::kSemanticSupport);

  for (auto c : kAllCategories) CHECK(parse_token_category(to_string(c)) == c);
  CHECK_THROWS_AS(parse_token_category("emotional"), ContractViolation);
}

TEST_CASE("lexicon validation and round trip") {
  Task task{TaskSpec{}};
  const auto& v = task.vocabulary();
  CHECK_THROWS_AS(TokenLexicon(v, TokenLexicon::Lists{{"+"}, {"+"}, {}, {}}), ContractViolation);
  CHECK_THROWS_AS(TokenLexicon(v, TokenLexicon::Lists{{"*"}, {}, {}, {}}), ContractViolation);
  CHECK_THROWS_AS(parse_lexicon("{\"formal\": [\"+\"]}", v), ContractViolation);
  CHECK_THROWS_AS(parse_lexicon("[1, 2]", v), ContractViolation);
  CHECK_THROWS_AS(parse_lexicon("{\"metacognitive\": [3]}", v), ContractViolation);

  const auto lex = builtin_lexicon(task);
  const auto back = parse_lexicon(lexicon_to_json(lex), v);
  for (TokenId id = 0; static_cast<std::size_t>(id) < v.size(); ++id) CHECK(back.category(id) == lex.category(id));
}

TEST_CASE("shipped lexicon files agree with the builtin lexicon") {
  for (auto kind : {TaskKind::kModularAddition, TaskKind::kBracketCompletion}) {
    TaskSpec spec;
    spec.kind = kind;
    Task task(spec);
    const auto path = std::string(RLVR_SOURCE_DIR) + "/data/lexicons/" + to_string(kind) + ".json";
    const auto file = load_lexicon(path, task.vocabulary());
    const auto builtin = builtin_lexicon(task);
    for (TokenId id = 0; static_cast<std::size_t>(id) < task.vocabulary().size(); ++id)
      CHECK_MESSAGE(file.category(id) == builtin.category(id), task.vocabulary().text(id));
  }
  Task task{TaskSpec{}};
  CHECK_THROWS_AS(load_lexicon("/nonexistent/lexicon.json", task.vocabulary()), ContractViolation);
}

TEST_CASE("quality flag examples") {
  Task task{TaskSpec{}};
  const auto& v = task.vocabulary();
  SUBCASE("two delimiters") {
    const auto f = detect_quality_issues(tokens(v, {"<ans>", "3", "<ans>", "3", "<eos>"}), v);
    CHECK(f.format_violation);
    CHECK_FALSE(f.repetition);
    CHECK_FALSE(f.out_of_alphabet);
    CHECK(f.any());
  }
  SUBCASE("a b c repeated four times") {
    const auto r = tokens(v, {"so", "the", "step", "so", "the", "step", "so", "the", "step", "so", "the", "step"});
    const auto f = detect_quality_issues(r, v);
    CHECK(f.repetition);
    CHECK(f.format_violation);
    // with only two copies no 4-token window occurs three times
    const auto g = detect_quality_issues(std::span(r).first(6), v);
    CHECK_FALSE(g.repetition);
  }
  SUBCASE("clean gold response") {
    const auto inst = task.modular_instance(3, 4);
    const auto f = detect_quality_issues(task.gold_response(inst), v);
    CHECK_FALSE(f.any());
  }
  SUBCASE("prompt-only and unknown tokens are out of alphabet") {
    CHECK(detect_quality_issues(tokens(v, {"+", "<ans>", "7", "<eos>"}), v).out_of_alphabet);
    CHECK(detect_quality_issues(std::vector<TokenId>{v.delimiter(), 99, v.eos()}, v).out_of_alphabet);
    CHECK_FALSE(detect_quality_issues(std::vector<TokenId>{v.delimiter(), 99, v.eos()}, v).format_violation);
  }
  SUBCASE("rules are configurable") {
    const auto r = tokens(v, {"so", "so", "<ans>", "1", "<eos>"});
    CHECK_FALSE(detect_quality_issues(r, v).repetition);
    CHECK(detect_quality_issues(r, v, QualityRules{1, 2}).repetition);
  }
}

TEST_CASE("property: a second delimiter always flips the format flag") {
  Task task{TaskSpec{}};
  const auto& v = task.vocabulary();
  const auto reasoning = v.with_role(TokenRole::kReasoning);
  Rng rng = substream(61, {1});
  for (int trial = 0; trial < 500; ++trial) {
    const auto inst = task.generate(rng);
    std::vector<TokenId> r;
    const int prefix = static_cast<int>(uniform01(rng) * 5);
    for (int i = 0; i < prefix; ++i)
      r.push_back(reasoning[static_cast<std::size_t>(uniform01(rng) * static_cast<double>(reasoning.size()))]);
    const auto gold = task.gold_response(inst);
    r.insert(r.end(), gold.begin(), gold.end());
    REQUIRE_FALSE(detect_quality_issues(r, v).format_violation);
    // anywhere before the final <eos>
    const auto at = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(r.size()));
    r.insert(r.begin() + static_cast<std::ptrdiff_t>(at), v.delimiter());
    CHECK(detect_quality_issues(r, v).format_violation);
  }
}

TEST_CASE("property: categories partition every response") {
  Task task{TaskSpec{}};
  const auto lex = builtin_lexicon(task);
  Rng rng = substream(62, {1});
  const auto n = static_cast<double>(task.vocabulary().size());
  for (int trial = 0; trial < 300; ++trial) {
    std::array<std::size_t, kCategoryCount> counts{};
    const std::size_t len = 1 + static_cast<std::size_t>(uniform01(rng) * 16);
    for (std::size_t i = 0; i < len; ++i) {
      const auto c = lex.category(static_cast<TokenId>(uniform01(rng) * n));
      int hits = 0;
      for (std::size_t k = 0; k < kCategoryCount; ++k)
        if (kAllCategories[k] == c) {
          ++counts[k];
          ++hits;
        }
      CHECK(hits == 1);
    }
    CHECK(counts[0] + counts[1] + counts[2] + counts[3] == len);
  }
}

TEST_CASE("an empty run gives an empty report") {
  Task task{TaskSpec{}};
  const auto r = summarize_run("", "", "", builtin_lexicon(task), task.vocabulary());
  CHECK(r.steps == 0);
  CHECK(r.responses == 0);
  CHECK(r.warnings == 0);
  CHECK_FALSE(r.final_accuracy.has_value());
  CHECK_FALSE(r.issue_rate.has_value());
  CHECK_FALSE(r.stage_transition_step.has_value());
  CHECK(r.positional_profile.empty());
  CHECK(r.shift_by_ppl.empty());
  CHECK_FALSE(report_to_json(r, task.vocabulary()).empty());
  CHECK_FALSE(report_text(r, task.vocabulary()).empty());
}

TEST_CASE("hand-counted fixture") {
  Task task{TaskSpec{}};
  const auto& v = task.vocabulary();
  const auto lex = builtin_lexicon(task);

  std::string dump;
  // step 0: formal 2, logical 1, metacognitive 2, semantic 4
  dump += dump_line(0, tokens(v, {"so", "<ans>", "7", "<eos>"}), 1.0, 1.2);
  dump += dump_line(0, tokens(v, {"wait", "check", "<ans>", "3", "<eos>"}), -1.0, 2.0);
  dump += "not json\n";
  // step 5: formal 2, logical 1, semantic 6; the first one is doubly delimited
  dump += dump_line(5, tokens(v, {"<ans>", "<ans>", "5", "<eos>"}), -1.0, 1.1);
  dump += dump_line(5, tokens(v, {"the", "however", "<ans>", "9", "<eos>"}), 1.0, 1.9);
  dump += "{\"step\":5,\"tokens\":[1,2],\"entropies\":[0.1],\"reward\":1}\n";

  const std::string metrics =
      "{\"step\":0,\"accuracy\":0.5,\"mean_entropy\":0.9,\"entropy_pos\":0.8,\"entropy_neg\":1.0}\n"
      "{\"step\":1,\"accuracy\":0.6,\"mean_entropy\":0.7,\"entropy_pos\":null}\n"
      "{\"step\":1,\"accuracy\":0.9,\"mean_entropy\":0.1}\n"
      "{\"step\":2,\"mean_entropy\":0.1}\n";

  std::string shifts;
  for (int i = 0; i < 10; ++i)
    shifts += "{\"delta\":" + std::to_string(i >= 8 ? -0.3 : 0.01) + ",\"ppl\":" + std::to_string(1.0 + i) + "}\n";

  const auto r = summarize_run(metrics, dump, shifts, lex, v);
  CHECK(r.warnings == 4);
  CHECK(r.steps == 2);
  CHECK(r.series.step == std::vector<std::int64_t>{0, 1});
  CHECK(*r.initial_accuracy == 0.5);
  CHECK(*r.final_accuracy == 0.6);
  CHECK(*r.series.entropy_positive[0] == 0.8);
  CHECK_FALSE(r.series.entropy_positive[1].has_value());

  CHECK(r.responses == 4);
  CHECK(r.tokens == 18);
  CHECK(*r.mean_response_length == 4.5);
  CHECK(r.category_totals == std::array<std::size_t, kCategoryCount>{4, 2, 2, 10});
  CHECK(r.category_per_response[3] == 2.5);
  CHECK(*r.issue_rate == 0.25);

  REQUIRE(r.checkpoints.size() == 2);
  CHECK(r.checkpoints[0].step == 0);
  CHECK(r.checkpoints[0].format_rate == 0.0);
  CHECK(r.checkpoints[0].accuracy == 0.5);
  CHECK(r.checkpoints[1].step == 5);
  CHECK(r.checkpoints[1].format_rate == 0.5);
  CHECK(r.checkpoints[1].mean_length == 4.5);
  CHECK(r.checkpoints[1].category_per_response[0] == 1.0);

  std::size_t profiled = 0;
  for (const auto& b : r.positional_profile) profiled += b.count;
  CHECK(profiled == 18);

  // ppl 9 and 10 carry the two largest shifts: all of the top 20% is in the top quintile
  REQUIRE(r.shift_by_ppl.size() == 5);
  for (std::size_t q = 0; q < 5; ++q) CHECK(r.shift_by_ppl[q].tokens == 2);
  CHECK(r.shift_by_ppl[4].top_tokens == 2);
  CHECK(r.shift_by_ppl[4].share == 1.0);
  CHECK(r.shift_by_ppl[0].share == 0.0);

  // identical inputs, identical reports
  const auto again = summarize_run(metrics, dump, shifts, lex, v);
  CHECK(report_to_json(again, v) == report_to_json(r, v));
  CHECK(report_series_csv(again) == report_series_csv(r));
  CHECK(report_text(again, v) == report_text(r, v));
}

TEST_CASE("summaries reject inconsistent options") {
  Task task{TaskSpec{}};
  AnalysisOptions bad;
  bad.bins = 1;
  CHECK_THROWS_AS(summarize_run("", "", "", builtin_lexicon(task), task.vocabulary(), bad), ContractViolation);
  TaskSpec other;
  other.reasoning_tokens = 3;
  Task small(other);
  CHECK_THROWS_AS(summarize_run("", "", "", builtin_lexicon(small), task.vocabulary()), ContractViolation);
}

}  // TEST_SUITE
