#include "rlvr/analysis.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace rlvr {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

constexpr const char* kListKeys[kCategoryCount] = {"formal_reasoning", "logical_structuring", "metacognitive",
                                                   "semantic_support"};
constexpr const char* kLogicalWords[] = {"so", "therefore", "but", "however", "next", "also", "first"};
constexpr const char* kMetacognitiveWords[] = {"wait", "check", "note"};

template <class Lists>
auto& list_for(Lists& lists, std::size_t index) {
  switch (index) {
    case 0: return lists.formal_reasoning;
    case 1: return lists.logical_structuring;
    case 2: return lists.metacognitive;
    default: return lists.semantic_support;
  }
}

std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") != std::string_view::npos) lines.push_back(line);
    start = end + 1;
  }
  return lines;
}

std::optional<json> parse_object(std::string_view line) {
  json j = json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  return j;
}

bool is_number(const json& j, const char* key) { return j.contains(key) && j[key].is_number(); }

std::optional<double> optional_number(const json& j, const char* key) {
  if (is_number(j, key)) return j[key].get<double>();
  return std::nullopt;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

const char* to_string(TokenCategory c) {
  return kListKeys[static_cast<std::size_t>(c)];
}

TokenCategory parse_token_category(std::string_view name) {
  for (std::size_t i = 0; i < kCategoryCount; ++i)
    if (name == kListKeys[i]) return kAllCategories[i];
  throw ContractViolation("unknown token category '" + std::string(name) + "'");
}

TokenLexicon::TokenLexicon(const Vocabulary& vocab, const Lists& lists)
    : categories_(vocab.size(), TokenCategory::kSemanticSupport), lists_(lists) {
  std::vector<bool> listed(vocab.size(), false);
  for (std::size_t c = 0; c < kCategoryCount; ++c) {
    for (const auto& text : list_for(lists_, c)) {
      const auto id = vocab.find(text);
      require(id.has_value(), "lexicon token '" + text + "' is not in the vocabulary");
      const auto index = static_cast<std::size_t>(*id);
      require(!listed[index], "lexicon token '" + text + "' appears in more than one category");
      listed[index] = true;
      categories_[index] = kAllCategories[c];
    }
  }
}

TokenCategory TokenLexicon::category(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= categories_.size())
    throw ContractViolation("token id " + std::to_string(id) + " outside the lexicon's vocabulary");
  return categories_[static_cast<std::size_t>(id)];
}

TokenCategory categorize_token(TokenId id, const TokenLexicon& lexicon) { return lexicon.category(id); }

TokenLexicon builtin_lexicon(const Task& task) {
  const auto& vocab = task.vocabulary();
  TokenLexicon::Lists lists;
  auto in_list = [](std::string_view text, std::span<const char* const> words) {
    return std::any_of(words.begin(), words.end(), [&](const char* w) { return text == w; });
  };
  for (TokenId id = 0; static_cast<std::size_t>(id) < vocab.size(); ++id) {
    const auto& text = vocab.text(id);
    if (id == vocab.delimiter() || id == vocab.eos()) {
      lists.semantic_support.push_back(text);
    } else if (vocab.has_role(id, TokenRole::kPrompt) || vocab.has_role(id, TokenRole::kAnswer)) {
      lists.formal_reasoning.push_back(text);
    } else if (in_list(text, kLogicalWords)) {
      lists.logical_structuring.push_back(text);
    } else if (in_list(text, kMetacognitiveWords)) {
      lists.metacognitive.push_back(text);
    } else {
      lists.semantic_support.push_back(text);
    }
  }
  return TokenLexicon(vocab, lists);
}

TokenLexicon parse_lexicon(std::string_view json_text, const Vocabulary& vocab) {
  json j = json::parse(json_text, nullptr, false);
  require(!j.is_discarded() && j.is_object(), "lexicon is not a JSON object");
  TokenLexicon::Lists lists;
  for (const auto& [key, value] : j.items()) {
    if (key == "task" || key == "version") continue;
    std::size_t index = kCategoryCount;
    for (std::size_t c = 0; c < kCategoryCount; ++c)
      if (key == kListKeys[c]) index = c;
    require(index < kCategoryCount, "unknown lexicon key '" + key + "'");
    require(value.is_array(), "lexicon entry '" + key + "' must be an array of token strings");
    for (const auto& t : value) {
      require(t.is_string(), "lexicon entry '" + key + "' must be an array of token strings");
      list_for(lists, index).push_back(t.get<std::string>());
    }
  }
  return TokenLexicon(vocab, lists);
}

TokenLexicon load_lexicon(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "cannot read lexicon file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_lexicon(buf.str(), vocab);
}

std::string lexicon_to_json(const TokenLexicon& lexicon) {
  ojson j;
  for (std::size_t c = 0; c < kCategoryCount; ++c) j[kListKeys[c]] = list_for(lexicon.lists(), c);
  return j.dump(2) + "\n";
}

QualityFlags detect_quality_issues(std::span<const TokenId> response, const Vocabulary& vocab, QualityRules rules) {
  QualityFlags flags;
  const auto delimiters = std::count(response.begin(), response.end(), vocab.delimiter());
  flags.format_violation = delimiters != 1;
  flags.out_of_alphabet = std::any_of(response.begin(), response.end(), [&](TokenId t) {
    return !vocab.contains(t) || !vocab.response_allowed(t);
  });

  const auto w = static_cast<std::size_t>(std::max(rules.window, 1));
  const auto rho = static_cast<std::size_t>(std::max(rules.repeats, 1));
  if (response.size() >= w) {
    std::map<std::vector<TokenId>, std::size_t> counts;
    for (std::size_t i = 0; i + w <= response.size(); ++i) {
      auto& n = counts[std::vector<TokenId>(response.begin() + i, response.begin() + i + w)];
      if (++n >= rho) {
        flags.repetition = true;
        break;
      }
    }
  }
  return flags;
}

AnalysisReport summarize_run(std::string_view metrics_log, std::string_view rollout_dump,
                             std::string_view shift_log, const TokenLexicon& lexicon, const Vocabulary& vocab,
                             const AnalysisOptions& options) {
  require(options.bins >= 2, "positional profile needs at least two bins");
  require(lexicon.vocab_size() == vocab.size(), "lexicon and vocabulary differ in size");
  AnalysisReport report;

  // per-step metrics
  std::vector<double> small_shift;
  for (auto line : split_lines(metrics_log)) {
    auto j = parse_object(line);
    if (!j || !j->contains("step") || !(*j)["step"].is_number_integer() || !is_number(*j, "accuracy") ||
        !is_number(*j, "mean_entropy")) {
      ++report.warnings;
      continue;
    }
    const auto step = (*j)["step"].get<std::int64_t>();
    if (!report.series.step.empty() && step <= report.series.step.back()) {
      ++report.warnings;
      continue;
    }
    auto& s = report.series;
    s.step.push_back(step);
    s.accuracy.push_back((*j)["accuracy"].get<double>());
    s.mean_entropy.push_back((*j)["mean_entropy"].get<double>());
    s.entropy_positive.push_back(optional_number(*j, "entropy_pos"));
    s.entropy_negative.push_back(optional_number(*j, "entropy_neg"));
    s.mean_length.push_back(optional_number(*j, "mean_length").value_or(0.0));
    const double f = optional_number(*j, "small_shift_fraction").value_or(1.0);
    s.small_shift_fraction.push_back(f);
    small_shift.push_back(f);
  }
  report.steps = report.series.step.size();
  if (report.steps > 0) {
    report.initial_accuracy = report.series.accuracy.front();
    report.final_accuracy = report.series.accuracy.back();
    report.mean_small_shift_fraction = mean_of(small_shift);
    if (report.series.mean_entropy.size() >= static_cast<std::size_t>(options.stage.window))
      report.stage_transition_step = detect_stage(report.series.mean_entropy, options.stage).transition_step;
  }

  // rollout dump, grouped by step in order of first appearance
  std::map<std::int64_t, std::vector<ResponseRecord>> by_step;
  std::map<std::int64_t, std::vector<QualityFlags>> flags_by_step;
  for (auto line : split_lines(rollout_dump)) {
    auto j = parse_object(line);
    if (!j || !j->contains("step") || !(*j)["step"].is_number_integer() || !j->contains("tokens") ||
        !(*j)["tokens"].is_array() || !j->contains("entropies") || !(*j)["entropies"].is_array() ||
        !is_number(*j, "reward")) {
      ++report.warnings;
      continue;
    }
    const auto& toks = (*j)["tokens"];
    const auto& ents = (*j)["entropies"];
    bool ok = toks.size() == ents.size();
    for (std::size_t i = 0; ok && i < toks.size(); ++i)
      ok = toks[i].is_number_integer() && ents[i].is_number() && vocab.contains(toks[i].get<TokenId>());
    if (!ok) {
      ++report.warnings;
      continue;
    }
    ResponseRecord rec;
    rec.reward = (*j)["reward"].get<double>();
    rec.ppl = optional_number(*j, "ppl").value_or(1.0);
    rec.verdict.correct = rec.reward > 0.0;
    const std::size_t n = toks.size();
    for (std::size_t i = 0; i < n; ++i) {
      TokenRecord t;
      t.token = toks[i].get<TokenId>();
      t.position = static_cast<int>(i);
      t.rel_position = n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.0;
      t.entropy = ents[i].get<double>();
      rec.tokens.push_back(t);
    }
    const auto step = (*j)["step"].get<std::int64_t>();
    flags_by_step[step].push_back(detect_quality_issues(rec.token_ids(), vocab, options.quality));
    by_step[step].push_back(std::move(rec));
  }

  TokenEntropyHistory history(vocab.size());
  std::vector<ResponseRecord> all;
  std::size_t issues = 0;
  std::array<std::size_t, kCategoryCount> totals{};
  for (const auto& [step, responses] : by_step) {
    const auto& flags = flags_by_step[step];
    CheckpointSummary cp;
    cp.step = step;
    cp.responses = responses.size();
    std::size_t length = 0, correct = 0, fmt = 0, rep = 0, ooa = 0, any = 0;
    std::array<std::size_t, kCategoryCount> cats{};
    for (std::size_t r = 0; r < responses.size(); ++r) {
      length += responses[r].size();
      correct += responses[r].reward > 0.0;
      fmt += flags[r].format_violation;
      rep += flags[r].repetition;
      ooa += flags[r].out_of_alphabet;
      any += flags[r].any();
      for (const auto& t : responses[r].tokens) ++cats[static_cast<std::size_t>(lexicon.category(t.token))];
    }
    const double n = static_cast<double>(responses.size());
    cp.mean_length = static_cast<double>(length) / n;
    cp.accuracy = static_cast<double>(correct) / n;
    cp.format_rate = static_cast<double>(fmt) / n;
    cp.repetition_rate = static_cast<double>(rep) / n;
    cp.out_of_alphabet_rate = static_cast<double>(ooa) / n;
    cp.issue_rate = static_cast<double>(any) / n;
    for (std::size_t c = 0; c < kCategoryCount; ++c) {
      cp.category_per_response[c] = static_cast<double>(cats[c]) / n;
      totals[c] += cats[c];
    }
    report.checkpoints.push_back(cp);
    issues += any;
    report.tokens += length;
    history.add_responses(step, responses);
    all.insert(all.end(), responses.begin(), responses.end());
  }
  report.responses = all.size();
  report.category_totals = totals;
  if (!all.empty()) {
    const double n = static_cast<double>(all.size());
    report.mean_response_length = static_cast<double>(report.tokens) / n;
    report.issue_rate = static_cast<double>(issues) / n;
    for (std::size_t c = 0; c < kCategoryCount; ++c)
      report.category_per_response[c] = static_cast<double>(totals[c]) / n;
    report.positional_profile = positional_entropy_profile(all, options.bins);
  }
  if (history.steps() >= 2) report.top_drop_tokens = top_entropy_drop_tokens(history, options.drop_fraction);

  // probability shifts by PPL quintile
  std::vector<std::pair<double, double>> shifts;  // (ppl, |dp|)
  for (auto line : split_lines(shift_log)) {
    auto j = parse_object(line);
    if (!j || !is_number(*j, "delta") || !is_number(*j, "ppl")) {
      ++report.warnings;
      continue;
    }
    shifts.emplace_back((*j)["ppl"].get<double>(), std::abs((*j)["delta"].get<double>()));
  }
  if (!shifts.empty()) {
    const std::size_t n = shifts.size();
    std::vector<std::size_t> by_ppl(n), by_shift(n);
    std::iota(by_ppl.begin(), by_ppl.end(), std::size_t{0});
    std::iota(by_shift.begin(), by_shift.end(), std::size_t{0});
    std::stable_sort(by_ppl.begin(), by_ppl.end(),
                     [&](std::size_t a, std::size_t b) { return shifts[a].first < shifts[b].first; });
    std::stable_sort(by_shift.begin(), by_shift.end(),
                     [&](std::size_t a, std::size_t b) { return shifts[a].second > shifts[b].second; });
    std::vector<std::size_t> quintile(n);
    for (std::size_t rank = 0; rank < n; ++rank) quintile[by_ppl[rank]] = rank * 5 / n;
    const auto top = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(options.top_shift_fraction * static_cast<double>(n) - 1e-9)));
    report.shift_by_ppl.assign(5, {});
    for (std::size_t i = 0; i < n; ++i) ++report.shift_by_ppl[quintile[i]].tokens;
    for (std::size_t r = 0; r < std::min(top, n); ++r) ++report.shift_by_ppl[quintile[by_shift[r]]].top_tokens;
    for (auto& q : report.shift_by_ppl)
      q.share = static_cast<double>(q.top_tokens) / static_cast<double>(std::min(top, n));
  }
  return report;
}

std::string report_to_json(const AnalysisReport& report, const Vocabulary& vocab) {
  ojson j;
  j["version"] = kVersionTag;
  j["warnings"] = report.warnings;
  j["steps"] = report.steps;
  j["responses"] = report.responses;
  j["tokens"] = report.tokens;
  j["initial_accuracy"] = optional_json(report.initial_accuracy);
  j["final_accuracy"] = optional_json(report.final_accuracy);
  j["mean_response_length"] = optional_json(report.mean_response_length);
  j["issue_rate"] = optional_json(report.issue_rate);
  j["stage_transition_step"] =
      report.stage_transition_step ? json(*report.stage_transition_step) : json(nullptr);
  j["mean_small_shift_fraction"] = optional_json(report.mean_small_shift_fraction);

  ojson cats = ojson::object();
  for (std::size_t c = 0; c < kCategoryCount; ++c) {
    cats[kListKeys[c]] = {{"total", report.category_totals[c]},
                          {"per_response", report.category_per_response[c]}};
  }
  j["categories"] = cats;

  const auto& s = report.series;
  ojson series;
  series["step"] = s.step;
  series["accuracy"] = s.accuracy;
  series["mean_entropy"] = s.mean_entropy;
  ojson pos = ojson::array(), neg = ojson::array();
  for (std::size_t i = 0; i < s.step.size(); ++i) {
    pos.push_back(s.entropy_positive[i] ? ojson(*s.entropy_positive[i]) : ojson(nullptr));
    neg.push_back(s.entropy_negative[i] ? ojson(*s.entropy_negative[i]) : ojson(nullptr));
  }
  series["entropy_pos"] = pos;
  series["entropy_neg"] = neg;
  series["mean_length"] = s.mean_length;
  series["small_shift_fraction"] = s.small_shift_fraction;
  j["series"] = series;

  ojson cps = ojson::array();
  for (const auto& cp : report.checkpoints) {
    ojson c;
    c["step"] = cp.step;
    c["responses"] = cp.responses;
    c["mean_length"] = cp.mean_length;
    c["accuracy"] = cp.accuracy;
    c["format_rate"] = cp.format_rate;
    c["repetition_rate"] = cp.repetition_rate;
    c["out_of_alphabet_rate"] = cp.out_of_alphabet_rate;
    c["issue_rate"] = cp.issue_rate;
    ojson per = ojson::object();
    for (std::size_t k = 0; k < kCategoryCount; ++k) per[kListKeys[k]] = cp.category_per_response[k];
    c["category_per_response"] = per;
    cps.push_back(c);
  }
  j["checkpoints"] = cps;

  ojson profile = ojson::array();
  for (const auto& b : report.positional_profile)
    profile.push_back({{"count", b.count}, {"mean", b.mean ? ojson(*b.mean) : ojson(nullptr)}});
  j["positional_profile"] = profile;

  ojson drops = ojson::array();
  for (const auto& d : report.top_drop_tokens) {
    drops.push_back({{"token", vocab.text(d.token)},
                     {"id", d.token},
                     {"drop", d.drop},
                     {"positive_only", d.positive_only},
                     {"negative_only", d.negative_only},
                     {"both", d.both}});
  }
  j["top_entropy_drop_tokens"] = drops;

  ojson quint = ojson::array();
  for (std::size_t q = 0; q < report.shift_by_ppl.size(); ++q) {
    const auto& sq = report.shift_by_ppl[q];
    quint.push_back({{"quintile", q}, {"tokens", sq.tokens}, {"top_tokens", sq.top_tokens}, {"share", sq.share}});
  }
  j["top_shift_share_by_ppl_quintile"] = quint;
  return j.dump(2) + "\n";
}

std::string report_series_csv(const AnalysisReport& report) {
  std::ostringstream out;
  out << "step,accuracy,mean_entropy,entropy_pos,entropy_neg,mean_length,small_shift_fraction\n";
  const auto& s = report.series;
  auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
  for (std::size_t i = 0; i < s.step.size(); ++i) {
    out << s.step[i] << ',' << format_number(s.accuracy[i]) << ',' << format_number(s.mean_entropy[i]) << ','
        << opt(s.entropy_positive[i]) << ',' << opt(s.entropy_negative[i]) << ','
        << format_number(s.mean_length[i]) << ',' << format_number(s.small_shift_fraction[i]) << '\n';
  }
  return out.str();
}

std::string report_text(const AnalysisReport& report, const Vocabulary& vocab) {
  std::ostringstream out;
  auto num = [](const std::optional<double>& v, int precision = 4) {
    if (!v) return std::string("-");
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(precision);
    s << *v;
    return s.str();
  };
  out << "steps                 " << report.steps << '\n';
  out << "responses analysed    " << report.responses << '\n';
  out << "skipped lines         " << report.warnings << '\n';
  out << "accuracy first/last   " << num(report.initial_accuracy) << " / " << num(report.final_accuracy) << '\n';
  out << "mean response length  " << num(report.mean_response_length, 3) << '\n';
  out << "quality issue rate    " << num(report.issue_rate) << '\n';
  out << "stage transition      "
      << (report.stage_transition_step ? std::to_string(*report.stage_transition_step) : std::string("-"))
      << '\n';
  out << "mean |dp| < threshold " << num(report.mean_small_shift_fraction) << '\n';
  out << "\ncategory               tokens/response\n";
  for (std::size_t c = 0; c < kCategoryCount; ++c) {
    std::string name = kListKeys[c];
    name.resize(23, ' ');
    out << name << num(report.responses ? std::optional(report.category_per_response[c]) : std::nullopt, 3)
        << '\n';
  }
  if (!report.checkpoints.empty()) {
    out << "\nstep    acc     length  format  repeat  alphabet\n";
    for (const auto& cp : report.checkpoints) {
      std::string step = std::to_string(cp.step);
      step.resize(8, ' ');
      out << step << num(cp.accuracy, 3) << "   " << num(cp.mean_length, 2) << "    " << num(cp.format_rate, 3)
          << "   " << num(cp.repetition_rate, 3) << "   " << num(cp.out_of_alphabet_rate, 3) << '\n';
    }
  }
  if (!report.top_drop_tokens.empty()) {
    out << "\nfastest entropy drop   drop     pos-only neg-only both\n";
    for (const auto& d : report.top_drop_tokens) {
      std::string name = vocab.text(d.token);
      name.resize(23, ' ');
      out << name << num(d.drop) << "   " << d.positive_only << "        " << d.negative_only << "        "
          << d.both << '\n';
    }
  }
  return out.str();
}

}  // namespace rlvr
