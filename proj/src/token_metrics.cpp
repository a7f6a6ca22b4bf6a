#include "rlvr/token_metrics.hpp"

#include <algorithm>
#include <cmath>

namespace rlvr {

double probability_shift(const TokenDistribution& before, const TokenDistribution& after, TokenId token) {
  require(before.size() == after.size(), "distributions over different vocabularies");
  require(token >= 0 && static_cast<std::size_t>(token) < before.size(), "token outside vocabulary");
  const auto i = static_cast<std::size_t>(token);
  return after.probs[i] - before.probs[i];
}

double fraction_below(std::span<const ShiftRecord> shifts, double threshold) {
  if (shifts.empty()) return 1.0;
  std::size_t below = 0;
  for (const auto& s : shifts)
    if (std::abs(s.delta) < threshold) ++below;
  return static_cast<double>(below) / static_cast<double>(shifts.size());
}

TokenId best_alternative(const TokenDistribution& dist, TokenId original) {
  require(dist.size() >= 2, "intervention needs a vocabulary of at least two tokens");
  require(original >= 0 && static_cast<std::size_t>(original) < dist.size(), "token outside vocabulary");
  TokenId best = -1;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    const auto id = static_cast<TokenId>(i);
    if (id == original) continue;
    if (best < 0 || dist.probs[i] > dist.probs[static_cast<std::size_t>(best)]) best = id;
  }
  return best;
}

namespace {

struct Enumerator {
  const Policy& policy;
  const Task& task;
  const Instance& instance;
  const PromptCode& code;
  std::size_t cap;
  TokenId eos;

  double run(std::vector<TokenId>& prefix) const {
    if ((!prefix.empty() && prefix.back() == eos) || prefix.size() >= cap)
      return task.verify(instance, prefix).correct ? 1.0 : 0.0;
    const auto dist = policy.next(code, prefix);
    double total = 0.0;
    for (std::size_t v = 0; v < dist.size(); ++v) {
      if (dist.probs[v] == 0.0) continue;
      prefix.push_back(static_cast<TokenId>(v));
      total += dist.probs[v] * run(prefix);
      prefix.pop_back();
    }
    return total;
  }
};

}  // namespace

double expected_accuracy(const Policy& policy, const Task& task, const Instance& instance, const PromptCode& code,
                         std::span<const TokenId> prefix, std::size_t max_leaves) {
  const auto cap = static_cast<std::size_t>(task.spec().max_response_length);
  require(prefix.size() <= cap, "prefix longer than the response cap");
  const std::size_t remaining = cap - prefix.size();
  const double leaves = std::pow(static_cast<double>(policy.params.vocab_size()), static_cast<double>(remaining));
  require(leaves <= static_cast<double>(max_leaves),
          "continuation tree too large for exhaustive enumeration (" + std::to_string(remaining) +
              " tokens remaining)");
  Enumerator e{policy, task, instance, code, cap, task.vocabulary().eos()};
  std::vector<TokenId> work(prefix.begin(), prefix.end());
  return e.run(work);
}

InterventionResult intervene(const Policy& policy, const Task& task, const Instance& instance,
                             std::span<const TokenId> response, int position, int k, Rng& rng, double top_p) {
  require(position >= 0 && static_cast<std::size_t>(position) < response.size(),
          "intervention position outside the response");
  require(k >= 0, "k must be positive, or kExhaustive");
  require(policy.params.vocab_size() >= 2, "intervention needs a vocabulary of at least two tokens");

  const PromptCode code = policy.feature_map.encode_prompt(instance.prompt);
  std::vector<TokenId> prefix(response.begin(), response.begin() + position);
  const auto dist = policy.next(code, prefix);

  InterventionResult out;
  out.position = position;
  out.original = response[static_cast<std::size_t>(position)];
  out.substitute = best_alternative(dist, out.original);
  out.k = k;

  auto original_prefix = prefix;
  original_prefix.push_back(out.original);
  auto substitute_prefix = prefix;
  substitute_prefix.push_back(out.substitute);

  if (k == kExhaustive) {
    out.original_accuracy = expected_accuracy(policy, task, instance, code, original_prefix);
    out.substitute_accuracy = expected_accuracy(policy, task, instance, code, substitute_prefix);
  } else {
    auto mean_accuracy = [&](const std::vector<TokenId>& start) {
      double hits = 0.0;
      for (int j = 0; j < k; ++j) {
        const auto full = continue_response(policy, task, code, start, top_p, rng);
        if (task.verify(instance, full).correct) hits += 1.0;
      }
      return hits / static_cast<double>(k);
    };
    out.original_accuracy = mean_accuracy(original_prefix);
    out.substitute_accuracy = mean_accuracy(substitute_prefix);
  }
  out.impact = out.original_accuracy - out.substitute_accuracy;
  return out;
}

StageDetector::StageDetector(StageDetectorConfig config) : config_(config) {
  require(config_.window >= 1, "stage window must be positive");
  require(config_.patience >= 1, "stage patience must be positive");
  require(config_.threshold >= 0.0, "stage threshold must be nonnegative");
}

Stage StageDetector::observe(double entropy) {
  const auto w = static_cast<std::size_t>(config_.window);
  series_.push_back(entropy);
  if (series_.size() < w) return state_.label;

  double sum = 0.0;
  for (std::size_t i = series_.size() - w; i < series_.size(); ++i) sum += series_[i];
  const double ma = sum / static_cast<double>(w);
  state_.smoothed.push_back(ma);
  if (state_.smoothed.size() < 2 || state_.label == Stage::kPlateau) return state_.label;

  const double slope = state_.smoothed.back() - state_.smoothed[state_.smoothed.size() - 2];
  calm_run_ = std::abs(slope) < config_.threshold ? calm_run_ + 1 : 0;
  if (calm_run_ >= config_.patience) {
    state_.label = Stage::kPlateau;
    state_.transition_step = static_cast<std::int64_t>(series_.size());
  }
  return state_.label;
}

StageState detect_stage(std::span<const double> entropy_series, StageDetectorConfig config) {
  require(entropy_series.size() >= static_cast<std::size_t>(std::max(1, config.window)),
          "entropy series shorter than the smoothing window");
  StageDetector detector(config);
  for (double h : entropy_series) detector.observe(h);
  return detector.state();
}

std::vector<ProfileBin> positional_entropy_profile(std::span<const ResponseRecord> responses, int bins) {
  require(bins >= 2, "positional profile needs at least two bins");
  const auto nb = static_cast<std::size_t>(bins);
  std::vector<double> sums(nb, 0.0);
  std::vector<ProfileBin> out(nb);
  for (const auto& r : responses) {
    for (const auto& t : r.tokens) {
      auto b = static_cast<std::size_t>(t.rel_position * static_cast<double>(bins));
      b = std::min(b, nb - 1);
      sums[b] += t.entropy;
      ++out[b].count;
    }
  }
  for (std::size_t b = 0; b < nb; ++b)
    if (out[b].count > 0) out[b].mean = sums[b] / static_cast<double>(out[b].count);
  return out;
}

std::vector<ProfileBin> positional_entropy_profile(std::span<const RolloutGroup> groups, int bins) {
  std::vector<ResponseRecord> all;
  for (const auto& g : groups) all.insert(all.end(), g.responses.begin(), g.responses.end());
  return positional_entropy_profile(std::span<const ResponseRecord>(all), bins);
}

EntropySplit entropy_split_pos_neg(std::span<const ResponseRecord> responses) {
  EntropySplit out;
  double pos = 0.0;
  double neg = 0.0;
  for (const auto& r : responses) {
    for (const auto& t : r.tokens) {
      if (r.reward > 0.0) {
        pos += t.entropy;
        ++out.positive_tokens;
      } else {
        neg += t.entropy;
        ++out.negative_tokens;
      }
    }
  }
  if (out.positive_tokens > 0) out.positive = pos / static_cast<double>(out.positive_tokens);
  if (out.negative_tokens > 0) out.negative = neg / static_cast<double>(out.negative_tokens);
  return out;
}

EntropySplit entropy_split_pos_neg(std::span<const RolloutGroup> groups) {
  EntropySplit out;
  double pos = 0.0;
  double neg = 0.0;
  for (const auto& g : groups) {
    const auto part = entropy_split_pos_neg(std::span<const ResponseRecord>(g.responses));
    if (part.positive) pos += *part.positive * static_cast<double>(part.positive_tokens);
    if (part.negative) neg += *part.negative * static_cast<double>(part.negative_tokens);
    out.positive_tokens += part.positive_tokens;
    out.negative_tokens += part.negative_tokens;
  }
  if (out.positive_tokens > 0) out.positive = pos / static_cast<double>(out.positive_tokens);
  if (out.negative_tokens > 0) out.negative = neg / static_cast<double>(out.negative_tokens);
  return out;
}

void TokenEntropyHistory::begin_step(std::int64_t step) {
  columns_.push_back(Column{step, std::vector<Cell>(vocab_size_)});
}

void TokenEntropyHistory::observe(TokenId token, double entropy, bool positive) {
  require(!columns_.empty(), "begin_step must precede observations");
  require(token >= 0 && static_cast<std::size_t>(token) < vocab_size_, "token outside vocabulary");
  auto& cell = columns_.back().cells[static_cast<std::size_t>(token)];
  cell.sum += entropy;
  ++cell.count;
  (positive ? cell.in_positive : cell.in_negative) = true;
}

void TokenEntropyHistory::add_responses(std::int64_t step, std::span<const ResponseRecord> responses) {
  begin_step(step);
  for (const auto& r : responses)
    for (const auto& t : r.tokens) observe(t.token, t.entropy, r.reward > 0.0);
}

std::optional<double> TokenEntropyHistory::mean(std::size_t column, TokenId token) const {
  const auto& cell = columns_.at(column).cells.at(static_cast<std::size_t>(token));
  if (cell.count == 0) return std::nullopt;
  return cell.sum / static_cast<double>(cell.count);
}

TokenEntropyHistory::Provenance TokenEntropyHistory::provenance(TokenId token) const {
  Provenance p;
  for (const auto& col : columns_) {
    const auto& cell = col.cells.at(static_cast<std::size_t>(token));
    if (cell.in_positive && cell.in_negative)
      ++p.both;
    else if (cell.in_positive)
      ++p.positive_only;
    else if (cell.in_negative)
      ++p.negative_only;
  }
  return p;
}

std::vector<EntropyDrop> top_entropy_drop_tokens(const TokenEntropyHistory& history, double fraction,
                                                 DropWindows windows) {
  require(history.steps() >= 2, "entropy-drop ranking needs at least two steps of history");
  require(fraction > 0.0 && fraction <= 1.0, "fraction must lie in (0, 1]");
  const std::size_t n = history.steps();
  const std::size_t quarter = std::max<std::size_t>(1, n / 4);
  const std::size_t early = windows.early > 0 ? std::min(windows.early, n) : quarter;
  const std::size_t late = windows.late > 0 ? std::min(windows.late, n) : quarter;

  auto window_mean = [&](TokenId token, std::size_t begin, std::size_t end) -> std::optional<double> {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t c = begin; c < end; ++c) {
      if (auto m = history.mean(c, token)) {
        sum += *m;
        ++count;
      }
    }
    if (count == 0) return std::nullopt;
    return sum / static_cast<double>(count);
  };

  std::vector<EntropyDrop> ranked;
  for (std::size_t v = 0; v < history.vocab_size(); ++v) {
    const auto id = static_cast<TokenId>(v);
    const auto e = window_mean(id, 0, early);
    const auto l = window_mean(id, n - late, n);
    if (!e || !l) continue;
    const auto prov = history.provenance(id);
    ranked.push_back({id, *e - *l, prov.positive_only, prov.negative_only, prov.both});
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const EntropyDrop& a, const EntropyDrop& b) { return a.drop > b.drop; });
  const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(ranked.size()) - 1e-9));
  ranked.resize(std::min(ranked.size(), std::max<std::size_t>(keep, ranked.empty() ? 0 : 1)));
  return ranked;
}

}  // namespace rlvr
