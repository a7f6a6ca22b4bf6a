#include "rlvr/rollout.hpp"

#include <cmath>
#include <ostream>
#include <thread>

#include <json.hpp>

namespace rlvr {

namespace {
constexpr std::uint64_t kRolloutStream = 0x726f6c6cULL;
}

std::vector<TokenId> ResponseRecord::token_ids() const {
  std::vector<TokenId> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(t.token);
  return out;
}

std::vector<double> ResponseRecord::logprobs() const {
  std::vector<double> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(t.logprob);
  return out;
}

double response_ppl(std::span<const double> logprobs) {
  require(!logprobs.empty(), "perplexity of an empty response is undefined");
  double sum = 0.0;
  for (double lp : logprobs) sum += lp;
  return std::exp(-sum / static_cast<double>(logprobs.size()));
}

std::vector<TokenId> continue_response(const Policy& policy, const Task& task, const PromptCode& code,
                                       std::span<const TokenId> prefix, double top_p, Rng& rng) {
  const auto cap = static_cast<std::size_t>(task.spec().max_response_length);
  const TokenId eos = task.vocabulary().eos();
  std::vector<TokenId> out(prefix.begin(), prefix.end());
  if (!out.empty() && out.back() == eos) return out;
  while (out.size() < cap) {
    const auto dist = policy.next(code, out);
    const auto s = sample_token(dist, top_p, rng);
    out.push_back(s.token);
    if (s.token == eos) break;
  }
  return out;
}

ResponseRecord sample_response(const Policy& policy, const Task& task, const Instance& instance,
                               const PromptCode& code, const SamplingConfig& sampling, Rng& rng) {
  const auto cap = static_cast<std::size_t>(task.spec().max_response_length);
  const TokenId eos = task.vocabulary().eos();
  ResponseRecord rec;
  std::vector<TokenId> generated;
  while (generated.size() < cap) {
    auto dist = policy.next(code, generated);
    const auto s = sample_token(dist, sampling.top_p, rng);
    TokenRecord t;
    t.token = s.token;
    t.position = static_cast<int>(generated.size());
    t.logprob = s.logprob;
    t.entropy = token_entropy(dist);
    if (sampling.retain_distributions) t.probs = std::move(dist.probs);
    rec.tokens.push_back(std::move(t));
    generated.push_back(s.token);
    if (s.token == eos) break;
  }
  const std::size_t n = rec.tokens.size();
  for (auto& t : rec.tokens)
    t.rel_position = n > 1 ? static_cast<double>(t.position) / static_cast<double>(n - 1) : 0.0;
  rec.verdict = task.verify(instance, generated);
  rec.reward = reward(rec.verdict);
  rec.ppl = response_ppl(rec.logprobs());
  return rec;
}

RolloutGroup rollout_group(const Policy& policy, const Task& task, const Instance& instance, int group_size,
                           const SamplingConfig& sampling, Rng& rng) {
  require(group_size >= 1, "group size must be at least 1");
  RolloutGroup group{instance, {}, sampling};
  const PromptCode code = policy.feature_map.encode_prompt(instance.prompt);
  group.responses.reserve(static_cast<std::size_t>(group_size));
  for (int i = 0; i < group_size; ++i)
    group.responses.push_back(sample_response(policy, task, instance, code, sampling, rng));
  return group;
}

std::vector<RolloutGroup> collect_batch(const Policy& policy, const Task& task, std::span<const Instance> instances,
                                        int group_size, const SamplingConfig& sampling, std::uint64_t seed,
                                        std::uint64_t step, int threads) {
  require(!instances.empty(), "batch needs at least one instance");
  std::vector<RolloutGroup> groups(instances.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      Rng rng = substream(seed, {kRolloutStream, step, instances[i].id});
      groups[i] = rollout_group(policy, task, instances[i], group_size, sampling, rng);
    }
  };
  const std::size_t workers =
      std::min<std::size_t>(instances.size(), static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    work(0, instances.size());
    return groups;
  }
  std::vector<std::jthread> pool;
  const std::size_t chunk = (instances.size() + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(instances.size(), begin + chunk);
    if (begin < end) pool.emplace_back(work, begin, end);
  }
  pool.clear();
  return groups;
}

void write_rollout_dump(std::ostream& out, std::int64_t step, std::span<const RolloutGroup> groups) {
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& group = groups[g];
    for (std::size_t r = 0; r < group.responses.size(); ++r) {
      const auto& resp = group.responses[r];
      nlohmann::json line;
      line["step"] = step;
      line["group"] = g;
      line["response"] = r;
      line["instance"] = group.instance.id;
      line["prompt"] = group.instance.prompt;
      line["tokens"] = resp.token_ids();
      line["logprobs"] = resp.logprobs();
      std::vector<double> entropies;
      for (const auto& t : resp.tokens) entropies.push_back(t.entropy);
      line["entropies"] = entropies;
      line["reward"] = resp.reward;
      line["ppl"] = resp.ppl;
      out << line.dump() << '\n';
    }
  }
}

}  // namespace rlvr
