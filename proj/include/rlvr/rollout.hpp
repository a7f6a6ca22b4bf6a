#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "rlvr/policy.hpp"
#include "rlvr/task.hpp"

namespace rlvr {

struct SamplingConfig {
  double top_p = 1.0;
  bool retain_distributions = false;  // keep full pi(.|q,o_<t) per token
};

struct TokenRecord {
  TokenId token = 0;
  int position = 0;            // t, 0-based
  double rel_position = 0.0;   // l = t / (|o| - 1), 0 for single-token responses
  double logprob = 0.0;        // under the sampling snapshot
  double entropy = 0.0;        // nats
  std::vector<double> probs;   // empty unless retained
};

struct ResponseRecord {
  std::vector<TokenRecord> tokens;
  Verdict verdict;
  double reward = -1.0;
  double ppl = 1.0;

  std::vector<TokenId> token_ids() const;
  std::vector<double> logprobs() const;
  std::size_t size() const { return tokens.size(); }
};

struct RolloutGroup {
  Instance instance;
  std::vector<ResponseRecord> responses;
  SamplingConfig sampling;
};

/// exp(-(1/|o|) sum_t logprob_t). Throws on an empty response.
double response_ppl(std::span<const double> logprobs);

/// Samples tokens after `prefix` until end-of-sequence or the task's length
/// cap; returns prefix + continuation.
std::vector<TokenId> continue_response(const Policy& policy, const Task& task, const PromptCode& code,
                                       std::span<const TokenId> prefix, double top_p, Rng& rng);

ResponseRecord sample_response(const Policy& policy, const Task& task, const Instance& instance,
                               const PromptCode& code, const SamplingConfig& sampling, Rng& rng);

/// G responses for one prompt, all under the same parameter snapshot.
RolloutGroup rollout_group(const Policy& policy, const Task& task, const Instance& instance, int group_size,
                           const SamplingConfig& sampling, Rng& rng);

/// One group per instance, in input order. Each group draws from its own
/// substream keyed by (seed, step, instance id), so the result does not
/// depend on thread count or on the position of an instance in the list.
std::vector<RolloutGroup> collect_batch(const Policy& policy, const Task& task, std::span<const Instance> instances,
                                        int group_size, const SamplingConfig& sampling, std::uint64_t seed,
                                        std::uint64_t step, int threads = 1);

/// Line-delimited dump, one record per response.
void write_rollout_dump(std::ostream& out, std::int64_t step, std::span<const RolloutGroup> groups);

}  // namespace rlvr
