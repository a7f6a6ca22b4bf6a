#include "rlvr/warm_start.hpp"

namespace rlvr {

double warm_start(Policy& policy, const Task& task, const WarmStartConfig& config, Rng& rng) {
  require(config.steps >= 0 && config.batch >= 1, "warm start needs nonnegative steps and a positive batch");
  require(config.max_reasoning_prefix >= 0, "reasoning prefix length must be nonnegative");
  const auto reasoning = task.vocabulary().with_role(TokenRole::kReasoning);
  const auto cap = static_cast<std::size_t>(task.spec().max_response_length);
  const std::size_t V = policy.params.vocab_size();
  const std::size_t d = policy.params.dim();

  Optimizer optimizer(config.optimizer, V, d);
  double last_loglik = 0.0;
  for (int s = 0; s < config.steps; ++s) {
    Matrix grad(V, d);
    std::size_t count = 0;
    double loglik = 0.0;
    for (int b = 0; b < config.batch; ++b) {
      const Instance inst = task.generate(rng);
      std::vector<TokenId> target;
      if (!reasoning.empty()) {
        const auto n = static_cast<int>(uniform01(rng) * (config.max_reasoning_prefix + 1));
        for (int i = 0; i < n; ++i)
          target.push_back(reasoning[static_cast<std::size_t>(uniform01(rng) * reasoning.size())]);
      }
      const auto gold = task.gold_response(inst);
      target.insert(target.end(), gold.begin(), gold.end());
      if (target.size() > cap) target.erase(target.begin(), target.begin() + (target.size() - cap));

      const PromptCode code = policy.feature_map.encode_prompt(inst.prompt);
      std::vector<TokenId> prefix;
      for (TokenId tok : target) {
        const auto h = policy.feature_map.features(code, prefix);
        const auto dist = distribution(logits(policy.params, h), policy.params.temperature);
        loglik += dist.log_prob(tok);
        auto u = score_direction(dist, tok);
        for (double& x : u) x /= dist.temperature;
        add_outer(grad, u, h);
        ++count;
        prefix.push_back(tok);
      }
    }
    const double inv = 1.0 / static_cast<double>(count);
    for (double& x : grad.values()) x *= inv;
    optimizer.apply(policy.params, grad);
    last_loglik = loglik * inv;
  }
  return last_loglik;
}

}  // namespace rlvr
