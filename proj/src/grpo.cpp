#include "rlvr/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace rlvr {

void TrainerConfig::validate() const {
  require(clip.low > 0.0 && clip.high > 0.0, "clip thresholds must be positive");
  require(clip.low <= clip.high, "eps_low must not exceed eps_high");
  require(clip.low < 1.0, "eps_low must be below 1");
  require(kl_beta >= 0.0 && std::isfinite(kl_beta), "KL weight must be finite and nonnegative");
  require(batch_groups >= 1, "batch size must be positive");
  require(mini_batch_groups >= 1, "mini-batch size must be positive");
  require(batch_groups % mini_batch_groups == 0, "mini-batch size must divide the batch size");
  require(epochs >= 1, "epochs must be positive");
  require(group_size >= 2, "training groups need at least two responses");
  require(optimizer.learning_rate >= 0.0, "learning rate must be nonnegative");
  require(optimizer.warmup_steps >= 0, "warmup steps must be nonnegative");
}

AdvantageSet group_advantages(std::span<const double> rewards) {
  require(rewards.size() >= 2, "group advantages need at least two rewards");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);

  AdvantageSet out;
  out.advantages.assign(rewards.size(), 0.0);
  if (sd == 0.0) {
    out.degenerate = true;
    return out;
  }
  for (std::size_t i = 0; i < rewards.size(); ++i) out.advantages[i] = (rewards[i] - mean) / sd;
  return out;
}

double importance_ratio(double new_logprob, double old_logprob) {
  require(std::isfinite(new_logprob) && std::isfinite(old_logprob), "log-probabilities must be finite");
  return std::exp(new_logprob - old_logprob);
}

double clipped_surrogate(double ratio, double advantage, ClipRange clip) {
  const double clipped = std::clamp(ratio, 1.0 - clip.low, 1.0 + clip.high);
  return std::min(ratio * advantage, clipped * advantage);
}

double surrogate_coefficient(double ratio, double advantage, ClipRange clip) {
  if (advantage > 0.0 && ratio > 1.0 + clip.high) return 0.0;
  if (advantage < 0.0 && ratio < 1.0 - clip.low) return 0.0;
  return ratio * advantage;
}

double kl_term(std::span<const double> policy_probs, std::span<const double> reference_probs) {
  require(policy_probs.size() == reference_probs.size(), "KL over different vocabularies");
  double kl = 0.0;
  for (std::size_t i = 0; i < policy_probs.size(); ++i) {
    const double p = policy_probs[i];
    if (p <= 0.0) continue;
    require(reference_probs[i] > 0.0, "reference assigns zero probability where the policy does not");
    kl += p * std::log(p / reference_probs[i]);
  }
  return std::max(0.0, kl);
}

double kl_term(const TokenDistribution& policy, const TokenDistribution& reference) {
  return kl_term(policy.probs, reference.probs);
}

std::vector<double> kl_logit_gradient(const TokenDistribution& policy, const TokenDistribution& reference) {
  require(policy.size() == reference.size(), "KL over different vocabularies");
  // with log p = z/T - log Z: dKL/dz_k = p_k (log(p_k/q_k) - KL) / T
  const double kl = kl_term(policy, reference);
  std::vector<double> g(policy.size(), 0.0);
  for (std::size_t k = 0; k < g.size(); ++k) {
    const double p = policy.probs[k];
    if (p <= 0.0) continue;
    g[k] = p * (std::log(p / reference.probs[k]) - kl) / policy.temperature;
  }
  return g;
}

namespace {

struct TokenItem {
  std::size_t group;
  std::size_t response;
  std::size_t position;
  TokenId token;
  double old_logprob;
  double advantage;
  double entropy;
  std::vector<double> features;
};

double pearson(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  if (n < 2) return 0.0;
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace

UpdateStats train_step(std::span<const RolloutGroup> batch, Policy& policy, Optimizer& optimizer,
                       const TrainerConfig& config, const ActiveShapers& shapers,
                       const PolicyParameters* reference, double shift_threshold, std::int64_t step) {
  config.validate();
  require(!batch.empty(), "empty training batch");
  require(config.kl_beta == 0.0 || reference != nullptr, "KL regularization needs reference parameters");
  const auto& fmap = policy.feature_map;

  UpdateStats stats;
  // per mini-batch list of token items
  const auto mb = static_cast<std::size_t>(config.mini_batch_groups);
  std::vector<std::vector<TokenItem>> minibatches((batch.size() + mb - 1) / mb);

  for (std::size_t g = 0; g < batch.size(); ++g) {
    const auto& group = batch[g];
    require(group.responses.size() >= 2, "training groups need at least two responses");
    std::vector<double> rewards;
    for (const auto& r : group.responses) rewards.push_back(r.reward);
    const auto adv = group_advantages(rewards);
    if (adv.degenerate) ++stats.degenerate_groups;
    const auto shaped = shape_group(group, adv.advantages, shapers);
    if (shaped.clamped) ++stats.clamped_groups;

    const PromptCode code = fmap.encode_prompt(group.instance.prompt);
    auto& items = minibatches[g / mb];
    for (std::size_t r = 0; r < group.responses.size(); ++r) {
      const auto& resp = group.responses[r];
      std::vector<TokenId> prefix;
      for (std::size_t t = 0; t < resp.tokens.size(); ++t) {
        const auto& tok = resp.tokens[t];
        items.push_back({g, r, t, tok.token, tok.logprob, shaped.per_token[r][t], tok.entropy,
                         fmap.features(code, prefix)});
        prefix.push_back(tok.token);
      }
    }
  }

  const PolicyParameters snapshot = policy.params;
  const std::size_t V = policy.params.vocab_size();
  const std::size_t d = policy.params.dim();
  std::vector<double> norms;
  std::vector<double> entropies;
  double kl_sum = 0.0;
  std::size_t kl_count = 0;

  try {
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      for (const auto& items : minibatches) {
        if (items.empty()) continue;
        Matrix grad(V, d);
        for (const auto& item : items) {
          const auto dist = distribution(logits(policy.params, item.features), policy.params.temperature);
          const double ratio = importance_ratio(dist.log_prob(item.token), item.old_logprob);
          const double alpha = surrogate_coefficient(ratio, item.advantage, config.clip);
          if (epoch == 0) {
            if (ratio != 1.0) stats.on_policy_first_pass = false;
            if (alpha == 0.0 && item.advantage != 0.0) ++stats.clipped_tokens;
            norms.push_back(grad_norm(alpha, dist, item.token, item.features));
            entropies.push_back(item.entropy);
          }
          std::vector<double> u(V, 0.0);
          if (alpha != 0.0) {
            u = score_direction(dist, item.token);
            for (double& x : u) x *= alpha / dist.temperature;
          }
          if (config.kl_beta > 0.0) {
            const auto ref = distribution(logits(*reference, item.features), reference->temperature);
            const auto kg = kl_logit_gradient(dist, ref);
            for (std::size_t k = 0; k < V; ++k) u[k] -= config.kl_beta * kg[k];
            kl_sum += kl_term(dist, ref);
            ++kl_count;
          }
          if (alpha != 0.0 || config.kl_beta > 0.0) add_outer(grad, u, item.features);
        }
        const double inv = 1.0 / static_cast<double>(items.size());
        for (double& x : grad.values()) x *= inv;
        optimizer.apply(policy.params, grad);
        ++stats.updates;
      }
    }
  } catch (const NonFiniteGradient& e) {
    policy.params = snapshot;
    std::ostringstream msg;
    msg << "step " << step << " aborted: " << e.what();
    throw StepAborted(msg.str());
  }

  stats.tokens = norms.size();
  if (!norms.empty()) {
    double sum = 0.0;
    for (double n : norms) {
      sum += n;
      stats.grad_norm_max = std::max(stats.grad_norm_max, n);
    }
    stats.grad_norm_mean = sum / static_cast<double>(norms.size());
    stats.entropy_grad_correlation = pearson(entropies, norms);
  }
  if (kl_count > 0) stats.mean_kl = kl_sum / static_cast<double>(kl_count);

  // probability of every sampled token before and after the step
  double abs_sum = 0.0;
  for (const auto& items : minibatches) {
    for (const auto& item : items) {
      const auto dist = distribution(logits(policy.params, item.features), policy.params.temperature);
      const double delta = std::exp(dist.log_prob(item.token)) - std::exp(item.old_logprob);
      const auto& resp = batch[item.group].responses[item.response];
      stats.shifts.push_back({step, item.group, item.response, static_cast<int>(item.position), item.token,
                              delta, resp.ppl, resp.tokens[item.position].rel_position, item.entropy,
                              resp.reward});
      abs_sum += std::abs(delta);
    }
  }
  stats.small_shift_fraction = fraction_below(stats.shifts, shift_threshold);
  if (!stats.shifts.empty()) stats.mean_abs_shift = abs_sum / static_cast<double>(stats.shifts.size());
  return stats;
}

}  // namespace rlvr
