#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "rlvr/policy.hpp"
#include "rlvr/rollout.hpp"
#include "rlvr/shaping.hpp"
#include "rlvr/token_metrics.hpp"

namespace rlvr {

/// Asymmetric clip range ("clip-higher"): r is clipped to [1 - low, 1 + high].
struct ClipRange {
  double low = 0.2;
  double high = 0.28;
};

struct TrainerConfig {
  ClipRange clip;
  double kl_beta = 0.0;
  int batch_groups = 64;      // B
  int mini_batch_groups = 8;  // groups per optimizer update
  int epochs = 1;             // passes over each batch
  int group_size = 8;         // G
  OptimizerConfig optimizer;

  void validate() const;
};

struct AdvantageSet {
  std::vector<double> advantages;
  bool degenerate = false;  // zero reward variance, all advantages zero
};

/// (R_i - mean) / std with the population standard deviation.
AdvantageSet group_advantages(std::span<const double> rewards);

/// exp(new - old)
double importance_ratio(double new_logprob, double old_logprob);

/// min(r A, clip(r, 1 - low, 1 + high) A)
double clipped_surrogate(double ratio, double advantage, ClipRange clip);

/// d surrogate / d ln pi(o_t): r A on the unclipped branch, 0 where the clip
/// binds. Multiplies (e(o_t) - pi) h^T to give the token's head gradient.
double surrogate_coefficient(double ratio, double advantage, ClipRange clip);

/// Exact KL(p || ref) over the full vocabulary.
double kl_term(std::span<const double> policy_probs, std::span<const double> reference_probs);
double kl_term(const TokenDistribution& policy, const TokenDistribution& reference);

/// d KL(p || ref) / dz for p = softmax(z / T).
std::vector<double> kl_logit_gradient(const TokenDistribution& policy, const TokenDistribution& reference);

/// Thrown when an update would be non-finite; the parameters are restored
/// to their pre-step values before it propagates.
class StepAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct UpdateStats {
  std::size_t tokens = 0;
  std::size_t updates = 0;
  std::size_t degenerate_groups = 0;
  std::size_t clamped_groups = 0;
  std::size_t clipped_tokens = 0;       // first epoch, coefficient zeroed by the clip
  bool on_policy_first_pass = true;     // every first-pass ratio was exactly 1
  double grad_norm_mean = 0.0;          // per-token G_t, first epoch
  double grad_norm_max = 0.0;
  double entropy_grad_correlation = 0.0;
  double mean_kl = 0.0;                 // only when kl_beta > 0
  double small_shift_fraction = 1.0;
  double mean_abs_shift = 0.0;
  std::vector<ShiftRecord> shifts;
};

/// One GRPO step over a batch sampled from the current parameters.
/// Groups are split into consecutive mini-batches of `mini_batch_groups`;
/// each mini-batch contributes one update whose gradient is the token mean
/// of alpha_t (e(o_t) - pi) h^T, minus beta times the KL gradient when
/// beta > 0. `reference` is required only when beta > 0.
UpdateStats train_step(std::span<const RolloutGroup> batch, Policy& policy, Optimizer& optimizer,
                       const TrainerConfig& config, const ActiveShapers& shapers,
                       const PolicyParameters* reference = nullptr, double shift_threshold = 0.06,
                       std::int64_t step = 0);

}  // namespace rlvr
