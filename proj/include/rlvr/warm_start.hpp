#pragma once

#include "rlvr/policy.hpp"
#include "rlvr/task.hpp"

namespace rlvr {

/// Supervised likelihood ascent on gold responses, giving the head a base
/// model's grasp of the response grammar (and a partial grasp of the task)
/// before reinforcement learning starts. Each target is a random run of
/// reasoning tokens followed by the gold response.
struct WarmStartConfig {
  int steps = 20000;
  int batch = 32;
  int max_reasoning_prefix = 1;
  OptimizerConfig optimizer{OptimizerKind::kAdam, 0.05};
};

/// Returns the mean token log-likelihood of the last batch (0 when steps == 0).
double warm_start(Policy& policy, const Task& task, const WarmStartConfig& config, Rng& rng);

}  // namespace rlvr
