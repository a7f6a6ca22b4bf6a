#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rlvr/common.hpp"
#include "rlvr/rollout.hpp"

namespace rlvr {

enum class PplDirection { kFavorLowPpl, kFavorHighPpl };

struct PplShapingConfig {
  bool enabled = false;
  double alpha = 0.01;
  PplDirection direction = PplDirection::kFavorLowPpl;
};

enum class PositionSchedule {
  kWindow,   // active for steps in [start, start + duration)
  kPlateau,  // active while the stage detector reports plateau
};

struct PositionShapingConfig {
  bool enabled = false;
  double gamma = 0.1;
  int direction = 1;      // +1 favours late tokens, -1 early tokens
  double scale = 15.0;    // m in r = m (l - n)
  double shift = -0.5;    // n
  PositionSchedule schedule = PositionSchedule::kWindow;
  std::int64_t start = 200;
  std::int64_t duration = 100;
};

/// Standardized log-perplexity per response: (ln PPL - mu) / sigma over the
/// group, population sigma. All-equal groups give all-zero weights.
std::vector<double> ppl_weights(std::span<const double> ppls);

/// favour-low: A (1 - alpha w); favour-high: A (1 + alpha w).
double shape_ppl(double advantage, double weight, const PplShapingConfig& cfg);

/// gamma * sigmoid(d * m * (l - n))
double positional_bonus(double rel_position, const PositionShapingConfig& cfg);

/// A + sign(A) b with sign(0) = 0.
double shape_position(double advantage, double bonus);

struct ActiveShapers {
  std::optional<PplShapingConfig> ppl;
  std::optional<PositionShapingConfig> position;

  bool any() const { return ppl.has_value() || position.has_value(); }
  /// Scheduled shapers whose strength is nonzero; zero-strength shapers are
  /// still evaluated but cannot change an advantage.
  std::vector<std::string> effective_names() const;
};

ActiveShapers shaping_schedule(std::int64_t step, Stage stage, const PplShapingConfig& ppl,
                               const PositionShapingConfig& position);

struct ShapedAdvantages {
  std::vector<std::vector<double>> per_token;  // [response][t]
  bool clamped = false;                        // alpha reduced to keep signs
  double alpha_used = 0.0;
};

/// Keeps alpha * max|w| strictly below one so no advantage changes sign.
inline constexpr double kPplClampMargin = 0.99;

/// Broadcasts response advantages to tokens and applies the active shapers:
/// the multiplicative PPL factor first, then the positional bonus on the
/// result.
ShapedAdvantages shape_group(const RolloutGroup& group, std::span<const double> response_advantages,
                             const ActiveShapers& shapers);

}  // namespace rlvr
