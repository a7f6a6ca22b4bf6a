#include "rlvr/shaping.hpp"

#include <algorithm>
#include <cmath>

namespace rlvr {

std::vector<double> ppl_weights(std::span<const double> ppls) {
  require(ppls.size() >= 2, "PPL weights need a group of at least two responses");
  std::vector<double> logs(ppls.size());
  for (std::size_t i = 0; i < ppls.size(); ++i) {
    require(std::isfinite(ppls[i]) && ppls[i] > 0.0, "perplexity must be positive and finite");
    logs[i] = std::log(ppls[i]);
  }
  const double n = static_cast<double>(logs.size());
  double mean = 0.0;
  for (double x : logs) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : logs) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> w(logs.size(), 0.0);
  if (sd == 0.0) return w;
  for (std::size_t i = 0; i < logs.size(); ++i) w[i] = (logs[i] - mean) / sd;
  return w;
}

double shape_ppl(double advantage, double weight, const PplShapingConfig& cfg) {
  const double factor = cfg.direction == PplDirection::kFavorLowPpl ? 1.0 - cfg.alpha * weight
                                                                    : 1.0 + cfg.alpha * weight;
  return advantage * factor;
}

double positional_bonus(double rel_position, const PositionShapingConfig& cfg) {
  require(rel_position >= 0.0 && rel_position <= 1.0, "relative position must lie in [0, 1]");
  const double r = cfg.scale * (rel_position - cfg.shift);
  return cfg.gamma * sigmoid(static_cast<double>(cfg.direction) * r);
}

double shape_position(double advantage, double bonus) {
  const double sign = advantage > 0.0 ? 1.0 : (advantage < 0.0 ? -1.0 : 0.0);
  return advantage + sign * bonus;
}

std::vector<std::string> ActiveShapers::effective_names() const {
  std::vector<std::string> out;
  if (ppl && ppl->alpha != 0.0) out.emplace_back("ppl");
  if (position && position->gamma != 0.0) out.emplace_back("position");
  return out;
}

ActiveShapers shaping_schedule(std::int64_t step, Stage stage, const PplShapingConfig& ppl,
                               const PositionShapingConfig& position) {
  ActiveShapers out;
  if (ppl.enabled) out.ppl = ppl;
  if (position.enabled) {
    bool on = false;
    if (position.schedule == PositionSchedule::kWindow)
      on = step >= position.start && step < position.start + position.duration;
    else
      on = stage == Stage::kPlateau;
    if (on) out.position = position;
  }
  return out;
}

ShapedAdvantages shape_group(const RolloutGroup& group, std::span<const double> response_advantages,
                             const ActiveShapers& shapers) {
  require(response_advantages.size() == group.responses.size(), "one advantage per response required");
  ShapedAdvantages out;
  out.per_token.resize(group.responses.size());

  std::vector<double> weights;
  PplShapingConfig ppl_cfg;
  if (shapers.ppl) {
    ppl_cfg = *shapers.ppl;
    std::vector<double> ppls;
    for (const auto& r : group.responses) ppls.push_back(r.ppl);
    weights = ppl_weights(ppls);
    double max_abs = 0.0;
    for (double w : weights) max_abs = std::max(max_abs, std::abs(w));
    if (ppl_cfg.alpha * max_abs >= 1.0) {
      ppl_cfg.alpha = kPplClampMargin / max_abs;
      out.clamped = true;
    }
    out.alpha_used = ppl_cfg.alpha;
  }

  for (std::size_t i = 0; i < group.responses.size(); ++i) {
    const auto& resp = group.responses[i];
    double a = response_advantages[i];
    if (shapers.ppl) a = shape_ppl(a, weights[i], ppl_cfg);
    auto& row = out.per_token[i];
    row.assign(resp.tokens.size(), a);
    if (shapers.position) {
      for (std::size_t t = 0; t < resp.tokens.size(); ++t)
        row[t] = shape_position(a, positional_bonus(resp.tokens[t].rel_position, *shapers.position));
    }
  }
  return out;
}

}  // namespace rlvr
