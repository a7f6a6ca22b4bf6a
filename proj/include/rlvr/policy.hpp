#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rlvr/common.hpp"
#include "rlvr/vocabulary.hpp"

namespace rlvr {

struct FeatureMapConfig {
  int context_width = 2;   // k_ctx: number of trailing generated tokens seen
  int dim = 32;            // d
  int prompt_dim = 32;     // leading coordinates carrying the prompt summary
  int context_dim = 32;    // trailing coordinates carrying the context slots
  double prompt_identity_scale = 10.0;
  double context_share = 0.5;  // mixing weight of the context block
};

struct PromptCode {
  std::vector<double> base;
};

/// Frozen random featurization of (prompt, trailing context) into a unit
/// vector in R^d. The prompt summary (bias, prompt (position, token)
/// indicators and a prompt-identity draw) is projected into the first
/// prompt_dim coordinates and normalized; the context-slot indicators are
/// projected into the last context_dim coordinates and normalized. Each
/// slot sets its token indicator plus one indicator per role bit of that
/// token. The two parts are mixed with weights sqrt(1 - context_share) and
/// sqrt(context_share) and the sum is normalized; when the blocks are
/// disjoint the final normalization is a no-op. Projection columns are
/// standard normal draws fixed by the seed; the prompt-identity column is
/// drawn from a stream keyed by the full prompt, so distinct prompts never
/// share one.
class FeatureMap {
 public:
  FeatureMap(const Vocabulary& vocab, std::size_t max_prompt_length, FeatureMapConfig config,
             std::uint64_t seed);

  std::size_t dim() const { return static_cast<std::size_t>(config_.dim); }
  std::size_t context_width() const { return static_cast<std::size_t>(config_.context_width); }
  std::uint64_t seed() const { return seed_; }
  const FeatureMapConfig& config() const { return config_; }

  PromptCode encode_prompt(std::span<const TokenId> prompt) const;

  /// Feature vector for the next-token decision after `generated`.
  std::vector<double> features(const PromptCode& code, std::span<const TokenId> generated) const;

  std::vector<double> operator()(std::span<const TokenId> prompt,
                                 std::span<const TokenId> generated) const {
    return features(encode_prompt(prompt), generated);
  }

 private:
  std::span<const double> prompt_column(std::size_t index) const;
  std::span<const double> context_column(std::size_t index) const;

  FeatureMapConfig config_;
  std::uint64_t seed_;
  std::size_t vocab_size_;
  std::size_t max_prompt_length_;
  std::size_t prompt_dim_;
  std::size_t context_dim_;
  // bias, then max_prompt_length * V prompt slots, each prompt_dim_ long
  std::vector<double> prompt_projection_;
  // per context slot: V + 1 token symbols (the extra one is padding), then
  // one column per role bit; each column context_dim_ long
  std::vector<double> context_projection_;
  std::vector<unsigned> roles_;
};

struct PolicyParameters {
  Matrix weights;  // V x d head
  double temperature = 1.0;

  std::size_t vocab_size() const { return weights.rows(); }
  std::size_t dim() const { return weights.cols(); }

  friend bool operator==(const PolicyParameters&, const PolicyParameters&) = default;
};

PolicyParameters init_parameters(std::size_t vocab_size, std::size_t dim, double temperature,
                                 double init_scale, Rng& rng);

struct TokenDistribution {
  std::vector<double> logits;
  std::vector<double> probs;
  double temperature = 1.0;
  double max_logit = 0.0;
  double log_sum = 0.0;  // log sum_v exp((z_v - max_logit) / T)

  std::size_t size() const { return probs.size(); }
  /// ln pi(id), evaluated in log space.
  double log_prob(TokenId id) const;
};

/// z = W h
std::vector<double> logits(const PolicyParameters& params, std::span<const double> features);

/// softmax(z / T) with max subtraction.
TokenDistribution distribution(std::span<const double> logits, double temperature);

/// Shannon entropy in nats, with 0 ln 0 = 0.
double token_entropy(const TokenDistribution& dist);

struct SampledToken {
  TokenId token;
  double logprob;  // under the full, untruncated distribution
};

/// Draws from the nucleus (smallest prefix of the probability-sorted
/// vocabulary with mass >= top_p). The most likely token is always kept.
SampledToken sample_token(const TokenDistribution& dist, double top_p, Rng& rng);

/// alpha * (e(chosen) - pi) h^T / T, the head-weight gradient of
/// alpha * ln pi(chosen). At T = 1 this is the familiar rank-1 form.
Matrix token_policy_gradient(double alpha, const TokenDistribution& dist, TokenId chosen,
                             std::span<const double> features);

/// Frobenius norm of token_policy_gradient via the rank-1 identity
/// |alpha| * ||e - pi|| * ||h|| / T.
double grad_norm(double alpha, const TokenDistribution& dist, TokenId chosen,
                 std::span<const double> features);

/// (e(chosen) - pi), the logit-space direction of d ln pi(chosen) / dz.
std::vector<double> score_direction(const TokenDistribution& dist, TokenId chosen);

/// A frozen feature map plus head weights: everything needed to evaluate
/// pi(. | q, o_<t).
struct Policy {
  FeatureMap feature_map;
  PolicyParameters params;

  TokenDistribution next(const PromptCode& code, std::span<const TokenId> generated) const {
    return distribution(logits(params, feature_map.features(code, generated)), params.temperature);
  }
};

enum class OptimizerKind { kGradientAscent, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kGradientAscent;
  double learning_rate = 0.05;
  int warmup_steps = 0;  // linear ramp over this many updates; 0 disables
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ascent on the surrogate objective: W <- W + lr * step(grad).
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::size_t rows, std::size_t cols);

  /// Throws NonFiniteGradient (leaving params untouched) if grad has a NaN/Inf.
  void apply(PolicyParameters& params, const Matrix& grad);

  double current_learning_rate() const;
  std::int64_t updates() const { return updates_; }
  const OptimizerConfig& config() const { return config_; }

 private:
  OptimizerConfig config_;
  std::int64_t updates_ = 0;
  Matrix first_moment_;
  Matrix second_moment_;
};

/// Stateless plain-ascent update, W + lr * grad.
PolicyParameters apply_update(const PolicyParameters& params, const Matrix& grad, double learning_rate);

}  // namespace rlvr
