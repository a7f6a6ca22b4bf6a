#include "rlvr/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace rlvr {

namespace {

constexpr std::uint64_t kProjectionStream = 0x70726f6aULL;
constexpr std::uint64_t kIdentityStream = 0x6964656eULL;
constexpr std::size_t kRoleBits = 5;

template <class Engine>
void fill_normal(std::span<double> out, Engine& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : out) v = normal(rng);
}

}  // namespace

FeatureMap::FeatureMap(const Vocabulary& vocab, std::size_t max_prompt_length, FeatureMapConfig config,
                       std::uint64_t seed)
    : config_(config), seed_(seed), vocab_size_(vocab.size()), max_prompt_length_(max_prompt_length) {
  require(config_.dim > 0, "feature dimension must be positive");
  require(config_.context_width >= 0, "context width must be nonnegative");
  require(config_.prompt_dim > 0 && config_.prompt_dim <= config_.dim,
          "prompt block must have between 1 and d coordinates");
  require(config_.context_dim > 0 && config_.context_dim <= config_.dim,
          "context block must have between 1 and d coordinates");
  require(config_.context_share > 0.0 && config_.context_share < 1.0, "context share must lie in (0, 1)");
  require(std::isfinite(config_.prompt_identity_scale) && config_.prompt_identity_scale >= 0.0,
          "prompt identity scale must be finite and nonnegative");
  prompt_dim_ = static_cast<std::size_t>(config_.prompt_dim);
  context_dim_ = static_cast<std::size_t>(config_.context_dim);

  Rng rng = substream(seed_, {kProjectionStream});
  prompt_projection_.resize((1 + max_prompt_length_ * vocab_size_) * prompt_dim_);
  fill_normal(prompt_projection_, rng);
  context_projection_.resize(context_width() * (vocab_size_ + 1 + kRoleBits) * context_dim_);
  fill_normal(context_projection_, rng);
  for (const auto& entry : vocab.entries()) roles_.push_back(entry.roles);
}

std::span<const double> FeatureMap::prompt_column(std::size_t index) const {
  return {prompt_projection_.data() + index * prompt_dim_, prompt_dim_};
}

std::span<const double> FeatureMap::context_column(std::size_t index) const {
  return {context_projection_.data() + index * context_dim_, context_dim_};
}

PromptCode FeatureMap::encode_prompt(std::span<const TokenId> prompt) const {
  require(prompt.size() <= max_prompt_length_, "prompt longer than the feature map supports");
  PromptCode code{std::vector<double>(dim(), 0.0)};
  auto add = [&](std::span<const double> col, double scale) {
    for (std::size_t i = 0; i < prompt_dim_; ++i) code.base[i] += scale * col[i];
  };
  add(prompt_column(0), 1.0);
  for (std::size_t pos = 0; pos < prompt.size(); ++pos) {
    require(prompt[pos] >= 0 && static_cast<std::size_t>(prompt[pos]) < vocab_size_,
            "prompt token outside vocabulary");
    add(prompt_column(1 + pos * vocab_size_ + static_cast<std::size_t>(prompt[pos])), 1.0);
  }
  if (config_.prompt_identity_scale > 0.0) {
    std::vector<std::uint64_t> words{kIdentityStream, prompt.size()};
    for (auto t : prompt) words.push_back(static_cast<std::uint64_t>(t));
    SplitMix64 rng(hash_words(seed_, words));
    std::vector<double> identity(prompt_dim_);
    fill_normal(identity, rng);
    add(identity, config_.prompt_identity_scale);
  }
  const double norm = l2_norm(std::span<const double>(code.base.data(), prompt_dim_));
  require(norm > 0.0 && std::isfinite(norm), "degenerate prompt summary");
  const double weight = context_width() == 0 ? 1.0 : std::sqrt(1.0 - config_.context_share);
  for (std::size_t i = 0; i < prompt_dim_; ++i) code.base[i] *= weight / norm;
  return code;
}

std::vector<double> FeatureMap::features(const PromptCode& code, std::span<const TokenId> generated) const {
  require(code.base.size() == dim(), "prompt code has wrong dimension");
  std::vector<double> h = code.base;
  const std::size_t k = context_width();
  if (k > 0) {
    std::vector<double> ctx(context_dim_, 0.0);
    for (std::size_t slot = 0; slot < k; ++slot) {
      // slot k-1 holds the most recent token; missing history is padding
      const std::size_t back = k - slot;
      std::size_t symbol = vocab_size_;
      if (back <= generated.size()) {
        const TokenId t = generated[generated.size() - back];
        require(t >= 0 && static_cast<std::size_t>(t) < vocab_size_, "context token outside vocabulary");
        symbol = static_cast<std::size_t>(t);
      }
      const std::size_t base = slot * (vocab_size_ + 1 + kRoleBits);
      auto add = [&](std::size_t index) {
        auto col = context_column(index);
        for (std::size_t i = 0; i < context_dim_; ++i) ctx[i] += col[i];
      };
      add(base + symbol);
      if (symbol < vocab_size_)
        for (std::size_t bit = 0; bit < kRoleBits; ++bit)
          if (roles_[symbol] & (1u << bit)) add(base + vocab_size_ + 1 + bit);
    }
    const double cnorm = l2_norm(ctx);
    require(cnorm > 0.0 && std::isfinite(cnorm), "degenerate context features");
    const double weight = std::sqrt(config_.context_share) / cnorm;
    const std::size_t offset = dim() - context_dim_;
    for (std::size_t i = 0; i < context_dim_; ++i) h[offset + i] += weight * ctx[i];
  }
  const double norm = l2_norm(h);
  require(norm > 0.0 && std::isfinite(norm), "degenerate feature vector");
  for (double& v : h) v /= norm;
  return h;
}

PolicyParameters init_parameters(std::size_t vocab_size, std::size_t dim, double temperature,
                                 double init_scale, Rng& rng) {
  require(vocab_size > 0 && dim > 0, "policy shape must be positive");
  require(temperature > 0.0 && std::isfinite(temperature), "temperature must be positive");
  PolicyParameters params{Matrix(vocab_size, dim), temperature};
  if (init_scale > 0.0) {
    std::normal_distribution<double> normal(0.0, init_scale);
    for (double& w : params.weights.values()) w = normal(rng);
  }
  return params;
}

double TokenDistribution::log_prob(TokenId id) const {
  require(id >= 0 && static_cast<std::size_t>(id) < logits.size(), "token id outside distribution");
  return (logits[static_cast<std::size_t>(id)] - max_logit) / temperature - log_sum;
}

std::vector<double> logits(const PolicyParameters& params, std::span<const double> features) {
  const Matrix& w = params.weights;
  if (features.size() != w.cols())
    throw ContractViolation("feature dimension " + std::to_string(features.size()) +
                            " does not match head dimension " + std::to_string(w.cols()));
  std::vector<double> z(w.rows(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    auto row = w.row(r);
    double acc = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) acc += row[c] * features[c];
    z[r] = acc;
  }
  return z;
}

TokenDistribution distribution(std::span<const double> logits, double temperature) {
  require(temperature > 0.0 && std::isfinite(temperature), "temperature must be positive and finite");
  require(!logits.empty(), "empty logits");
  require(std::all_of(logits.begin(), logits.end(), [](double z) { return std::isfinite(z); }),
          "non-finite logits");
  TokenDistribution d;
  d.logits.assign(logits.begin(), logits.end());
  d.temperature = temperature;
  d.max_logit = *std::max_element(logits.begin(), logits.end());
  d.probs.resize(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    d.probs[i] = std::exp((logits[i] - d.max_logit) / temperature);
    sum += d.probs[i];
  }
  for (double& p : d.probs) p /= sum;
  d.log_sum = std::log(sum);
  return d;
}

double token_entropy(const TokenDistribution& dist) {
  double h = 0.0;
  for (double p : dist.probs)
    if (p > 0.0) h -= p * std::log(p);
  return std::max(0.0, h);
}

SampledToken sample_token(const TokenDistribution& dist, double top_p, Rng& rng) {
  require(top_p > 0.0 && top_p <= 1.0, "top_p must lie in (0, 1]");
  const auto& p = dist.probs;
  require(!p.empty(), "empty distribution");

  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double mass = 0.0;
  std::size_t nucleus = p.size();
  if (top_p < 1.0) {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    for (std::size_t i = 0; i < order.size(); ++i) {
      mass += p[order[i]];
      if (mass >= top_p) {
        nucleus = i + 1;
        break;
      }
    }
    if (nucleus == p.size()) mass = std::accumulate(p.begin(), p.end(), 0.0);
  } else {
    mass = std::accumulate(p.begin(), p.end(), 0.0);
  }

  const double u = uniform01(rng) * mass;
  double cum = 0.0;
  std::size_t chosen = order[0];
  for (std::size_t i = 0; i < nucleus; ++i) {
    const std::size_t idx = order[i];
    if (p[idx] <= 0.0) continue;
    chosen = idx;
    cum += p[idx];
    if (u < cum) break;
  }
  const auto token = static_cast<TokenId>(chosen);
  return {token, dist.log_prob(token)};
}

std::vector<double> score_direction(const TokenDistribution& dist, TokenId chosen) {
  require(chosen >= 0 && static_cast<std::size_t>(chosen) < dist.size(), "chosen token outside vocabulary");
  std::vector<double> u(dist.size());
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = -dist.probs[i];
  u[static_cast<std::size_t>(chosen)] += 1.0;
  return u;
}

Matrix token_policy_gradient(double alpha, const TokenDistribution& dist, TokenId chosen,
                             std::span<const double> features) {
  auto u = score_direction(dist, chosen);
  for (double& x : u) x *= alpha / dist.temperature;
  Matrix g(dist.size(), features.size());
  add_outer(g, u, features);
  return g;
}

double grad_norm(double alpha, const TokenDistribution& dist, TokenId chosen,
                 std::span<const double> features) {
  if (alpha == 0.0) return 0.0;
  return std::abs(alpha / dist.temperature) * l2_norm(score_direction(dist, chosen)) * l2_norm(features);
}

Optimizer::Optimizer(OptimizerConfig config, std::size_t rows, std::size_t cols) : config_(config) {
  require(config_.learning_rate >= 0.0 && std::isfinite(config_.learning_rate),
          "learning rate must be finite and nonnegative");
  require(config_.warmup_steps >= 0, "warmup steps must be nonnegative");
  if (config_.kind == OptimizerKind::kAdam) {
    first_moment_ = Matrix(rows, cols);
    second_moment_ = Matrix(rows, cols);
  }
}

double Optimizer::current_learning_rate() const {
  if (config_.warmup_steps <= 0) return config_.learning_rate;
  const double ramp = std::min(1.0, static_cast<double>(updates_ + 1) / config_.warmup_steps);
  return config_.learning_rate * ramp;
}

void Optimizer::apply(PolicyParameters& params, const Matrix& grad) {
  require(grad.rows() == params.weights.rows() && grad.cols() == params.weights.cols(),
          "gradient shape does not match parameters");
  if (!grad.all_finite()) {
    std::ostringstream msg;
    msg << "non-finite gradient at update " << updates_ << " (norm " << grad.frobenius_norm() << ")";
    throw NonFiniteGradient(msg.str());
  }
  const double lr = current_learning_rate();
  auto w = params.weights.values();
  auto g = grad.values();
  if (config_.kind == OptimizerKind::kGradientAscent) {
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += lr * g[i];
  } else {
    auto m = first_moment_.values();
    auto v = second_moment_.values();
    const double t = static_cast<double>(updates_ + 1);
    const double c1 = 1.0 - std::pow(config_.beta1, t);
    const double c2 = 1.0 - std::pow(config_.beta2, t);
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      w[i] += lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.epsilon);
    }
  }
  ++updates_;
}

PolicyParameters apply_update(const PolicyParameters& params, const Matrix& grad, double learning_rate) {
  require(grad.rows() == params.weights.rows() && grad.cols() == params.weights.cols(),
          "gradient shape does not match parameters");
  if (!grad.all_finite()) throw NonFiniteGradient("non-finite gradient");
  PolicyParameters out = params;
  auto w = out.weights.values();
  auto g = grad.values();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] += learning_rate * g[i];
  return out;
}

}  // namespace rlvr
