#pragma once

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "rlvr/policy.hpp"
#include "rlvr/task.hpp"

namespace testing {

inline oracle::Grid to_grid(const rlvr::Matrix& m) {
  oracle::Grid g(m.rows(), std::vector<double>(m.cols()));
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) g[i][j] = m(i, j);
  return g;
}

inline rlvr::Matrix to_matrix(const oracle::Grid& g) {
  rlvr::Matrix m(g.size(), g.empty() ? 0 : g[0].size());
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = 0; j < g[i].size(); ++j) m(i, j) = g[i][j];
  return m;
}

/// Distribution whose probabilities are exactly proportional to `probs`.
inline rlvr::TokenDistribution from_probs(const std::vector<double>& probs) {
  std::vector<double> z;
  for (double p : probs) z.push_back(std::log(p));
  return rlvr::distribution(z, 1.0);
}

inline std::vector<double> normal_vector(std::size_t n, rlvr::Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(n);
  for (double& x : v) x = nd(rng);
  return v;
}

inline oracle::Grid normal_grid(std::size_t rows, std::size_t cols, rlvr::Rng& rng, double scale = 1.0) {
  oracle::Grid g(rows);
  for (auto& row : g) row = normal_vector(cols, rng, scale);
  return g;
}

/// Default feature map over the task with Gaussian head weights.
inline rlvr::Policy random_policy(const rlvr::Task& task, std::uint64_t seed, double scale,
                                  double temperature = 1.0) {
  rlvr::FeatureMap fm(task.vocabulary(), task.prompt_length(), rlvr::FeatureMapConfig{}, seed);
  rlvr::Rng rng = rlvr::substream(seed, {1});
  return rlvr::Policy{fm, rlvr::init_parameters(task.vocabulary().size(), fm.dim(), temperature, scale, rng)};
}

}  // namespace testing
