#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rlvr {

inline constexpr const char* kVersionTag = "rlvr-lab 0.1.0";

/// Raised when a caller breaks an operation's documented precondition.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline void require(bool condition, const char* message) {
  if (!condition) throw ContractViolation(message);
}

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

using TokenId = std::int32_t;

/// Training phase: fast entropy decline first, flat entropy afterwards.
enum class Stage { kRising, kPlateau };

inline const char* to_string(Stage s) { return s == Stage::kRising ? "rising" : "plateau"; }
using Rng = std::mt19937_64;

/// Uniform double in [0, 1) built from the top 53 bits of one engine draw.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Independent engine for (master seed, tag, index...). Used so that every
/// consumer of randomness gets its own reproducible stream.
inline Rng substream(std::uint64_t master, std::initializer_list<std::uint64_t> keys) {
  std::vector<std::uint32_t> words;
  words.reserve(2 + 2 * keys.size());
  auto push = [&](std::uint64_t v) {
    words.push_back(static_cast<std::uint32_t>(v & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(v >> 32));
  };
  push(master);
  for (auto k : keys) push(k);
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

/// SplitMix64: a tiny engine whose seeding is free, for draws keyed by
/// content (one short stream per distinct key) where building a Mersenne
/// Twister state each time would dominate the cost.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;
  explicit SplitMix64(std::uint64_t state) : state_(state) {}
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }
  result_type operator()() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

/// Order-sensitive 64-bit digest of a word sequence.
inline std::uint64_t hash_words(std::uint64_t seed, std::span<const std::uint64_t> words) {
  SplitMix64 mix(seed);
  std::uint64_t h = mix();
  for (auto w : words) h = SplitMix64(h ^ w)();
  return h;
}

/// Dense row-major matrix of doubles. Only what the head-weight algebra needs.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  double frobenius_norm() const;
  bool all_finite() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// g += u * h^T
void add_outer(Matrix& g, std::span<const double> u, std::span<const double> h);

double l2_norm(std::span<const double> v);

/// Logistic function, stable for large |x|.
double sigmoid(double x);

}  // namespace rlvr
