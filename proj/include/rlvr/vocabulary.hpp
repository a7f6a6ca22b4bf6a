#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "rlvr/common.hpp"

namespace rlvr {

enum class TokenRole : unsigned {
  kPrompt = 1u << 0,
  kReasoning = 1u << 1,
  kDelimiter = 1u << 2,
  kAnswer = 1u << 3,
  kEos = 1u << 4,
};

constexpr unsigned operator|(TokenRole a, TokenRole b) {
  return static_cast<unsigned>(a) | static_cast<unsigned>(b);
}
constexpr unsigned operator|(unsigned a, TokenRole b) { return a | static_cast<unsigned>(b); }

/// Ordered token set with role tags. Ids are contiguous in [0, size()).
/// Exactly one delimiter and one end-of-sequence token must exist.
class Vocabulary {
 public:
  struct Entry {
    std::string text;
    unsigned roles = 0;
  };

  explicit Vocabulary(std::vector<Entry> entries);

  std::size_t size() const { return entries_.size(); }
  bool contains(TokenId id) const { return id >= 0 && static_cast<std::size_t>(id) < entries_.size(); }
  const std::string& text(TokenId id) const;
  std::optional<TokenId> find(std::string_view text) const;
  TokenId at(std::string_view text) const;

  bool has_role(TokenId id, TokenRole role) const;
  std::vector<TokenId> with_role(TokenRole role) const;

  TokenId delimiter() const { return delimiter_; }
  TokenId eos() const { return eos_; }

  /// Tokens a response may legitimately contain: reasoning, delimiter,
  /// answer and end-of-sequence roles.
  bool response_allowed(TokenId id) const;

  std::string render(std::span<const TokenId> tokens) const;

  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId delimiter_ = -1;
  TokenId eos_ = -1;
};

}  // namespace rlvr
