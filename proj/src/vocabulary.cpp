#include "rlvr/vocabulary.hpp"

namespace rlvr {

Vocabulary::Vocabulary(std::vector<Entry> entries) : entries_(std::move(entries)) {
  require(!entries_.empty(), "vocabulary must not be empty");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto id = static_cast<TokenId>(i);
    const auto& e = entries_[i];
    require(index_.emplace(e.text, id).second, "duplicate token '" + e.text + "'");
    if (e.roles & static_cast<unsigned>(TokenRole::kDelimiter)) {
      require(delimiter_ < 0, "vocabulary has more than one answer delimiter");
      delimiter_ = id;
    }
    if (e.roles & static_cast<unsigned>(TokenRole::kEos)) {
      require(eos_ < 0, "vocabulary has more than one end-of-sequence token");
      eos_ = id;
    }
  }
  require(delimiter_ >= 0, "vocabulary has no answer delimiter");
  require(eos_ >= 0, "vocabulary has no end-of-sequence token");
}

const std::string& Vocabulary::text(TokenId id) const {
  if (!contains(id)) throw ContractViolation("token id " + std::to_string(id) + " outside vocabulary");
  return entries_[static_cast<std::size_t>(id)].text;
}

std::optional<TokenId> Vocabulary::find(std::string_view text) const {
  auto it = index_.find(std::string(text));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::at(std::string_view text) const {
  auto id = find(text);
  require(id.has_value(), "unknown token '" + std::string(text) + "'");
  return *id;
}

bool Vocabulary::has_role(TokenId id, TokenRole role) const {
  if (!contains(id)) throw ContractViolation("token id " + std::to_string(id) + " outside vocabulary");
  return (entries_[static_cast<std::size_t>(id)].roles & static_cast<unsigned>(role)) != 0;
}

std::vector<TokenId> Vocabulary::with_role(TokenRole role) const {
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].roles & static_cast<unsigned>(role)) out.push_back(static_cast<TokenId>(i));
  return out;
}

bool Vocabulary::response_allowed(TokenId id) const {
  if (!contains(id)) return false;
  constexpr unsigned mask = TokenRole::kReasoning | TokenRole::kDelimiter | TokenRole::kAnswer |
                            TokenRole::kEos;
  return (entries_[static_cast<std::size_t>(id)].roles & mask) != 0;
}

std::string Vocabulary::render(std::span<const TokenId> tokens) const {
  std::string out;
  for (auto t : tokens) {
    if (!out.empty()) out += ' ';
    out += text(t);
  }
  return out;
}

}  // namespace rlvr
