#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rlvr/common.hpp"
#include "rlvr/vocabulary.hpp"

namespace rlvr {

enum class TaskKind { kModularAddition, kBracketCompletion };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(const std::string& name);

struct TaskSpec {
  TaskKind kind = TaskKind::kModularAddition;
  int modulus = 10;          // modular addition: operands and answers in [0, modulus)
  int depth = 2;             // bracket completion: number of open brackets in the prompt
  int max_response_length = 16;
  int reasoning_tokens = 8;  // free tokens available before the delimiter
};

/// Prompt plus the token sequence that must follow the delimiter.
struct Instance {
  std::uint64_t id = 0;
  std::vector<TokenId> prompt;
  std::vector<TokenId> truth;
};

struct Verdict {
  bool correct = false;
  bool format_violation = false;
};

/// +1 for a correct verdict, -1 otherwise.
double reward(const Verdict& verdict);

/// A verifiable synthetic task. Responses share one grammar across kinds:
/// free reasoning tokens, a single delimiter, the answer, then end-of-sequence.
class Task {
 public:
  explicit Task(TaskSpec spec);

  const TaskSpec& spec() const { return spec_; }
  const Vocabulary& vocabulary() const { return vocab_; }
  std::size_t prompt_length() const;

  Instance generate(Rng& rng) const;
  /// Instance `index` of the stream fixed by `seed`.
  Instance instance(std::uint64_t seed, std::uint64_t index) const;

  Instance modular_instance(int a, int b) const;
  Instance bracket_instance(std::string_view openers) const;

  Verdict verify(const Instance& instance, std::span<const TokenId> response) const;

  /// delimiter, truth, end-of-sequence
  std::vector<TokenId> gold_response(const Instance& instance) const;

 private:
  TaskSpec spec_;
  Vocabulary vocab_;
};

Vocabulary make_vocabulary(const TaskSpec& spec);

}  // namespace rlvr
