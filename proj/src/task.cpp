#include "rlvr/task.hpp"

#include <algorithm>

namespace rlvr {

namespace {

// Free tokens usable before the delimiter, in vocabulary order.
constexpr const char* kReasoningWords[] = {"so",   "therefore", "but",  "however", "wait", "check",
                                           "the",  "step",      "next", "also",    "first", "note"};
constexpr int kMaxReasoningTokens = static_cast<int>(std::size(kReasoningWords));

void validate(const TaskSpec& spec) {
  require(spec.max_response_length >= 3, "max_response_length must be at least 3");
  require(spec.reasoning_tokens >= 0 && spec.reasoning_tokens <= kMaxReasoningTokens,
          "reasoning_tokens must lie in [0, " + std::to_string(kMaxReasoningTokens) + "]");
  if (spec.kind == TaskKind::kModularAddition) {
    require(spec.modulus >= 1, "modulus must be positive");
  } else {
    require(spec.depth >= 1, "bracket depth must be positive");
    require(spec.max_response_length >= spec.depth + 2,
            "max_response_length must fit the delimiter, depth closers and end-of-sequence");
  }
}

}  // namespace

std::string to_string(TaskKind kind) {
  return kind == TaskKind::kModularAddition ? "modular_addition" : "bracket_completion";
}

TaskKind parse_task_kind(const std::string& name) {
  if (name == "modular_addition") return TaskKind::kModularAddition;
  if (name == "bracket_completion") return TaskKind::kBracketCompletion;
  throw ContractViolation("unknown task kind '" + name + "'");
}

double reward(const Verdict& verdict) { return verdict.correct ? 1.0 : -1.0; }

Vocabulary make_vocabulary(const TaskSpec& spec) {
  validate(spec);
  std::vector<Vocabulary::Entry> entries;
  if (spec.kind == TaskKind::kModularAddition) {
    for (int v = 0; v < spec.modulus; ++v)
      entries.push_back({std::to_string(v), TokenRole::kPrompt | TokenRole::kAnswer});
    entries.push_back({"+", static_cast<unsigned>(TokenRole::kPrompt)});
    entries.push_back({"<mod" + std::to_string(spec.modulus) + ">", static_cast<unsigned>(TokenRole::kPrompt)});
  } else {
    entries.push_back({"(", static_cast<unsigned>(TokenRole::kPrompt)});
    entries.push_back({"[", static_cast<unsigned>(TokenRole::kPrompt)});
    entries.push_back({")", static_cast<unsigned>(TokenRole::kAnswer)});
    entries.push_back({"]", static_cast<unsigned>(TokenRole::kAnswer)});
  }
  entries.push_back({"<ans>", static_cast<unsigned>(TokenRole::kDelimiter)});
  entries.push_back({"<eos>", static_cast<unsigned>(TokenRole::kEos)});
  for (int i = 0; i < spec.reasoning_tokens; ++i)
    entries.push_back({kReasoningWords[i], static_cast<unsigned>(TokenRole::kReasoning)});
  return Vocabulary(std::move(entries));
}

Task::Task(TaskSpec spec) : spec_(spec), vocab_(make_vocabulary(spec)) {}

std::size_t Task::prompt_length() const {
  return spec_.kind == TaskKind::kModularAddition ? 4 : static_cast<std::size_t>(spec_.depth);
}

Instance Task::modular_instance(int a, int b) const {
  require(spec_.kind == TaskKind::kModularAddition, "not a modular-addition task");
  require(a >= 0 && a < spec_.modulus && b >= 0 && b < spec_.modulus, "operand out of range");
  Instance inst;
  inst.prompt = {static_cast<TokenId>(a), vocab_.at("+"), static_cast<TokenId>(b),
                 vocab_.at("<mod" + std::to_string(spec_.modulus) + ">")};
  inst.truth = {static_cast<TokenId>((a + b) % spec_.modulus)};
  return inst;
}

Instance Task::bracket_instance(std::string_view openers) const {
  require(spec_.kind == TaskKind::kBracketCompletion, "not a bracket-completion task");
  require(openers.size() == static_cast<std::size_t>(spec_.depth), "prefix length must equal depth");
  Instance inst;
  for (char c : openers) {
    require(c == '(' || c == '[', "bracket prefix may only contain '(' and '['");
    inst.prompt.push_back(vocab_.at(std::string(1, c)));
  }
  for (auto it = openers.rbegin(); it != openers.rend(); ++it)
    inst.truth.push_back(vocab_.at(*it == '(' ? ")" : "]"));
  return inst;
}

Instance Task::generate(Rng& rng) const {
  if (spec_.kind == TaskKind::kModularAddition) {
    const auto m = static_cast<std::uint64_t>(spec_.modulus);
    const int a = static_cast<int>(static_cast<std::uint64_t>(uniform01(rng) * m) % m);
    const int b = static_cast<int>(static_cast<std::uint64_t>(uniform01(rng) * m) % m);
    return modular_instance(a, b);
  }
  std::string openers;
  for (int i = 0; i < spec_.depth; ++i) openers.push_back(uniform01(rng) < 0.5 ? '(' : '[');
  return bracket_instance(openers);
}

Instance Task::instance(std::uint64_t seed, std::uint64_t index) const {
  Rng rng = substream(seed, {0x696e7374ULL, index});
  Instance inst = generate(rng);
  inst.id = index;
  return inst;
}

Verdict Task::verify(const Instance& instance, std::span<const TokenId> response) const {
  // the sequence ends at the first end-of-sequence token, if any
  auto end = std::find(response.begin(), response.end(), vocab_.eos());
  std::span<const TokenId> body(response.begin(), end);

  const auto delimiters = std::count(body.begin(), body.end(), vocab_.delimiter());
  Verdict v;
  if (delimiters != 1) {
    v.format_violation = true;
    return v;
  }
  auto delim = std::find(body.begin(), body.end(), vocab_.delimiter());
  std::span<const TokenId> answer(delim + 1, body.end());
  v.correct = std::equal(answer.begin(), answer.end(), instance.truth.begin(), instance.truth.end());
  return v;
}

std::vector<TokenId> Task::gold_response(const Instance& instance) const {
  std::vector<TokenId> out{vocab_.delimiter()};
  out.insert(out.end(), instance.truth.begin(), instance.truth.end());
  out.push_back(vocab_.eos());
  return out;
}

}  // namespace rlvr
