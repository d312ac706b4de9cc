#include "grpolab/tasks.hpp"

#include <algorithm>
#include <map>
#include <sstream>

#include "json.hpp"

#include "grpolab/rng.hpp"

namespace grpolab {

int apply_op(ArithOp op, int a, int b, int modulus) {
  long long r = 0;
  switch (op) {
    case ArithOp::kAdd: r = static_cast<long long>(a) + b; break;
    case ArithOp::kSub: r = static_cast<long long>(a) - b; break;
    case ArithOp::kMul: r = static_cast<long long>(a) * b; break;
  }
  r %= modulus;
  if (r < 0) r += modulus;
  return static_cast<int>(r);
}

std::vector<TokenId> render_value(const Vocab& vocab, long long value) {
  if (value < 0) throw DomainError("cannot render negative value");
  if (value < vocab.value_count) return {static_cast<TokenId>(value)};
  if (vocab.value_count != 10) throw DomainError("multi-digit values need a decimal vocab");
  std::vector<TokenId> digits;
  while (value > 0) {
    digits.push_back(static_cast<TokenId>(value % 10));
    value /= 10;
  }
  std::reverse(digits.begin(), digits.end());
  return digits;
}

std::vector<TaskInstance> generate_dataset(const Vocab& vocab, std::uint64_t seed, std::size_t n,
                                           const TaskConfig& config) {
  if (config.difficulty < 1) throw ConfigError("difficulty must be at least 1");
  if (n < 1) throw ConfigError("dataset size must be at least 1");
  if (config.modulus < 2) throw ConfigError("modulus must be at least 2");
  if (config.modulus > vocab.value_count) throw ConfigError("modulus exceeds the number of value tokens");
  if (config.ops.empty()) throw ConfigError("at least one operator is required");
  for (auto op : config.ops) {
    if (static_cast<int>(op) >= vocab.op_count) throw ConfigError("operator not present in vocab");
  }

  std::vector<TaskInstance> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, 0x7a5c, i));
    TaskInstance t;
    t.id = i;
    t.difficulty = config.difficulty;
    t.modulus = config.modulus;
    int value = static_cast<int>(rng.below(static_cast<std::uint64_t>(config.modulus)));
    t.question.push_back(value);
    for (int j = 0; j < config.difficulty; ++j) {
      const ArithOp op = config.ops[rng.below(config.ops.size())];
      const int operand = static_cast<int>(rng.below(static_cast<std::uint64_t>(config.modulus)));
      t.question.push_back(vocab.op(static_cast<int>(op)));
      t.question.push_back(operand);
      value = apply_op(op, value, operand, config.modulus);
      t.steps.push_back(value);
    }
    t.answer_value = value;
    t.answer = render_value(vocab, value);
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<TokenId> gold_output(const Vocab& vocab, const TaskInstance& task) {
  std::vector<TokenId> out;
  for (int v : task.steps) {
    out.push_back(vocab.step());
    for (auto d : render_value(vocab, v)) out.push_back(d);
    out.push_back(vocab.sep());
  }
  out.push_back(vocab.ans());
  out.insert(out.end(), task.answer.begin(), task.answer.end());
  out.push_back(vocab.eos());
  return out;
}

namespace {

// Digits in [begin, end) as a base-value_count integer; nullopt if empty or non-digit present.
std::optional<long long> parse_digits(const Vocab& vocab, std::span<const TokenId> toks) {
  if (toks.empty() || toks.size() > 12) return std::nullopt;
  long long v = 0;
  for (TokenId t : toks) {
    if (!vocab.is_value(t)) return std::nullopt;
    v = v * vocab.value_count + t;
  }
  return v;
}

}  // namespace

std::optional<long long> parse_answer(const Vocab& vocab, std::span<const TokenId> output) {
  const auto it = std::find(output.begin(), output.end(), vocab.ans());
  if (it == output.end()) return std::nullopt;
  auto end = it + 1;
  while (end != output.end() && vocab.is_value(*end)) ++end;
  // The answer must be terminated by end-of-sequence; a truncated or garbled tail is unparsed.
  if (end == output.end() || *end != vocab.eos()) return std::nullopt;
  return parse_digits(vocab, std::span<const TokenId>(it + 1, end));
}

std::vector<std::optional<long long>> parse_steps(const Vocab& vocab, std::span<const TokenId> output) {
  std::vector<std::optional<long long>> steps;
  std::size_t begin = 0;
  for (std::size_t i = 0; i < output.size(); ++i) {
    if (output[i] != vocab.sep()) continue;
    const auto seg = output.subspan(begin, i - begin);
    if (!seg.empty() && seg[0] == vocab.step()) {
      steps.push_back(parse_digits(vocab, seg.subspan(1)));
    } else {
      steps.push_back(std::nullopt);
    }
    begin = i + 1;
  }
  return steps;
}

Verdict verify(const Vocab& vocab, const TaskInstance& task, std::span<const TokenId> output) {
  Verdict v;
  v.parsed_answer = parse_answer(vocab, output);
  v.answer_correct = v.parsed_answer.has_value() && *v.parsed_answer == task.answer_value;
  const auto steps = parse_steps(vocab, output);
  v.step_correct.reserve(steps.size());
  for (std::size_t j = 0; j < steps.size(); ++j) {
    v.step_correct.push_back(j < task.steps.size() && steps[j].has_value() && *steps[j] == task.steps[j]);
  }
  return v;
}

int maj_at_k(std::span<const std::optional<long long>> answers, long long gold) {
  if (answers.empty()) throw DomainError("maj_at_k needs at least one answer");
  std::map<std::optional<long long>, std::size_t> counts;
  for (const auto& a : answers) ++counts[a];
  std::size_t best = 0;
  for (const auto& [_, c] : counts) best = std::max(best, c);
  std::size_t modes = 0;
  for (const auto& [_, c] : counts) modes += (c == best);
  const auto it = counts.find(std::optional<long long>(gold));
  return (modes == 1 && it != counts.end() && it->second == best) ? 1 : 0;
}

int pass_at_k(std::span<const Verdict> verdicts) {
  if (verdicts.empty()) throw DomainError("pass_at_k needs at least one verdict");
  return std::any_of(verdicts.begin(), verdicts.end(), [](const Verdict& v) { return v.answer_correct; }) ? 1 : 0;
}

std::string export_dataset(const std::vector<TaskInstance>& tasks) {
  std::string out;
  for (const auto& t : tasks) {
    nlohmann::json j;
    j["id"] = t.id;
    j["question"] = t.question;
    j["answer"] = t.answer_value;
    j["steps"] = t.steps;
    j["difficulty"] = t.difficulty;
    j["modulus"] = t.modulus;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<TaskInstance> import_dataset(const Vocab& vocab, std::string_view text) {
  std::vector<TaskInstance> tasks;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TaskInstance t;
      t.id = j.at("id").get<std::uint64_t>();
      t.question = j.at("question").get<std::vector<TokenId>>();
      t.answer_value = j.at("answer").get<int>();
      t.steps = j.at("steps").get<std::vector<int>>();
      t.difficulty = j.at("difficulty").get<int>();
      t.modulus = j.at("modulus").get<int>();
      t.answer = render_value(vocab, t.answer_value);
      for (TokenId tok : t.question) {
        if (!vocab.contains(tok)) throw DomainError("token outside vocab");
      }
      if (t.steps.empty()) throw DomainError("record without steps");
      tasks.push_back(std::move(t));
    } catch (const std::exception& e) {
      throw DomainError("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return tasks;
}

}  // namespace grpolab
