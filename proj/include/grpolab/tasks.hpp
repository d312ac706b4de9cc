#pragma once

/**
 * Synthetic arithmetic-chain tasks: ((x0 op1 x1) op2 x2 ...) mod p.
 *
 * Question tokens: x0 op1 x1 op2 x2 ...
 * Gold output:     STEP v1 SEP STEP v2 SEP ... ANS v_d EOS
 * where v_j is the running value after the j-th operation.
 */

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "grpolab/policy.hpp"

namespace grpolab {

enum class ArithOp : int { kAdd = 0, kSub = 1, kMul = 2 };

struct TaskConfig {
  int modulus = 7;
  int difficulty = 2;  ///< number of operations (= gold step count)
  std::vector<ArithOp> ops{ArithOp::kAdd, ArithOp::kSub, ArithOp::kMul};
};

struct TaskInstance {
  std::uint64_t id = 0;
  std::vector<TokenId> question;
  std::vector<TokenId> answer;  ///< gold answer rendered as value tokens
  int answer_value = 0;
  std::vector<int> steps;  ///< running value after each operation
  int difficulty = 0;
  int modulus = 0;

  friend bool operator==(const TaskInstance&, const TaskInstance&) = default;
};

struct Verdict {
  bool answer_correct = false;
  std::optional<long long> parsed_answer;
  std::vector<bool> step_correct;  ///< one entry per completed step (per step delimiter)

  friend bool operator==(const Verdict&, const Verdict&) = default;
};

struct EvalReport {
  std::vector<std::size_t> ks;
  std::vector<double> maj;   ///< Maj@K per entry of ks
  std::vector<double> pass;  ///< Pass@K per entry of ks
  double greedy_accuracy = 0.0;
  std::size_t questions = 0;
  /// parsed answers of the max(ks) samples per question
  std::vector<std::vector<std::optional<long long>>> answers;
};

int apply_op(ArithOp op, int a, int b, int modulus);

/// Deterministic for a fixed (seed, n, config). Operands are uniform in [0, modulus).
std::vector<TaskInstance> generate_dataset(const Vocab& vocab, std::uint64_t seed, std::size_t n,
                                           const TaskConfig& config);

/// Decimal rendering of a non-negative integer as value tokens (value_count must be 10 for >1 digit).
std::vector<TokenId> render_value(const Vocab& vocab, long long value);

/// STEP v1 SEP ... ANS answer EOS
std::vector<TokenId> gold_output(const Vocab& vocab, const TaskInstance& task);

/// Never throws on malformed outputs; they simply score false.
Verdict verify(const Vocab& vocab, const TaskInstance& task, std::span<const TokenId> output);

/// Parsed value of the tokens following the first answer marker, if any.
std::optional<long long> parse_answer(const Vocab& vocab, std::span<const TokenId> output);

/// Value of each completed step ("STEP <digits> SEP"); nullopt for malformed steps.
std::vector<std::optional<long long>> parse_steps(const Vocab& vocab, std::span<const TokenId> output);

/**
 * 1 iff gold is the unique most frequent answer. Unparsed answers form their own bucket,
 * which can win the vote but never matches gold. Throws DomainError on an empty list.
 */
int maj_at_k(std::span<const std::optional<long long>> answers, long long gold);

/// 1 iff any verdict has a correct answer. Throws DomainError on an empty list.
int pass_at_k(std::span<const Verdict> verdicts);

/// One JSON object per line: id, question, answer, steps, difficulty, modulus.
std::string export_dataset(const std::vector<TaskInstance>& tasks);
std::vector<TaskInstance> import_dataset(const Vocab& vocab, std::string_view text);

}  // namespace grpolab
