#pragma once

/**
 * Reward functions: the rule reward, linear outcome/process reward models trained on rule
 * labels, and replay-based retraining of a reward model.
 *
 * Reward models score hashed features of (question, output prefix). The features pair each
 * completed step with the question tokens it should have consumed, i.e. the tuple
 * (operator, operand, carried value, emitted value), plus answer/shape indicators for the
 * outcome model. Scores are raw dot products (logits of the fitted logistic model).
 */

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "grpolab/policy.hpp"
#include "grpolab/tasks.hpp"

namespace grpolab {

enum class RewardKind : std::uint8_t { kOutcome = 0, kProcess = 1 };

const char* to_string(RewardKind kind);

inline constexpr std::size_t kDefaultRewardHashDim = 4096;

struct RewardModelParams {
  RewardKind kind = RewardKind::kOutcome;
  std::vector<double> weights;
  std::uint64_t iterations = 0;  ///< number of (re)training rounds applied
  bool degenerate = false;       ///< set when the last training set had a single label

  static RewardModelParams zeros(RewardKind kind, std::size_t hash_dim = kDefaultRewardHashDim);

  std::string serialize() const;
  static RewardModelParams deserialize(std::string_view bytes);

  friend bool operator==(const RewardModelParams&, const RewardModelParams&) = default;
};

struct RewardRecord {
  std::uint64_t question_id = 0;
  std::vector<TokenId> question;
  std::vector<TokenId> output;
  Verdict verdict;
  std::vector<double> scores;  ///< one per output (outcome) or per step end (process)
  std::uint64_t source_iteration = 0;

  friend bool operator==(const RewardRecord&, const RewardRecord&) = default;
};

/// Historical reward-model training records, grouped by the RL iteration that produced them.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 0) : capacity_(capacity) {}

  /// Appends a partition. With a nonzero capacity the oldest partitions are evicted first.
  void add(std::uint64_t iteration, std::vector<RewardRecord> records);

  std::size_t size() const;
  std::size_t partitions() const { return parts_.size(); }
  std::size_t capacity() const { return capacity_; }
  const RewardRecord& at(std::size_t flat_index) const;
  const std::vector<std::pair<std::uint64_t, std::vector<RewardRecord>>>& parts() const { return parts_; }

  /// Uniform sample of n distinct records (n is clamped to size()).
  std::vector<RewardRecord> sample(std::size_t n, std::uint64_t seed) const;

 private:
  std::size_t capacity_;
  std::vector<std::pair<std::uint64_t, std::vector<RewardRecord>>> parts_;
};

struct RmTrainOptions {
  double lr = 0.5;
  std::size_t epochs = 200;
  double l2 = 1e-4;
  double tolerance = 1e-9;  ///< stop once an epoch improves the loss by less than this
};

struct RmTrainReport {
  std::vector<double> loss;  ///< training loss before the first epoch and after each accepted epoch
  double accuracy = 0.0;
  std::size_t examples = 0;
};

struct ReplayOptions {
  RmTrainOptions train;
  double historical_fraction = 0.1;  ///< share of each retraining batch drawn from history
  std::uint64_t seed = 0;
};

struct ReplayStats {
  std::size_t new_records = 0;
  std::size_t historical_records = 0;
  std::size_t buffer_size_after = 0;
};

/// 1.0 if the answer is correct, else 0.0.
double rule_reward(const Verdict& verdict);

/// Per-step rule rewards: 1.0 for each correct step. Outputs without steps get one entry (answer_correct).
std::vector<double> rule_step_rewards(const Verdict& verdict);

/**
 * Step end positions used for process rewards: the delimiter positions, or the last token when
 * the output has no delimiter.
 */
std::vector<std::size_t> process_step_ends(const TokenSeq& seq);

/// Sparse feature indices (with multiplicity) for the whole output (outcome) or a step prefix.
std::vector<std::size_t> outcome_features(const Vocab& vocab, std::span<const TokenId> question,
                                          std::span<const TokenId> output, std::size_t hash_dim);
std::vector<std::size_t> process_features(const Vocab& vocab, std::span<const TokenId> question,
                                          std::span<const TokenId> output, std::size_t steps, std::size_t hash_dim);

/**
 * Logistic fit of the rule labels in `records`. Training is full-batch gradient descent with
 * step halving, so the training loss never increases across accepted epochs.
 * A single-label training set yields zero weights with `degenerate` set.
 */
RewardModelParams train_outcome_rm(const Vocab& vocab, std::span<const RewardRecord> records,
                                   const RmTrainOptions& opts, RmTrainReport* report = nullptr);
RewardModelParams train_process_rm(const Vocab& vocab, std::span<const RewardRecord> records,
                                   const RmTrainOptions& opts, RmTrainReport* report = nullptr);

/// Continues training `start` (either kind) on `records`.
RewardModelParams continue_training(const Vocab& vocab, RewardModelParams start, std::span<const RewardRecord> records,
                                    const RmTrainOptions& opts, RmTrainReport* report = nullptr);

/// Logit of the predicted probability that the output is correct.
double score_outcome(const RewardModelParams& rm, const Vocab& vocab, std::span<const TokenId> question,
                     std::span<const TokenId> output);

/// One (step end index, step logit) pair per step (see process_step_ends).
std::vector<std::pair<std::size_t, double>> score_process(const RewardModelParams& rm, const Vocab& vocab,
                                                          const TokenSeq& seq);

/**
 * Retrains `rm` on new_records plus a uniform sample of historical records sized so history forms
 * `historical_fraction` of the batch, then appends new_records to the buffer as one partition.
 */
RewardModelParams update_rm_with_replay(const Vocab& vocab, const RewardModelParams& rm,
                                        std::vector<RewardRecord> new_records, ReplayBuffer& buffer,
                                        std::uint64_t iteration, const ReplayOptions& opts,
                                        ReplayStats* stats = nullptr);

/// Number of historical records mixed into a batch with `new_count` fresh records.
std::size_t replay_sample_size(std::size_t new_count, std::size_t available, double fraction);

std::string export_records(std::span<const RewardRecord> records);

}  // namespace grpolab
