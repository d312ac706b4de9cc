#include "grpolab/rewards.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <numeric>
#include <optional>

#include "json.hpp"

#include "grpolab/binary_io.hpp"
#include "grpolab/rng.hpp"

namespace grpolab {

const char* to_string(RewardKind kind) { return kind == RewardKind::kOutcome ? "outcome" : "process"; }

RewardModelParams RewardModelParams::zeros(RewardKind kind, std::size_t hash_dim) {
  if (hash_dim == 0) throw ConfigError("reward model hash dimension must be positive");
  RewardModelParams rm;
  rm.kind = kind;
  rm.weights.assign(hash_dim, 0.0);
  return rm;
}

namespace {
constexpr std::string_view kRmMagic = "GRPORM\x01\x00";
}

std::string RewardModelParams::serialize() const {
  io::Writer w;
  w.magic(kRmMagic);
  w.u8(static_cast<std::uint8_t>(kind));
  w.u64(iterations);
  w.u8(degenerate ? 1 : 0);
  w.f64s(weights);
  return w.bytes();
}

RewardModelParams RewardModelParams::deserialize(std::string_view bytes) {
  io::Reader r(bytes);
  r.expect_magic(kRmMagic);
  RewardModelParams rm;
  const auto kind = r.u8();
  if (kind > 1) throw DomainError("unknown reward model kind");
  rm.kind = static_cast<RewardKind>(kind);
  rm.iterations = r.u64();
  rm.degenerate = r.u8() != 0;
  rm.weights = r.f64s();
  if (rm.weights.empty()) throw DomainError("reward model without weights");
  return rm;
}

void ReplayBuffer::add(std::uint64_t iteration, std::vector<RewardRecord> records) {
  parts_.emplace_back(iteration, std::move(records));
  if (capacity_ == 0) return;
  while (parts_.size() > 1 && size() > capacity_) parts_.erase(parts_.begin());
}

std::size_t ReplayBuffer::size() const {
  std::size_t n = 0;
  for (const auto& [_, recs] : parts_) n += recs.size();
  return n;
}

const RewardRecord& ReplayBuffer::at(std::size_t flat_index) const {
  for (const auto& [_, recs] : parts_) {
    if (flat_index < recs.size()) return recs[flat_index];
    flat_index -= recs.size();
  }
  throw DomainError("replay index out of range");
}

std::vector<RewardRecord> ReplayBuffer::sample(std::size_t n, std::uint64_t seed) const {
  const std::size_t total = size();
  n = std::min(n, total);
  std::vector<std::size_t> idx(total);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(total - i));
    std::swap(idx[i], idx[j]);
  }
  std::vector<RewardRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(at(idx[i]));
  return out;
}

double rule_reward(const Verdict& verdict) { return verdict.answer_correct ? 1.0 : 0.0; }

std::vector<double> rule_step_rewards(const Verdict& verdict) {
  if (verdict.step_correct.empty()) return {rule_reward(verdict)};
  std::vector<double> r;
  r.reserve(verdict.step_correct.size());
  for (bool ok : verdict.step_correct) r.push_back(ok ? 1.0 : 0.0);
  return r;
}

std::vector<std::size_t> process_step_ends(const TokenSeq& seq) {
  if (!seq.step_ends.empty()) return seq.step_ends;
  if (seq.output.empty()) return {};
  return {seq.output.size() - 1};
}

namespace {

std::size_t hash_ints(std::initializer_list<long long> xs, std::size_t dim) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (long long x : xs) {
    auto u = static_cast<std::uint64_t>(x);
    for (int i = 0; i < 8; ++i) {
      h ^= (u >> (8 * i)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  }
  return static_cast<std::size_t>(mix64(h) % dim);
}

enum FeatureTag : long long { kBias = 1, kStep, kBadStep, kExtraStep, kAnswer, kNoAnswer, kShape, kStepCount, kAnswerStep };

// Step tuples for the first `max_steps` completed steps of `output`.
void step_features(const Vocab& vocab, std::span<const TokenId> question, std::span<const TokenId> output,
                   std::size_t max_steps, std::size_t dim, std::vector<std::size_t>& out,
                   std::optional<long long>* last_value) {
  const auto steps = parse_steps(vocab, output);
  std::optional<long long> carry;
  if (!question.empty() && vocab.is_value(question[0])) carry = question[0];
  const std::size_t n = std::min(max_steps, steps.size());
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t op_pos = 2 * j + 1;
    if (op_pos >= question.size()) {
      out.push_back(hash_ints({kExtraStep}, dim));
    } else if (!steps[j]) {
      out.push_back(hash_ints({kBadStep, static_cast<long long>(j)}, dim));
    } else {
      const long long op = question[op_pos];
      const long long operand = op_pos + 1 < question.size() ? question[op_pos + 1] : -1;
      out.push_back(hash_ints({kStep, op, operand, carry.value_or(-1), *steps[j]}, dim));
    }
    carry = steps[j];
  }
  if (last_value) *last_value = carry;
}

}  // namespace

std::vector<std::size_t> outcome_features(const Vocab& vocab, std::span<const TokenId> question,
                                          std::span<const TokenId> output, std::size_t hash_dim) {
  std::vector<std::size_t> f{hash_ints({kBias}, hash_dim)};
  const auto expected_steps = static_cast<long long>(question.size() / 2);
  // The answer is paired with the value reached after the question's last operation, so steps
  // appended beyond it cannot make an answer look consistent.
  std::optional<long long> last;
  step_features(vocab, question, output, static_cast<std::size_t>(expected_steps), hash_dim, f, &last);
  const auto all_steps = parse_steps(vocab, output);
  for (std::size_t j = static_cast<std::size_t>(expected_steps); j < all_steps.size(); ++j) {
    f.push_back(hash_ints({kExtraStep}, hash_dim));
  }
  const auto answer = parse_answer(vocab, output);
  if (answer) {
    // Agreement only: a value-specific pairing would let the model learn a prior over answer values.
    f.push_back(hash_ints({kAnswer, last && *last == *answer ? 1 : 0}, hash_dim));
    // The answer read as the value of the final operation applied to the preceding step.
    if (expected_steps >= 1) {
      const auto d = static_cast<std::size_t>(expected_steps);
      std::optional<long long> before;
      if (d == 1) {
        if (vocab.is_value(question[0])) before = question[0];
      } else if (all_steps.size() >= d - 1) {
        before = all_steps[d - 2];
      }
      f.push_back(hash_ints({kAnswerStep, question[2 * d - 1], question[2 * d], before.value_or(-1), *answer}, hash_dim));
    }
  } else {
    f.push_back(hash_ints({kNoAnswer}, hash_dim));
  }
  const auto emitted = static_cast<long long>(std::count(output.begin(), output.end(), vocab.sep()));
  f.push_back(hash_ints({kStepCount, std::min<long long>(emitted, 16), expected_steps}, hash_dim));
  return f;
}

std::vector<std::size_t> process_features(const Vocab& vocab, std::span<const TokenId> question,
                                          std::span<const TokenId> output, std::size_t steps, std::size_t hash_dim) {
  std::vector<std::size_t> f{hash_ints({kBias}, hash_dim)};
  if (std::find(output.begin(), output.end(), vocab.sep()) == output.end()) {
    // No delimiter: the whole output is scored as a single step.
    f.push_back(hash_ints({kShape, 0}, hash_dim));
    const auto answer = parse_answer(vocab, output);
    f.push_back(answer ? hash_ints({kAnswer, -1, *answer}, hash_dim) : hash_ints({kNoAnswer}, hash_dim));
    return f;
  }
  step_features(vocab, question, output, steps, hash_dim, f, nullptr);
  return f;
}

namespace {

struct Example {
  std::vector<std::size_t> features;
  double label = 0.0;
};

double dot(const std::vector<double>& w, const std::vector<std::size_t>& f) {
  double s = 0.0;
  for (auto i : f) s += w[i];
  return s;
}

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// log(1 + exp(x)) without overflow.
double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double logistic_loss(const std::vector<double>& w, const std::vector<Example>& data, double l2) {
  double loss = 0.0;
  for (const auto& e : data) {
    const double s = dot(w, e.features);
    loss += softplus(s) - e.label * s;
  }
  loss /= static_cast<double>(data.size());
  double reg = 0.0;
  for (double x : w) reg += x * x;
  return loss + 0.5 * l2 * reg;
}

std::vector<Example> make_examples(const Vocab& vocab, RewardKind kind, std::span<const RewardRecord> records,
                                   std::size_t dim) {
  std::vector<Example> data;
  for (const auto& r : records) {
    if (kind == RewardKind::kOutcome) {
      data.push_back({outcome_features(vocab, r.question, r.output, dim), rule_reward(r.verdict)});
    } else {
      const auto labels = rule_step_rewards(r.verdict);
      for (std::size_t j = 0; j < labels.size(); ++j) {
        data.push_back({process_features(vocab, r.question, r.output, j + 1, dim), labels[j]});
      }
    }
  }
  return data;
}

RewardModelParams fit(std::vector<Example> data, RewardModelParams rm, const RmTrainOptions& opts,
                      RmTrainReport* report) {
  if (data.empty()) throw DomainError("reward model training needs at least one record");
  const bool all_same = std::all_of(data.begin(), data.end(), [&](const Example& e) { return e.label == data[0].label; });
  rm.iterations += 1;
  if (all_same) {
    rm.degenerate = true;
    if (report) {
      report->loss = {logistic_loss(rm.weights, data, opts.l2)};
      report->examples = data.size();
      report->accuracy = 0.0;
    }
    return rm;
  }
  rm.degenerate = false;

  auto& w = rm.weights;
  std::vector<double> grad(w.size());
  double loss = logistic_loss(w, data, opts.l2);
  std::vector<double> losses{loss};
  const double n = static_cast<double>(data.size());
  // Diagonal bound on the logistic Hessian; rare features get proportionally larger steps.
  std::vector<double> curvature(w.size(), opts.l2);
  for (const auto& e : data) {
    for (auto i : e.features) curvature[i] += 0.25 / n;
  }
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    double lr = opts.lr;
    for (std::size_t i = 0; i < w.size(); ++i) grad[i] = opts.l2 * w[i];
    for (const auto& e : data) {
      const double g = (sigmoid(dot(w, e.features)) - e.label) / n;
      for (auto i : e.features) grad[i] += g;
    }
    // Backtrack until the step does not increase the loss.
    std::vector<double> trial(w.size());
    double next = loss;
    bool accepted = false;
    for (int halvings = 0; halvings < 30; ++halvings) {
      for (std::size_t i = 0; i < w.size(); ++i) trial[i] = w[i] - lr * grad[i] / std::max(curvature[i], 1e-12);
      next = logistic_loss(trial, data, opts.l2);
      if (next <= loss) {
        accepted = true;
        break;
      }
      lr *= 0.5;
    }
    if (!accepted) break;
    w.swap(trial);
    const double improvement = loss - next;
    loss = next;
    losses.push_back(loss);
    if (improvement < opts.tolerance) break;
  }

  if (report) {
    std::size_t correct = 0;
    for (const auto& e : data) correct += ((dot(w, e.features) > 0.0) == (e.label > 0.5));
    report->loss = std::move(losses);
    report->accuracy = static_cast<double>(correct) / n;
    report->examples = data.size();
  }
  return rm;
}

}  // namespace

RewardModelParams continue_training(const Vocab& vocab, RewardModelParams start, std::span<const RewardRecord> records,
                                    const RmTrainOptions& opts, RmTrainReport* report) {
  auto data = make_examples(vocab, start.kind, records, start.weights.size());
  return fit(std::move(data), std::move(start), opts, report);
}

RewardModelParams train_outcome_rm(const Vocab& vocab, std::span<const RewardRecord> records,
                                   const RmTrainOptions& opts, RmTrainReport* report) {
  return continue_training(vocab, RewardModelParams::zeros(RewardKind::kOutcome), records, opts, report);
}

RewardModelParams train_process_rm(const Vocab& vocab, std::span<const RewardRecord> records,
                                   const RmTrainOptions& opts, RmTrainReport* report) {
  return continue_training(vocab, RewardModelParams::zeros(RewardKind::kProcess), records, opts, report);
}

double score_outcome(const RewardModelParams& rm, const Vocab& vocab, std::span<const TokenId> question,
                     std::span<const TokenId> output) {
  if (rm.kind != RewardKind::kOutcome) throw UsageError("score_outcome needs an outcome reward model");
  return dot(rm.weights, outcome_features(vocab, question, output, rm.weights.size()));
}

std::vector<std::pair<std::size_t, double>> score_process(const RewardModelParams& rm, const Vocab& vocab,
                                                          const TokenSeq& seq) {
  if (rm.kind != RewardKind::kProcess) throw UsageError("score_process needs a process reward model");
  const auto ends = process_step_ends(seq);
  std::vector<std::pair<std::size_t, double>> out;
  out.reserve(ends.size());
  for (std::size_t j = 0; j < ends.size(); ++j) {
    out.emplace_back(ends[j], dot(rm.weights, process_features(vocab, seq.question, seq.output, j + 1,
                                                              rm.weights.size())));
  }
  return out;
}

std::size_t replay_sample_size(std::size_t new_count, std::size_t available, double fraction) {
  if (fraction <= 0.0 || available == 0) return 0;
  if (fraction >= 1.0) return available;
  const auto want = static_cast<std::size_t>(std::llround(static_cast<double>(new_count) * fraction / (1.0 - fraction)));
  return std::min(want, available);
}

RewardModelParams update_rm_with_replay(const Vocab& vocab, const RewardModelParams& rm,
                                        std::vector<RewardRecord> new_records, ReplayBuffer& buffer,
                                        std::uint64_t iteration, const ReplayOptions& opts, ReplayStats* stats) {
  const auto n_hist = replay_sample_size(new_records.size(), buffer.size(), opts.historical_fraction);
  auto batch = buffer.sample(n_hist, derive_seed(opts.seed, 0x4e91, iteration));
  batch.insert(batch.end(), new_records.begin(), new_records.end());
  RewardModelParams next = rm;
  if (!batch.empty()) next = continue_training(vocab, rm, batch, opts.train);
  if (stats) {
    stats->new_records = new_records.size();
    stats->historical_records = n_hist;
  }
  buffer.add(iteration, std::move(new_records));
  if (stats) stats->buffer_size_after = buffer.size();
  return next;
}

std::string export_records(std::span<const RewardRecord> records) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::json j;
    j["question_id"] = r.question_id;
    j["question"] = r.question;
    j["output"] = r.output;
    j["answer_correct"] = r.verdict.answer_correct;
    j["parsed_answer"] = r.verdict.parsed_answer ? nlohmann::json(*r.verdict.parsed_answer) : nlohmann::json(nullptr);
    j["step_correct"] = r.verdict.step_correct;
    j["scores"] = r.scores;
    j["source_iteration"] = r.source_iteration;
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace grpolab
