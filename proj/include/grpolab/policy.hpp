#pragma once

/**
 * Linear-softmax autoregressive policy over a small token vocabulary.
 *
 * The next-token distribution at output position t is softmax(W * phi_t), where phi_t is a
 * sparse 0/1 feature vector made of:
 *   - one one-hot block per slot of the last `window` tokens of question + output prefix
 *     (window * |V| columns), and
 *   - a question block of |V|^3 columns holding a single active index that encodes
 *     (operator of the current step, operand of the current step, carried value).
 *
 * "Current step" is the number of step delimiters already emitted. "Carried value" is the last
 * value token in the output prefix, or the first question token when no value was emitted yet.
 * Once the question's operators are exhausted, the operator/operand slots hold the answer marker.
 *
 * All gradients are analytic: d log pi(o_t) / dW[v, f] = (1[v == o_t] - pi(v)) * phi_t[f].
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "grpolab/common.hpp"

namespace grpolab {

/**
 * Token ids are laid out as: values [0, value_count), operators [value_count, value_count +
 * op_count), then step, step delimiter, answer marker and end-of-sequence.
 */
struct Vocab {
  int value_count = 10;
  int op_count = 3;

  Vocab() = default;
  Vocab(int values, int ops);

  /// Digits 0-9, operators + - *, STEP, SEP, ANS, EOS.
  static Vocab arithmetic() { return Vocab(10, 3); }

  int size() const { return value_count + op_count + 4; }
  TokenId op(int i) const { return value_count + i; }
  TokenId step() const { return value_count + op_count; }
  TokenId sep() const { return value_count + op_count + 1; }
  TokenId ans() const { return value_count + op_count + 2; }
  TokenId eos() const { return value_count + op_count + 3; }

  bool contains(TokenId t) const { return t >= 0 && t < size(); }
  bool is_value(TokenId t) const { return t >= 0 && t < value_count; }
  bool is_op(TokenId t) const { return t >= value_count && t < value_count + op_count; }

  std::string name(TokenId t) const;
  friend bool operator==(const Vocab&, const Vocab&) = default;
};

struct TokenSeq {
  std::vector<TokenId> question;
  std::vector<TokenId> output;
  std::vector<std::size_t> step_ends;  ///< positions of step delimiters in `output`

  /// Builds a sequence and derives step_ends from the delimiter positions.
  static TokenSeq make(const Vocab& vocab, std::vector<TokenId> question, std::vector<TokenId> output);

  std::size_t size() const { return output.size(); }
  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

/// Dense array with the shape of the policy weights (|V| rows, feature_dim columns).
/// Storage is feature-major so the |V| logits touched by one active feature are contiguous.
class ParamArray {
 public:
  ParamArray() = default;
  ParamArray(std::size_t vocab, std::size_t features) : vocab_(vocab), features_(features), data_(vocab * features, 0.0) {}

  std::size_t vocab() const { return vocab_; }
  std::size_t features() const { return features_; }
  std::size_t size() const { return data_.size(); }

  double& at(std::size_t token, std::size_t feature) { return data_[feature * vocab_ + token]; }
  double at(std::size_t token, std::size_t feature) const { return data_[feature * vocab_ + token]; }

  std::span<double> column(std::size_t feature) { return {data_.data() + feature * vocab_, vocab_}; }
  std::span<const double> column(std::size_t feature) const { return {data_.data() + feature * vocab_, vocab_}; }

  std::vector<double>& flat() { return data_; }
  const std::vector<double>& flat() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  bool all_finite() const;
  bool same_shape(const ParamArray& o) const { return vocab_ == o.vocab_ && features_ == o.features_; }

  ParamArray& operator+=(const ParamArray& o);
  ParamArray& operator*=(double s);
  /// this += s * o
  void axpy(double s, const ParamArray& o);
  double dot(const ParamArray& o) const;
  double norm() const { return std::sqrt(dot(*this)); }

  friend bool operator==(const ParamArray&, const ParamArray&) = default;

 private:
  std::size_t vocab_ = 0;
  std::size_t features_ = 0;
  std::vector<double> data_;
};

struct FeatureMap {
  int window = 4;
  int vocab_size = 0;

  std::size_t window_width() const { return static_cast<std::size_t>(window) * vocab_size; }
  std::size_t question_width() const {
    const auto v = static_cast<std::size_t>(vocab_size);
    return v * v * v;
  }
  std::size_t dim() const { return window_width() + question_width(); }

  /// Active feature indices for predicting output[prefix.size()]. Every active feature has value 1.
  void active(const Vocab& vocab, std::span<const TokenId> question, std::span<const TokenId> prefix,
              std::vector<std::size_t>& out) const;

  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;
};

class PolicyParams {
 public:
  PolicyParams() = default;

  /// All-zero weights: the uniform policy.
  static PolicyParams zeros(const Vocab& vocab, int window = 4);

  const Vocab& vocab() const { return vocab_; }
  const FeatureMap& feature_map() const { return fmap_; }
  const ParamArray& weights() const { return w_; }
  ParamArray& weights() { return w_; }

  /// Unnormalized next-token scores given the question and output prefix.
  void logits(std::span<const TokenId> question, std::span<const TokenId> prefix, std::vector<double>& out) const;

  std::string serialize() const;
  static PolicyParams deserialize(std::string_view bytes);

  friend bool operator==(const PolicyParams&, const PolicyParams&) = default;

 private:
  Vocab vocab_;
  FeatureMap fmap_;
  ParamArray w_;
};

/// Immutable shared snapshot of a policy (reference, old and SFT policies).
class FrozenPolicy {
 public:
  FrozenPolicy() = default;
  explicit FrozenPolicy(std::shared_ptr<const PolicyParams> p) : p_(std::move(p)) {}

  const PolicyParams& operator*() const { return *p_; }
  const PolicyParams* operator->() const { return p_.get(); }
  const PolicyParams& get() const { return *p_; }
  explicit operator bool() const { return static_cast<bool>(p_); }

  friend bool operator==(const FrozenPolicy& a, const FrozenPolicy& b) {
    if (a.p_ == b.p_) return true;
    if (!a.p_ || !b.p_) return false;
    return *a.p_ == *b.p_;
  }

 private:
  std::shared_ptr<const PolicyParams> p_;
};

/// Deep copy into an immutable snapshot.
FrozenPolicy freeze(const PolicyParams& params);

/// In-place log-softmax. Shared by sampling and scoring so recorded log-probs match exactly.
void log_softmax(std::span<const double> logits, std::span<double> out);

/// log pi(o_t | q, o_<t) for every output position.
std::vector<double> logprob(const PolicyParams& params, const TokenSeq& seq);

/// d log pi(o_t | q, o_<t) / dW as a dense array.
ParamArray grad_logprob(const PolicyParams& params, const TokenSeq& seq, std::size_t t);

/**
 * grad += sum_t coeff[t] * d log pi(o_t) / dW, touching only active columns.
 * coeff.size() must equal seq.size(). Returns the per-token log-probs as a by-product.
 */
void accumulate_grad_logprob(const PolicyParams& params, const TokenSeq& seq, std::span<const double> coeff,
                             ParamArray& grad, std::vector<double>* logprobs_out = nullptr);

/// Who produced a SampledGroup. Used to audit each method's data source.
enum class SamplerRole : std::uint8_t { kLive = 0, kOld = 1, kSft = 2, kReference = 3, kEval = 4 };

const char* to_string(SamplerRole role);

struct SampledGroup {
  std::vector<TokenId> question;
  std::vector<TokenSeq> outputs;
  std::vector<std::vector<double>> logprobs;  ///< untruncated log-probs under the sampling policy
  SamplerRole source = SamplerRole::kLive;

  std::size_t size() const { return outputs.size(); }
};

struct SamplingOptions {
  std::size_t group_size = 8;
  std::size_t max_len = 64;
  double temperature = 1.0;  ///< <= kGreedyTemperature means argmax decoding
  double top_p = 1.0;
};

inline constexpr double kGreedyTemperature = 1e-6;

/**
 * Draws group_size independent ancestral samples. Generation stops at end-of-sequence or
 * max_len. Temperature and top-p shape the draw only; recorded log-probs are always those
 * of the untempered, untruncated policy.
 */
SampledGroup sample_group(const PolicyParams& params, std::span<const TokenId> question, const SamplingOptions& opts,
                          std::uint64_t seed, SamplerRole source = SamplerRole::kLive);

/// Greedy decode of a single output.
TokenSeq greedy_decode(const PolicyParams& params, std::span<const TokenId> question, std::size_t max_len);

}  // namespace grpolab
