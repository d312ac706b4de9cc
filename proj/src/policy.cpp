#include "grpolab/policy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "grpolab/binary_io.hpp"
#include "grpolab/rng.hpp"

namespace grpolab {

Vocab::Vocab(int values, int ops) : value_count(values), op_count(ops) {
  if (values < 1 || ops < 0) throw ConfigError("vocab needs at least one value token and a non-negative operator count");
}

std::string Vocab::name(TokenId t) const {
  if (is_value(t)) return std::to_string(t);
  if (is_op(t)) {
    static const char* kOps[] = {"+", "-", "*"};
    const int i = t - value_count;
    return i < 3 ? kOps[i] : "op" + std::to_string(i);
  }
  if (t == step()) return "STEP";
  if (t == sep()) return "SEP";
  if (t == ans()) return "ANS";
  if (t == eos()) return "EOS";
  return "<" + std::to_string(t) + ">";
}

TokenSeq TokenSeq::make(const Vocab& vocab, std::vector<TokenId> question, std::vector<TokenId> output) {
  TokenSeq s{std::move(question), std::move(output), {}};
  for (std::size_t i = 0; i < s.output.size(); ++i) {
    if (s.output[i] == vocab.sep()) s.step_ends.push_back(i);
  }
  return s;
}

bool ParamArray::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

ParamArray& ParamArray::operator+=(const ParamArray& o) {
  axpy(1.0, o);
  return *this;
}

ParamArray& ParamArray::operator*=(double s) {
  for (auto& x : data_) x *= s;
  return *this;
}

void ParamArray::axpy(double s, const ParamArray& o) {
  if (!same_shape(o)) throw UsageError("parameter arrays differ in shape");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * o.data_[i];
}

double ParamArray::dot(const ParamArray& o) const {
  if (!same_shape(o)) throw UsageError("parameter arrays differ in shape");
  double acc = 0.0;
  for (std::size_t i = 0; i < data_.size(); ++i) acc += data_[i] * o.data_[i];
  return acc;
}

void FeatureMap::active(const Vocab& vocab, std::span<const TokenId> question, std::span<const TokenId> prefix,
                        std::vector<std::size_t>& out) const {
  out.clear();
  const auto v = static_cast<std::size_t>(vocab_size);
  // The window slides over question + output prefix.
  for (int slot = 0; slot < window; ++slot) {
    const auto s = static_cast<std::size_t>(slot);
    TokenId tok;
    if (s < prefix.size()) {
      tok = prefix[prefix.size() - 1 - s];
    } else if (s - prefix.size() < question.size()) {
      tok = question[question.size() - 1 - (s - prefix.size())];
    } else {
      break;
    }
    out.push_back(s * v + static_cast<std::size_t>(tok));
  }

  std::size_t cursor = 0;
  TokenId carry = question.empty() ? vocab.ans() : question[0];
  for (TokenId tok : prefix) {
    if (tok == vocab.sep()) ++cursor;
    if (vocab.is_value(tok)) carry = tok;
  }
  TokenId op = vocab.ans();
  TokenId operand = vocab.ans();
  if (2 * cursor + 1 < question.size()) {
    op = question[2 * cursor + 1];
    operand = 2 * cursor + 2 < question.size() ? question[2 * cursor + 2] : vocab.ans();
  }
  out.push_back(window_width() + (static_cast<std::size_t>(op) * v + static_cast<std::size_t>(operand)) * v +
                static_cast<std::size_t>(carry));
}

PolicyParams PolicyParams::zeros(const Vocab& vocab, int window) {
  if (window < 1) throw ConfigError("context window must be positive");
  PolicyParams p;
  p.vocab_ = vocab;
  p.fmap_ = FeatureMap{window, vocab.size()};
  p.w_ = ParamArray(static_cast<std::size_t>(vocab.size()), p.fmap_.dim());
  return p;
}

void PolicyParams::logits(std::span<const TokenId> question, std::span<const TokenId> prefix,
                          std::vector<double>& out) const {
  thread_local std::vector<std::size_t> feats;
  fmap_.active(vocab_, question, prefix, feats);
  out.assign(static_cast<std::size_t>(vocab_.size()), 0.0);
  for (auto f : feats) {
    const auto col = w_.column(f);
    for (std::size_t v = 0; v < out.size(); ++v) out[v] += col[v];
  }
}

namespace {
constexpr std::string_view kPolicyMagic = "GRPOPOL\x01";
constexpr std::uint64_t kPolicyVersion = 1;
}  // namespace

std::string PolicyParams::serialize() const {
  io::Writer w;
  w.magic(kPolicyMagic);
  w.u64(kPolicyVersion);
  w.i64(vocab_.value_count);
  w.i64(vocab_.op_count);
  w.i64(fmap_.window);
  w.u64(w_.vocab());
  w.u64(w_.features());
  w.f64s(w_.flat());
  return w.bytes();
}

PolicyParams PolicyParams::deserialize(std::string_view bytes) {
  io::Reader r(bytes);
  r.expect_magic(kPolicyMagic);
  if (r.u64() != kPolicyVersion) throw DomainError("unsupported policy checkpoint version");
  const auto values = static_cast<int>(r.i64());
  const auto ops = static_cast<int>(r.i64());
  const auto window = static_cast<int>(r.i64());
  PolicyParams p = zeros(Vocab(values, ops), window);
  const auto rows = r.u64();
  const auto cols = r.u64();
  if (rows != p.w_.vocab() || cols != p.w_.features()) throw DomainError("policy checkpoint shape mismatch");
  auto data = r.f64s();
  if (data.size() != p.w_.size()) throw DomainError("policy checkpoint size mismatch");
  p.w_.flat() = std::move(data);
  return p;
}

FrozenPolicy freeze(const PolicyParams& params) { return FrozenPolicy(std::make_shared<const PolicyParams>(params)); }

void log_softmax(std::span<const double> logits, std::span<double> out) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double x : logits) z += std::exp(x - m);
  const double lz = m + std::log(z);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
}

namespace {

void check_tokens(const Vocab& vocab, const TokenSeq& seq) {
  for (TokenId t : seq.question) {
    if (!vocab.contains(t)) throw DomainError("question token " + std::to_string(t) + " outside vocab");
  }
  for (TokenId t : seq.output) {
    if (!vocab.contains(t)) throw DomainError("output token " + std::to_string(t) + " outside vocab");
  }
}

}  // namespace

std::vector<double> logprob(const PolicyParams& params, const TokenSeq& seq) {
  check_tokens(params.vocab(), seq);
  std::vector<double> out(seq.size());
  std::vector<double> logits;
  std::vector<double> lp(static_cast<std::size_t>(params.vocab().size()));
  const std::span<const TokenId> o(seq.output);
  for (std::size_t t = 0; t < seq.size(); ++t) {
    params.logits(seq.question, o.first(t), logits);
    log_softmax(logits, lp);
    out[t] = lp[static_cast<std::size_t>(seq.output[t])];
  }
  return out;
}

void accumulate_grad_logprob(const PolicyParams& params, const TokenSeq& seq, std::span<const double> coeff,
                             ParamArray& grad, std::vector<double>* logprobs_out) {
  if (coeff.size() != seq.size()) throw UsageError("coefficient count does not match output length");
  if (!grad.same_shape(params.weights())) throw UsageError("gradient array shape does not match policy");
  check_tokens(params.vocab(), seq);
  const auto nv = static_cast<std::size_t>(params.vocab().size());
  std::vector<double> logits;
  std::vector<double> lp(nv);
  std::vector<std::size_t> feats;
  if (logprobs_out) logprobs_out->assign(seq.size(), 0.0);
  const std::span<const TokenId> o(seq.output);
  for (std::size_t t = 0; t < seq.size(); ++t) {
    params.logits(seq.question, o.first(t), logits);
    log_softmax(logits, lp);
    const auto tok = static_cast<std::size_t>(seq.output[t]);
    if (logprobs_out) (*logprobs_out)[t] = lp[tok];
    if (coeff[t] == 0.0) continue;
    params.feature_map().active(params.vocab(), seq.question, o.first(t), feats);
    for (auto f : feats) {
      auto col = grad.column(f);
      for (std::size_t v = 0; v < nv; ++v) col[v] -= coeff[t] * std::exp(lp[v]);
      col[tok] += coeff[t];
    }
  }
}

ParamArray grad_logprob(const PolicyParams& params, const TokenSeq& seq, std::size_t t) {
  if (t >= seq.size()) throw DomainError("position " + std::to_string(t) + " out of range");
  ParamArray g(params.weights().vocab(), params.weights().features());
  std::vector<double> coeff(seq.size(), 0.0);
  coeff[t] = 1.0;
  accumulate_grad_logprob(params, seq, coeff, g);
  return g;
}

const char* to_string(SamplerRole role) {
  switch (role) {
    case SamplerRole::kLive: return "live";
    case SamplerRole::kOld: return "old";
    case SamplerRole::kSft: return "sft";
    case SamplerRole::kReference: return "reference";
    case SamplerRole::kEval: return "eval";
  }
  return "unknown";
}

namespace {

TokenId draw_token(std::span<const double> logits, double temperature, double top_p, Rng& rng) {
  const std::size_t n = logits.size();
  if (temperature <= kGreedyTemperature) {
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  std::vector<double> probs(n);
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    probs[i] = std::exp((logits[i] - m) / temperature);
    z += probs[i];
  }
  for (auto& p : probs) p /= z;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t keep = n;
  if (top_p < 1.0) {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
    double cum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      cum += probs[order[i]];
      if (cum >= top_p) {
        keep = i + 1;
        break;
      }
    }
  }
  double mass = 0.0;
  for (std::size_t i = 0; i < keep; ++i) mass += probs[order[i]];
  const double u = rng.uniform() * mass;
  double acc = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    acc += probs[order[i]];
    if (u < acc) return static_cast<TokenId>(order[i]);
  }
  return static_cast<TokenId>(order[keep - 1]);
}

}  // namespace

SampledGroup sample_group(const PolicyParams& params, std::span<const TokenId> question, const SamplingOptions& opts,
                          std::uint64_t seed, SamplerRole source) {
  if (!(opts.top_p > 0.0) || opts.top_p > 1.0) throw ConfigError("top_p must lie in (0, 1]");
  if (opts.group_size < 1) throw ConfigError("group size must be at least 1");
  if (opts.max_len < 1) throw ConfigError("max_len must be at least 1");
  const Vocab& vocab = params.vocab();
  for (TokenId t : question) {
    if (!vocab.contains(t)) throw DomainError("question token " + std::to_string(t) + " outside vocab");
  }

  SampledGroup group;
  group.question.assign(question.begin(), question.end());
  group.source = source;
  group.outputs.reserve(opts.group_size);
  group.logprobs.reserve(opts.group_size);

  Rng rng(seed);
  std::vector<double> logits;
  std::vector<double> lp(static_cast<std::size_t>(vocab.size()));
  for (std::size_t g = 0; g < opts.group_size; ++g) {
    std::vector<TokenId> out;
    std::vector<double> lps;
    while (out.size() < opts.max_len) {
      params.logits(question, out, logits);
      log_softmax(logits, lp);
      const TokenId tok = draw_token(logits, opts.temperature, opts.top_p, rng);
      out.push_back(tok);
      lps.push_back(lp[static_cast<std::size_t>(tok)]);
      if (tok == vocab.eos()) break;
    }
    group.outputs.push_back(TokenSeq::make(vocab, group.question, std::move(out)));
    group.logprobs.push_back(std::move(lps));
  }
  return group;
}

TokenSeq greedy_decode(const PolicyParams& params, std::span<const TokenId> question, std::size_t max_len) {
  SamplingOptions opts;
  opts.group_size = 1;
  opts.max_len = max_len;
  opts.temperature = 0.0;
  auto g = sample_group(params, question, opts, 0, SamplerRole::kEval);
  return std::move(g.outputs.front());
}

}  // namespace grpolab
