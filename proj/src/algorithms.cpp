#include "grpolab/algorithms.hpp"

#include <algorithm>
#include <cmath>

namespace grpolab {

const char* to_string(Method m) {
  switch (m) {
    case Method::kSft: return "sft";
    case Method::kRft: return "rft";
    case Method::kOnlineRft: return "online_rft";
    case Method::kDpo: return "dpo";
    case Method::kPpo: return "ppo";
    case Method::kGrpo: return "grpo";
  }
  return "unknown";
}

Method parse_method(std::string_view name) {
  for (Method m : kAllMethods) {
    if (name == to_string(m)) return m;
  }
  throw ConfigError("unknown method '" + std::string(name) + "'");
}

std::vector<double> normalize_rewards(std::span<const double> rewards) {
  const auto n = static_cast<double>(rewards.size());
  std::vector<double> out(rewards.size(), 0.0);
  if (rewards.empty()) return out;
  // Shift by the first reward so tight groups around a large offset keep their precision.
  const double shift = rewards[0];
  double mean = 0.0;
  for (double r : rewards) mean += r - shift;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - shift - mean) * (r - shift - mean);
  var /= n;
  const double sd = std::sqrt(var);
  // Relative threshold: groups equal up to rounding carry no signal.
  const double scale = std::max(1.0, std::abs(shift + mean));
  if (!(sd > 1e-12 * scale)) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - shift - mean) / sd;
  return out;
}

AdvantageTensor outcome_advantages(std::span<const double> rewards, std::span<const std::size_t> lengths) {
  if (rewards.size() != lengths.size()) throw UsageError("one reward per output is required");
  const auto norm = normalize_rewards(rewards);
  AdvantageTensor adv(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) adv[i].assign(lengths[i], norm[i]);
  return adv;
}

AdvantageTensor process_advantages(std::span<const StepRewards> rewards, std::span<const std::size_t> lengths) {
  if (rewards.size() != lengths.size()) throw UsageError("one step-reward list per output is required");
  std::vector<double> flat;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    std::size_t prev = 0;
    for (std::size_t j = 0; j < rewards[i].size(); ++j) {
      const auto idx = rewards[i][j].first;
      if (idx >= lengths[i]) throw DomainError("step end index beyond output length");
      if (j > 0 && idx <= prev) throw DomainError("step end indices must be strictly increasing");
      prev = idx;
      flat.push_back(rewards[i][j].second);
    }
  }
  const auto norm = normalize_rewards(flat);

  AdvantageTensor adv(rewards.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    adv[i].assign(lengths[i], 0.0);
    const auto& steps = rewards[i];
    const std::size_t base = k;
    k += steps.size();
    // Walk backwards accumulating the suffix sum of normalized step rewards.
    double suffix = 0.0;
    std::size_t j = steps.size();
    for (std::size_t t = lengths[i]; t-- > 0;) {
      while (j > 0 && steps[j - 1].first >= t) {
        suffix += norm[base + j - 1];
        --j;
      }
      adv[i][t] = suffix;
    }
  }
  return adv;
}

std::vector<double> gae(std::span<const double> rewards, std::span<const double> values, double gamma, double lambda) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
  if (rewards.size() != values.size()) throw UsageError("rewards and values differ in length");
  std::vector<double> adv(rewards.size());
  double next_adv = 0.0;
  double next_value = 0.0;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    const double delta = rewards[t] + gamma * next_value - values[t];
    next_adv = delta + gamma * lambda * next_adv;
    adv[t] = next_adv;
    next_value = values[t];
  }
  return adv;
}

double kl_penalized_token_reward(double rm_score, double logp_theta, double logp_ref, double beta, std::size_t t,
                                 std::size_t length) {
  if (t >= length) throw DomainError("token index beyond sequence length");
  const double terminal = (t + 1 == length) ? rm_score : 0.0;
  return terminal - beta * (logp_theta - logp_ref);
}

double kl_estimate(double logp_theta, double logp_ref) {
  const double x = logp_ref - logp_theta;
  // rho - log(rho) - 1 = expm1(x) - x; clamp rounding noise at tiny |x|.
  return std::max(0.0, std::expm1(x) - x);
}

double clipped_surrogate(double ratio, double adv, double eps) {
  const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps);
  return std::min(ratio * adv, clipped * adv);
}

double clipped_surrogate_grad(double ratio, double adv, double eps) {
  const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps);
  if (ratio * adv <= clipped * adv) return ratio * adv;
  return 0.0;
}

double gc_sft() { return 1.0; }
double gc_rft(const Verdict& verdict) { return verdict.answer_correct ? 1.0 : 0.0; }
double gc_onrft(const Verdict& verdict) { return gc_rft(verdict); }

double mean_log_ratio(std::span<const double> logp_theta, std::span<const double> logp_ref) {
  if (logp_theta.size() != logp_ref.size()) throw UsageError("log-prob sequences differ in length");
  if (logp_theta.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t t = 0; t < logp_theta.size(); ++t) s += logp_theta[t] - logp_ref[t];
  return s / static_cast<double>(logp_theta.size());
}

double gc_dpo(double mean_log_ratio_pos, double mean_log_ratio_neg, double beta) {
  const double x = beta * (mean_log_ratio_neg - mean_log_ratio_pos);
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

GradientCoefficient sequence_coefficients(Method method, std::span<const double> per_output,
                                          std::span<const std::size_t> lengths) {
  if (per_output.size() != lengths.size()) throw UsageError("one coefficient per output is required");
  GradientCoefficient gc;
  gc.method = method;
  gc.values.resize(per_output.size());
  const double w = per_output.empty() ? 0.0 : 1.0 / static_cast<double>(per_output.size());
  gc.output_weight.assign(per_output.size(), w);
  for (std::size_t i = 0; i < per_output.size(); ++i) gc.values[i].assign(lengths[i], per_output[i]);
  return gc;
}

GradientCoefficient dpo_coefficients(std::span<const double> gc_per_pair, std::span<const std::size_t> lengths) {
  if (lengths.size() != 2 * gc_per_pair.size()) throw UsageError("DPO needs two outputs per pair");
  GradientCoefficient gc;
  gc.method = Method::kDpo;
  const double w = gc_per_pair.empty() ? 0.0 : 1.0 / static_cast<double>(gc_per_pair.size());
  for (std::size_t p = 0; p < gc_per_pair.size(); ++p) {
    gc.values.emplace_back(lengths[2 * p], gc_per_pair[p]);
    gc.values.emplace_back(lengths[2 * p + 1], -gc_per_pair[p]);
    gc.output_weight.push_back(w);
    gc.output_weight.push_back(w);
  }
  return gc;
}

GradientCoefficient gc_ppo(const AdvantageTensor& advantages) {
  GradientCoefficient gc;
  gc.method = Method::kPpo;
  gc.values = advantages;
  const double w = advantages.empty() ? 0.0 : 1.0 / static_cast<double>(advantages.size());
  gc.output_weight.assign(advantages.size(), w);
  return gc;
}

GradientCoefficient gc_grpo(const AdvantageTensor& advantages, const AdvantageTensor& logp_theta,
                            const AdvantageTensor& logp_ref, double beta) {
  if (advantages.size() != logp_theta.size() || advantages.size() != logp_ref.size()) {
    throw UsageError("advantage and log-prob tensors differ in shape");
  }
  GradientCoefficient gc;
  gc.method = Method::kGrpo;
  gc.values.resize(advantages.size());
  const double w = advantages.empty() ? 0.0 : 1.0 / static_cast<double>(advantages.size());
  gc.output_weight.assign(advantages.size(), w);
  for (std::size_t i = 0; i < advantages.size(); ++i) {
    if (advantages[i].size() != logp_theta[i].size() || advantages[i].size() != logp_ref[i].size()) {
      throw UsageError("advantage and log-prob tensors differ in shape");
    }
    gc.values[i].resize(advantages[i].size());
    for (std::size_t t = 0; t < advantages[i].size(); ++t) {
      gc.values[i][t] = advantages[i][t] + beta * std::expm1(logp_ref[i][t] - logp_theta[i][t]);
    }
  }
  return gc;
}

double grpo_token_coefficient(double adv, double logp_theta, double logp_old, double logp_ref, double eps,
                              double beta) {
  const double ratio = std::exp(logp_theta - logp_old);
  return clipped_surrogate_grad(ratio, adv, eps) + beta * std::expm1(logp_ref - logp_theta);
}

namespace {

void check_gc(const GradientCoefficient& gc) {
  if (gc.output_weight.size() != gc.values.size()) throw UsageError("output weights do not match coefficient rows");
}

}  // namespace

ParamArray unified_gradient(const GradientCoefficient& gc, const std::vector<std::vector<ParamArray>>& grads) {
  check_gc(gc);
  if (grads.size() != gc.values.size()) throw UsageError("gradient rows do not match coefficient rows");
  ParamArray out;
  bool first = true;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].size() != gc.values[i].size()) throw UsageError("gradient count does not match output length");
    if (grads[i].empty()) continue;
    const double scale = gc.output_weight[i] / static_cast<double>(grads[i].size());
    for (std::size_t t = 0; t < grads[i].size(); ++t) {
      if (first) {
        out = ParamArray(grads[i][t].vocab(), grads[i][t].features());
        first = false;
      }
      out.axpy(scale * gc.values[i][t], grads[i][t]);
    }
  }
  return out;
}

void accumulate_unified_gradient(const GradientCoefficient& gc, const PolicyParams& params,
                                 std::span<const TokenSeq> outputs, double scale, ParamArray& out) {
  check_gc(gc);
  if (outputs.size() != gc.values.size()) throw UsageError("outputs do not match coefficient rows");
  std::vector<double> coeff;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    if (outputs[i].size() != gc.values[i].size()) throw UsageError("coefficient count does not match output length");
    if (outputs[i].size() == 0) continue;
    const double s = scale * gc.output_weight[i] / static_cast<double>(outputs[i].size());
    coeff.resize(outputs[i].size());
    for (std::size_t t = 0; t < coeff.size(); ++t) coeff[t] = s * gc.values[i][t];
    accumulate_grad_logprob(params, outputs[i], coeff, out);
  }
}

ParamArray unified_gradient(const GradientCoefficient& gc, const PolicyParams& params,
                            std::span<const TokenSeq> outputs) {
  ParamArray out(params.weights().vocab(), params.weights().features());
  accumulate_unified_gradient(gc, params, outputs, 1.0, out);
  return out;
}

namespace {

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

double sft_objective(const PolicyParams& params, std::span<const TokenSeq> outputs) {
  if (outputs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& o : outputs) total += mean_of(logprob(params, o));
  return total / static_cast<double>(outputs.size());
}

double rft_objective(const PolicyParams& params, std::span<const TokenSeq> outputs, std::span<const double> indicator) {
  if (indicator.size() != outputs.size()) throw UsageError("one indicator per output is required");
  if (outputs.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    if (indicator[i] != 0.0) total += indicator[i] * mean_of(logprob(params, outputs[i]));
  }
  return total / static_cast<double>(outputs.size());
}

double dpo_objective(const PolicyParams& params, const PolicyParams& ref, std::span<const DpoPair> pairs, double beta) {
  if (pairs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& p : pairs) {
    const double pos = mean_log_ratio(logprob(params, p.chosen), logprob(ref, p.chosen));
    const double neg = mean_log_ratio(logprob(params, p.rejected), logprob(ref, p.rejected));
    const double x = beta * (pos - neg);
    // log sigma(x) = -softplus(-x)
    total += x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
  }
  return total / static_cast<double>(pairs.size());
}

double ppo_objective(const PolicyParams& params, std::span<const TokenSeq> outputs, const AdvantageTensor& logp_old,
                     const AdvantageTensor& advantages, double eps) {
  if (outputs.size() != logp_old.size() || outputs.size() != advantages.size()) {
    throw UsageError("outputs, old log-probs and advantages differ in count");
  }
  if (outputs.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const auto lp = logprob(params, outputs[i]);
    if (lp.empty()) continue;
    double s = 0.0;
    for (std::size_t t = 0; t < lp.size(); ++t) {
      s += clipped_surrogate(std::exp(lp[t] - logp_old[i][t]), advantages[i][t], eps);
    }
    total += s / static_cast<double>(lp.size());
  }
  return total / static_cast<double>(outputs.size());
}

double grpo_objective(const PolicyParams& params, std::span<const TokenSeq> outputs, const AdvantageTensor& logp_old,
                      const AdvantageTensor& logp_ref, const AdvantageTensor& advantages, double eps, double beta) {
  if (outputs.size() != logp_old.size() || outputs.size() != logp_ref.size() || outputs.size() != advantages.size()) {
    throw UsageError("outputs, log-probs and advantages differ in count");
  }
  if (outputs.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const auto lp = logprob(params, outputs[i]);
    if (lp.empty()) continue;
    double s = 0.0;
    for (std::size_t t = 0; t < lp.size(); ++t) {
      s += clipped_surrogate(std::exp(lp[t] - logp_old[i][t]), advantages[i][t], eps) -
           beta * kl_estimate(lp[t], logp_ref[i][t]);
    }
    total += s / static_cast<double>(lp.size());
  }
  return total / static_cast<double>(outputs.size());
}

ValueParams ValueParams::zeros(const PolicyParams& policy, double gamma, double lambda) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
  ValueParams v;
  v.weights.assign(policy.feature_map().dim(), 0.0);
  v.gamma = gamma;
  v.lambda = lambda;
  return v;
}

std::vector<double> ValueParams::values(const PolicyParams& policy, const TokenSeq& seq) const {
  std::vector<double> out(seq.size(), 0.0);
  std::vector<std::size_t> feats;
  const std::span<const TokenId> o(seq.output);
  for (std::size_t t = 0; t < seq.size(); ++t) {
    policy.feature_map().active(policy.vocab(), seq.question, o.first(t), feats);
    for (auto f : feats) out[t] += weights[f];
  }
  return out;
}

double ValueParams::fit(const PolicyParams& policy, const TokenSeq& seq, std::span<const double> targets, double lr) {
  if (targets.size() != seq.size()) throw UsageError("one value target per token is required");
  if (seq.size() == 0) return 0.0;
  std::vector<std::size_t> feats;
  const std::span<const TokenId> o(seq.output);
  double loss = 0.0;
  for (std::size_t t = 0; t < seq.size(); ++t) {
    policy.feature_map().active(policy.vocab(), seq.question, o.first(t), feats);
    double v = 0.0;
    for (auto f : feats) v += weights[f];
    const double err = v - targets[t];
    loss += 0.5 * err * err;
    const double step = lr * err / static_cast<double>(feats.size());
    for (auto f : feats) weights[f] -= step;
  }
  return loss / static_cast<double>(seq.size());
}

}  // namespace grpolab
