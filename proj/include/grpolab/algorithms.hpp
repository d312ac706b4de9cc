#pragma once

/**
 * Advantage estimation, KL terms, clipped surrogates and per-token gradient coefficients.
 *
 * Every method trains with a gradient of the form
 *
 *   grad J = E_(q,o) [ (1/|o|) sum_t GC(q, o, t) * grad log pi(o_t | q, o_<t) ],
 *
 * so a method is fully described by its data source and its gradient coefficient GC.
 * `unified_gradient` assembles that sum; the *_objective functions give the scalar objectives
 * whose gradients it reproduces.
 */

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "grpolab/policy.hpp"
#include "grpolab/tasks.hpp"

namespace grpolab {

enum class Method : std::uint8_t { kSft = 0, kRft, kOnlineRft, kDpo, kPpo, kGrpo };

inline constexpr Method kAllMethods[] = {Method::kSft, Method::kRft, Method::kOnlineRft,
                                         Method::kDpo, Method::kPpo, Method::kGrpo};

const char* to_string(Method m);
Method parse_method(std::string_view name);

/// Per-output, per-token values.
using AdvantageTensor = std::vector<std::vector<double>>;

/// (step end index, score) pairs of one output.
using StepRewards = std::vector<std::pair<std::size_t, double>>;

/// (r - mean) / std with the population std. A zero-variance group maps to all zeros.
std::vector<double> normalize_rewards(std::span<const double> rewards);

/// Normalized reward of output i broadcast to each of its `lengths[i]` tokens.
AdvantageTensor outcome_advantages(std::span<const double> rewards, std::span<const std::size_t> lengths);

/**
 * Step scores of all outputs are normalized jointly; token t of output i receives the sum of
 * normalized scores whose step end is >= t. Tokens after the last step end receive 0.
 */
AdvantageTensor process_advantages(std::span<const StepRewards> rewards, std::span<const std::size_t> lengths);

/// A_t = delta_t + gamma * lambda * A_{t+1}, delta_t = r_t + gamma * V_{t+1} - V_t, V_T = 0.
std::vector<double> gae(std::span<const double> rewards, std::span<const double> values, double gamma, double lambda);

/// Token reward with the reward-model score on the last token and a per-token KL penalty.
double kl_penalized_token_reward(double rm_score, double logp_theta, double logp_ref, double beta, std::size_t t,
                                 std::size_t length);

/// rho - log(rho) - 1 with rho = pi_ref / pi_theta. Never negative.
double kl_estimate(double logp_theta, double logp_ref);

/// min(ratio * adv, clip(ratio, 1 - eps, 1 + eps) * adv)
double clipped_surrogate(double ratio, double adv, double eps);

/// d clipped_surrogate / d log pi_theta; zero wherever the clipped branch is active.
double clipped_surrogate_grad(double ratio, double adv, double eps);

struct GradientCoefficient {
  Method method = Method::kSft;
  AdvantageTensor values;             ///< GC per output, per token
  std::vector<double> output_weight;  ///< expectation weight of each output in the batch

  std::size_t outputs() const { return values.size(); }
};

double gc_sft();
double gc_rft(const Verdict& verdict);
double gc_onrft(const Verdict& verdict);

/// Mean over tokens of log pi_theta - log pi_ref.
double mean_log_ratio(std::span<const double> logp_theta, std::span<const double> logp_ref);

/// sigma(beta * (mean log-ratio of o- minus mean log-ratio of o+)).
double gc_dpo(double mean_log_ratio_pos, double mean_log_ratio_neg, double beta);

/// Uniform coefficients (SFT, RFT, Online RFT): value[i] on every token of output i, weight 1/N.
GradientCoefficient sequence_coefficients(Method method, std::span<const double> per_output,
                                          std::span<const std::size_t> lengths);

/// Coefficients for DPO pairs laid out as [pos_0, neg_0, pos_1, neg_1, ...]: +GC on o+, -GC on o-.
GradientCoefficient dpo_coefficients(std::span<const double> gc_per_pair, std::span<const std::size_t> lengths);

GradientCoefficient gc_ppo(const AdvantageTensor& advantages);

/// A_hat + beta * (pi_ref / pi_theta - 1), the single-update (pi_old == pi_theta) coefficient.
GradientCoefficient gc_grpo(const AdvantageTensor& advantages, const AdvantageTensor& logp_theta,
                            const AdvantageTensor& logp_ref, double beta);

/**
 * General per-token GRPO coefficient for the current parameters: the clipped-surrogate derivative
 * against pi_old plus the KL-estimator derivative. Equals gc_grpo when logp_theta == logp_old.
 */
double grpo_token_coefficient(double adv, double logp_theta, double logp_old, double logp_ref, double eps, double beta);

/**
 * sum_i output_weight[i] * (1/|o_i|) sum_t GC[i][t] * grads[i][t].
 * Throws UsageError on any shape mismatch.
 */
ParamArray unified_gradient(const GradientCoefficient& gc, const std::vector<std::vector<ParamArray>>& grads);

/// Same sum, computed sparsely from the policy without materializing per-token gradients.
ParamArray unified_gradient(const GradientCoefficient& gc, const PolicyParams& params,
                            std::span<const TokenSeq> outputs);

/// Adds `scale` times the unified gradient into `out`.
void accumulate_unified_gradient(const GradientCoefficient& gc, const PolicyParams& params,
                                 std::span<const TokenSeq> outputs, double scale, ParamArray& out);

// Objectives whose gradients the coefficients above reproduce. All are batch means.

double sft_objective(const PolicyParams& params, std::span<const TokenSeq> outputs);
double rft_objective(const PolicyParams& params, std::span<const TokenSeq> outputs, std::span<const double> indicator);

struct DpoPair {
  TokenSeq chosen;
  TokenSeq rejected;
};

double dpo_objective(const PolicyParams& params, const PolicyParams& ref, std::span<const DpoPair> pairs, double beta);

/// Clipped PPO surrogate against fixed old log-probs.
double ppo_objective(const PolicyParams& params, std::span<const TokenSeq> outputs, const AdvantageTensor& logp_old,
                     const AdvantageTensor& advantages, double eps);

/// Clipped surrogate minus beta times the KL estimator, averaged per output then over the group.
double grpo_objective(const PolicyParams& params, std::span<const TokenSeq> outputs, const AdvantageTensor& logp_old,
                      const AdvantageTensor& logp_ref, const AdvantageTensor& advantages, double eps, double beta);

/// Linear value head over the policy's state features, trained by regression onto GAE targets.
struct ValueParams {
  std::vector<double> weights;
  double gamma = 1.0;
  double lambda = 0.95;

  static ValueParams zeros(const PolicyParams& policy, double gamma, double lambda);

  std::vector<double> values(const PolicyParams& policy, const TokenSeq& seq) const;

  /// One SGD pass of squared-error regression of V(s_t) onto targets[t]. Returns the mean loss before the pass.
  double fit(const PolicyParams& policy, const TokenSeq& seq, std::span<const double> targets, double lr);

  friend bool operator==(const ValueParams&, const ValueParams&) = default;
};

}  // namespace grpolab
