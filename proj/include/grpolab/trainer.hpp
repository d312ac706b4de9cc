#pragma once

/**
 * Training loops for SFT, RFT, Online RFT, DPO, PPO and GRPO (outcome or process supervision),
 * the iterative GRPO procedure with reward-model replay, evaluation and checkpointing.
 *
 * Every loop draws its question batches and sampling streams from seeds derived from
 * (run seed, global step, question id), so a run is a pure function of its config.
 */

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "grpolab/algorithms.hpp"
#include "grpolab/policy.hpp"
#include "grpolab/rewards.hpp"
#include "grpolab/tasks.hpp"

namespace grpolab {

enum class Supervision : std::uint8_t { kOutcome = 0, kProcess = 1 };
enum class RewardSource : std::uint8_t { kModel = 0, kRule = 1 };
enum class OptimizerKind : std::uint8_t { kSgd = 0, kAdam = 1 };

const char* to_string(Supervision s);
const char* to_string(RewardSource s);
const char* to_string(OptimizerKind k);

struct RunConfig {
  std::string name = "run";
  Method method = Method::kGrpo;
  Supervision supervision = Supervision::kOutcome;
  RewardSource reward_source = RewardSource::kModel;

  std::uint64_t seed = 1;
  std::uint64_t task_seed = 1;
  std::uint64_t eval_seed = 2;

  // task
  int modulus = 7;
  int difficulty = 2;
  std::size_t train_size = 2000;
  std::size_t eval_size = 200;

  // policy
  int window = 4;
  std::size_t max_len = 64;
  double temperature = 1.0;  ///< exploration temperature
  double top_p = 1.0;

  // RL hyperparameters
  double clip_eps = 0.2;
  double kl_beta = 0.04;
  double dpo_beta = 0.1;
  std::size_t grpo_mu = 1;
  std::size_t group_size = 8;
  std::size_t iterations = 1;  ///< outer loop count I
  std::size_t steps = 200;     ///< inner steps M per outer iteration
  std::size_t batch_size = 32;
  double gamma = 1.0;
  double lambda = 0.95;

  // optimization
  OptimizerKind optimizer = OptimizerKind::kSgd;
  double policy_lr = 60.0;
  double value_lr = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  // SFT warm start
  std::size_t sft_size = 64;  ///< number of gold (q, o) pairs
  std::size_t sft_steps = 100;
  std::size_t sft_batch = 16;
  double sft_lr = 30.0;

  // reward model
  double rm_lr = 1.0;
  std::size_t rm_epochs = 200;
  std::size_t rm_init_questions = 2000;
  std::size_t rm_init_samples = 8;
  /// Outcome reward from the model is its verdict (1 if P(correct) > 0.5) rather than the raw score.
  bool rm_verdict_reward = true;
  double replay_fraction = 0.1;
  std::size_t replay_capacity = 0;

  // evaluation / output
  std::vector<std::size_t> eval_k{1, 4, 16};
  double eval_temperature = 0.7;
  double eval_top_p = 1.0;
  std::size_t eval_every = 10;
  std::size_t checkpoint_every = 0;
  bool trace_gc = false;  ///< write per-token gradient coefficients of every update

  /// Throws ConfigError naming the offending field.
  void validate() const;

  SamplingOptions exploration() const;
  TaskConfig task() const;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Plain gradient ascent or Adam, both maximizing the objective.
struct Optimizer {
  OptimizerKind kind = OptimizerKind::kSgd;
  double lr = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t t = 0;
  ParamArray m;
  ParamArray v;

  void ascend(ParamArray& params, const ParamArray& grad);
  friend bool operator==(const Optimizer&, const Optimizer&) = default;
};

struct RunState {
  PolicyParams policy;
  FrozenPolicy sft;
  FrozenPolicy reference;
  FrozenPolicy old;
  RewardModelParams rm_outcome = RewardModelParams::zeros(RewardKind::kOutcome);
  RewardModelParams rm_process = RewardModelParams::zeros(RewardKind::kProcess);
  ValueParams value;
  ReplayBuffer replay;
  Optimizer optimizer;
  std::uint64_t global_step = 0;
  std::uint64_t iteration = 0;
  std::uint64_t samples_drawn = 0;

  std::string serialize() const;
  static RunState deserialize(std::string_view bytes);
};

/// Metrics for one training step (eval fields present only on evaluation steps).
struct StepMetrics {
  std::uint64_t step = 0;
  std::uint64_t iteration = 0;
  Method method = Method::kSft;
  double mean_reward = 0.0;      ///< mean reward signal fed to the method
  double sample_accuracy = 0.0;  ///< rule accuracy of this step's samples
  double mean_kl = 0.0;          ///< mean per-token KL estimate against the reference
  double objective = 0.0;
  std::optional<EvalReport> eval;
};

/// Structural trace of the training loops, used to audit the iterative procedure.
struct TraceEvent {
  enum class Kind : std::uint8_t { kReferenceReset, kOldPolicyUpdate, kSample, kPolicyUpdate, kRewardModelUpdate };
  Kind kind = Kind::kSample;
  std::uint64_t iteration = 0;
  std::uint64_t step = 0;
  SamplerRole source = SamplerRole::kLive;  ///< kSample only
  std::size_t count = 0;                    ///< kSample: outputs; kRewardModelUpdate: new records
  std::size_t historical = 0;               ///< kRewardModelUpdate: replayed records
  double kl_to_reference = 0.0;             ///< kReferenceReset: KL estimate right after the reset
};

const char* to_string(TraceEvent::Kind k);

/// Gradient coefficients of one policy update (the first inner update of a step).
struct GcTrace {
  std::uint64_t step = 0;
  const GradientCoefficient* gc = nullptr;
  std::span<const std::uint64_t> question_ids;  ///< one per output of gc
};

struct TrainObserver {
  std::function<void(const StepMetrics&)> on_step;
  std::function<void(const TraceEvent&)> on_event;
  std::function<void(const RunState&)> on_checkpoint;
  /// Called with the offending state right before NumericalError is thrown.
  std::function<void(const RunState&)> on_failure;
  std::function<void(const GcTrace&)> on_gc;
};

/// Indices of the questions trained on at global step `step` (distinct when batch_size <= questions).
std::vector<std::size_t> step_batch(const RunConfig& config, std::size_t questions, std::uint64_t step);

/// Seed of the exploration stream for one question at one global step.
std::uint64_t sampling_seed(const RunConfig& config, std::uint64_t step, std::uint64_t question_id);

/// Zero policy with the configured vocabulary and window.
RunState initial_state(const RunConfig& config);

/// Greedy accuracy plus Maj@K / Pass@K over nested sample sets of size max(ks).
EvalReport evaluate(const PolicyParams& policy, std::span<const TaskInstance> eval_set, std::span<const std::size_t> ks,
                    double temperature, double top_p, std::size_t max_len, std::uint64_t seed);

/**
 * Supervised warm start: ascends the mean log-likelihood of gold outputs of the first
 * config.sft_size tasks for `steps` steps. Freezes the result as state.sft and state.reference.
 */
RunState train_sft(RunState state, std::span<const TaskInstance> dataset, const RunConfig& config, std::size_t steps,
                   double lr, const TrainObserver& obs = {});

RunState train_rft(RunState sft_state, std::span<const TaskInstance> questions, const RunConfig& config,
                   std::span<const TaskInstance> eval_set = {}, const TrainObserver& obs = {});
RunState train_online_rft(RunState sft_state, std::span<const TaskInstance> questions, const RunConfig& config,
                          std::span<const TaskInstance> eval_set = {}, const TrainObserver& obs = {});
RunState train_dpo(RunState sft_state, std::span<const TaskInstance> questions, const RunConfig& config,
                   std::span<const TaskInstance> eval_set = {}, const TrainObserver& obs = {});
RunState train_ppo(RunState sft_state, std::span<const TaskInstance> questions, const RunConfig& config,
                   std::span<const TaskInstance> eval_set = {}, const TrainObserver& obs = {});

/// M = config.steps GRPO steps against the current reference policy.
RunState train_grpo(RunState state, std::span<const TaskInstance> questions, const RunConfig& config,
                    Supervision supervision, std::span<const TaskInstance> eval_set = {},
                    const TrainObserver& obs = {}, std::vector<RewardRecord>* records = nullptr);

/// Fits the initial outcome and process reward models on rule-labelled SFT samples.
RunState init_reward_models(RunState state, std::span<const TaskInstance> questions, const RunConfig& config,
                            const TrainObserver& obs = {});

/**
 * Iterative GRPO: for each of config.iterations outer iterations, reset the reference to the
 * current policy, run config.steps GRPO steps, then retrain the reward model with replay.
 */
RunState iterate_grpo(RunState state, std::span<const TaskInstance> questions, const RunConfig& config,
                      std::span<const TaskInstance> eval_set = {}, const TrainObserver& obs = {});

/// Dispatches on config.method from an SFT state.
RunState train_method(RunState sft_state, std::span<const TaskInstance> questions, const RunConfig& config,
                      std::span<const TaskInstance> eval_set = {}, const TrainObserver& obs = {});

struct Datasets {
  std::vector<TaskInstance> train;
  std::vector<TaskInstance> eval;
};

Datasets make_datasets(const RunConfig& config);

/// Full pipeline: datasets, SFT warm start, then the configured method.
RunState run_pipeline(const RunConfig& config, const TrainObserver& obs = {}, RunState* sft_out = nullptr);

}  // namespace grpolab
