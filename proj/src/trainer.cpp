#include "grpolab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "grpolab/binary_io.hpp"
#include "grpolab/rng.hpp"

namespace grpolab {

const char* to_string(Supervision s) { return s == Supervision::kOutcome ? "outcome" : "process"; }
const char* to_string(RewardSource s) { return s == RewardSource::kModel ? "model" : "rule"; }
const char* to_string(OptimizerKind k) { return k == OptimizerKind::kSgd ? "sgd" : "adam"; }

const char* to_string(TraceEvent::Kind k) {
  switch (k) {
    case TraceEvent::Kind::kReferenceReset: return "reference_reset";
    case TraceEvent::Kind::kOldPolicyUpdate: return "old_policy_update";
    case TraceEvent::Kind::kSample: return "sample";
    case TraceEvent::Kind::kPolicyUpdate: return "policy_update";
    case TraceEvent::Kind::kRewardModelUpdate: return "reward_model_update";
  }
  return "unknown";
}

void RunConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) { throw ConfigError(field + ": " + why); };
  if (name.empty() || name == "." || name == ".." || name.find_first_of("/\\") != std::string::npos) {
    fail("name", "must be a plain directory name");
  }
  if (!(clip_eps > 0.0)) fail("clip_eps", "must be > 0");
  if (!(kl_beta >= 0.0)) fail("kl_beta", "must be >= 0");
  if (!(dpo_beta > 0.0)) fail("dpo_beta", "must be > 0");
  if (grpo_mu < 1) fail("grpo_mu", "must be >= 1");
  if (group_size < 1) fail("group_size", "must be >= 1");
  if (iterations < 1) fail("iterations", "must be >= 1");
  if (steps < 1) fail("steps", "must be >= 1");
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (!(gamma >= 0.0 && gamma <= 1.0)) fail("gamma", "must lie in [0, 1]");
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail("lambda", "must lie in [0, 1]");
  if (!(top_p > 0.0 && top_p <= 1.0)) fail("top_p", "must lie in (0, 1]");
  if (!(eval_top_p > 0.0 && eval_top_p <= 1.0)) fail("eval_top_p", "must lie in (0, 1]");
  if (!(temperature >= 0.0)) fail("temperature", "must be >= 0");
  if (!(eval_temperature >= 0.0)) fail("eval_temperature", "must be >= 0");
  if (max_len < 1) fail("max_len", "must be >= 1");
  if (window < 1) fail("window", "must be >= 1");
  if (difficulty < 1) fail("difficulty", "must be >= 1");
  if (modulus < 2 || modulus > 10) fail("modulus", "must lie in [2, 10]");
  if (train_size < 1) fail("train_size", "must be >= 1");
  if (sft_size < 1 || sft_size > train_size) fail("sft_size", "must lie in [1, train_size]");
  if (sft_batch < 1) fail("sft_batch", "must be >= 1");
  if (eval_k.empty()) fail("eval_k", "needs at least one K");
  for (auto k : eval_k) {
    if (k < 1) fail("eval_k", "every K must be >= 1");
  }
  if (!(policy_lr >= 0.0)) fail("policy_lr", "must be >= 0");
  if (!(sft_lr >= 0.0)) fail("sft_lr", "must be >= 0");
  if (!(rm_lr > 0.0)) fail("rm_lr", "must be > 0");
  if (!(replay_fraction >= 0.0 && replay_fraction < 1.0)) fail("replay_fraction", "must lie in [0, 1)");
  if (rm_init_samples < 1) fail("rm_init_samples", "must be >= 1");
}

SamplingOptions RunConfig::exploration() const {
  SamplingOptions o;
  o.group_size = group_size;
  o.max_len = max_len;
  o.temperature = temperature;
  o.top_p = top_p;
  return o;
}

TaskConfig RunConfig::task() const {
  TaskConfig t;
  t.modulus = modulus;
  t.difficulty = difficulty;
  return t;
}

void Optimizer::ascend(ParamArray& params, const ParamArray& grad) {
  if (kind == OptimizerKind::kSgd) {
    params.axpy(lr, grad);
    return;
  }
  if (!m.same_shape(params)) {
    m = ParamArray(params.vocab(), params.features());
    v = ParamArray(params.vocab(), params.features());
  }
  ++t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  auto& w = params.flat();
  auto& mf = m.flat();
  auto& vf = v.flat();
  const auto& g = grad.flat();
  for (std::size_t i = 0; i < w.size(); ++i) {
    mf[i] = beta1 * mf[i] + (1.0 - beta1) * g[i];
    vf[i] = beta2 * vf[i] + (1.0 - beta2) * g[i] * g[i];
    w[i] += lr * (mf[i] / c1) / (std::sqrt(vf[i] / c2) + eps);
  }
}

namespace {

enum SeedTag : std::uint64_t { kBatchTag = 0xb47c, kSampleTag = 0x5a3e, kPairTag = 0xd90, kRmTag = 0x7e3 };

Optimizer make_optimizer(const RunConfig& c) {
  Optimizer o;
  o.kind = c.optimizer;
  o.lr = c.policy_lr;
  o.beta1 = c.adam_beta1;
  o.beta2 = c.adam_beta2;
  o.eps = c.adam_eps;
  return o;
}

std::vector<std::size_t> draw_batch(std::size_t n, std::size_t batch, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  std::vector<std::size_t> out;
  out.reserve(batch);
  if (batch <= n) {
    for (std::size_t i = 0; i < batch; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.below(n - i));
      std::swap(idx[i], idx[j]);
      out.push_back(idx[i]);
    }
  } else {
    for (std::size_t i = 0; i < batch; ++i) out.push_back(static_cast<std::size_t>(rng.below(n)));
  }
  return out;
}

}  // namespace

std::vector<std::size_t> step_batch(const RunConfig& config, std::size_t questions, std::uint64_t step) {
  return draw_batch(questions, config.batch_size, derive_seed(config.seed, kBatchTag, step));
}

std::uint64_t sampling_seed(const RunConfig& config, std::uint64_t step, std::uint64_t question_id) {
  return derive_seed(derive_seed(config.seed, kSampleTag), step, question_id);
}

namespace {

void check_finite(const RunState& s, const TrainObserver& obs, const char* where) {
  if (s.policy.weights().all_finite()) return;
  if (obs.on_failure) obs.on_failure(s);
  throw NumericalError(std::string("non-finite policy parameters after ") + where + " step " +
                       std::to_string(s.global_step));
}

struct Group {
  const TaskInstance* task = nullptr;
  SampledGroup samples;
  std::vector<Verdict> verdicts;
};

std::vector<Group> sample_groups(const PolicyParams& policy, std::span<const TaskInstance> questions,
                                 const std::vector<std::size_t>& batch, const RunConfig& config, std::uint64_t step,
                                 SamplerRole role) {
  std::vector<Group> groups;
  groups.reserve(batch.size());
  const auto opts = config.exploration();
  for (auto qi : batch) {
    const auto& task = questions[qi];
    Group g;
    g.task = &task;
    g.samples = sample_group(policy, task.question, opts, sampling_seed(config, step, task.id),
                             role);
    for (const auto& o : g.samples.outputs) g.verdicts.push_back(verify(policy.vocab(), task, o.output));
    groups.push_back(std::move(g));
  }
  return groups;
}

// `step` is the training step the samples serve; offline batches are drawn before it starts.
void emit_sample_event(const TrainObserver& obs, const RunState& s, const std::vector<Group>& groups, SamplerRole role,
                       std::optional<std::uint64_t> step = std::nullopt) {
  if (!obs.on_event) return;
  TraceEvent e;
  e.kind = TraceEvent::Kind::kSample;
  e.iteration = s.iteration;
  e.step = step.value_or(s.global_step);
  e.source = role;
  for (const auto& g : groups) e.count += g.samples.size();
  obs.on_event(e);
}

void emit_event(const TrainObserver& obs, TraceEvent::Kind kind, const RunState& s) {
  if (!obs.on_event) return;
  TraceEvent e;
  e.kind = kind;
  e.iteration = s.iteration;
  e.step = s.global_step;
  obs.on_event(e);
}

double sample_accuracy(const std::vector<Group>& groups) {
  double n = 0.0;
  double ok = 0.0;
  for (const auto& g : groups) {
    for (const auto& v : g.verdicts) {
      ok += rule_reward(v);
      n += 1.0;
    }
  }
  return n > 0 ? ok / n : 0.0;
}

double mean_kl(const PolicyParams& policy, const PolicyParams& ref, const std::vector<Group>& groups) {
  double total = 0.0;
  double n = 0.0;
  for (const auto& g : groups) {
    for (const auto& o : g.samples.outputs) {
      const auto lp = logprob(policy, o);
      const auto lr = logprob(ref, o);
      for (std::size_t t = 0; t < lp.size(); ++t) total += kl_estimate(lp[t], lr[t]);
      n += static_cast<double>(lp.size());
    }
  }
  return n > 0 ? total / n : 0.0;
}

bool is_eval_step(const RunConfig& c, std::uint64_t local_step, std::uint64_t last_step) {
  return local_step == last_step || (c.eval_every > 0 && local_step % c.eval_every == 0);
}

void finish_step(RunState& s, StepMetrics m, const RunConfig& c, std::span<const TaskInstance> eval_set,
                 std::uint64_t local_step, std::uint64_t last_step, const TrainObserver& obs) {
  check_finite(s, obs, to_string(m.method));
  m.step = s.global_step;
  m.iteration = s.iteration;
  if (!eval_set.empty() && is_eval_step(c, local_step, last_step)) {
    m.eval = evaluate(s.policy, eval_set, c.eval_k, c.eval_temperature, c.eval_top_p, c.max_len, c.eval_seed);
  }
  if (obs.on_step) obs.on_step(m);
  if (obs.on_checkpoint && c.checkpoint_every > 0 && s.global_step % c.checkpoint_every == 0) obs.on_checkpoint(s);
}

void emit_gc(const TrainObserver& obs, const RunState& s, const GradientCoefficient& gc,
             const std::vector<std::uint64_t>& ids) {
  if (obs.on_gc) obs.on_gc(GcTrace{s.global_step, &gc, ids});
}

void emit_initial(const RunState& s, Method method, const RunConfig& c, std::span<const TaskInstance> eval_set,
                  const TrainObserver& obs) {
  if (!obs.on_step) return;
  StepMetrics m;
  m.step = s.global_step;
  m.iteration = s.iteration;
  m.method = method;
  if (!eval_set.empty()) {
    m.eval = evaluate(s.policy, eval_set, c.eval_k, c.eval_temperature, c.eval_top_p, c.max_len, c.eval_seed);
  }
  obs.on_step(m);
}

std::vector<TokenSeq> outputs_of(const std::vector<Group>& groups) {
  std::vector<TokenSeq> out;
  for (const auto& g : groups) out.insert(out.end(), g.samples.outputs.begin(), g.samples.outputs.end());
  return out;
}

// Shared by RFT and Online RFT: ascend the indicator-weighted log-likelihood of the step's samples.
// Returns the share of kept samples; `objective` receives the pre-update objective.
// Returns the mean indicator; `applied` is false when no sample was kept and the step is skipped.
double rft_update(RunState& s, const std::vector<Group>& groups, Method method, double& objective, bool& applied,
                  const TrainObserver& obs) {
  const auto outputs = outputs_of(groups);
  std::vector<double> ind;
  std::vector<std::size_t> lens;
  std::vector<std::uint64_t> ids;
  for (const auto& g : groups) {
    for (std::size_t i = 0; i < g.samples.size(); ++i) {
      ind.push_back(method == Method::kRft ? gc_rft(g.verdicts[i]) : gc_onrft(g.verdicts[i]));
      lens.push_back(g.samples.outputs[i].size());
      ids.push_back(g.task->id);
    }
  }
  const auto gc = sequence_coefficients(method, ind, lens);
  emit_gc(obs, s, gc, ids);
  objective = outputs.empty() ? 0.0 : rft_objective(s.policy, outputs, ind);
  const double kept = std::accumulate(ind.begin(), ind.end(), 0.0);
  applied = kept > 0.0;
  if (applied) s.optimizer.ascend(s.policy.weights(), unified_gradient(gc, s.policy, outputs));
  return kept / std::max<double>(1.0, static_cast<double>(ind.size()));
}

RunState train_rejection_sampling(RunState s, std::span<const TaskInstance> questions, const RunConfig& config,
                                  std::span<const TaskInstance> eval_set, const TrainObserver& obs, bool online) {
  if (!s.sft) throw UsageError("rejection sampling fine-tuning needs an SFT state");
  s.optimizer = make_optimizer(config);
  const Method method = online ? Method::kOnlineRft : Method::kRft;
  const std::uint64_t start = s.global_step;

  // Offline RFT draws the whole sample budget from the frozen SFT policy up front.
  std::vector<std::vector<Group>> offline;
  if (!online) {
    for (std::uint64_t k = 1; k <= config.steps; ++k) {
      const auto batch = step_batch(config, questions.size(), start + k);
      offline.push_back(sample_groups(*s.sft, questions, batch, config, start + k, SamplerRole::kSft));
      emit_sample_event(obs, s, offline.back(), SamplerRole::kSft, start + k);
      for (const auto& g : offline.back()) s.samples_drawn += g.samples.size();
    }
  }

  emit_initial(s, method, config, eval_set, obs);
  for (std::uint64_t k = 1; k <= config.steps; ++k) {
    ++s.global_step;
    std::vector<Group> groups;
    if (online) {
      const auto batch = step_batch(config, questions.size(), s.global_step);
      groups = sample_groups(s.policy, questions, batch, config, s.global_step, SamplerRole::kLive);
      emit_sample_event(obs, s, groups, SamplerRole::kLive);
      for (const auto& g : groups) s.samples_drawn += g.samples.size();
    } else {
      groups = std::move(offline[k - 1]);
    }
    StepMetrics m;
    m.method = method;
    m.sample_accuracy = sample_accuracy(groups);
    bool applied = false;
    m.mean_reward = rft_update(s, groups, method, m.objective, applied, obs);
    if (applied) emit_event(obs, TraceEvent::Kind::kPolicyUpdate, s);
    m.mean_kl = mean_kl(s.policy, *s.reference, groups);
    finish_step(s, m, config, eval_set, k, config.steps, obs);
  }
  return s;
}

struct ScoredGroup {
  Group group;
  AdvantageTensor advantages;
  AdvantageTensor logp_ref;
  std::vector<double> rewards;  ///< per output (outcome) or mean step reward (process), for metrics
};

std::vector<StepRewards> process_rewards(const RunState& s, const Group& g, const RunConfig& config) {
  std::vector<StepRewards> R;
  const Vocab& vocab = s.policy.vocab();
  for (std::size_t i = 0; i < g.samples.size(); ++i) {
    const auto& o = g.samples.outputs[i];
    if (config.reward_source == RewardSource::kModel) {
      R.push_back(score_process(s.rm_process, vocab, o));
    } else {
      const auto ends = process_step_ends(o);
      const auto vals = rule_step_rewards(g.verdicts[i]);
      StepRewards r;
      for (std::size_t j = 0; j < ends.size(); ++j) r.emplace_back(ends[j], vals[std::min(j, vals.size() - 1)]);
      R.push_back(std::move(r));
    }
  }
  return R;
}

std::vector<double> outcome_rewards(const RunState& s, const Group& g, const RunConfig& config) {
  std::vector<double> r;
  for (std::size_t i = 0; i < g.samples.size(); ++i) {
    if (config.reward_source == RewardSource::kModel) {
      const double logit = score_outcome(s.rm_outcome, s.policy.vocab(), g.task->question, g.samples.outputs[i].output);
      r.push_back(config.rm_verdict_reward ? (logit > 0.0 ? 1.0 : 0.0) : logit);
    } else {
      r.push_back(rule_reward(g.verdicts[i]));
    }
  }
  return r;
}

}  // namespace

RunState initial_state(const RunConfig& config) {
  config.validate();
  RunState s;
  s.policy = PolicyParams::zeros(Vocab::arithmetic(), config.window);
  s.value = ValueParams::zeros(s.policy, config.gamma, config.lambda);
  s.replay = ReplayBuffer(config.replay_capacity);
  s.optimizer = make_optimizer(config);
  return s;
}

EvalReport evaluate(const PolicyParams& policy, std::span<const TaskInstance> eval_set, std::span<const std::size_t> ks,
                    double temperature, double top_p, std::size_t max_len, std::uint64_t seed) {
  if (ks.empty()) throw DomainError("evaluation needs at least one K");
  for (auto k : ks) {
    if (k < 1) throw DomainError("K must be at least 1");
  }
  EvalReport rep;
  rep.ks.assign(ks.begin(), ks.end());
  rep.maj.assign(ks.size(), 0.0);
  rep.pass.assign(ks.size(), 0.0);
  rep.questions = eval_set.size();
  if (eval_set.empty()) return rep;
  const std::size_t kmax = *std::max_element(ks.begin(), ks.end());
  SamplingOptions opts;
  opts.group_size = kmax;
  opts.max_len = max_len;
  opts.temperature = temperature;
  opts.top_p = top_p;
  double greedy = 0.0;
  for (const auto& task : eval_set) {
    const auto g = greedy_decode(policy, task.question, max_len);
    greedy += rule_reward(verify(policy.vocab(), task, g.output));
    const auto group = sample_group(policy, task.question, opts, derive_seed(seed, task.id), SamplerRole::kEval);
    std::vector<std::optional<long long>> answers;
    std::vector<Verdict> verdicts;
    for (const auto& o : group.outputs) {
      verdicts.push_back(verify(policy.vocab(), task, o.output));
      answers.push_back(verdicts.back().parsed_answer);
    }
    for (std::size_t j = 0; j < ks.size(); ++j) {
      const std::span<const std::optional<long long>> a(answers.data(), ks[j]);
      const std::span<const Verdict> v(verdicts.data(), ks[j]);
      rep.maj[j] += maj_at_k(a, task.answer_value);
      rep.pass[j] += pass_at_k(v);
    }
    rep.answers.push_back(std::move(answers));
  }
  const auto n = static_cast<double>(eval_set.size());
  rep.greedy_accuracy = greedy / n;
  for (std::size_t j = 0; j < ks.size(); ++j) {
    rep.maj[j] /= n;
    rep.pass[j] /= n;
  }
  return rep;
}

RunState train_sft(RunState s, std::span<const TaskInstance> dataset, const RunConfig& config, std::size_t steps,
                   double lr, const TrainObserver& obs) {
  if (dataset.empty()) throw ConfigError("SFT needs a non-empty dataset");
  const std::size_t n = std::min(config.sft_size, dataset.size());
  std::vector<TokenSeq> gold;
  gold.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    gold.push_back(TokenSeq::make(s.policy.vocab(), dataset[i].question, gold_output(s.policy.vocab(), dataset[i])));
  }
  Optimizer sgd;
  sgd.lr = lr;
  for (std::size_t k = 1; k <= steps; ++k) {
    const auto batch = draw_batch(n, config.sft_batch, derive_seed(config.seed, kBatchTag ^ 0x5f7, k));
    std::vector<TokenSeq> seqs;
    std::vector<double> ones;
    std::vector<std::size_t> lens;
    std::vector<std::uint64_t> ids;
    for (auto i : batch) {
      seqs.push_back(gold[i]);
      ones.push_back(gc_sft());
      lens.push_back(gold[i].size());
      ids.push_back(dataset[i].id);
    }
    const auto gc = sequence_coefficients(Method::kSft, ones, lens);
    if (obs.on_gc) obs.on_gc(GcTrace{k, &gc, ids});
    sgd.ascend(s.policy.weights(), unified_gradient(gc, s.policy, seqs));
    check_finite(s, obs, "sft");
    if (obs.on_step) {
      StepMetrics m;
      m.step = k;
      m.method = Method::kSft;
      m.mean_reward = 1.0;
      m.sample_accuracy = 1.0;
      m.objective = sft_objective(s.policy, seqs);
      obs.on_step(m);
    }
  }
  s.sft = freeze(s.policy);
  s.reference = s.sft;
  return s;
}

RunState train_rft(RunState sft_state, std::span<const TaskInstance> questions, const RunConfig& config,
                   std::span<const TaskInstance> eval_set, const TrainObserver& obs) {
  return train_rejection_sampling(std::move(sft_state), questions, config, eval_set, obs, false);
}

RunState train_online_rft(RunState sft_state, std::span<const TaskInstance> questions, const RunConfig& config,
                          std::span<const TaskInstance> eval_set, const TrainObserver& obs) {
  return train_rejection_sampling(std::move(sft_state), questions, config, eval_set, obs, true);
}

RunState train_dpo(RunState s, std::span<const TaskInstance> questions, const RunConfig& config,
                   std::span<const TaskInstance> eval_set, const TrainObserver& obs) {
  if (!s.sft) throw UsageError("DPO needs an SFT state");
  s.optimizer = make_optimizer(config);
  const std::uint64_t start = s.global_step;
  const PolicyParams& ref = *s.sft;

  std::vector<std::vector<Group>> offline;
  for (std::uint64_t k = 1; k <= config.steps; ++k) {
    const auto batch = step_batch(config, questions.size(), start + k);
    offline.push_back(sample_groups(ref, questions, batch, config, start + k, SamplerRole::kSft));
    emit_sample_event(obs, s, offline.back(), SamplerRole::kSft, start + k);
    for (const auto& g : offline.back()) s.samples_drawn += g.samples.size();
  }

  emit_initial(s, Method::kDpo, config, eval_set, obs);
  for (std::uint64_t k = 1; k <= config.steps; ++k) {
    ++s.global_step;
    const auto& groups = offline[k - 1];
    std::vector<TokenSeq> seqs;
    std::vector<std::size_t> lens;
    std::vector<double> gcs;
    double log_sigmoid_sum = 0.0;
    std::vector<std::uint64_t> ids;
    Rng rng(derive_seed(config.seed, kPairTag, s.global_step));
    for (const auto& g : groups) {
      std::vector<std::size_t> good;
      std::vector<std::size_t> bad;
      for (std::size_t i = 0; i < g.samples.size(); ++i) (g.verdicts[i].answer_correct ? good : bad).push_back(i);
      if (good.empty() || bad.empty()) continue;
      const auto& pos = g.samples.outputs[good[rng.below(good.size())]];
      const auto& neg = g.samples.outputs[bad[rng.below(bad.size())]];
      const double lr_pos = mean_log_ratio(logprob(s.policy, pos), logprob(ref, pos));
      const double lr_neg = mean_log_ratio(logprob(s.policy, neg), logprob(ref, neg));
      gcs.push_back(gc_dpo(lr_pos, lr_neg, config.dpo_beta));
      const double margin = config.dpo_beta * (lr_pos - lr_neg);
      log_sigmoid_sum += -std::log1p(std::exp(-std::abs(margin))) + std::min(margin, 0.0);
      seqs.push_back(pos);
      seqs.push_back(neg);
      ids.insert(ids.end(), 2, g.task->id);
      lens.push_back(pos.size());
      lens.push_back(neg.size());
    }
    StepMetrics m;
    m.method = Method::kDpo;
    m.sample_accuracy = sample_accuracy(groups);
    if (!gcs.empty()) {
      const auto gc = dpo_coefficients(gcs, lens);
      emit_gc(obs, s, gc, ids);
      auto grad = unified_gradient(gc, s.policy, seqs);
      // d/dtheta log sigma(beta * x) carries a factor beta on top of the coefficient.
      grad *= config.dpo_beta;
      s.optimizer.ascend(s.policy.weights(), grad);
      emit_event(obs, TraceEvent::Kind::kPolicyUpdate, s);
      m.mean_reward = std::accumulate(gcs.begin(), gcs.end(), 0.0) / static_cast<double>(gcs.size());
      m.objective = log_sigmoid_sum / static_cast<double>(gcs.size());
    }
    m.mean_kl = mean_kl(s.policy, ref, groups);
    finish_step(s, m, config, eval_set, k, config.steps, obs);
  }
  return s;
}

RunState train_ppo(RunState s, std::span<const TaskInstance> questions, const RunConfig& config,
                   std::span<const TaskInstance> eval_set, const TrainObserver& obs) {
  if (!s.reference) throw UsageError("PPO needs a reference policy");
  s.optimizer = make_optimizer(config);
  if (s.value.weights.size() != s.policy.feature_map().dim()) s.value = ValueParams::zeros(s.policy, config.gamma, config.lambda);
  s.value.gamma = config.gamma;
  s.value.lambda = config.lambda;

  emit_initial(s, Method::kPpo, config, eval_set, obs);
  for (std::uint64_t k = 1; k <= config.steps; ++k) {
    ++s.global_step;
    s.old = freeze(s.policy);
    emit_event(obs, TraceEvent::Kind::kOldPolicyUpdate, s);
    const auto batch = step_batch(config, questions.size(), s.global_step);
    auto groups = sample_groups(*s.old, questions, batch, config, s.global_step, SamplerRole::kOld);
    emit_sample_event(obs, s, groups, SamplerRole::kOld);

    std::vector<TokenSeq> seqs;
    std::vector<std::uint64_t> ids;
    AdvantageTensor adv;
    AdvantageTensor logp_old;
    double reward_sum = 0.0;
    double kl_sum = 0.0;
    double tokens = 0.0;
    for (const auto& g : groups) {
      s.samples_drawn += g.samples.size();
      const auto scores = outcome_rewards(s, g, config);
      for (std::size_t i = 0; i < g.samples.size(); ++i) {
        const auto& o = g.samples.outputs[i];
        const auto& lp = g.samples.logprobs[i];
        const auto lr = logprob(*s.reference, o);
        std::vector<double> r(o.size());
        for (std::size_t t = 0; t < o.size(); ++t) {
          r[t] = kl_penalized_token_reward(scores[i], lp[t], lr[t], config.kl_beta, t, o.size());
          kl_sum += kl_estimate(lp[t], lr[t]);
        }
        tokens += static_cast<double>(o.size());
        const auto values = s.value.values(s.policy, o);
        auto a = gae(r, values, config.gamma, config.lambda);
        std::vector<double> targets(a.size());
        for (std::size_t t = 0; t < a.size(); ++t) targets[t] = a[t] + values[t];
        s.value.fit(s.policy, o, targets, config.value_lr);
        reward_sum += scores[i];
        seqs.push_back(o);
        ids.push_back(g.task->id);
        adv.push_back(std::move(a));
        logp_old.push_back(lp);
      }
    }

    const double w = seqs.empty() ? 0.0 : 1.0 / static_cast<double>(seqs.size());
    double objective = 0.0;
    for (std::size_t inner = 0; inner < config.grpo_mu; ++inner) {
      GradientCoefficient gc = gc_ppo(adv);
      for (std::size_t i = 0; i < seqs.size(); ++i) {
        const auto lp = logprob(s.policy, seqs[i]);
        double sur = 0.0;
        for (std::size_t t = 0; t < lp.size(); ++t) {
          const double ratio = std::exp(lp[t] - logp_old[i][t]);
          gc.values[i][t] = clipped_surrogate_grad(ratio, adv[i][t], config.clip_eps);
          sur += clipped_surrogate(ratio, adv[i][t], config.clip_eps);
        }
        if (inner == 0 && !lp.empty()) objective += w * sur / static_cast<double>(lp.size());
        gc.output_weight[i] = w;
      }
      if (inner == 0) emit_gc(obs, s, gc, ids);
      s.optimizer.ascend(s.policy.weights(), unified_gradient(gc, s.policy, seqs));
      emit_event(obs, TraceEvent::Kind::kPolicyUpdate, s);
    }

    StepMetrics m;
    m.method = Method::kPpo;
    m.objective = objective;
    m.sample_accuracy = sample_accuracy(groups);
    m.mean_reward = seqs.empty() ? 0.0 : reward_sum / static_cast<double>(seqs.size());
    m.mean_kl = tokens > 0 ? kl_sum / tokens : 0.0;
    finish_step(s, m, config, eval_set, k, config.steps, obs);
  }
  return s;
}

RunState train_grpo(RunState s, std::span<const TaskInstance> questions, const RunConfig& config,
                    Supervision supervision, std::span<const TaskInstance> eval_set, const TrainObserver& obs,
                    std::vector<RewardRecord>* records) {
  if (!s.reference) throw UsageError("GRPO needs a reference policy");
  const Vocab& vocab = s.policy.vocab();
  const std::uint64_t first = s.global_step;

  for (std::uint64_t k = 1; k <= config.steps; ++k) {
    ++s.global_step;
    s.old = freeze(s.policy);
    emit_event(obs, TraceEvent::Kind::kOldPolicyUpdate, s);
    const auto batch = step_batch(config, questions.size(), s.global_step);
    auto groups = sample_groups(*s.old, questions, batch, config, s.global_step, SamplerRole::kOld);
    emit_sample_event(obs, s, groups, SamplerRole::kOld);

    std::vector<ScoredGroup> scored;
    scored.reserve(groups.size());
    double reward_sum = 0.0;
    double reward_n = 0.0;
    double kl_sum = 0.0;
    double tokens = 0.0;
    for (auto& g : groups) {
      s.samples_drawn += g.samples.size();
      ScoredGroup sg;
      std::vector<std::size_t> lens;
      for (const auto& o : g.samples.outputs) lens.push_back(o.size());
      std::vector<std::vector<double>> record_scores(g.samples.size());
      if (supervision == Supervision::kOutcome) {
        sg.rewards = outcome_rewards(s, g, config);
        sg.advantages = outcome_advantages(sg.rewards, lens);
        for (std::size_t i = 0; i < sg.rewards.size(); ++i) record_scores[i] = {sg.rewards[i]};
      } else {
        const auto R = process_rewards(s, g, config);
        sg.advantages = process_advantages(R, lens);
        for (std::size_t i = 0; i < R.size(); ++i) {
          double mean = 0.0;
          for (const auto& [_, r] : R[i]) {
            mean += r;
            record_scores[i].push_back(r);
          }
          sg.rewards.push_back(R[i].empty() ? 0.0 : mean / static_cast<double>(R[i].size()));
        }
      }
      for (std::size_t i = 0; i < g.samples.size(); ++i) {
        sg.logp_ref.push_back(logprob(*s.reference, g.samples.outputs[i]));
        for (std::size_t t = 0; t < g.samples.outputs[i].size(); ++t) {
          kl_sum += kl_estimate(g.samples.logprobs[i][t], sg.logp_ref.back()[t]);
        }
        tokens += static_cast<double>(g.samples.outputs[i].size());
        reward_sum += sg.rewards[i];
        reward_n += 1.0;
        if (records) {
          RewardRecord rec;
          rec.question_id = g.task->id;
          rec.question = g.task->question;
          rec.output = g.samples.outputs[i].output;
          rec.verdict = g.verdicts[i];
          rec.scores = std::move(record_scores[i]);
          rec.source_iteration = s.iteration;
          records->push_back(std::move(rec));
        }
      }
      sg.group = std::move(g);
      scored.push_back(std::move(sg));
    }

    const double group_weight = scored.empty() ? 0.0 : 1.0 / static_cast<double>(scored.size());
    double objective = 0.0;
    for (std::size_t inner = 0; inner < config.grpo_mu; ++inner) {
      ParamArray grad(s.policy.weights().vocab(), s.policy.weights().features());
      for (const auto& sg : scored) {
        const auto& outs = sg.group.samples.outputs;
        GradientCoefficient gc;
        gc.method = Method::kGrpo;
        gc.output_weight.assign(outs.size(), 1.0 / static_cast<double>(outs.size()));
        for (std::size_t i = 0; i < outs.size(); ++i) {
          const auto lp = logprob(s.policy, outs[i]);
          std::vector<double> row(lp.size());
          double per_output = 0.0;
          for (std::size_t t = 0; t < lp.size(); ++t) {
            const double lold = sg.group.samples.logprobs[i][t];
            row[t] = grpo_token_coefficient(sg.advantages[i][t], lp[t], lold, sg.logp_ref[i][t], config.clip_eps,
                                            config.kl_beta);
            per_output += clipped_surrogate(std::exp(lp[t] - lold), sg.advantages[i][t], config.clip_eps) -
                          config.kl_beta * kl_estimate(lp[t], sg.logp_ref[i][t]);
          }
          if (inner == 0 && !lp.empty()) {
            objective += group_weight * per_output / static_cast<double>(lp.size() * outs.size());
          }
          gc.values.push_back(std::move(row));
        }
        if (inner == 0 && obs.on_gc) emit_gc(obs, s, gc, std::vector<std::uint64_t>(outs.size(), sg.group.task->id));
        accumulate_unified_gradient(gc, s.policy, outs, group_weight, grad);
      }
      s.optimizer.ascend(s.policy.weights(), grad);
      emit_event(obs, TraceEvent::Kind::kPolicyUpdate, s);
    }

    StepMetrics m;
    m.method = Method::kGrpo;
    m.objective = objective;
    m.sample_accuracy = sample_accuracy(groups.empty() ? std::vector<Group>{} : [&] {
      std::vector<Group> gs;
      for (auto& sg : scored) gs.push_back(sg.group);
      return gs;
    }());
    m.mean_reward = reward_n > 0 ? reward_sum / reward_n : 0.0;
    m.mean_kl = tokens > 0 ? kl_sum / tokens : 0.0;
    finish_step(s, m, config, eval_set, s.global_step - first, config.steps, obs);
  }
  (void)vocab;
  return s;
}

RunState init_reward_models(RunState s, std::span<const TaskInstance> questions, const RunConfig& config,
                            const TrainObserver& obs) {
  if (!s.sft) throw UsageError("reward model initialization needs an SFT policy");
  const Vocab& vocab = s.policy.vocab();
  const std::size_t n = std::min(config.rm_init_questions, questions.size());
  SamplingOptions opts = config.exploration();
  opts.group_size = config.rm_init_samples;
  std::vector<RewardRecord> records;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& task = questions[i];
    const auto g = sample_group(*s.sft, task.question, opts, derive_seed(config.seed, kRmTag, task.id), SamplerRole::kSft);
    for (const auto& o : g.outputs) {
      RewardRecord r;
      r.question_id = task.id;
      r.question = task.question;
      r.output = o.output;
      r.verdict = verify(vocab, task, o.output);
      r.scores = {rule_reward(r.verdict)};
      r.source_iteration = 0;
      records.push_back(std::move(r));
    }
  }
  if (obs.on_event) {
    TraceEvent e;
    e.kind = TraceEvent::Kind::kSample;
    e.source = SamplerRole::kSft;
    e.count = records.size();
    obs.on_event(e);
  }
  RmTrainOptions topts;
  topts.lr = config.rm_lr;
  topts.epochs = config.rm_epochs;
  s.rm_outcome = train_outcome_rm(vocab, records, topts);
  s.rm_process = train_process_rm(vocab, records, topts);
  s.replay.add(0, std::move(records));
  return s;
}

RunState iterate_grpo(RunState s, std::span<const TaskInstance> questions, const RunConfig& config,
                      std::span<const TaskInstance> eval_set, const TrainObserver& obs) {
  if (!s.sft) throw UsageError("iterative GRPO needs an SFT state");
  s.optimizer = make_optimizer(config);
  emit_initial(s, Method::kGrpo, config, eval_set, obs);
  for (std::size_t it = 1; it <= config.iterations; ++it) {
    s.iteration = it;
    s.reference = freeze(s.policy);
    if (obs.on_event) {
      TraceEvent e;
      e.kind = TraceEvent::Kind::kReferenceReset;
      e.iteration = s.iteration;
      e.step = s.global_step;
      // KL of the live policy against the fresh reference on one greedy output per question.
      double kl = 0.0;
      for (std::size_t q = 0; q < std::min<std::size_t>(questions.size(), 8); ++q) {
        const auto o = greedy_decode(s.policy, questions[q].question, config.max_len);
        const auto lp = logprob(s.policy, o);
        const auto lr = logprob(*s.reference, o);
        for (std::size_t t = 0; t < lp.size(); ++t) kl += kl_estimate(lp[t], lr[t]);
      }
      e.kl_to_reference = kl;
      obs.on_event(e);
    }

    std::vector<RewardRecord> records;
    s = train_grpo(std::move(s), questions, config, config.supervision, eval_set, obs, &records);

    ReplayOptions ropts;
    ropts.train.lr = config.rm_lr;
    ropts.train.epochs = config.rm_epochs;
    ropts.historical_fraction = config.replay_fraction;
    ropts.seed = config.seed;
    ReplayStats stats;
    const Vocab& vocab = s.policy.vocab();
    if (config.supervision == Supervision::kOutcome) {
      s.rm_outcome = update_rm_with_replay(vocab, s.rm_outcome, std::move(records), s.replay, it, ropts, &stats);
    } else {
      s.rm_process = update_rm_with_replay(vocab, s.rm_process, std::move(records), s.replay, it, ropts, &stats);
    }
    if (obs.on_event) {
      TraceEvent e;
      e.kind = TraceEvent::Kind::kRewardModelUpdate;
      e.iteration = s.iteration;
      e.step = s.global_step;
      e.count = stats.new_records;
      e.historical = stats.historical_records;
      obs.on_event(e);
    }
  }
  return s;
}

RunState train_method(RunState s, std::span<const TaskInstance> questions, const RunConfig& config,
                      std::span<const TaskInstance> eval_set, const TrainObserver& obs) {
  switch (config.method) {
    case Method::kSft: {
      emit_initial(s, Method::kSft, config, eval_set, obs);
      // Continue supervised training for the same number of steps, reporting on the RL schedule.
      TrainObserver inner;
      const std::uint64_t start = s.global_step;
      for (std::uint64_t k = 1; k <= config.steps; ++k) {
        RunConfig one = config;
        one.seed = derive_seed(config.seed, start + k);
        auto ref = s.sft;
        s = train_sft(std::move(s), questions, one, 1, config.policy_lr, inner);
        s.sft = ref;
        s.reference = ref;
        ++s.global_step;
        StepMetrics m;
        m.method = Method::kSft;
        m.mean_reward = 1.0;
        m.sample_accuracy = 1.0;
        finish_step(s, m, config, eval_set, k, config.steps, obs);
      }
      return s;
    }
    case Method::kRft: return train_rft(std::move(s), questions, config, eval_set, obs);
    case Method::kOnlineRft: return train_online_rft(std::move(s), questions, config, eval_set, obs);
    case Method::kDpo: return train_dpo(std::move(s), questions, config, eval_set, obs);
    case Method::kPpo: return train_ppo(std::move(s), questions, config, eval_set, obs);
    case Method::kGrpo: return iterate_grpo(std::move(s), questions, config, eval_set, obs);
  }
  return s;
}

Datasets make_datasets(const RunConfig& config) {
  const Vocab vocab = Vocab::arithmetic();
  Datasets d;
  d.train = generate_dataset(vocab, config.task_seed, config.train_size, config.task());
  if (config.eval_size > 0) {
    d.eval = generate_dataset(vocab, derive_seed(config.eval_seed, 0xe7a1), config.eval_size, config.task());
  }
  return d;
}

RunState run_pipeline(const RunConfig& config, const TrainObserver& obs, RunState* sft_out) {
  config.validate();
  const auto data = make_datasets(config);
  RunState s = initial_state(config);
  s = train_sft(std::move(s), data.train, config, config.sft_steps, config.sft_lr);
  const bool needs_rm = config.reward_source == RewardSource::kModel &&
                        (config.method == Method::kGrpo || config.method == Method::kPpo);
  if (needs_rm) s = init_reward_models(std::move(s), data.train, config, obs);
  if (sft_out) *sft_out = s;
  return train_method(std::move(s), data.train, config, data.eval, obs);
}

// ---------------------------------------------------------------------------------------------
// Checkpoint serialization

namespace {

constexpr std::string_view kStateMagic = "GRPORUN\x01";

void write_frozen(io::Writer& w, const FrozenPolicy& p) {
  w.u8(p ? 1 : 0);
  if (p) w.str(p->serialize());
}

FrozenPolicy read_frozen(io::Reader& r) {
  if (r.u8() == 0) return {};
  return freeze(PolicyParams::deserialize(r.str()));
}

void write_record(io::Writer& w, const RewardRecord& rec) {
  w.u64(rec.question_id);
  w.i64s(rec.question);
  w.i64s(rec.output);
  w.u8(rec.verdict.answer_correct ? 1 : 0);
  w.u8(rec.verdict.parsed_answer ? 1 : 0);
  w.i64(rec.verdict.parsed_answer.value_or(0));
  w.u64(rec.verdict.step_correct.size());
  for (bool b : rec.verdict.step_correct) w.u8(b ? 1 : 0);
  w.f64s(rec.scores);
  w.u64(rec.source_iteration);
}

RewardRecord read_record(io::Reader& r) {
  RewardRecord rec;
  rec.question_id = r.u64();
  rec.question = r.i64s();
  rec.output = r.i64s();
  rec.verdict.answer_correct = r.u8() != 0;
  const bool has = r.u8() != 0;
  const auto parsed = r.i64();
  if (has) rec.verdict.parsed_answer = parsed;
  const auto n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) rec.verdict.step_correct.push_back(r.u8() != 0);
  rec.scores = r.f64s();
  rec.source_iteration = r.u64();
  return rec;
}

}  // namespace

std::string RunState::serialize() const {
  io::Writer w;
  w.magic(kStateMagic);
  w.str(policy.serialize());
  write_frozen(w, sft);
  write_frozen(w, reference);
  write_frozen(w, old);
  w.str(rm_outcome.serialize());
  w.str(rm_process.serialize());
  w.f64s(value.weights);
  w.f64(value.gamma);
  w.f64(value.lambda);
  w.u64(replay.capacity());
  w.u64(replay.partitions());
  for (const auto& [iter, recs] : replay.parts()) {
    w.u64(iter);
    w.u64(recs.size());
    for (const auto& rec : recs) write_record(w, rec);
  }
  w.u8(static_cast<std::uint8_t>(optimizer.kind));
  w.f64(optimizer.lr);
  w.f64(optimizer.beta1);
  w.f64(optimizer.beta2);
  w.f64(optimizer.eps);
  w.u64(optimizer.t);
  w.u64(optimizer.m.vocab());
  w.u64(optimizer.m.features());
  w.f64s(optimizer.m.flat());
  w.f64s(optimizer.v.flat());
  w.u64(global_step);
  w.u64(iteration);
  w.u64(samples_drawn);
  return w.bytes();
}

RunState RunState::deserialize(std::string_view bytes) {
  io::Reader r(bytes);
  r.expect_magic(kStateMagic);
  RunState s;
  s.policy = PolicyParams::deserialize(r.str());
  s.sft = read_frozen(r);
  s.reference = read_frozen(r);
  s.old = read_frozen(r);
  s.rm_outcome = RewardModelParams::deserialize(r.str());
  s.rm_process = RewardModelParams::deserialize(r.str());
  s.value.weights = r.f64s();
  s.value.gamma = r.f64();
  s.value.lambda = r.f64();
  s.replay = ReplayBuffer(static_cast<std::size_t>(r.u64()));
  const auto parts = r.u64();
  for (std::uint64_t p = 0; p < parts; ++p) {
    const auto iter = r.u64();
    const auto n = r.u64();
    std::vector<RewardRecord> recs;
    for (std::uint64_t i = 0; i < n; ++i) recs.push_back(read_record(r));
    s.replay.add(iter, std::move(recs));
  }
  const auto kind = r.u8();
  if (kind > 1) throw DomainError("unknown optimizer kind in checkpoint");
  s.optimizer.kind = static_cast<OptimizerKind>(kind);
  s.optimizer.lr = r.f64();
  s.optimizer.beta1 = r.f64();
  s.optimizer.beta2 = r.f64();
  s.optimizer.eps = r.f64();
  s.optimizer.t = r.u64();
  const auto mv = r.u64();
  const auto mf = r.u64();
  s.optimizer.m = ParamArray(mv, mf);
  s.optimizer.v = ParamArray(mv, mf);
  s.optimizer.m.flat() = r.f64s();
  s.optimizer.v.flat() = r.f64s();
  if (s.optimizer.m.flat().size() != mv * mf || s.optimizer.v.flat().size() != mv * mf) {
    throw DomainError("optimizer moment size mismatch");
  }
  s.global_step = r.u64();
  s.iteration = r.u64();
  s.samples_drawn = r.u64();
  if (!r.done()) throw DomainError("trailing bytes in checkpoint");
  return s;
}

}  // namespace grpolab
