// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any criterion fails.
//
//   acceptance            all criteria
//   acceptance 1 3 9      selected criteria

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "grpolab/binary_io.hpp"
#include "grpolab/report.hpp"
#include "grpolab/trainer.hpp"
#include "gradient_cases.hpp"
#include "oracles.hpp"

using namespace grpolab;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict_ {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

constexpr std::uint64_t kSeeds[] = {1, 2, 3, 4, 5};

// ---------------------------------------------------------------------------------------------
// Experiment runs shared between criteria.

struct RunResult {
  std::vector<StepMetrics> evals;  // metrics of evaluation steps, in order
  std::size_t samples = 0;         // outputs drawn for training (excluding reward-model initialization)
  double seconds = 0.0;

  const EvalReport& first() const { return *evals.front().eval; }
  const EvalReport& last() const { return *evals.back().eval; }
};

RunConfig experiment(Method m, std::uint64_t seed) {
  RunConfig c;
  c.method = m;
  c.seed = seed;
  c.task_seed = seed;
  c.difficulty = 2;
  c.train_size = 2000;
  c.eval_every = c.steps;  // warm start and final policy only
  return c;
}

RunResult run(const RunConfig& c) {
  RunResult r;
  const auto t0 = Clock::now();
  TrainObserver obs;
  obs.on_step = [&](const StepMetrics& m) {
    if (m.eval) r.evals.push_back(m);
  };
  obs.on_event = [&](const TraceEvent& e) {
    if (e.kind == TraceEvent::Kind::kSample && e.step > 0) r.samples += e.count;
  };
  run_pipeline(c, obs);
  r.seconds = seconds_since(t0);
  return r;
}

std::map<std::pair<int, std::uint64_t>, RunResult> g_cache;

const RunResult& cached(const std::string& key, std::uint64_t seed, const std::function<RunConfig()>& make) {
  static std::map<std::string, int> ids;
  const int id = ids.emplace(key, static_cast<int>(ids.size())).first->second;
  auto it = g_cache.find({id, seed});
  if (it == g_cache.end()) it = g_cache.emplace(std::pair{id, seed}, run(make())).first;
  return it->second;
}

const RunResult& grpo_outcome(std::uint64_t seed) {
  return cached("grpo-os", seed, [&] { return experiment(Method::kGrpo, seed); });
}

// ---------------------------------------------------------------------------------------------

Verdict_ gradient_equivalence() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(20240501);
  std::string detail;
  bool ok = true;
  for (const auto& c : oracle::gradient_cases()) {
    double worst = 0.0;
    for (int k = 0; k < 60; ++k) worst = std::max(worst, oracle::run_gradient_case(c, rng).rel_error);
    ok = ok && worst <= 1e-4;
    detail += fmt("%s %.1e; ", c.label().c_str(), worst);
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < 60.0;
  return {ok, "60 cases each, worst relative error: " + detail + fmt("%.1fs", secs)};
}

Verdict_ kl_estimator() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> lp(-30.0, 0.0);
  std::size_t negative = 0;
  for (int i = 0; i < 1000000; ++i) {
    const double k = kl_estimate(lp(rng), lp(rng));
    if (!(k >= 0.0)) ++negative;
  }

  // Explicit 8-category distributions.
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> zt(8), zr(8);
  for (auto& z : zt) z = n(rng);
  for (auto& z : zr) z = n(rng);
  std::vector<double> lt(8), lr(8);
  log_softmax(zt, lt);
  log_softmax(zr, lr);
  double exact = 0.0;
  std::vector<double> pt(8);
  for (int i = 0; i < 8; ++i) {
    pt[i] = std::exp(lt[i]);
    exact += pt[i] * (lt[i] - lr[i]);
  }
  std::discrete_distribution<int> draw(pt.begin(), pt.end());
  const int N = 100000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < N; ++i) {
    const int y = draw(rng);
    const double k = kl_estimate(lt[y], lr[y]);
    sum += k;
    sum2 += k * k;
  }
  const double mean = sum / N;
  const double se = std::sqrt((sum2 / N - mean * mean) / (N - 1));
  const double secs = seconds_since(t0);
  const bool ok = negative == 0 && std::abs(mean - exact) <= 3 * se && secs < 30.0;
  return {ok, fmt("%zu negative of 1e6; MC mean %.6f vs exact %.6f (|diff| %.2f SE); %.1fs", negative, mean, exact,
                  std::abs(mean - exact) / se, secs)};
}

Verdict_ advantage_normalization() {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_int_distribution<int> gsize(2, 16);
  std::uniform_int_distribution<int> scale(2, 12800);  // a = m / 128, so a in [0.016, 100]
  // Rewards, a and b live on a dyadic grid so a * r + b is computed without rounding and any
  // drift belongs to the normalization itself.
  const auto grid = [](double x) { return std::ldexp(std::nearbyint(std::ldexp(x, 20)), -20); };
  double worst_mean = 0.0, worst_std = 0.0, worst_affine = 0.0;
  std::size_t flat = 0, flat_bad = 0, nondegenerate = 0;
  for (int g = 0; g < 10000; ++g) {
    const int G = gsize(rng);
    std::vector<double> r(G);
    switch (g % 4) {
      case 0: for (auto& x : r) x = n(rng); break;
      case 1: for (auto& x : r) x = rng() % 2; break;              // binary rule rewards
      case 2: for (auto& x : r) x = 1e3 + 1e-3 * n(rng); break;    // small spread around a large offset
      default: std::fill(r.begin(), r.end(), n(rng)); break;       // zero variance
    }
    for (auto& x : r) x = grid(x);
    const auto a = normalize_rewards(r);
    const bool constant = std::all_of(r.begin(), r.end(), [&](double x) { return x == r[0]; });
    if (constant) {
      ++flat;
      for (double x : a) flat_bad += x != 0.0;
      continue;
    }
    ++nondegenerate;
    worst_mean = std::max(worst_mean, std::abs(oracle::mean(a)));
    worst_std = std::max(worst_std, std::abs(oracle::pop_std(a) - 1.0));
    const double s = std::ldexp(scale(rng), -7), b = grid(10.0 * n(rng));
    auto r2 = r;
    for (auto& x : r2) x = s * x + b;
    const auto a2 = normalize_rewards(r2);
    for (int i = 0; i < G; ++i) worst_affine = std::max(worst_affine, std::abs(a2[i] - a[i]));
  }
  const bool ok = worst_mean <= 1e-9 && worst_std <= 1e-9 && worst_affine <= 1e-9 && flat_bad == 0 && flat > 0;
  return {ok, fmt("%zu non-degenerate groups: max |mean| %.1e, max |std-1| %.1e, max affine drift %.1e; "
                  "%zu zero-variance groups, %zu nonzero advantages",
                  nondegenerate, worst_mean, worst_std, worst_affine, flat, flat_bad)};
}

Verdict_ process_oracle() {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 1.0);
  double worst = 0.0;
  for (int c = 0; c < 1000; ++c) {
    const std::size_t G = 1 + rng() % 16;
    std::vector<StepRewards> R(G);
    std::vector<std::size_t> lens(G);
    for (std::size_t i = 0; i < G; ++i) {
      lens[i] = 1 + rng() % 40;
      for (std::size_t t = 0; t < lens[i]; ++t) {
        if (rng() % 4 == 0 || (t + 1 == lens[i] && R[i].empty())) R[i].emplace_back(t, n(rng));
      }
    }
    const auto got = process_advantages(R, lens);
    const auto want = oracle::suffix_sum_advantages(R, lens);
    for (std::size_t i = 0; i < G; ++i) {
      for (std::size_t t = 0; t < lens[i]; ++t) worst = std::max(worst, std::abs(got[i][t] - want[i][t]));
    }
  }
  return {worst <= 1e-12, fmt("1000 fixtures, max |diff| %.1e", worst)};
}

Verdict_ paradigm_ordering() {
  const auto t0 = Clock::now();
  int holds = 0;
  bool equal_budget = true;
  std::string detail;
  for (auto seed : kSeeds) {
    const auto& rft = cached("rft", seed, [&] { return experiment(Method::kRft, seed); });
    const auto& on = cached("onrft", seed, [&] { return experiment(Method::kOnlineRft, seed); });
    const auto& gr = grpo_outcome(seed);
    const double a = rft.last().greedy_accuracy, b = on.last().greedy_accuracy, c = gr.last().greedy_accuracy;
    equal_budget = equal_budget && rft.samples == on.samples && on.samples == gr.samples;
    const bool ok = c >= b && b >= a;
    holds += ok;
    detail += fmt("s%llu %.3f/%.3f/%.3f%s; ", static_cast<unsigned long long>(seed), a, b, c, ok ? "" : " x");
  }
  const double secs = seconds_since(t0);
  const bool ok = holds >= 4 && equal_budget && secs < 15 * 60;
  return {ok, "RFT/OnlineRFT/GRPO greedy: " + detail +
                  fmt("ordering in %d/5, equal budgets %s, %.0fs", holds, equal_budget ? "yes" : "no", secs)};
}

Verdict_ process_vs_outcome() {
  int holds = 0;
  std::string detail;
  for (auto seed : kSeeds) {
    const auto& os = grpo_outcome(seed);
    const auto& ps = cached("grpo-ps", seed, [&] {
      auto c = experiment(Method::kGrpo, seed);
      c.supervision = Supervision::kProcess;
      return c;
    });
    const double a = os.last().greedy_accuracy, b = ps.last().greedy_accuracy;
    holds += b >= a;
    detail += fmt("s%llu OS %.3f PS %.3f; ", static_cast<unsigned long long>(seed), a, b);
  }
  return {holds >= 3, detail + fmt("PS >= OS in %d/5", holds)};
}

Verdict_ iterative_gains() {
  int holds = 0;
  std::string detail;
  for (auto seed : kSeeds) {
    const auto& r = cached("grpo-i3", seed, [&] {
      auto c = experiment(Method::kGrpo, seed);
      c.iterations = 3;
      return c;
    });
    // Accuracy at the end of each outer iteration.
    std::map<std::uint64_t, double> end_of;
    for (const auto& m : r.evals) {
      if (m.iteration > 0) end_of[m.iteration] = m.eval->greedy_accuracy;
    }
    if (end_of.size() != 3) return {false, "expected evaluations closing 3 iterations"};
    const double g1 = end_of[2] - end_of[1], g2 = end_of[3] - end_of[2];
    holds += g1 > g2;
    detail += fmt("s%llu %.3f/%.3f/%.3f; ", static_cast<unsigned long long>(seed), end_of[1], end_of[2], end_of[3]);
  }
  return {holds >= 3, "greedy after iterations 1/2/3: " + detail + fmt("first retraining gain larger in %d/5", holds)};
}

Verdict_ maj_vs_pass() {
  int holds = 0;
  std::string detail;
  for (auto seed : kSeeds) {
    const auto& r = grpo_outcome(seed);
    const auto& before = r.first();
    const auto& after = r.last();
    if (before.ks != std::vector<std::size_t>{1, 4, 16}) return {false, "evaluation K set is not {1, 4, 16}"};
    bool maj_up = true;
    for (std::size_t j = 0; j < 3; ++j) maj_up = maj_up && after.maj[j] > before.maj[j];
    const double dmaj16 = after.maj[2] - before.maj[2];
    const double dpass16 = after.pass[2] - before.pass[2];
    const bool ok = maj_up && std::abs(dpass16) < dmaj16;
    holds += ok;
    detail += fmt("s%llu maj %+.3f/%+.3f/%+.3f pass@16 %+.3f%s; ", static_cast<unsigned long long>(seed),
                  after.maj[0] - before.maj[0], after.maj[1] - before.maj[1], dmaj16, dpass16, ok ? "" : " x");
  }
  return {holds >= 4, "SFT to GRPO at T=0.7: " + detail + fmt("holds in %d/5", holds)};
}

Verdict_ reproducibility() {
  const fs::path root = fs::temp_directory_path() / "grpolab_acceptance_repro";
  fs::remove_all(root);
  std::vector<RunConfig> configs;
  for (auto m : kAllMethods) {
    RunConfig c;
    c.method = m;
    c.name = to_string(m);
    c.steps = 12;
    c.eval_every = 4;
    c.checkpoint_every = 6;
    c.train_size = 400;
    c.rm_init_questions = 200;
    c.trace_gc = true;
    if (m == Method::kDpo) c.policy_lr = 10.0;
    configs.push_back(c);
  }
  RunConfig it = configs.back();
  it.name = "grpo-iterative";
  it.iterations = 2;
  it.supervision = Supervision::kProcess;
  configs.push_back(it);

  std::size_t compared = 0;
  std::string bad;
  for (const auto& c : configs) {
    execute_run(c, root / "a" / c.name);
    execute_run(c, root / "b" / c.name);
    for (const auto& entry : fs::directory_iterator(root / "a" / c.name)) {
      const auto name = entry.path().filename().string();
      if (name == "timings.jsonl") continue;  // wall-clock only
      ++compared;
      if (io::read_file(entry.path().string()) != io::read_file((root / "b" / c.name / name).string())) {
        bad += c.name + "/" + name + " ";
      }
    }
  }
  fs::remove_all(root);
  return {bad.empty() && compared >= configs.size() * 6,
          fmt("%zu artifact files compared across %zu configs", compared, configs.size()) +
              (bad.empty() ? ", all byte-identical" : "; differing: " + bad)};
}

Verdict_ structural_audit() {
  RunConfig c;
  c.method = Method::kGrpo;
  c.iterations = 3;
  c.grpo_mu = 3;
  c.steps = 6;
  c.train_size = 300;
  c.rm_init_questions = 300;
  c.rm_init_samples = 4;
  c.replay_fraction = 0.2;
  c.eval_every = 0;

  std::vector<TraceEvent> ev;
  TrainObserver obs;
  obs.on_event = [&](const TraceEvent& e) { ev.push_back(e); };
  run_pipeline(c, obs);

  std::string problems;
  std::size_t resets = 0, rm_updates = 0, buffer = c.rm_init_questions * c.rm_init_samples;
  std::uint64_t iteration = 0;
  std::map<std::uint64_t, std::size_t> updates_per_step, old_per_step;
  bool saw_update_in_iteration = false;
  double worst_fraction_gap = 0.0;
  for (const auto& e : ev) {
    switch (e.kind) {
      case TraceEvent::Kind::kReferenceReset:
        ++resets;
        iteration = e.iteration;
        saw_update_in_iteration = false;
        if (e.iteration != resets) problems += "reset out of order; ";
        if (e.kl_to_reference != 0.0) problems += "nonzero KL right after reset; ";
        break;
      case TraceEvent::Kind::kOldPolicyUpdate:
        ++old_per_step[e.step];
        break;
      case TraceEvent::Kind::kSample:
        if (e.step > 0 && e.source != SamplerRole::kOld) problems += "exploration not from the old policy; ";
        break;
      case TraceEvent::Kind::kPolicyUpdate:
        if (e.iteration != iteration) problems += "update outside the current iteration; ";
        saw_update_in_iteration = true;
        ++updates_per_step[e.step];
        break;
      case TraceEvent::Kind::kRewardModelUpdate: {
        ++rm_updates;
        if (!saw_update_in_iteration) problems += "reward model retrained before any policy update; ";
        const double total = static_cast<double>(e.count + e.historical);
        const double frac = e.historical / total;
        // Integer batches can miss the fraction by at most one record.
        worst_fraction_gap = std::max(worst_fraction_gap, std::abs(frac - c.replay_fraction) * total);
        if (e.historical != replay_sample_size(e.count, buffer, c.replay_fraction)) problems += "replay sample size; ";
        buffer += e.count;
        break;
      }
    }
  }
  for (const auto& [step, n] : updates_per_step) {
    if (n != c.grpo_mu) problems += fmt("step %llu has %zu updates; ", static_cast<unsigned long long>(step), n);
    if (old_per_step[step] != 1) problems += "old policy not captured once per step; ";
  }
  if (updates_per_step.size() != c.iterations * c.steps) problems += "wrong number of exploration stages; ";
  if (resets != c.iterations) problems += "wrong number of reference resets; ";
  if (rm_updates != c.iterations) problems += "wrong number of reward model updates; ";
  if (worst_fraction_gap > 1.0) problems += "replay fraction off by more than one record; ";

  return {problems.empty(), fmt("I=%zu, mu=%zu: %zu resets, %zu exploration stages, %zu RM retrainings, "
                                "replay fraction within %.2f records of %.2f",
                                c.iterations, c.grpo_mu, resets, updates_per_step.size(), rm_updates,
                                worst_fraction_gap, c.replay_fraction) +
                                (problems.empty() ? "" : "; " + problems)};
}

struct Criterion {
  int id;
  const char* title;
  Verdict_ (*check)();
};

const Criterion kCriteria[] = {
    {1, "gradient equivalence", gradient_equivalence},
    {2, "KL estimator", kl_estimator},
    {3, "advantage normalization", advantage_normalization},
    {4, "process-supervision oracle", process_oracle},
    {5, "GRPO >= Online RFT >= RFT", paradigm_ordering},
    {6, "process >= outcome supervision", process_vs_outcome},
    {7, "iterative RL gains shrink", iterative_gains},
    {8, "RL lifts Maj@K, not Pass@K", maj_vs_pass},
    {9, "reproducibility", reproducibility},
    {10, "iterative procedure audit", structural_audit},
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  const auto t0 = Clock::now();
  for (const auto& c : kCriteria) {
    if (!only.empty() && !only.contains(c.id)) continue;
    Verdict_ v;
    try {
      v = c.check();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.pass;
    std::printf("criterion %2d: %s  %s: %s\n", c.id, v.pass ? "PASS" : "FAIL", c.title, v.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%s (%.0fs)\n", failed == 0 ? "all criteria passed" : "some criteria failed", seconds_since(t0));
  return failed == 0 ? 0 : 1;
}
