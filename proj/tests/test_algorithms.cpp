#include <doctest.h>

#include <random>

#include "grpolab/algorithms.hpp"
#include "gradient_cases.hpp"
#include "oracles.hpp"

using namespace grpolab;

TEST_CASE("outcome normalization") {
  const std::vector<double> r{1, 0, 0, 1};
  CHECK(normalize_rewards(r) == std::vector<double>{1, -1, -1, 1});
  const std::vector<double> flat{0.3, 0.3, 0.3};
  for (double a : normalize_rewards(flat)) CHECK(a == 0.0);
  CHECK(normalize_rewards(std::vector<double>{5.0}) == std::vector<double>{0.0});

  const std::vector<std::size_t> lens{2, 3, 1, 1};
  const auto adv = outcome_advantages(r, lens);
  CHECK(adv == AdvantageTensor{{1, 1}, {-1, -1, -1}, {-1}, {1}});
  CHECK_THROWS_AS(outcome_advantages(r, std::vector<std::size_t>{1, 2}), UsageError);
}

TEST_CASE("normalization is affine invariant and matches the population-std oracle") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  std::uniform_real_distribution<double> pos(0.1, 10.0);
  for (int c = 0; c < 500; ++c) {
    std::vector<double> r(2 + c % 15);
    for (auto& x : r) x = n(rng);
    const auto a = normalize_rewards(r);
    const double m = oracle::mean(r), sd = oracle::pop_std(r);
    for (std::size_t i = 0; i < r.size(); ++i) CHECK(std::abs(a[i] - (r[i] - m) / sd) <= 1e-12);
    const double s = pos(rng), b = n(rng) * 5;
    auto r2 = r;
    for (auto& x : r2) x = s * x + b;
    const auto a2 = normalize_rewards(r2);
    for (std::size_t i = 0; i < r.size(); ++i) CHECK(std::abs(a2[i] - a[i]) <= 1e-9);
  }
}

TEST_CASE("process advantages: two steps give a+b before the first end and b after") {
  // One output, step ends at 1 and 3; normalized jointly with a second output's single step.
  const std::vector<StepRewards> R{{{1, 1.0}, {3, 0.0}}, {{0, 0.5}}};
  const std::vector<std::size_t> lens{5, 2};
  const auto adv = process_advantages(R, lens);
  const auto norm = normalize_rewards(std::vector<double>{1.0, 0.0, 0.5});
  CHECK(adv[0][0] == doctest::Approx(norm[0] + norm[1]));
  CHECK(adv[0][1] == doctest::Approx(norm[0] + norm[1]));
  CHECK(adv[0][2] == doctest::Approx(norm[1]));
  CHECK(adv[0][3] == doctest::Approx(norm[1]));
  CHECK(adv[0][4] == 0.0);  // after the last step end
  CHECK(adv[1][0] == doctest::Approx(norm[2]));
  CHECK(adv[1][1] == 0.0);
}

TEST_CASE("process advantages equal brute-force suffix sums") {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n;
  for (int c = 0; c < 300; ++c) {
    const std::size_t G = 1 + c % 6;
    std::vector<StepRewards> R(G);
    std::vector<std::size_t> lens(G);
    for (std::size_t i = 0; i < G; ++i) {
      lens[i] = 1 + rng() % 12;
      for (std::size_t t = 0; t < lens[i]; ++t) {
        if (rng() % 3 == 0 || (t + 1 == lens[i] && R[i].empty())) R[i].emplace_back(t, n(rng));
      }
    }
    const auto got = process_advantages(R, lens);
    const auto want = oracle::suffix_sum_advantages(R, lens);
    for (std::size_t i = 0; i < G; ++i) {
      for (std::size_t t = 0; t < lens[i]; ++t) CHECK(std::abs(got[i][t] - want[i][t]) <= 1e-12);
    }
  }
}

TEST_CASE("GAE matches the explicit double sum") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n;
  for (int c = 0; c < 200; ++c) {
    std::vector<double> r(1 + c % 10), v(r.size());
    for (auto& x : r) x = n(rng);
    for (auto& x : v) x = n(rng);
    const double gamma = (c % 4) / 3.0, lambda = (c % 5) / 4.0;
    const auto got = gae(r, v, gamma, lambda);
    const auto want = oracle::gae_double_loop(r, v, gamma, lambda);
    for (std::size_t t = 0; t < r.size(); ++t) CHECK(std::abs(got[t] - want[t]) <= 1e-12);
  }
  CHECK_THROWS_AS(gae(std::vector<double>{1, 2}, std::vector<double>{1}, 1, 1), UsageError);
}

TEST_CASE("KL estimator values") {
  CHECK(kl_estimate(0.0, std::log(2.0)) == doctest::Approx(0.306853).epsilon(1e-6));
  CHECK(kl_estimate(0.0, std::log(0.5)) == doctest::Approx(0.193147).epsilon(1e-6));
  CHECK(kl_estimate(-1.3, -1.3) == 0.0);
  CHECK(kl_estimate(-1.3, -1.3 + 1e-12) >= 0.0);
}

TEST_CASE("clipped surrogate") {
  CHECK(clipped_surrogate(1.5, 1.0, 0.2) == doctest::Approx(1.2));
  CHECK(clipped_surrogate(0.5, -1.0, 0.2) == doctest::Approx(-0.8));
  CHECK(clipped_surrogate(1.5, -1.0, 0.2) == doctest::Approx(-1.5));
  CHECK(clipped_surrogate(1.1, 2.0, 0.2) == doctest::Approx(2.2));
  CHECK(clipped_surrogate_grad(1.5, 1.0, 0.2) == 0.0);
  CHECK(clipped_surrogate_grad(1.5, -1.0, 0.2) == doctest::Approx(-1.5));
  CHECK(clipped_surrogate_grad(0.5, -1.0, 0.2) == 0.0);
  CHECK(clipped_surrogate_grad(1.0, 0.7, 0.2) == doctest::Approx(0.7));
}

TEST_CASE("KL-penalized token reward") {
  CHECK(kl_penalized_token_reward(2.0, -1.0, -1.5, 0.1, 2, 3) == doctest::Approx(2.0 - 0.05));
  CHECK(kl_penalized_token_reward(2.0, -1.0, -1.5, 0.1, 0, 3) == doctest::Approx(-0.05));
  CHECK_THROWS_AS(kl_penalized_token_reward(2.0, -1.0, -1.5, 0.1, 3, 3), DomainError);
}

TEST_CASE("gradient coefficients") {
  Verdict good, bad;
  good.answer_correct = true;
  CHECK(gc_sft() == 1.0);
  CHECK(gc_rft(good) == 1.0);
  CHECK(gc_rft(bad) == 0.0);
  CHECK(gc_onrft(good) == 1.0);
  CHECK(gc_dpo(0.3, 0.3, 0.1) == 0.5);
  CHECK(gc_dpo(1.0, 0.0, 1.0) == doctest::Approx(1.0 / (1.0 + std::exp(1.0))));

  const AdvantageTensor adv{{0.5, 0.5}}, lp{{-1.0, -2.0}}, ref{{-1.0, -1.0}};
  const auto gc = gc_grpo(adv, lp, ref, 0.04);
  CHECK(gc.values[0][0] == doctest::Approx(0.5));
  CHECK(gc.values[0][1] == doctest::Approx(0.5 + 0.04 * (std::exp(1.0) - 1.0)));
  CHECK(grpo_token_coefficient(0.5, -2.0, -2.0, -1.0, 0.2, 0.04) == doctest::Approx(gc.values[0][1]));
  // Past the clip boundary only the KL part remains.
  CHECK(grpo_token_coefficient(1.0, 0.0, -1.0, 0.0, 0.2, 0.04) == doctest::Approx(0.0));

  const auto dpo = dpo_coefficients(std::vector<double>{0.25}, std::vector<std::size_t>{2, 3});
  CHECK(dpo.values == AdvantageTensor{{0.25, 0.25}, {-0.25, -0.25, -0.25}});
  CHECK_THROWS_AS(dpo_coefficients(std::vector<double>{0.25}, std::vector<std::size_t>{2}), UsageError);
}

TEST_CASE("dense and sparse unified gradients agree") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n;
  const auto p = oracle::random_policy(rng, 1.0);
  std::vector<TokenSeq> seqs;
  GradientCoefficient gc;
  std::vector<std::vector<ParamArray>> grads;
  for (int i = 0; i < 3; ++i) {
    seqs.push_back(oracle::random_seq(rng));
    std::vector<double> row(seqs.back().size());
    for (auto& x : row) x = n(rng);
    gc.values.push_back(row);
    gc.output_weight.push_back(0.2 + i);
    grads.emplace_back();
    for (std::size_t t = 0; t < seqs.back().size(); ++t) grads.back().push_back(grad_logprob(p, seqs.back(), t));
  }
  const auto dense = unified_gradient(gc, grads);
  const auto sparse = unified_gradient(gc, p, seqs);
  for (std::size_t i = 0; i < dense.size(); ++i) CHECK(std::abs(dense.flat()[i] - sparse.flat()[i]) <= 1e-12);

  gc.output_weight.pop_back();
  CHECK_THROWS_AS(unified_gradient(gc, p, seqs), UsageError);
}

TEST_CASE("each method's assembled gradient matches finite differences of its objective") {
  std::mt19937_64 rng(9);
  for (const auto& c : oracle::gradient_cases()) {
    for (int k = 0; k < 10; ++k) {
      const auto r = oracle::run_gradient_case(c, rng);
      INFO(c.label());
      CHECK(r.rel_error <= 1e-4);
    }
  }
}

TEST_CASE("PPO and GRPO surrogates have unit ratios at the sampling policy") {
  std::mt19937_64 rng(10);
  const auto p = oracle::random_policy(rng, 1.0);
  const std::vector<TokenSeq> seqs{oracle::random_seq(rng)};
  const AdvantageTensor old{logprob(p, seqs[0])};
  AdvantageTensor adv{std::vector<double>(seqs[0].size(), 1.5)};
  CHECK(ppo_objective(p, seqs, old, adv, 0.2) == doctest::Approx(1.5));
  CHECK(grpo_objective(p, seqs, old, old, adv, 0.2, 0.04) == doctest::Approx(1.5));
}

TEST_CASE("value head regression reduces the loss") {
  std::mt19937_64 rng(11);
  const auto p = oracle::random_policy(rng, 1.0);
  auto vp = ValueParams::zeros(p, 1.0, 0.95);
  const auto seq = oracle::random_seq(rng);
  std::vector<double> targets(seq.size(), 1.0);
  const double first = vp.fit(p, seq, targets, 0.5);
  double last = first;
  for (int i = 0; i < 20; ++i) last = vp.fit(p, seq, targets, 0.5);
  CHECK(last < first);
  CHECK_THROWS_AS(ValueParams::zeros(p, 1.5, 0.9), ConfigError);
  CHECK_THROWS_AS(vp.fit(p, seq, std::vector<double>(seq.size() + 1), 0.1), UsageError);
}

TEST_CASE("method names round-trip") {
  for (auto m : kAllMethods) CHECK(parse_method(to_string(m)) == m);
  CHECK_THROWS_AS(parse_method("reinforce"), ConfigError);
}
