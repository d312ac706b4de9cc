#include <doctest.h>

#include <random>

#include "grpolab/rewards.hpp"

using namespace grpolab;

namespace {

const Vocab kV = Vocab::arithmetic();

RewardRecord record(const TaskInstance& t, std::vector<TokenId> output, std::uint64_t it = 0) {
  RewardRecord r;
  r.question_id = t.id;
  r.question = t.question;
  r.verdict = verify(kV, t, output);
  r.output = std::move(output);
  r.source_iteration = it;
  return r;
}

// Gold outputs plus copies with a wrong final step and answer.
std::vector<RewardRecord> labelled_records(std::size_t n, std::uint64_t seed) {
  const auto tasks = generate_dataset(kV, seed, n, {});
  std::vector<RewardRecord> out;
  for (const auto& t : tasks) {
    auto gold = gold_output(kV, t);
    out.push_back(record(t, gold));
    const int wrong = (t.answer_value + 1 + static_cast<int>(t.id % 5)) % 7;
    auto bad = gold;
    bad[bad.size() - 2] = wrong;  // answer digit
    bad[4] = wrong;               // second step value
    out.push_back(record(t, bad));
  }
  return out;
}

}  // namespace

TEST_CASE("rule reward") {
  Verdict v;
  CHECK(rule_reward(v) == 0.0);
  v.answer_correct = true;
  CHECK(rule_reward(v) == 1.0);
  v.step_correct = {true, false, true};
  CHECK(rule_step_rewards(v) == std::vector<double>{1.0, 0.0, 1.0});
  v.step_correct.clear();
  CHECK(rule_step_rewards(v) == std::vector<double>{1.0});
}

TEST_CASE("zero reward model scores exactly zero") {
  const auto t = generate_dataset(kV, 1, 1, {})[0];
  const auto gold = gold_output(kV, t);
  const auto rm = RewardModelParams::zeros(RewardKind::kOutcome);
  CHECK(score_outcome(rm, kV, t.question, gold) == 0.0);
  const auto prm = RewardModelParams::zeros(RewardKind::kProcess);
  for (const auto& [_, s] : score_process(prm, kV, TokenSeq::make(kV, t.question, gold))) CHECK(s == 0.0);
}

TEST_CASE("scores are dot products of weights and features") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  auto rm = RewardModelParams::zeros(RewardKind::kOutcome, 64);
  for (auto& w : rm.weights) w = n(rng);
  const auto tasks = generate_dataset(kV, 2, 20, {});
  for (const auto& t : tasks) {
    const auto o = gold_output(kV, t);
    double want = 0.0;
    for (auto f : outcome_features(kV, t.question, o, 64)) want += rm.weights[f];
    CHECK(score_outcome(rm, kV, t.question, o) == doctest::Approx(want).epsilon(1e-14));
  }

  auto prm = RewardModelParams::zeros(RewardKind::kProcess, 64);
  for (auto& w : prm.weights) w = n(rng);
  TaskConfig three;
  three.difficulty = 3;
  const auto t = generate_dataset(kV, 5, 1, three)[0];
  const auto seq = TokenSeq::make(kV, t.question, gold_output(kV, t));
  const auto scores = score_process(prm, kV, seq);
  REQUIRE(scores.size() == 3);
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(scores[j].first == seq.step_ends[j]);
    double want = 0.0;
    for (auto f : process_features(kV, t.question, seq.output, j + 1, 64)) want += prm.weights[f];
    CHECK(scores[j].second == doctest::Approx(want).epsilon(1e-14));
  }
}

TEST_CASE("outputs without delimiters get one process score at the last token") {
  const auto t = generate_dataset(kV, 1, 1, {})[0];
  const auto seq = TokenSeq::make(kV, t.question, {kV.ans(), t.answer_value, kV.eos()});
  CHECK(process_step_ends(seq) == std::vector<std::size_t>{2});
  CHECK(score_process(RewardModelParams::zeros(RewardKind::kProcess), kV, seq).size() == 1);
}

TEST_CASE("a separable fixture is fit perfectly") {
  const auto recs = labelled_records(100, 7);
  RmTrainReport rep;
  const auto rm = train_outcome_rm(kV, recs, {}, &rep);
  CHECK(rep.accuracy == 1.0);
  CHECK(rep.examples == recs.size());
  CHECK(!rm.degenerate);
  CHECK(rm.iterations == 1);
  for (const auto& r : recs) CHECK((score_outcome(rm, kV, r.question, r.output) > 0.0) == r.verdict.answer_correct);

  // Step tuples are hashed; a smaller fixture keeps wrong tuples clear of colliding with right ones.
  const auto small = labelled_records(40, 7);
  RmTrainReport prep;
  const auto prm = train_process_rm(kV, small, {}, &prep);
  CHECK(prep.accuracy == 1.0);
  CHECK(prep.examples == 2 * small.size());  // two steps per output
  for (const auto& r : small) {
    const auto s = score_process(prm, kV, TokenSeq::make(kV, r.question, r.output));
    REQUIRE(s.size() == r.verdict.step_correct.size());
    for (std::size_t j = 0; j < s.size(); ++j) CHECK((s[j].second > 0.0) == r.verdict.step_correct[j]);
  }
}

TEST_CASE("training loss never increases") {
  auto recs = labelled_records(60, 8);
  // Label noise keeps the problem from being trivially separable.
  for (std::size_t i = 0; i < recs.size(); i += 7) recs[i].verdict.answer_correct = !recs[i].verdict.answer_correct;
  RmTrainReport rep;
  RmTrainOptions opts;
  opts.epochs = 100;
  train_outcome_rm(kV, recs, opts, &rep);
  REQUIRE(rep.loss.size() >= 2);
  for (std::size_t i = 1; i < rep.loss.size(); ++i) CHECK(rep.loss[i] <= rep.loss[i - 1]);
  CHECK(rep.loss.back() < rep.loss.front());
}

TEST_CASE("single-label training data is flagged degenerate") {
  const auto tasks = generate_dataset(kV, 1, 10, {});
  std::vector<RewardRecord> recs;
  for (const auto& t : tasks) recs.push_back(record(t, gold_output(kV, t)));
  const auto rm = train_outcome_rm(kV, recs, {});
  CHECK(rm.degenerate);
  for (double w : rm.weights) CHECK(w == 0.0);
  CHECK_THROWS_AS(train_outcome_rm(kV, std::span<const RewardRecord>{}, {}), DomainError);
}

TEST_CASE("kind mismatches are usage errors") {
  const auto t = generate_dataset(kV, 1, 1, {})[0];
  const auto o = gold_output(kV, t);
  CHECK_THROWS_AS(score_outcome(RewardModelParams::zeros(RewardKind::kProcess), kV, t.question, o), UsageError);
  CHECK_THROWS_AS(score_process(RewardModelParams::zeros(RewardKind::kOutcome), kV, TokenSeq::make(kV, t.question, o)),
                  UsageError);
  CHECK_THROWS_AS(RewardModelParams::zeros(RewardKind::kOutcome, 0), ConfigError);
}

TEST_CASE("replay batch sizing") {
  CHECK(replay_sample_size(90, 1000, 0.1) == 10);
  CHECK(replay_sample_size(90, 5, 0.1) == 5);
  CHECK(replay_sample_size(90, 1000, 0.0) == 0);
  CHECK(replay_sample_size(90, 0, 0.1) == 0);
  CHECK(replay_sample_size(100, 1000, 0.5) == 100);
}

TEST_CASE("replay retraining mixes history and grows the buffer") {
  auto history = labelled_records(500, 9);  // 1000 records
  ReplayBuffer buf;
  buf.add(0, history);
  REQUIRE(buf.size() == 1000);

  auto fresh = labelled_records(45, 10);  // 90 records
  ReplayOptions opts;
  opts.historical_fraction = 0.1;
  ReplayStats stats;
  const auto rm0 = train_outcome_rm(kV, history, opts.train);
  const auto rm1 = update_rm_with_replay(kV, rm0, fresh, buf, 1, opts, &stats);
  CHECK(stats.new_records == 90);
  CHECK(stats.historical_records == 10);
  CHECK(stats.buffer_size_after == 1090);
  CHECK(buf.partitions() == 2);
  CHECK(buf.parts()[1].first == 1);
  CHECK(rm1.iterations == rm0.iterations + 1);
  CHECK_THROWS_AS(buf.at(1090), DomainError);
}

TEST_CASE("replay sampling is distinct, seeded and clamped") {
  ReplayBuffer buf;
  buf.add(0, labelled_records(20, 1));
  const auto a = buf.sample(15, 4);
  CHECK(a.size() == 15);
  CHECK(a == buf.sample(15, 4));
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = i + 1; j < a.size(); ++j) CHECK(!(a[i] == a[j]));
  }
  CHECK(buf.sample(500, 4).size() == 40);
}

TEST_CASE("capacity evicts whole partitions, oldest first") {
  ReplayBuffer buf(50);
  buf.add(0, labelled_records(15, 1));  // 30
  buf.add(1, labelled_records(10, 2));  // 20
  CHECK(buf.size() == 50);
  buf.add(2, labelled_records(5, 3));  // 10
  CHECK(buf.partitions() == 2);
  CHECK(buf.parts()[0].first == 1);
  CHECK(buf.size() == 30);
}

TEST_CASE("reward model serialization round-trips") {
  auto rm = train_process_rm(kV, labelled_records(20, 4), {});
  const auto bytes = rm.serialize();
  const auto back = RewardModelParams::deserialize(bytes);
  CHECK(back == rm);
  CHECK(back.serialize() == bytes);
  CHECK_THROWS_AS(RewardModelParams::deserialize(bytes.substr(0, 20)), DomainError);
}
