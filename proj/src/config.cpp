#include "grpolab/config.hpp"

#include <algorithm>
#include <charconv>
#include <concepts>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace grpolab {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view want, std::string_view got) {
  throw ConfigError(std::string(key) + ": expected " + std::string(want) + ", got '" + std::string(got) + "'");
}

template <class T>
T parse_number(std::string_view key, std::string_view v, std::string_view want) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || p != end) bad_value(key, want, v);
  return out;
}

std::string format_double(double x) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, p);
}

template <class E>
E parse_enum(std::string_view key, std::string_view v, std::initializer_list<E> all) {
  std::string names;
  for (E e : all) {
    if (v == to_string(e)) return e;
    if (!names.empty()) names += "|";
    names += to_string(e);
  }
  bad_value(key, names, v);
}

// Overloads selected by member type.
void parse_into(std::string_view k, std::string_view v, double& out) { out = parse_number<double>(k, v, "a number"); }
void parse_into(std::string_view k, std::string_view v, int& out) { out = parse_number<int>(k, v, "an integer"); }
template <std::unsigned_integral U>
void parse_into(std::string_view k, std::string_view v, U& out) {
  out = parse_number<U>(k, v, "a non-negative integer");
}
void parse_into(std::string_view k, std::string_view v, bool& out) {
  if (v == "true") out = true;
  else if (v == "false") out = false;
  else bad_value(k, "true|false", v);
}
void parse_into(std::string_view, std::string_view v, std::string& out) { out = std::string(v); }
void parse_into(std::string_view k, std::string_view v, Method& out) {
  out = parse_enum(k, v, {Method::kSft, Method::kRft, Method::kOnlineRft, Method::kDpo, Method::kPpo, Method::kGrpo});
}
void parse_into(std::string_view k, std::string_view v, Supervision& out) {
  out = parse_enum(k, v, {Supervision::kOutcome, Supervision::kProcess});
}
void parse_into(std::string_view k, std::string_view v, RewardSource& out) {
  out = parse_enum(k, v, {RewardSource::kModel, RewardSource::kRule});
}
void parse_into(std::string_view k, std::string_view v, OptimizerKind& out) {
  out = parse_enum(k, v, {OptimizerKind::kSgd, OptimizerKind::kAdam});
}
void parse_into(std::string_view k, std::string_view v, std::vector<std::size_t>& out) {
  out.clear();
  while (true) {
    const auto comma = v.find(',');
    const auto item = trim(v.substr(0, comma));
    out.push_back(parse_number<std::size_t>(k, item, "a comma-separated list of integers"));
    if (comma == std::string_view::npos) break;
    v.remove_prefix(comma + 1);
  }
}

std::string format(double x) { return format_double(x); }
std::string format(int x) { return std::to_string(x); }
template <std::unsigned_integral U>
std::string format(U x) {
  return std::to_string(x);
}
std::string format(bool x) { return x ? "true" : "false"; }
std::string format(const std::string& x) { return x; }
std::string format(Method x) { return to_string(x); }
std::string format(Supervision x) { return to_string(x); }
std::string format(RewardSource x) { return to_string(x); }
std::string format(OptimizerKind x) { return to_string(x); }
std::string format(const std::vector<std::size_t>& x) {
  std::string out;
  for (auto k : x) {
    if (!out.empty()) out += ",";
    out += std::to_string(k);
  }
  return out;
}

struct Field {
  ConfigKey key;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
Field field(const char* name, const char* doc, T RunConfig::*member) {
  return Field{{name, doc},
               [name, member](RunConfig& c, std::string_view v) { parse_into(name, v, c.*member); },
               [member](const RunConfig& c) { return format(c.*member); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> all = {
      field("name", "run name, also the run directory name", &RunConfig::name),
      field("method", "sft|rft|online_rft|dpo|ppo|grpo", &RunConfig::method),
      field("supervision", "outcome|process (grpo)", &RunConfig::supervision),
      field("reward_source", "model|rule: learned reward model or the answer checker", &RunConfig::reward_source),
      field("seed", "training seed", &RunConfig::seed),
      field("task_seed", "training question seed", &RunConfig::task_seed),
      field("eval_seed", "evaluation question and sampling seed", &RunConfig::eval_seed),
      field("modulus", "arithmetic modulus", &RunConfig::modulus),
      field("difficulty", "operations per question", &RunConfig::difficulty),
      field("train_size", "training questions", &RunConfig::train_size),
      field("eval_size", "evaluation questions", &RunConfig::eval_size),
      field("window", "policy context window in tokens", &RunConfig::window),
      field("max_len", "output length cap", &RunConfig::max_len),
      field("temperature", "exploration temperature", &RunConfig::temperature),
      field("top_p", "exploration nucleus mass", &RunConfig::top_p),
      field("clip_eps", "clipping range epsilon", &RunConfig::clip_eps),
      field("kl_beta", "KL coefficient beta", &RunConfig::kl_beta),
      field("dpo_beta", "DPO temperature", &RunConfig::dpo_beta),
      field("grpo_mu", "policy updates per exploration stage", &RunConfig::grpo_mu),
      field("group_size", "outputs per question G", &RunConfig::group_size),
      field("iterations", "outer iterations I", &RunConfig::iterations),
      field("steps", "steps M per outer iteration", &RunConfig::steps),
      field("batch_size", "questions per step", &RunConfig::batch_size),
      field("gamma", "GAE discount", &RunConfig::gamma),
      field("lambda", "GAE lambda", &RunConfig::lambda),
      field("optimizer", "sgd|adam", &RunConfig::optimizer),
      field("policy_lr", "policy learning rate", &RunConfig::policy_lr),
      field("value_lr", "PPO value head learning rate", &RunConfig::value_lr),
      field("adam_beta1", "", &RunConfig::adam_beta1),
      field("adam_beta2", "", &RunConfig::adam_beta2),
      field("adam_eps", "", &RunConfig::adam_eps),
      field("sft_size", "gold pairs in the warm start", &RunConfig::sft_size),
      field("sft_steps", "warm start steps", &RunConfig::sft_steps),
      field("sft_batch", "warm start batch size", &RunConfig::sft_batch),
      field("sft_lr", "warm start learning rate", &RunConfig::sft_lr),
      field("rm_lr", "reward model learning rate", &RunConfig::rm_lr),
      field("rm_epochs", "reward model epochs per fit", &RunConfig::rm_epochs),
      field("rm_init_questions", "questions sampled to fit the initial reward models", &RunConfig::rm_init_questions),
      field("rm_init_samples", "samples per question for the initial reward models", &RunConfig::rm_init_samples),
      field("rm_verdict_reward", "outcome reward is the model's 0/1 verdict instead of its raw score",
            &RunConfig::rm_verdict_reward),
      field("replay_fraction", "share of historical records in each reward model refit", &RunConfig::replay_fraction),
      field("replay_capacity", "replay buffer record cap, 0 for unbounded", &RunConfig::replay_capacity),
      field("eval_k", "comma-separated K values for Maj@K and Pass@K", &RunConfig::eval_k),
      field("eval_temperature", "", &RunConfig::eval_temperature),
      field("eval_top_p", "", &RunConfig::eval_top_p),
      field("eval_every", "evaluate every n steps (and at the last step)", &RunConfig::eval_every),
      field("checkpoint_every", "checkpoint every n steps, 0 for final only", &RunConfig::checkpoint_every),
      field("trace_gc", "write gc_trace.jsonl with every gradient coefficient", &RunConfig::trace_gc),
  };
  return all;
}

const Field* find_field(std::string_view key) {
  for (const auto& f : fields()) {
    if (key == f.key.name) return &f;
  }
  return nullptr;
}

std::vector<ConfigKey> make_keys() {
  std::vector<ConfigKey> out;
  for (const auto& f : fields()) out.push_back(f.key);
  return out;
}

}  // namespace

std::span<const ConfigKey> config_keys() {
  static const std::vector<ConfigKey> keys = make_keys();
  return keys;
}

std::string config_value(const RunConfig& config, std::string_view key) {
  const Field* f = find_field(key);
  if (!f) throw ConfigError("unknown key '" + std::string(key) + "'");
  return f->get(config);
}

void set_config_value(RunConfig& config, std::string_view key, std::string_view value) {
  const Field* f = find_field(key);
  if (!f) throw ConfigError("unknown key '" + std::string(key) + "'");
  f->set(config, trim(value));
}

ConfigFile parse_config(std::string_view text, std::string_view origin) {
  ConfigFile out;
  std::map<std::string, std::size_t, std::less<>> seen;
  const std::string where(origin);
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto at = [&](const std::string& msg) { return ConfigError(where + ":" + std::to_string(line_no) + ": " + msg); };
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw at("expected 'key = value', got '" + std::string(line) + "'");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw at("missing key before '='");
    if (auto it = seen.find(key); it != seen.end()) {
      throw at("duplicate key '" + std::string(key) + "' (first set on line " + std::to_string(it->second) + ")");
    }
    seen.emplace(std::string(key), line_no);
    if (key == "preset") {
      out.preset = std::string(value);
      continue;
    }
    try {
      set_config_value(out.config, key, value);
    } catch (const ConfigError& e) {
      throw at(e.what());
    }
  }
  if (!seen.contains("method") && !seen.contains("preset")) {
    throw ConfigError(where + ": missing required field 'method' (or 'preset')");
  }
  if (out.preset && seen.contains("method")) {
    throw ConfigError(where + ":" + std::to_string(seen.at("method")) + ": 'method' conflicts with 'preset'");
  }
  if (out.preset) {
    const auto names = preset_names();
    if (std::find(names.begin(), names.end(), *out.preset) == names.end()) {
      throw ConfigError(where + ":" + std::to_string(seen.at("preset")) + ": unknown preset '" + *out.preset + "'");
    }
  }
  try {
    out.config.validate();
  } catch (const ConfigError& e) {
    // validate() reports "field: why"; point at the line that set the field when there is one.
    const std::string msg = e.what();
    const auto field = msg.substr(0, msg.find(':'));
    if (auto it = seen.find(field); it != seen.end()) {
      throw ConfigError(where + ":" + std::to_string(it->second) + ": " + msg);
    }
    throw ConfigError(where + ": " + msg);
  }
  return out;
}

ConfigFile load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path + ": cannot read config file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

std::string dump_config(const RunConfig& config) {
  std::string out;
  for (const auto& f : fields()) {
    out += f.key.name;
    out += " = ";
    out += f.get(config);
    out += '\n';
  }
  return out;
}

const char* to_string(ComparisonAxis a) {
  switch (a) {
    case ComparisonAxis::kMethod: return "method";
    case ComparisonAxis::kSupervision: return "supervision";
    case ComparisonAxis::kIteration: return "iteration";
  }
  return "unknown";
}

std::span<const char* const> preset_names() {
  static constexpr const char* kNames[] = {"paradigm-comparison", "supervision", "iterative", "maj-pass"};
  return kNames;
}

ExperimentPreset expand_preset(std::string_view name, const RunConfig& base) {
  ExperimentPreset p;
  p.name = std::string(name);
  auto add = [&](const std::string& run_name, auto&& tweak) {
    RunConfig c = base;
    c.name = run_name;
    tweak(c);
    c.validate();
    p.runs.push_back(std::move(c));
  };
  if (name == "paradigm-comparison") {
    p.axis = ComparisonAxis::kMethod;
    for (Method m : kAllMethods) {
      add(to_string(m), [m](RunConfig& c) {
        c.method = m;
        c.iterations = 1;
        // The pairwise objective is unbounded below and runs away at the shared rate.
        if (m == Method::kDpo) c.policy_lr = std::min(c.policy_lr, 10.0);
      });
    }
  } else if (name == "supervision") {
    p.axis = ComparisonAxis::kSupervision;
    for (Supervision s : {Supervision::kOutcome, Supervision::kProcess}) {
      add(std::string("grpo-") + to_string(s), [s](RunConfig& c) {
        c.method = Method::kGrpo;
        c.supervision = s;
        c.iterations = 1;
      });
    }
  } else if (name == "iterative") {
    p.axis = ComparisonAxis::kIteration;
    const std::size_t outer = 3;
    // Same sample budget: one long run against a fixed reward model, and I=3 with retraining.
    add("grpo-single", [&](RunConfig& c) {
      c.method = Method::kGrpo;
      c.iterations = 1;
      c.steps = base.steps * outer;
    });
    add("grpo-iterative", [&](RunConfig& c) {
      c.method = Method::kGrpo;
      c.iterations = outer;
    });
  } else if (name == "maj-pass") {
    p.axis = ComparisonAxis::kMethod;
    for (Method m : {Method::kSft, Method::kGrpo}) {
      add(to_string(m), [m](RunConfig& c) {
        c.method = m;
        c.iterations = 1;
        c.eval_k = {1, 4, 16};
        c.eval_temperature = 0.7;
      });
    }
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "'");
  }
  return p;
}

}  // namespace grpolab
