// grpolab: run, compare, evaluate and inspect RL fine-tuning experiments on synthetic arithmetic.
//
// Exit codes: 0 success, 1 other failure (I/O, corrupt files), 2 config error, 3 numerical failure.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "grpolab/binary_io.hpp"
#include "grpolab/config.hpp"
#include "grpolab/report.hpp"

namespace fs = std::filesystem;
using namespace grpolab;

namespace {

constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

fs::path run_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("GRPOLAB_RUN_ROOT"); env && *env) return env;
  return "runs";
}

void apply_overrides(RunConfig& c, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    set_config_value(c, s.substr(0, eq), s.substr(eq + 1));
  }
  c.validate();
}

nlohmann::ordered_json report_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["questions"] = r.questions;
  j["greedy"] = r.greedy_accuracy;
  for (std::size_t i = 0; i < r.ks.size(); ++i) {
    j["maj@" + std::to_string(r.ks[i])] = r.maj[i];
    j["pass@" + std::to_string(r.ks[i])] = r.pass[i];
  }
  return j;
}

int cmd_run(const std::string& config_path, const std::vector<std::string>& sets, const std::string& root_flag,
            bool dry_run) {
  ConfigFile file = load_config(config_path);
  apply_overrides(file.config, sets);
  const fs::path root = run_root(root_flag);

  std::vector<std::pair<RunConfig, fs::path>> plan;
  if (file.preset) {
    const auto preset = expand_preset(*file.preset, file.config);
    for (const auto& c : preset.runs) plan.emplace_back(c, root / file.config.name / c.name);
  } else {
    plan.emplace_back(file.config, root / file.config.name);
  }
  if (dry_run) {
    for (const auto& [c, dir] : plan) std::cout << "# " << dir.string() << "\n" << dump_config(c) << "\n";
    return 0;
  }

  int code = 0;
  std::vector<RunRecord> finished;
  for (const auto& [c, dir] : plan) {
    std::cerr << "run " << c.name << " -> " << dir.string() << "\n";
    const RunOutcome out = execute_run(c, dir);
    if (out.status == RunStatus::kNumericalFailure) {
      std::cerr << "numerical failure in " << c.name << ": " << out.message << " (state saved to "
                << (dir / "failure.bin").string() << ")\n";
      code = kExitNumerical;
      continue;
    }
    if (out.final) std::cerr << "  final greedy accuracy " << out.final->greedy_accuracy << "\n";
    if (file.preset) finished.push_back(load_run(dir));
  }
  if (file.preset && finished.size() >= 2) {
    const fs::path out = root / file.config.name / "compare";
    write_comparison(compare_runs(finished), out);
    std::cerr << "comparison -> " << out.string() << "\n";
  }
  return code;
}

int cmd_compare(const std::vector<std::string>& dirs, const std::string& out_dir) {
  std::vector<RunRecord> runs;
  for (const auto& d : dirs) runs.push_back(load_run(d));
  const Comparison c = compare_runs(runs);
  if (!out_dir.empty()) write_comparison(c, out_dir);
  std::cout << format_table(c.by_step);
  return 0;
}

int cmd_evaluate(const std::string& dir, std::string checkpoint, const std::vector<std::size_t>& ks,
                 std::optional<double> temperature, std::optional<std::size_t> eval_size) {
  RunConfig c = load_config((fs::path(dir) / "config.txt").string()).config;
  if (!ks.empty()) c.eval_k = ks;
  if (temperature) c.eval_temperature = *temperature;
  if (eval_size) c.eval_size = *eval_size;
  c.validate();
  if (checkpoint.empty()) checkpoint = (fs::path(dir) / "checkpoint.bin").string();
  const RunState s = RunState::deserialize(io::read_file(checkpoint));
  const Datasets d = make_datasets(c);
  const EvalReport r = evaluate(s.policy, d.eval, c.eval_k, c.eval_temperature, c.eval_top_p, c.max_len, c.eval_seed);
  auto j = report_json(r);
  j["checkpoint"] = checkpoint;
  j["temperature"] = c.eval_temperature;
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_inspect(const std::string& path) {
  const RunState s = RunState::deserialize(io::read_file(path));
  const auto& w = s.policy.weights();
  double norm = 0.0;
  for (double x : w.flat()) norm += x * x;
  nlohmann::ordered_json j;
  j["file"] = path;
  j["global_step"] = s.global_step;
  j["iteration"] = s.iteration;
  j["samples_drawn"] = s.samples_drawn;
  j["vocab"] = w.vocab();
  j["features"] = w.features();
  j["window"] = s.policy.feature_map().window;
  j["policy_l2_norm"] = std::sqrt(norm);
  j["policy_finite"] = w.all_finite();
  j["has_sft"] = static_cast<bool>(s.sft);
  j["has_reference"] = static_cast<bool>(s.reference);
  j["has_old"] = static_cast<bool>(s.old);
  j["rm_outcome_dim"] = s.rm_outcome.weights.size();
  j["rm_process_dim"] = s.rm_process.weights.size();
  j["replay_partitions"] = s.replay.partitions();
  j["replay_records"] = s.replay.size();
  j["optimizer"] = to_string(s.optimizer.kind);
  j["optimizer_steps"] = s.optimizer.t;
  std::cout << j.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"grpolab: GRPO and related RL fine-tuning on synthetic arithmetic"};
  app.require_subcommand(1);

  std::string config_path, root_flag, out_dir, checkpoint, dir;
  std::vector<std::string> sets, dirs;
  std::vector<std::size_t> ks;
  std::optional<double> temperature;
  std::optional<std::size_t> eval_size;
  bool dry_run = false;

  auto* run = app.add_subcommand("run", "train one config or every run of a preset");
  run->add_option("config", config_path, "key = value config file")->required();
  run->add_option("--set", sets, "override a key, key=value (repeatable)");
  run->add_option("--run-root", root_flag, "run directory root (default $GRPOLAB_RUN_ROOT, then ./runs)");
  run->add_flag("--dry-run", dry_run, "print the resolved configs and exit");

  auto* compare = app.add_subcommand("compare", "align finished runs by step and write plot data");
  compare->add_option("runs", dirs, "run directories")->required()->expected(2, -1);
  compare->add_option("--out", out_dir, "directory for comparison.tsv, maj_pass.tsv and iterations.tsv");

  auto* eval = app.add_subcommand("evaluate", "evaluate a run's checkpoint on its eval set");
  eval->add_option("run", dir, "run directory")->required();
  eval->add_option("--checkpoint", checkpoint, "checkpoint file (default <run>/checkpoint.bin)");
  eval->add_option("--k", ks, "K values for Maj@K and Pass@K")->delimiter(',');
  eval->add_option("--temperature", temperature, "sampling temperature");
  eval->add_option("--eval-size", eval_size, "number of eval questions");

  auto* inspect = app.add_subcommand("inspect-checkpoint", "print a checkpoint's contents");
  inspect->add_option("checkpoint", checkpoint, "checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) return cmd_run(config_path, sets, root_flag, dry_run);
    if (*compare) return cmd_compare(dirs, out_dir);
    if (*eval) return cmd_evaluate(dir, checkpoint, ks, temperature, eval_size);
    if (*inspect) return cmd_inspect(checkpoint);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
  return kExitOther;
}
