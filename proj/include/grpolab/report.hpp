#pragma once

/**
 * Run directories and comparison tables.
 *
 * A run directory holds:
 *   config.txt          every key with its value, written before training starts
 *   metrics.jsonl       one JSON object per step
 *   events.jsonl        trace events (reference resets, sampling, updates, reward model refits)
 *   checkpoint.bin      final RunState; checkpoint-<step>.bin when checkpoint_every > 0
 *   failure.bin         state at the first non-finite parameter, only on numerical failure
 *   gc_trace.jsonl      with trace_gc: method, step, question, output, token, gc per line
 *   summary.json        status, warm-start and final evaluation
 *   timings.jsonl       wall-clock seconds per step (the only file that differs between identical runs)
 *
 * Comparison tables are tab-separated: one header line, then rows with the same field count.
 * Fields never contain tabs or newlines; missing values are written NA.
 */

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "grpolab/trainer.hpp"

namespace grpolab {

std::string metrics_line(const StepMetrics& m);
StepMetrics parse_metrics_line(std::string_view line);

std::string event_line(const TraceEvent& e);

/// One line per token of every output in the trace.
std::string gc_trace_lines(const GcTrace& t);

enum class RunStatus : std::uint8_t { kOk = 0, kNumericalFailure };

struct RunOutcome {
  RunStatus status = RunStatus::kOk;
  std::string message;
  std::optional<EvalReport> initial;  ///< first evaluation (the warm-started policy)
  std::optional<EvalReport> final;
  std::uint64_t steps = 0;
};

/**
 * Trains `config` and writes the run directory `dir` (created if needed). A numerical failure
 * writes failure.bin and a summary with status "numerical_failure" instead of throwing.
 */
RunOutcome execute_run(const RunConfig& config, const std::filesystem::path& dir);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Index of a header column; throws DomainError if absent.
  std::size_t column(std::string_view name) const;
  friend bool operator==(const Table&, const Table&) = default;
};

std::string format_table(const Table& t);

/// Inverse of format_table. Throws DomainError naming the line that breaks the grammar.
Table parse_table(std::string_view text);

struct RunRecord {
  std::string label;
  RunConfig config;
  std::vector<StepMetrics> metrics;
};

/// Reads config.txt and metrics.jsonl of a finished run.
RunRecord load_run(const std::filesystem::path& dir);

struct Comparison {
  Table by_step;     ///< step, then <label>.greedy and <label>.delta (vs the first run) per run
  Table maj_pass;    ///< run, step, k, maj, pass
  Table iterations;  ///< run, iteration, step, greedy, gain: the last evaluation of each iteration
};

/**
 * Aligns runs by step. Needs at least two runs evaluated on the same questions; differing eval
 * seeds or eval-set shapes are a ConfigError. Duplicate labels get a #n suffix.
 */
Comparison compare_runs(std::span<const RunRecord> runs);

/// Writes comparison.tsv, maj_pass.tsv and iterations.tsv into `dir`.
void write_comparison(const Comparison& c, const std::filesystem::path& dir);

}  // namespace grpolab
