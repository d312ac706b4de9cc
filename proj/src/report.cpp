#include "grpolab/report.hpp"

#include <chrono>
#include <cmath>
#include <charconv>
#include <fstream>
#include <limits>
#include <map>
#include <set>

#include <json.hpp>

#include "grpolab/binary_io.hpp"
#include "grpolab/config.hpp"

namespace grpolab {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

// NaN and infinities have no JSON form; they are written as null and read back as NaN.
ojson num(double x) { return std::isfinite(x) ? ojson(x) : ojson(nullptr); }
double num(const ojson& j) { return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>(); }

ojson eval_json(const EvalReport& r) {
  ojson j;
  j["greedy"] = num(r.greedy_accuracy);
  j["questions"] = r.questions;
  j["k"] = r.ks;
  ojson maj = ojson::array(), pass = ojson::array();
  for (double x : r.maj) maj.push_back(num(x));
  for (double x : r.pass) pass.push_back(num(x));
  j["maj"] = std::move(maj);
  j["pass"] = std::move(pass);
  return j;
}

EvalReport eval_from_json(const ojson& j) {
  EvalReport r;
  r.greedy_accuracy = num(j.at("greedy"));
  r.questions = j.at("questions").get<std::size_t>();
  r.ks = j.at("k").get<std::vector<std::size_t>>();
  for (const auto& x : j.at("maj")) r.maj.push_back(num(x));
  for (const auto& x : j.at("pass")) r.pass.push_back(num(x));
  if (r.maj.size() != r.ks.size() || r.pass.size() != r.ks.size()) throw DomainError("eval: k, maj and pass differ in length");
  return r;
}

std::string fmt(double x) {
  if (!std::isfinite(x)) return "NA";
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, p);
}

}  // namespace

std::string metrics_line(const StepMetrics& m) {
  ojson j;
  j["step"] = m.step;
  j["iteration"] = m.iteration;
  j["method"] = to_string(m.method);
  j["mean_reward"] = num(m.mean_reward);
  j["sample_accuracy"] = num(m.sample_accuracy);
  j["mean_kl"] = num(m.mean_kl);
  j["objective"] = num(m.objective);
  if (m.eval) j["eval"] = eval_json(*m.eval);
  return j.dump();
}

StepMetrics parse_metrics_line(std::string_view line) {
  ojson j;
  try {
    j = ojson::parse(line);
    StepMetrics m;
    m.step = j.at("step").get<std::uint64_t>();
    m.iteration = j.at("iteration").get<std::uint64_t>();
    m.method = parse_method(j.at("method").get<std::string>());
    m.mean_reward = num(j.at("mean_reward"));
    m.sample_accuracy = num(j.at("sample_accuracy"));
    m.mean_kl = num(j.at("mean_kl"));
    m.objective = num(j.at("objective"));
    if (j.contains("eval")) m.eval = eval_from_json(j.at("eval"));
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DomainError(std::string("bad metrics line: ") + e.what());
  }
}

std::string event_line(const TraceEvent& e) {
  ojson j;
  j["kind"] = to_string(e.kind);
  j["iteration"] = e.iteration;
  j["step"] = e.step;
  if (e.kind == TraceEvent::Kind::kSample) {
    j["source"] = to_string(e.source);
    j["count"] = e.count;
  }
  if (e.kind == TraceEvent::Kind::kRewardModelUpdate) {
    j["count"] = e.count;
    j["historical"] = e.historical;
  }
  if (e.kind == TraceEvent::Kind::kReferenceReset) j["kl_to_reference"] = num(e.kl_to_reference);
  return j.dump();
}

std::string gc_trace_lines(const GcTrace& t) {
  std::string out;
  const auto method = to_string(t.gc->method);
  for (std::size_t i = 0; i < t.gc->values.size(); ++i) {
    for (std::size_t k = 0; k < t.gc->values[i].size(); ++k) {
      ojson j;
      j["method"] = method;
      j["step"] = t.step;
      j["question"] = t.question_ids[i];
      j["output"] = i;
      j["token"] = k;
      j["gc"] = num(t.gc->values[i][k]);
      out += j.dump();
      out += '\n';
    }
  }
  return out;
}

RunOutcome execute_run(const RunConfig& config, const fs::path& dir) {
  config.validate();
  fs::create_directories(dir);
  const auto t0 = std::chrono::steady_clock::now();
  io::write_file((dir / "config.txt").string(), dump_config(config));

  std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  std::ofstream events(dir / "events.jsonl", std::ios::binary | std::ios::trunc);
  std::ofstream timings(dir / "timings.jsonl", std::ios::binary | std::ios::trunc);
  std::ofstream gc_trace;
  if (config.trace_gc) gc_trace.open(dir / "gc_trace.jsonl", std::ios::binary | std::ios::trunc);
  if (!metrics || !events || !timings || (config.trace_gc && !gc_trace)) {
    throw DomainError("cannot write into '" + dir.string() + "'");
  }
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  RunOutcome out;
  TrainObserver obs;
  obs.on_step = [&](const StepMetrics& m) {
    metrics << metrics_line(m) << '\n';
    timings << ojson{{"step", m.step}, {"wall_seconds", elapsed()}}.dump() << '\n';
    out.steps = m.step;
    if (m.eval) {
      if (!out.initial) out.initial = m.eval;
      out.final = m.eval;
    }
  };
  obs.on_event = [&](const TraceEvent& e) { events << event_line(e) << '\n'; };
  obs.on_checkpoint = [&](const RunState& s) {
    io::write_file((dir / ("checkpoint-" + std::to_string(s.global_step) + ".bin")).string(), s.serialize());
  };
  obs.on_failure = [&](const RunState& s) { io::write_file((dir / "failure.bin").string(), s.serialize()); };
  if (config.trace_gc) obs.on_gc = [&](const GcTrace& t) { gc_trace << gc_trace_lines(t); };

  try {
    const RunState s = run_pipeline(config, obs);
    io::write_file((dir / "checkpoint.bin").string(), s.serialize());
  } catch (const NumericalError& e) {
    out.status = RunStatus::kNumericalFailure;
    out.message = e.what();
  }
  metrics.close();
  events.close();
  gc_trace.close();

  ojson summary;
  summary["name"] = config.name;
  summary["method"] = to_string(config.method);
  summary["supervision"] = to_string(config.supervision);
  summary["reward_source"] = to_string(config.reward_source);
  summary["seed"] = config.seed;
  summary["task_seed"] = config.task_seed;
  summary["eval_seed"] = config.eval_seed;
  summary["iterations"] = config.iterations;
  summary["status"] = out.status == RunStatus::kOk ? "ok" : "numerical_failure";
  if (!out.message.empty()) summary["message"] = out.message;
  summary["steps"] = out.steps;
  if (out.initial) summary["initial"] = eval_json(*out.initial);
  if (out.final) summary["final"] = eval_json(*out.final);
  io::write_file((dir / "summary.json").string(), summary.dump(2) + "\n");

  timings << ojson{{"total", true}, {"wall_seconds", elapsed()}}.dump() << '\n';
  return out;
}

std::size_t Table::column(std::string_view name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw DomainError("no column '" + std::string(name) + "'");
}

std::string format_table(const Table& t) {
  std::string out;
  auto line = [&](const std::vector<std::string>& fields) {
    if (fields.size() != t.header.size()) throw UsageError("table row width differs from header");
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (fields[i].empty() || fields[i].find_first_of("\t\n\r") != std::string::npos) {
        throw UsageError("table field '" + fields[i] + "' is empty or holds a separator");
      }
      if (i) out += '\t';
      out += fields[i];
    }
    out += '\n';
  };
  line(t.header);
  for (const auto& r : t.rows) line(r);
  return out;
}

Table parse_table(std::string_view text) {
  Table t;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    if (nl == std::string_view::npos) throw DomainError("line " + std::to_string(line_no) + ": missing newline");
    const auto line = text.substr(0, nl);
    text.remove_prefix(nl + 1);
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const auto tab = line.find('\t', start);
      fields.emplace_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
      if (fields.back().empty() || fields.back().find('\r') != std::string::npos) {
        throw DomainError("line " + std::to_string(line_no) + ": empty field or stray carriage return");
      }
      if (tab == std::string_view::npos) break;
      start = tab + 1;
    }
    if (line_no == 1) {
      t.header = std::move(fields);
    } else {
      if (fields.size() != t.header.size()) {
        throw DomainError("line " + std::to_string(line_no) + ": " + std::to_string(fields.size()) +
                          " fields, header has " + std::to_string(t.header.size()));
      }
      t.rows.push_back(std::move(fields));
    }
  }
  if (line_no == 0) throw DomainError("empty table");
  return t;
}

RunRecord load_run(const fs::path& dir) {
  RunRecord r;
  r.config = load_config((dir / "config.txt").string()).config;
  r.label = r.config.name;
  const std::string text = io::read_file((dir / "metrics.jsonl").string());
  std::size_t start = 0;
  while (start < text.size()) {
    const auto nl = text.find('\n', start);
    const auto end = nl == std::string::npos ? text.size() : nl;
    if (end > start) r.metrics.push_back(parse_metrics_line(std::string_view(text).substr(start, end - start)));
    start = end + 1;
  }
  if (r.metrics.empty()) throw DomainError("'" + dir.string() + "' has no metrics");
  return r;
}

Comparison compare_runs(std::span<const RunRecord> runs) {
  if (runs.size() < 2) throw ConfigError("compare needs at least two runs");
  const RunConfig& first = runs[0].config;
  for (const auto& r : runs.subspan(1)) {
    const RunConfig& c = r.config;
    auto mismatch = [&](const char* key, const std::string& a, const std::string& b) {
      throw ConfigError("mismatched eval setup: " + runs[0].label + " has " + key + "=" + a + ", " + r.label +
                        " has " + key + "=" + b);
    };
    for (const char* key : {"eval_seed", "eval_size", "modulus", "difficulty"}) {
      const auto a = config_value(first, key), b = config_value(c, key);
      if (a != b) mismatch(key, a, b);
    }
  }

  std::vector<std::string> labels;
  std::map<std::string, int> uses;
  for (const auto& r : runs) {
    const int n = ++uses[r.label];
    labels.push_back(n == 1 ? r.label : r.label + "#" + std::to_string(n));
  }

  // step -> greedy per run
  std::vector<std::map<std::uint64_t, double>> greedy(runs.size());
  std::set<std::uint64_t> steps;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    for (const auto& m : runs[i].metrics) {
      if (!m.eval) continue;
      greedy[i][m.step] = m.eval->greedy_accuracy;
      steps.insert(m.step);
    }
  }

  Comparison c;
  c.by_step.header.push_back("step");
  for (const auto& l : labels) {
    c.by_step.header.push_back(l + ".greedy");
    c.by_step.header.push_back(l + ".delta");
  }
  for (auto step : steps) {
    std::vector<std::string> row{std::to_string(step)};
    const auto base = greedy[0].find(step);
    for (std::size_t i = 0; i < runs.size(); ++i) {
      const auto it = greedy[i].find(step);
      if (it == greedy[i].end()) {
        row.insert(row.end(), {"NA", "NA"});
        continue;
      }
      row.push_back(fmt(it->second));
      row.push_back(base == greedy[0].end() ? "NA" : fmt(it->second - base->second));
    }
    c.by_step.rows.push_back(std::move(row));
  }

  c.maj_pass.header = {"run", "step", "k", "maj", "pass"};
  c.iterations.header = {"run", "iteration", "step", "greedy", "gain"};
  for (std::size_t i = 0; i < runs.size(); ++i) {
    std::map<std::uint64_t, const StepMetrics*> last_of_iteration;
    for (const auto& m : runs[i].metrics) {
      if (!m.eval) continue;
      for (std::size_t j = 0; j < m.eval->ks.size(); ++j) {
        c.maj_pass.rows.push_back({labels[i], std::to_string(m.step), std::to_string(m.eval->ks[j]),
                                   fmt(m.eval->maj[j]), fmt(m.eval->pass[j])});
      }
      last_of_iteration[m.iteration] = &m;
    }
    std::optional<double> prev;
    for (const auto& [it, m] : last_of_iteration) {
      const double g = m->eval->greedy_accuracy;
      c.iterations.rows.push_back(
          {labels[i], std::to_string(it), std::to_string(m->step), fmt(g), prev ? fmt(g - *prev) : "NA"});
      prev = g;
    }
  }
  return c;
}

void write_comparison(const Comparison& c, const fs::path& dir) {
  fs::create_directories(dir);
  io::write_file((dir / "comparison.tsv").string(), format_table(c.by_step));
  io::write_file((dir / "maj_pass.tsv").string(), format_table(c.maj_pass));
  io::write_file((dir / "iterations.tsv").string(), format_table(c.iterations));
}

}  // namespace grpolab
