#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "grpolab/algorithms.hpp"
#include "grpolab/config.hpp"
#include "grpolab/report.hpp"
#include "grpolab/tasks.hpp"

namespace py = pybind11;
using namespace grpolab;

namespace {

py::dict eval_dict(const EvalReport& e) {
  py::dict d;
  for (std::size_t j = 0; j < e.ks.size(); ++j) {
    d[py::str("maj@" + std::to_string(e.ks[j]))] = e.maj[j];
    d[py::str("pass@" + std::to_string(e.ks[j]))] = e.pass[j];
  }
  d["greedy"] = e.greedy_accuracy;
  d["questions"] = e.questions;
  return d;
}

py::dict task_dict(const TaskInstance& t) {
  py::dict d;
  d["id"] = t.id;
  d["question"] = t.question;
  d["steps"] = t.steps;
  d["answer"] = t.answer_value;
  d["modulus"] = t.modulus;
  return d;
}

}  // namespace

PYBIND11_MODULE(_grpolab, m) {
  m.doc() = "Unified-gradient RL fine-tuning on synthetic arithmetic tasks";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<UsageError>(m, "UsageError", PyExc_RuntimeError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def("get", [](const RunConfig& c, const std::string& key) { return config_value(c, key); })
      .def("set", [](RunConfig& c, const std::string& key, const std::string& value) { set_config_value(c, key, value); })
      .def("dump", &dump_config)
      .def("__eq__", [](const RunConfig& a, const RunConfig& b) { return a == b; });

  m.def("config_keys", [] {
    std::vector<std::string> out;
    for (const auto& k : config_keys()) out.emplace_back(k.name);
    return out;
  });
  m.def(
      "parse_config",
      [](const std::string& text, const std::string& origin) {
        auto f = parse_config(text, origin);
        return py::make_tuple(f.config, f.preset ? py::object(py::str(*f.preset)) : py::none());
      },
      py::arg("text"), py::arg("origin") = "config");

  m.def(
      "execute_run",
      [](const RunConfig& c, const std::filesystem::path& dir) {
        RunOutcome out;
        {
          py::gil_scoped_release release;
          out = execute_run(c, dir);
        }
        py::dict d;
        d["status"] = out.status == RunStatus::kOk ? "ok" : "numerical_failure";
        d["message"] = out.message;
        d["steps"] = out.steps;
        d["initial"] = out.initial ? py::object(eval_dict(*out.initial)) : py::none();
        d["final"] = out.final ? py::object(eval_dict(*out.final)) : py::none();
        return d;
      },
      py::arg("config"), py::arg("dir"));

  m.def("normalize_rewards", [](const std::vector<double>& r) { return normalize_rewards(r); });
  m.def("outcome_advantages", [](const std::vector<double>& r, const std::vector<std::size_t>& lens) {
    return outcome_advantages(r, lens);
  });
  m.def("process_advantages",
        [](const std::vector<StepRewards>& r, const std::vector<std::size_t>& lens) { return process_advantages(r, lens); });
  m.def("gae", [](const std::vector<double>& r, const std::vector<double>& v, double gamma, double lambda) {
    return gae(r, v, gamma, lambda);
  });
  m.def("kl_estimate", &kl_estimate, py::arg("logp_theta"), py::arg("logp_ref"));
  m.def("clipped_surrogate", &clipped_surrogate, py::arg("ratio"), py::arg("adv"), py::arg("eps"));
  m.def("grpo_token_coefficient", &grpo_token_coefficient, py::arg("adv"), py::arg("logp_theta"), py::arg("logp_old"),
        py::arg("logp_ref"), py::arg("eps"), py::arg("beta"));

  m.def(
      "generate_tasks",
      [](std::uint64_t seed, std::size_t n, int modulus, int difficulty) {
        TaskConfig cfg;
        cfg.modulus = modulus;
        cfg.difficulty = difficulty;
        py::list out;
        for (const auto& t : generate_dataset(Vocab::arithmetic(), seed, n, cfg)) out.append(task_dict(t));
        return out;
      },
      py::arg("seed"), py::arg("n"), py::arg("modulus") = TaskConfig{}.modulus,
      py::arg("difficulty") = TaskConfig{}.difficulty);
  m.def("maj_at_k", [](const std::vector<std::optional<long long>>& answers, long long gold) {
    return maj_at_k(answers, gold);
  });
}
