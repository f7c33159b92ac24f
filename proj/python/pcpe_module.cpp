// Python bindings: the CLI commands and the metric functions.

#include <sstream>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "pcpe/commands.hpp"
#include "pcpe/errors.hpp"
#include "pcpe/metrics.hpp"

namespace py = pybind11;

namespace {

// Runs one command with `key -> value` settings; returns (stdout, stderr).
std::pair<std::string, std::string> run(const std::string& command,
                                        const std::map<std::string, std::string>& options,
                                        const std::string& input) {
  pcpe::RunConfig cfg;
  for (const auto& [k, v] : options) cfg.set(k, v);
  std::ostringstream out, err;
  std::istringstream in(input);
  py::gil_scoped_release release;
  if (command == "train") pcpe::cmd_train(cfg, out, err);
  else if (command == "eval") pcpe::cmd_eval(cfg, out, err);
  else if (command == "score") pcpe::cmd_score(cfg, in, out, err);
  else if (command == "cache") pcpe::cmd_cache(cfg, out, err);
  else if (command == "synth") pcpe::cmd_synth(cfg, out, err);
  else throw pcpe::ConfigError("unknown command '" + command + "'");
  return {out.str(), err.str()};
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Persona-coded poly-encoder core";

  auto base = py::register_exception<pcpe::Error>(m, "Error");
  py::register_exception<pcpe::ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<pcpe::DataError>(m, "DataError", base.ptr());
  py::register_exception<pcpe::InputError>(m, "InputError", base.ptr());
  py::register_exception<pcpe::NumericError>(m, "NumericError", base.ptr());
  py::register_exception<pcpe::CacheError>(m, "CacheError", base.ptr());

  m.def("run", &run, py::arg("command"), py::arg("options"), py::arg("input") = "");

  m.def("hit_rate_at_k",
        [](const std::vector<std::size_t>& ranks, std::size_t k) { return pcpe::hit_rate_at_k(ranks, k); },
        py::arg("ranks"), py::arg("k"));
  m.def("mrr", [](const std::vector<std::size_t>& ranks) { return pcpe::mrr(ranks); }, py::arg("ranks"));
  m.def("token_f1",
        [](const std::vector<std::string>& p, const std::vector<std::string>& t) { return pcpe::token_f1(p, t); },
        py::arg("predicted"), py::arg("truth"));
  m.def("bleu4",
        [](const std::vector<std::string>& p, const std::vector<std::string>& t) { return pcpe::bleu4(p, t); },
        py::arg("predicted"), py::arg("truth"));
}
