#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "hmnas/config.hpp"
#include "hmnas/error.hpp"
#include "hmnas/gradsuite.hpp"
#include "hmnas/masker.hpp"
#include "hmnas/pipeline.hpp"
#include "hmnas/platform.hpp"
#include "hmnas/rng.hpp"

namespace py = pybind11;
using namespace hmnas;

namespace {

ExperimentConfig make_config(const std::string& text, const std::vector<std::string>& overrides) {
  ExperimentConfig c = parse_config_string(text);
  apply_overrides(c, overrides);
  return c;
}

std::vector<Stage> stages_from(const std::vector<std::string>& names) {
  std::vector<Stage> out;
  for (const auto& n : names) {
    const auto s = parse_stage(n);
    if (!s) throw ConfigError("unknown stage '" + n + "'");
    out.push_back(*s);
  }
  return out;
}

py::dict score_dict(const ModelScore& s) {
  py::dict d;
  d["loss"] = s.loss;
  d["accuracy"] = s.accuracy;
  d["error"] = 1.0 - s.accuracy;
  d["params"] = s.params;
  return d;
}

Logger py_logger(py::object log) {
  if (log.is_none()) return {};
  return [log](const std::string& s) {
    py::gil_scoped_acquire g;
    log(s);
  };
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  tune_allocator();
  m.doc() = "HM-NAS core bindings";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<PrerequisiteError>(m, "PrerequisiteError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());

  m.def("derive_seed", &derive_seed, py::arg("seed"), py::arg("stage"));

  m.def(
      "resolve_config",
      [](const std::string& text, const std::vector<std::string>& overrides) {
        return echo_config(make_config(text, overrides));
      },
      py::arg("text") = "", py::arg("overrides") = std::vector<std::string>{},
      "Parses `key = value` text, applies overrides and returns the resolved echo.");
  m.def("config_keys", &config_keys);

  m.def(
      "binarize",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> a, double tau) {
        py::array_t<double> out(a.request().shape);
        const double* src = a.data();
        double* dst = out.mutable_data();
        for (py::ssize_t i = 0; i < a.size(); ++i) dst[i] = src[i] >= tau ? 1.0 : 0.0;
        return out;
      },
      py::arg("m"), py::arg("tau") = 5e-3);

  m.def(
      "load_dataset",
      [](const std::string& path) {
        const Dataset d = load_dataset(path);
        py::array_t<double> images({d.size(), static_cast<std::size_t>(d.channels()),
                                    static_cast<std::size_t>(d.height()), static_cast<std::size_t>(d.width())});
        std::copy(d.images.storage().begin(), d.images.storage().end(), images.mutable_data());
        py::array_t<int> labels(static_cast<py::ssize_t>(d.size()));
        std::copy(d.labels.begin(), d.labels.end(), labels.mutable_data());
        return py::make_tuple(images, labels, d.num_classes);
      },
      py::arg("path"), "Returns (images, labels, num_classes); images are raw, unnormalized pixels.");

  m.def(
      "run_pipeline",
      [](const std::string& text, const std::vector<std::string>& stages, const std::vector<std::string>& overrides,
         py::object log) {
        const ExperimentConfig c = make_config(text, overrides);
        const auto s = stages_from(stages);
        const Logger lg = py_logger(log);
        py::gil_scoped_release release;
        run_pipeline(c, s, lg);
      },
      py::arg("config") = "", py::arg("stages") = std::vector<std::string>{"train-supernet", "search-mask", "finetune", "derive", "eval"},
      py::arg("overrides") = std::vector<std::string>{}, py::arg("log") = py::none());

  m.def(
      "run_eval",
      [](const std::string& text, const std::vector<std::string>& overrides) {
        const EvalReport r = run_eval(make_config(text, overrides));
        py::dict d;
        d["supernet"] = score_dict(r.supernet);
        d["masked"] = score_dict(r.masked);
        d["final"] = score_dict(r.final);
        d["params_fraction"] = r.params_fraction;
        return d;
      },
      py::arg("config") = "", py::arg("overrides") = std::vector<std::string>{});

  m.def(
      "run_ablation",
      [](const std::string& text, const std::vector<std::string>& overrides) {
        const ExperimentConfig c = make_config(text, overrides);
        std::vector<AblationRow> rows;
        {
          py::gil_scoped_release release;
          rows = run_ablation(c);
        }
        py::list out;
        for (const auto& r : rows) {
          py::dict d;
          d["arm"] = r.arm;
          d["description"] = r.description;
          d["runs"] = r.runs;
          d["test_error_mean"] = r.test_error_mean;
          d["test_error_std"] = r.test_error_std;
          d["params"] = r.params;
          d["epochs_to_target"] = r.epochs_to_target;
          out.append(d);
        }
        return out;
      },
      py::arg("config") = "", py::arg("overrides") = std::vector<std::string>{});

  m.def(
      "check_grad",
      [](int seeds) {
        GradSuiteReport r;
        {
          py::gil_scoped_release release;
          r = run_grad_suite(seeds);
        }
        py::list out;
        for (const auto& c : r.checks) {
          py::dict d;
          d["name"] = c.name;
          d["seeds"] = c.seeds;
          d["skipped"] = c.skipped;
          d["max_rel_err"] = c.max_rel_err;
          d["passed"] = c.passed;
          out.append(d);
        }
        return out;
      },
      py::arg("seeds") = 10);
}
