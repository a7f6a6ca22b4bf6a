#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>

#include "rlvr/experiment.hpp"

namespace py = pybind11;
using namespace rlvr;

namespace {

py::object from_json(const std::string& text) { return py::module_::import("json").attr("loads")(text); }

std::string to_json(const py::object& obj) { return py::module_::import("json").attr("dumps")(obj).cast<std::string>(); }

py::dict instance_dict(const Instance& inst) {
  py::dict d;
  d["id"] = inst.id;
  d["prompt"] = inst.prompt;
  d["truth"] = inst.truth;
  return d;
}

Instance instance_from(const py::dict& d) {
  Instance inst;
  inst.id = d.contains("id") ? d["id"].cast<std::uint64_t>() : 0;
  inst.prompt = d["prompt"].cast<std::vector<TokenId>>();
  inst.truth = d["truth"].cast<std::vector<TokenId>>();
  return inst;
}

py::dict metrics_dict(const StepMetrics& m) {
  py::dict d;
  d["step"] = m.step;
  d["mean_entropy"] = m.mean_entropy;
  d["entropy_pos"] = m.entropy_pos;
  d["entropy_neg"] = m.entropy_neg;
  d["accuracy"] = m.accuracy;
  d["mean_length"] = m.mean_length;
  d["grad_norm_mean"] = m.grad_norm_mean;
  d["grad_norm_max"] = m.grad_norm_max;
  d["small_shift_fraction"] = m.small_shift_fraction;
  d["stage"] = to_string(m.stage);
  d["active_shapers"] = m.active_shapers;
  return d;
}

Task make_task(const std::string& kind, int modulus, int depth, int max_response_length, int reasoning_tokens) {
  TaskSpec s;
  s.kind = parse_task_kind(kind);
  s.modulus = modulus;
  s.depth = depth;
  s.max_response_length = max_response_length;
  s.reasoning_tokens = reasoning_tokens;
  return Task(s);
}

}  // namespace

PYBIND11_MODULE(rlvr_lab, m) {
  m.doc() = "Desk-scale GRPO with advantage shaping and token-level analysis";
  m.attr("__version__") = kVersionTag;

  py::register_exception<ContractViolation>(m, "ContractViolation", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<RunError>(m, "RunError", PyExc_RuntimeError);

  // --- advantages and shaping
  m.def(
      "group_advantages",
      [](const std::vector<double>& rewards) {
        const auto a = group_advantages(rewards);
        return py::make_tuple(a.advantages, a.degenerate);
      },
      py::arg("rewards"), "Group-standardized advantages and whether the group is degenerate.");
  m.def(
      "clipped_surrogate",
      [](double ratio, double advantage, double low, double high) {
        return clipped_surrogate(ratio, advantage, ClipRange{low, high});
      },
      py::arg("ratio"), py::arg("advantage"), py::arg("clip_low") = 0.2, py::arg("clip_high") = 0.28);
  m.def(
      "surrogate_coefficient",
      [](double ratio, double advantage, double low, double high) {
        return surrogate_coefficient(ratio, advantage, ClipRange{low, high});
      },
      py::arg("ratio"), py::arg("advantage"), py::arg("clip_low") = 0.2, py::arg("clip_high") = 0.28);
  m.def("response_ppl", [](const std::vector<double>& logprobs) { return response_ppl(logprobs); },
        py::arg("logprobs"));
  m.def("ppl_weights", [](const std::vector<double>& ppls) { return ppl_weights(ppls); }, py::arg("ppls"));
  m.def(
      "shape_ppl",
      [](double advantage, double weight, double alpha, bool favor_low) {
        return shape_ppl(advantage, weight,
                         PplShapingConfig{true, alpha, favor_low ? PplDirection::kFavorLowPpl : PplDirection::kFavorHighPpl});
      },
      py::arg("advantage"), py::arg("weight"), py::arg("alpha") = 0.01, py::arg("favor_low") = true);
  m.def(
      "positional_bonus",
      [](double rel_position, double gamma, int direction, double scale, double shift) {
        PositionShapingConfig c;
        c.enabled = true;
        c.gamma = gamma;
        c.direction = direction;
        c.scale = scale;
        c.shift = shift;
        return positional_bonus(rel_position, c);
      },
      py::arg("rel_position"), py::arg("gamma") = 0.1, py::arg("direction") = 1, py::arg("scale") = 15.0,
      py::arg("shift") = -0.5);
  m.def("shape_position", &shape_position, py::arg("advantage"), py::arg("bonus"));

  // --- stage detection
  m.def(
      "detect_stage",
      [](const std::vector<double>& series, int window, double threshold, int patience) {
        const auto s = detect_stage(series, StageDetectorConfig{window, threshold, patience});
        return py::make_tuple(std::string(to_string(s.label)), s.transition_step);
      },
      py::arg("entropy_series"), py::arg("window") = 25, py::arg("threshold") = 1e-3, py::arg("patience") = 10,
      "Stage label after the series and the step at which the plateau latched, if any.");

  // --- tasks
  py::class_<Task>(m, "Task")
      .def(py::init(&make_task), py::arg("kind") = "modular_addition", py::arg("modulus") = 10, py::arg("depth") = 2,
           py::arg("max_response_length") = 16, py::arg("reasoning_tokens") = 8)
      .def_property_readonly("vocabulary",
                             [](const Task& t) {
                               std::vector<std::string> v;
                               for (std::size_t i = 0; i < t.vocabulary().size(); ++i)
                                 v.push_back(t.vocabulary().text(static_cast<TokenId>(i)));
                               return v;
                             })
      .def("instance", [](const Task& t, std::uint64_t seed, std::uint64_t index) {
             return instance_dict(t.instance(seed, index));
           }, py::arg("seed"), py::arg("index"))
      .def("gold_response", [](const Task& t, const py::dict& inst) { return t.gold_response(instance_from(inst)); },
           py::arg("instance"))
      .def(
          "verify",
          [](const Task& t, const py::dict& inst, const std::vector<TokenId>& response) {
            const auto v = t.verify(instance_from(inst), response);
            return py::make_tuple(v.correct, v.format_violation);
          },
          py::arg("instance"), py::arg("response"), "(correct, format_violation)");

  // --- experiments
  m.def(
      "load_config",
      [](const std::filesystem::path& path) { return from_json(config_to_json(load_config(path))); },
      py::arg("path"), "Validated config with every field filled in.");
  m.def(
      "train",
      [](const py::object& config, const std::filesystem::path& run_dir, std::optional<std::int64_t> steps,
         std::optional<std::uint64_t> seed) {
        auto cfg = parse_config(to_json(config));
        if (steps) cfg.steps = *steps;
        if (seed) cfg.seed = *seed;
        validate(cfg);
        TrainResult result;
        {
          py::gil_scoped_release release;
          result = run_train(cfg, run_dir);
        }
        py::list out;
        for (const auto& s : result.metrics) out.append(metrics_dict(s));
        return out;
      },
      py::arg("config"), py::arg("run_dir"), py::arg("steps") = py::none(), py::arg("seed") = py::none(),
      "Trains and writes the run directory; returns the per-step metrics.");
  m.def(
      "analyze",
      [](const std::filesystem::path& run_dir, const std::optional<std::filesystem::path>& out_dir) {
        const auto cfg = load_run_config(run_dir);
        const Task task(cfg.task);
        const auto report = out_dir ? run_analyze(run_dir, *out_dir) : analyze_run(run_dir);
        return from_json(report_to_json(report, task.vocabulary()));
      },
      py::arg("run_dir"), py::arg("out_dir") = py::none(),
      "Report for a run directory; written to out_dir when given.");
}
