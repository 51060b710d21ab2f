#include <torch/extension.h>

#include "blto/common.hpp"
#include "blto/config.hpp"
#include "blto/dataset.hpp"
#include "blto/evaluation.hpp"
#include "blto/objectives.hpp"
#include "blto/poisoning.hpp"
#include "blto/report.hpp"
#include "blto/runner.hpp"

namespace py = pybind11;
using namespace blto;

namespace {

std::vector<std::string> path_strings(const std::vector<std::filesystem::path>& paths) {
  std::vector<std::string> out;
  for (const auto& p : paths) out.push_back(p.string());
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bilevel trigger optimisation backdoor for contrastive learning";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ArgumentError>(m, "ArgumentError", PyExc_ValueError);

  py::class_<ExperimentConfig>(m, "Config")
      .def_static(
          "from_json", [](const std::string& text) { return parse_config(nlohmann::json::parse(text)); },
          py::arg("text"))
      .def("validate", &ExperimentConfig::validate)
      .def("hash", &ExperimentConfig::hash)
      .def("to_json", [](const ExperimentConfig& c) { return c.to_json().dump(); });

  m.def(
      "load_config",
      [](const std::string& file, const std::vector<std::string>& overrides) { return load_config(file, overrides); },
      py::arg("file"), py::arg("overrides") = std::vector<std::string>{});

  py::class_<Experiment>(m, "Experiment")
      .def(py::init([](const ExperimentConfig& cfg, bool force) {
             RunOptions opts;
             opts.force = force;
             return Experiment(cfg, opts);
           }),
           py::arg("config"), py::arg("force") = false)
      .def("run_id", &Experiment::run_id)
      .def("optimize_trigger", [](Experiment& e) { return e.optimize_trigger().string(); },
           py::call_guard<py::gil_scoped_release>())
      .def("poison", [](Experiment& e) { return e.poison().string(); }, py::call_guard<py::gil_scoped_release>())
      .def("pretrain", [](Experiment& e) { return path_strings(e.pretrain()); },
           py::call_guard<py::gil_scoped_release>())
      .def(
          "evaluate",
          [](Experiment& e, size_t index, const std::optional<std::string>& embeddings) {
            std::optional<std::filesystem::path> out;
            if (embeddings) out = *embeddings;
            return e.evaluate(index, out).dump();
          },
          py::arg("victim_index") = 0, py::arg("embeddings") = py::none(), py::call_guard<py::gil_scoped_release>());

  m.def(
      "write_report",
      [](const std::vector<std::string>& inputs, const std::string& out_dir) {
        std::vector<std::filesystem::path> in(inputs.begin(), inputs.end());
        auto r = write_report(in, out_dir);
        return py::make_tuple(r.runs, path_strings(r.missing), path_strings(r.files));
      },
      py::arg("inputs"), py::arg("out_dir"));

  m.def(
      "make_synthetic_set",
      [](int64_t num_classes, int64_t per_class, int64_t image_size, uint64_t seed) {
        auto s = make_synthetic_set(num_classes, per_class, image_size, seed);
        return py::make_tuple(s.images, s.labels);
      },
      py::arg("num_classes"), py::arg("per_class"), py::arg("image_size"), py::arg("seed"));
  m.def("quantize_8bit", &quantize_8bit, py::arg("images"));
  m.def("project_linf", &project_linf, py::arg("original"), py::arg("perturbed"), py::arg("epsilon"));

  m.def("infonce_loss", &infonce_loss, py::arg("view1"), py::arg("view2"), py::arg("temperature"));
  m.def("simsiam_loss",
        py::overload_cast<const torch::Tensor&, const torch::Tensor&, const torch::Tensor&, const torch::Tensor&,
                          bool>(&simsiam_loss),
        py::arg("p1"), py::arg("p2"), py::arg("z1"), py::arg("z2"), py::arg("halved") = false);
  m.def("alignment_loss", &alignment_loss, py::arg("u"), py::arg("v"));
  m.def("uniformity_loss", &uniformity_loss, py::arg("x"), py::arg("t") = 2.0);
  m.def(
      "knn_predict",
      [](const torch::Tensor& mf, const torch::Tensor& ml, const torch::Tensor& q, int64_t classes, int64_t k,
         double temperature) { return knn_predict(mf, ml, q, classes, KnnConfig{k, temperature}); },
      py::arg("memory_features"), py::arg("memory_labels"), py::arg("query_features"), py::arg("num_classes"),
      py::arg("k") = 200, py::arg("temperature") = 0.1);
}
