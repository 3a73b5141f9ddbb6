// Python bindings for the exact scores, the MMD estimator and the
// config-driven runner.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

#include "peopl/attacks.hpp"
#include "peopl/error.hpp"
#include "peopl/families.hpp"
#include "peopl/harness.hpp"
#include "peopl/scores.hpp"
#include "peopl/universe.hpp"

namespace py = pybind11;

namespace peopl {
namespace {

Tensor ToTensor(const py::array_t<double, py::array::c_style | py::array::forcecast>& array) {
  if (array.ndim() != 2) throw InvalidArgument("expected a 2-d array");
  const std::size_t rows = array.shape(0), cols = array.shape(1);
  return Tensor({rows, cols}, std::vector<double>(array.data(), array.data() + rows * cols));
}

ScoreOptions Options(std::uint64_t budget, int workers) {
  ScoreOptions options;
  options.budget = budget;
  options.workers = workers;
  return options;
}

// JSON crosses the boundary as text to avoid a second converter.
py::object FromJson(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

nlohmann::json ToJson(const py::object& obj) {
  return nlohmann::json::parse(
      py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

}  // namespace
}  // namespace peopl

PYBIND11_MODULE(_peopl, m) {
  using namespace peopl;
  m.doc() = "Exact privacy scores, MMD estimator and experiment runner.";
  m.attr("__version__") = kToolVersion;

  // Translators run newest first, so subclasses are registered after Error.
  const auto error = py::register_exception<Error>(m, "PeoplError");
  py::register_exception<InvalidArgument>(m, "InvalidArgument", PyExc_ValueError);
  py::register_exception<BudgetExceeded>(m, "BudgetExceeded", error.ptr());
  py::register_exception<Divergence>(m, "Divergence", error.ptr());
  py::register_exception<ImpossibleObservation>(m, "ImpossibleObservation", error.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const nlohmann::json::exception& e) {
      py::set_error(PyExc_ValueError, e.what());
    }
  });

  py::class_<Universe>(m, "Universe")
      .def(py::init(&scalar_universe), py::arg("ids"), py::arg("labels"))
      .def("__len__", &Universe::size)
      .def_property_readonly("ids", &Universe::ids)
      .def_property_readonly("labels", &Universe::labels)
      .def_property_readonly("label_set", &Universe::label_set);

  py::class_<EncoderFamily>(m, "EncoderFamily")
      .def(py::init([](const Universe& u, const std::vector<std::vector<Symbol>>& tables,
                       std::optional<std::vector<double>> weights) {
             std::vector<TableEncoder> encoders;
             for (const auto& t : tables) encoders.emplace_back(t);
             if (!weights) return uniform_family(u, std::move(encoders));
             return make_family(u, std::move(encoders), std::move(*weights));
           }),
           py::arg("universe"), py::arg("tables"), py::arg("weights") = py::none())
      .def("__len__", &EncoderFamily::size)
      .def_property_readonly("domain", &EncoderFamily::domain)
      .def_property_readonly("weights", &EncoderFamily::weights)
      .def_property_readonly("tables", [](const EncoderFamily& f) {
        std::vector<std::vector<Symbol>> tables;
        for (const auto& e : f.encoders()) tables.push_back(e.mapping());
        return tables;
      });

  m.def("compose", &compose_families, py::arg("inner"), py::arg("outer"));
  m.def(
      "permutation_family",
      [](const Universe& u, bool label_preserving) {
        return permutation_family(
            u, label_preserving ? PermutationKind::kLabelPreserving : PermutationKind::kAll);
      },
      py::arg("universe"), py::arg("label_preserving") = false);

  m.def(
      "privacy_score",
      [](const EncoderFamily& f, const Universe& u, std::size_t n, std::uint64_t budget,
         int workers) { return privacy_score(f, u, n, Options(budget, workers)).score_bits; },
      py::arg("family"), py::arg("universe"), py::arg("n"), py::arg("budget") = kDefaultBudget,
      py::arg("workers") = 1);
  m.def(
      "mismatched_uniform_score",
      [](const EncoderFamily& f, const Universe& u, std::size_t n, std::uint64_t budget) {
        return mismatched_privacy_score(f, u, n, uniform_q_builder(f), Options(budget, 1))
            .score_bits;
      },
      py::arg("family"), py::arg("universe"), py::arg("n"), py::arg("budget") = kDefaultBudget);
  m.def(
      "decompose",
      [](const EncoderFamily& f, const Universe& u, std::size_t n) {
        const PrivacyDecomposition d = decompose_privacy_score(f, u, n);
        return py::dict(py::arg("h_data") = d.h_data,
                        py::arg("h_key_given_data") = d.h_key_given_data);
      },
      py::arg("family"), py::arg("universe"), py::arg("n"));
  m.def(
      "utility_score",
      [](const EncoderFamily& f, const Universe& u, std::size_t n) {
        return utility_score(f, u, n, uniform_labeling_prior(u)).score_bits;
      },
      py::arg("family"), py::arg("universe"), py::arg("n"));

  m.def(
      "mmd_unbiased",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& b,
         std::vector<double> bandwidths) {
        return mmd_unbiased(ToTensor(a), ToTensor(b), KernelSpec{std::move(bandwidths)});
      },
      py::arg("a"), py::arg("b"), py::arg("bandwidths"));

  m.def(
      "validate_config",
      [](const py::object& config) { validate_config(ToJson(config)); }, py::arg("config"));
  m.def(
      "run",
      [](const py::object& config, const std::string& out, std::optional<std::uint64_t> seed,
         int workers, bool force, const std::string& base_dir) {
        RunOptions options;
        options.out = out;
        options.seed = seed;
        options.workers = workers;
        options.force = force;
        options.base_dir = base_dir;
        nlohmann::json cfg = ToJson(config);
        RunResult result;
        {
          py::gil_scoped_release release;
          result = run_experiment(cfg, options);
        }
        return py::make_tuple(FromJson(result.report), result.summary_csv);
      },
      py::arg("config"), py::arg("out"), py::arg("seed") = py::none(), py::arg("workers") = 1,
      py::arg("force") = false, py::arg("base_dir") = ".");
}
