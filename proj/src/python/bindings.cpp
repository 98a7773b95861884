#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "mshubert/analysis.hpp"
#include "mshubert/cli.hpp"
#include "mshubert/config.hpp"
#include "mshubert/errors.hpp"
#include "mshubert/labeler.hpp"
#include "mshubert/model.hpp"
#include "mshubert/objective.hpp"
#include "mshubert/trainer.hpp"

namespace py = pybind11;
using namespace mshubert;

namespace {

Tensor to_tensor(const Matrix& m) {
  std::vector<double> v(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) v[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
  return Tensor::from({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, std::move(v));
}

RunConfig preset(const std::string& name) {
  if (name == "desk") return RunConfig::desk();
  if (name == "paper_base") return RunConfig::paper_base();
  throw ValidationError("unknown preset '" + name + "' (desk or paper_base)");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Two-view masked speech pre-training at desk scale";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<InsufficientDataError>(m, "InsufficientDataError", base.ptr());

  m.def("layer_schedule",
        [](std::size_t n_layers, std::size_t n_sets, std::size_t intermediate) {
          return layer_schedule(n_layers, n_sets, intermediate);
        },
        py::arg("n_layers"), py::arg("n_sets"), py::arg("intermediate"));
  m.def("assignment",
        [](const std::string& name, std::optional<std::vector<std::size_t>> sizes) {
          RunConfig cfg = preset(name);
          if (sizes) cfg.cluster_sizes = *sizes;
          return cfg.assignment().to_string(cfg.cluster_sizes);
        },
        py::arg("preset") = "desk", py::arg("cluster_sizes") = py::none());

  m.def("count_parameters",
        [](const std::string& name, std::optional<std::vector<std::size_t>> sizes) {
          const RunConfig cfg = preset(name);
          return count_parameters(cfg.model, sizes ? *sizes : cfg.cluster_sizes);
        },
        py::arg("preset") = "desk", py::arg("cluster_sizes") = py::none());
  m.def("parameter_table",
        [](const std::string& name, std::optional<std::vector<std::size_t>> sizes) {
          const RunConfig cfg = preset(name);
          std::vector<std::pair<std::string, std::size_t>> rows;
          for (const auto& r : parameter_table(cfg.model, sizes ? *sizes : cfg.cluster_sizes))
            rows.emplace_back(r.group, r.count);
          return rows;
        },
        py::arg("preset") = "desk", py::arg("cluster_sizes") = py::none());
  m.def("config_text", [](const std::string& name) { return preset(name).to_text(); }, py::arg("preset") = "desk");
  m.def("config_keys", &config_keys);

  m.def("cca", [](const Matrix& x, const Matrix& y, double reg) { return cca(x, y, reg); }, py::arg("x"),
        py::arg("y"), py::arg("reg") = 1e-6);
  m.def("pwcca", [](const Matrix& x, const Matrix& y, double reg) { return pwcca(x, y, reg); }, py::arg("x"),
        py::arg("y"), py::arg("reg") = 1e-6);
  m.def("one_hot", [](const std::vector<int>& labels, std::size_t k) { return one_hot(labels, k); },
        py::arg("labels"), py::arg("k") = 0);
  m.def("layer_auc", [](const std::vector<double>& scores) { return layer_auc(scores); }, py::arg("scores"));
  m.def("validate_report", &validate_report_json, py::arg("text"));

  m.def("swap_views",
        [](const Matrix& masked, const Matrix& clean, const std::vector<std::size_t>& indices) {
          MaskSpec mask{indices, static_cast<std::size_t>(masked.rows())};
          const auto [om, oc] = swap_views(to_tensor(masked), to_tensor(clean), mask);
          return std::make_pair(to_matrix(om), to_matrix(oc));
        },
        py::arg("masked"), py::arg("clean"), py::arg("mask_indices"));

  m.def("read_label_file", &read_label_file, py::arg("path"));
  m.def("label_disagreement", &label_disagreement, py::arg("before"), py::arg("after"));

  m.def("run_cli",
        [](const std::vector<std::string>& args) {
          std::ostringstream out, err;
          int code;
          {
            py::gil_scoped_release release;
            code = run_cli(args, out, err);
          }
          return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs one mshubert command; returns (exit code, stdout, stderr).");
}
